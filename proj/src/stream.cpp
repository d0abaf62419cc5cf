#include "gest/stream.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "gest/kernels.hpp"

namespace gest {

// ---------------------------------------------------------------------------
// bundle
// ---------------------------------------------------------------------------

void ModelBundle::validate() const {
    for (RegionId r : kRegions) {
        const auto& tok = tokenizers[size_t(r)];
        const auto& exp = experts[size_t(r)];
        if (tok.ae.cfg.region != r || exp.cfg.region != r)
            throw std::runtime_error("bundle: region order mismatch");
        if (tok.codebook.size() != exp.cfg.vocab)
            throw std::runtime_error("bundle: tokenizer K differs from expert vocabulary");
        if (tok.codebook.dim() != exp.cfg.code_dim)
            throw std::runtime_error("bundle: code dim mismatch between tokenizer and expert");
        if (exp.cfg.vocab != fusion.cfg.vocab)
            throw std::runtime_error("bundle: fusion vocabulary mismatch");
        if (exp.cfg.d_model != fusion.cfg.d_model)
            throw std::runtime_error("bundle: expert/fusion width mismatch");
        if (exp.cfg.d_audio != audio_enc.cfg.d_audio || fusion.cfg.d_audio != audio_enc.cfg.d_audio)
            throw std::runtime_error("bundle: audio token width mismatch");
        if (stats.mean[size_t(r)].size() != tok.ae.cfg.pose_dim)
            throw std::runtime_error("bundle: normalization stats dim mismatch");
    }
    if (audio_enc.cfg.n_mels != mel_cfg.n_mels)
        throw std::runtime_error("bundle: mel band count mismatch");
    // 16 mel frames must cover exactly one token period (0.2 s at desk rates)
    const double token_period = double(kDownsample) / frame_rate;
    const double mel_period = double(audio_enc.cfg.frames_per_token) * mel_cfg.hop_s;
    if (std::abs(token_period - mel_period) > 1e-9)
        throw std::runtime_error("bundle: audio token rate does not match motion token rate");
}

nlohmann::json ModelBundle::manifest() const {
    nlohmann::json j;
    j["kind"] = "bundle";
    j["frame_rate"] = frame_rate;
    j["sample_rate"] = mel_cfg.sample_rate;
    j["vocab"] = fusion.cfg.vocab;
    for (RegionId r : kRegions) {
        const std::string name = region_name(r);
        j["fingerprints"]["svq_" + name] = fingerprint_hex(tokenizers[size_t(r)].to_arrays());
        j["fingerprints"]["expert_" + name] = fingerprint_hex(experts[size_t(r)].to_arrays());
    }
    j["fingerprints"]["audio_enc"] = fingerprint_hex(audio_enc.to_arrays());
    j["fingerprints"]["fusion"] = fingerprint_hex(fusion.to_arrays());
    j["fingerprints"]["norm_stats"] = fingerprint_hex(stats.to_arrays());
    return j;
}

void ModelBundle::save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (RegionId r : kRegions) {
        const std::string name = region_name(r);
        tokenizers[size_t(r)].to_arrays().save(dir + "/svq_" + name + ".garr");
        experts[size_t(r)].to_arrays().save(dir + "/expert_" + name + ".garr");
    }
    audio_enc.to_arrays().save(dir + "/audio_enc.garr");
    fusion.to_arrays().save(dir + "/fusion.garr");
    stats.to_arrays().save(dir + "/norm_stats.garr");
    nlohmann::json j = manifest();
    j["mel"] = {{"sample_rate", mel_cfg.sample_rate},
                {"n_mels", mel_cfg.n_mels},
                {"window_s", mel_cfg.window_s},
                {"hop_s", mel_cfg.hop_s}};
    write_text_file(dir + "/bundle.json", j.dump(2) + "\n");
}

ModelBundle ModelBundle::load(const std::string& dir) {
    ModelBundle b;
    nlohmann::json j = nlohmann::json::parse(read_text_file(dir + "/bundle.json"));
    b.frame_rate = j.at("frame_rate").get<double>();
    b.mel_cfg.sample_rate = j.at("mel").at("sample_rate").get<double>();
    b.mel_cfg.n_mels = j.at("mel").at("n_mels").get<size_t>();
    b.mel_cfg.window_s = j.at("mel").at("window_s").get<double>();
    b.mel_cfg.hop_s = j.at("mel").at("hop_s").get<double>();
    for (RegionId r : kRegions) {
        const std::string name = region_name(r);
        b.tokenizers[size_t(r)] =
            SvqTokenizer::from_arrays(NamedArrays::load(dir + "/svq_" + name + ".garr"));
        b.experts[size_t(r)] =
            ExpertModel::from_arrays(NamedArrays::load(dir + "/expert_" + name + ".garr"));
    }
    b.audio_enc = AudioEncoder::from_arrays(NamedArrays::load(dir + "/audio_enc.garr"));
    b.fusion = FusionModel::from_arrays(NamedArrays::load(dir + "/fusion.garr"));
    b.stats = NormStats::from_arrays(NamedArrays::load(dir + "/norm_stats.garr"));

    // lineage: stored fingerprints must match the loaded weights
    for (auto& [name, fp] : j.at("fingerprints").items()) {
        std::string actual;
        if (name == "audio_enc")
            actual = fingerprint_hex(b.audio_enc.to_arrays());
        else if (name == "fusion")
            actual = fingerprint_hex(b.fusion.to_arrays());
        else if (name == "norm_stats")
            actual = fingerprint_hex(b.stats.to_arrays());
        else if (name.rfind("svq_", 0) == 0)
            actual = fingerprint_hex(
                b.tokenizers[size_t(region_from_name(name.substr(4)))].to_arrays());
        else if (name.rfind("expert_", 0) == 0)
            actual = fingerprint_hex(
                b.experts[size_t(region_from_name(name.substr(7)))].to_arrays());
        else
            continue;
        if (actual != fp.get<std::string>())
            throw std::runtime_error("bundle lineage check failed for " + name);
    }
    b.validate();
    return b;
}

// ---------------------------------------------------------------------------
// latency report
// ---------------------------------------------------------------------------

double LatencyReport::mean_chunk_ms() const {
    if (per_chunk_ms.empty()) return 0.0;
    double acc = 0.0;
    for (double v : per_chunk_ms) acc += v;
    return acc / double(per_chunk_ms.size());
}

double LatencyReport::max_chunk_ms() const {
    double mx = 0.0;
    for (double v : per_chunk_ms) mx = std::max(mx, v);
    return mx;
}

nlohmann::json LatencyReport::to_json() const {
    nlohmann::json j;
    j["first_token_latency_ms"] = first_token_latency_ms;
    j["chunk_period_ms"] = chunk_period_ms;
    j["chunks"] = per_chunk_ms.size();
    j["per_chunk_ms"] = {{"mean", mean_chunk_ms()}, {"max", max_chunk_ms()}};
    j["real_time_factor"] = real_time_factor();
    return j;
}

// ---------------------------------------------------------------------------
// session
// ---------------------------------------------------------------------------

StreamSession::StreamSession(std::shared_ptr<const ModelBundle> bundle, StreamConfig cfg,
                             uint64_t seed)
    : bundle_(std::move(bundle)), cfg_(cfg), mel_(bundle_->mel_cfg), rng_(seed) {
    bundle_->validate();
    latency_.chunk_period_ms = cfg_.chunk_s * 1000.0;
    audio_state_ = audioenc_open(bundle_->audio_enc);
    audio_state_.mel = mel_.open();
    for (RegionId r : kRegions) {
        expert_states_[size_t(r)] = expert_open(bundle_->experts[size_t(r)]);
        decoder_states_[size_t(r)] = decoder_open(bundle_->tokenizers[size_t(r)].ae);
    }
    fusion_cond_ = fusion_open(bundle_->fusion);
    fusion_uncond_ = fusion_open(bundle_->fusion);
}

void StreamSession::queue_symbol(double time_s, size_t category) {
    symbol_queue_.emplace_back(time_s, category + 1);  // 0 is reserved for none
}

std::array<Tensor, kNumRegions> StreamSession::run_steps(const Tensor& audio_tokens) {
    const size_t d_audio = bundle_->audio_enc.cfg.d_audio;
    const double token_period = double(kDownsample) / bundle_->frame_rate;

    std::array<std::vector<double>, kNumRegions> emitted;
    for (size_t tok_i = 0; tok_i < audio_tokens.rows(); ++tok_i) {
        const double* a_t = audio_tokens.row_ptr(tok_i);

        size_t symbol = 0;
        const double t_lo = double(step_) * token_period;
        const double t_hi = t_lo + token_period;
        for (const auto& [ts, cat] : symbol_queue_)
            if (ts >= t_lo && ts < t_hi) symbol = cat;

        // experts: shared raw-input state, two evals for guidance
        std::array<ExpertStepOut, kNumRegions> cond_out, uncond_out;
        for (RegionId r : kRegions) {
            const size_t ri = size_t(r);
            expert_advance(bundle_->experts[ri], expert_states_[ri], prev_token_[ri], a_t, symbol,
                           false);
            cond_out[ri] = expert_eval(bundle_->experts[ri], expert_states_[ri], true, false);
            if (!cfg_.cond_only)
                uncond_out[ri] = expert_eval(bundle_->experts[ri], expert_states_[ri], false,
                                             false);
        }

        std::array<const double*, kNumRegions> h_cond{
            cond_out[0].hidden.data(), cond_out[1].hidden.data(), cond_out[2].hidden.data(),
            cond_out[3].hidden.data()};
        fusion_advance(bundle_->fusion, fusion_cond_, h_cond, a_t, symbol, false);
        FuseStepOut fc = fusion_eval(bundle_->fusion, fusion_cond_, true, false);

        FuseStepOut fu;
        if (!cfg_.cond_only) {
            std::array<const double*, kNumRegions> h_uncond{
                uncond_out[0].hidden.data(), uncond_out[1].hidden.data(),
                uncond_out[2].hidden.data(), uncond_out[3].hidden.data()};
            fusion_advance(bundle_->fusion, fusion_uncond_, h_uncond, a_t, symbol, false);
            fu = fusion_eval(bundle_->fusion, fusion_uncond_, false, false);
        }

        for (RegionId r : kRegions) {
            const size_t ri = size_t(r);
            const std::vector<double> guided =
                cfg_.cond_only ? fc.logits[ri]
                               : cfg_combine(fu.logits[ri], fc.logits[ri], cfg_.gamma);
            const size_t token = sample_token(guided, rng_, cfg_.temperature);
            prev_token_[ri] = token;
            Tensor frames = bundle_->tokenizers[ri].decode_token_step(token, decoder_states_[ri],
                                                                      false);
            Tensor denorm = bundle_->stats.denormalize(r, frames);
            emitted[ri].insert(emitted[ri].end(), denorm.data.begin(), denorm.data.end());
        }
        ++step_;
    }

    std::array<Tensor, kNumRegions> out;
    for (RegionId r : kRegions) {
        const size_t ri = size_t(r);
        const size_t dim = bundle_->stats.mean[ri].size();
        const size_t rows = emitted[ri].size() / std::max<size_t>(dim, 1);
        out[ri] = Tensor({rows, dim}, std::move(emitted[ri]));
    }
    frames_emitted_ += out[0].rows();
    return out;
}

std::array<Tensor, kNumRegions> StreamSession::push_audio_chunk(const double* samples, size_t n,
                                                                bool final_chunk) {
    if (closed_) throw std::runtime_error("stream session is closed");
    const auto start = std::chrono::steady_clock::now();
    const size_t chunk_samples = size_t(cfg_.chunk_s * bundle_->mel_cfg.sample_rate + 0.5);
    if (n > chunk_samples) throw std::invalid_argument("push_audio_chunk: chunk too long");
    if (n < chunk_samples && !final_chunk)
        throw std::invalid_argument("push_audio_chunk: short chunk without final flag");

    std::vector<double> padded(samples, samples + n);
    padded.resize(chunk_samples, 0.0);
    real_samples_ += n;

    Tensor tokens = audioenc_push_samples(bundle_->audio_enc, mel_, audio_state_, padded.data(),
                                          padded.size(), false);
    auto frames = run_steps(tokens);

    if (final_chunk) {
        closed_ = true;
        // trim to the true duration
        const double spf = bundle_->mel_cfg.sample_rate / bundle_->frame_rate;
        const size_t true_frames =
            size_t(std::ceil(double(real_samples_) / spf));
        const size_t emitted_before = frames_emitted_ - frames[0].rows();
        if (true_frames < frames_emitted_) {
            const size_t keep = true_frames > emitted_before ? true_frames - emitted_before : 0;
            for (RegionId r : kRegions) {
                Tensor& f = frames[size_t(r)];
                Tensor trimmed({keep, f.cols()});
                std::copy(f.data.begin(), f.data.begin() + ptrdiff_t(keep * f.cols()),
                          trimmed.data.begin());
                f = std::move(trimmed);
            }
            frames_emitted_ = true_frames;
        }
    }

    const auto stop = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(stop - start).count();
    latency_.per_chunk_ms.push_back(ms);
    if (latency_.first_token_latency_ms == 0.0 && frames_emitted_ > 0)
        latency_.first_token_latency_ms = ms;
    return frames;
}

std::array<Tensor, kNumRegions> StreamSession::push_features(const Tensor& mel_frames) {
    if (closed_) throw std::runtime_error("stream session is closed");
    const auto start = std::chrono::steady_clock::now();
    Tensor tokens = audioenc_push_frames(bundle_->audio_enc, audio_state_, mel_frames, false);
    auto frames = run_steps(tokens);
    const auto stop = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(stop - start).count();
    latency_.per_chunk_ms.push_back(ms);
    if (latency_.first_token_latency_ms == 0.0 && frames_emitted_ > 0)
        latency_.first_token_latency_ms = ms;
    frames_emitted_ += 0;  // run_steps already counted
    return frames;
}

size_t StreamSession::state_bytes() const {
    size_t n = 0;
    n += audio_state_.frame_buf.size() * sizeof(double);
    for (const auto& h : audio_state_.conv_hist) n += h.size() * sizeof(double);
    n += audio_state_.mel.history.size() * sizeof(double);
    n += audio_state_.mel.pending.size() * sizeof(double);
    for (const auto& st : expert_states_) n += st.state_bytes();
    n += fusion_cond_.state_bytes() + fusion_uncond_.state_bytes();
    for (const auto& st : decoder_states_)
        for (const auto& h : st.conv_hist) n += h.size() * sizeof(double);
    return n;
}

namespace {
void embed_arrays(NamedArrays& dst, const std::string& prefix, const NamedArrays& src) {
    dst.meta[prefix] = src.meta;
    for (const auto& [name, t] : src.arrays) dst.add(prefix + "/" + name, t);
}

NamedArrays extract_arrays(const NamedArrays& src, const std::string& prefix) {
    NamedArrays out;
    out.meta = src.meta.at(prefix);
    for (const auto& [name, t] : src.arrays)
        if (name.rfind(prefix + "/", 0) == 0) out.add(name.substr(prefix.size() + 1), t);
    return out;
}
}  // namespace

NamedArrays StreamSession::serialize() const {
    NamedArrays a;
    a.meta["kind"] = "stream_session";
    a.meta["gamma"] = cfg_.gamma;
    a.meta["temperature"] = cfg_.temperature;
    a.meta["cond_only"] = cfg_.cond_only;
    a.meta["chunk_s"] = cfg_.chunk_s;
    a.meta["rng"] = rng_.serialize();
    a.meta["step"] = step_;
    a.meta["frames_emitted"] = frames_emitted_;
    a.meta["real_samples"] = real_samples_;
    a.meta["closed"] = closed_;
    nlohmann::json prev = nlohmann::json::array();
    for (size_t t : prev_token_) prev.push_back(t);
    a.meta["prev_tokens"] = prev;
    nlohmann::json syms = nlohmann::json::array();
    for (const auto& [ts, cat] : symbol_queue_) syms.push_back({{"t", ts}, {"c", cat}});
    a.meta["symbol_queue"] = syms;

    embed_arrays(a, "audio", audio_state_.to_arrays());
    for (RegionId r : kRegions) {
        embed_arrays(a, std::string("expert_") + region_name(r),
                     expert_states_[size_t(r)].to_arrays());
        embed_arrays(a, std::string("decoder_") + region_name(r),
                     decoder_states_[size_t(r)].to_arrays());
    }
    embed_arrays(a, "fusion_cond", fusion_cond_.to_arrays());
    embed_arrays(a, "fusion_uncond", fusion_uncond_.to_arrays());
    return a;
}

StreamSession StreamSession::deserialize(std::shared_ptr<const ModelBundle> bundle,
                                         const NamedArrays& a) {
    StreamConfig cfg;
    cfg.gamma = a.meta.at("gamma").get<double>();
    cfg.temperature = a.meta.at("temperature").get<double>();
    cfg.cond_only = a.meta.at("cond_only").get<bool>();
    cfg.chunk_s = a.meta.at("chunk_s").get<double>();
    StreamSession s(std::move(bundle), cfg, 0);
    s.rng_ = Rng::deserialize(a.meta.at("rng").get<std::string>());
    s.step_ = a.meta.at("step").get<size_t>();
    s.frames_emitted_ = a.meta.at("frames_emitted").get<size_t>();
    s.real_samples_ = a.meta.at("real_samples").get<size_t>();
    s.closed_ = a.meta.at("closed").get<bool>();
    const auto& prev = a.meta.at("prev_tokens");
    for (size_t i = 0; i < kNumRegions; ++i) s.prev_token_[i] = prev[i].get<size_t>();
    for (const auto& e : a.meta.at("symbol_queue"))
        s.symbol_queue_.emplace_back(e.at("t").get<double>(), e.at("c").get<size_t>());

    s.audio_state_ = AudioEncState::from_arrays(extract_arrays(a, "audio"));
    for (RegionId r : kRegions) {
        s.expert_states_[size_t(r)] = ExpertState::from_arrays(
            extract_arrays(a, std::string("expert_") + region_name(r)));
        s.decoder_states_[size_t(r)] = DecoderState::from_arrays(
            extract_arrays(a, std::string("decoder_") + region_name(r)));
    }
    s.fusion_cond_ = FusionState::from_arrays(extract_arrays(a, "fusion_cond"));
    s.fusion_uncond_ = FusionState::from_arrays(extract_arrays(a, "fusion_uncond"));
    return s;
}

// ---------------------------------------------------------------------------
// offline reference and causality probes
// ---------------------------------------------------------------------------

std::array<Tensor, kNumRegions> generate_offline(const ModelBundle& bundle,
                                                 const std::vector<double>& samples,
                                                 const StreamConfig& cfg, uint64_t seed) {
    bundle.validate();
    // batch audio front end
    MelExtractor mel(bundle.mel_cfg);
    Tensor frames = mel.extract(samples);
    const size_t group = bundle.audio_enc.cfg.frames_per_token;
    const size_t usable = frames.rows() - frames.rows() % group;
    Tensor trimmed({usable, frames.cols()});
    std::copy(frames.data.begin(), frames.data.begin() + ptrdiff_t(usable * frames.cols()),
              trimmed.data.begin());
    Tensor audio_tokens = bundle.audio_enc.encode_value(trimmed);

    // the same AR loop as the session, then batch decode per region
    Rng rng(seed);
    std::array<ExpertState, kNumRegions> est;
    for (RegionId r : kRegions) est[size_t(r)] = expert_open(bundle.experts[size_t(r)]);
    FusionState fc = fusion_open(bundle.fusion);
    FusionState fu = fusion_open(bundle.fusion);
    std::array<size_t, kNumRegions> prev{};
    std::array<std::vector<size_t>, kNumRegions> tokens;

    for (size_t t = 0; t < audio_tokens.rows(); ++t) {
        const double* a_t = audio_tokens.row_ptr(t);
        std::array<ExpertStepOut, kNumRegions> cond_out, uncond_out;
        for (RegionId r : kRegions) {
            const size_t ri = size_t(r);
            expert_advance(bundle.experts[ri], est[ri], prev[ri], a_t, 0, false);
            cond_out[ri] = expert_eval(bundle.experts[ri], est[ri], true, false);
            if (!cfg.cond_only)
                uncond_out[ri] = expert_eval(bundle.experts[ri], est[ri], false, false);
        }
        std::array<const double*, kNumRegions> h_cond{
            cond_out[0].hidden.data(), cond_out[1].hidden.data(), cond_out[2].hidden.data(),
            cond_out[3].hidden.data()};
        fusion_advance(bundle.fusion, fc, h_cond, a_t, 0, false);
        FuseStepOut out_c = fusion_eval(bundle.fusion, fc, true, false);
        FuseStepOut out_u;
        if (!cfg.cond_only) {
            std::array<const double*, kNumRegions> h_uncond{
                uncond_out[0].hidden.data(), uncond_out[1].hidden.data(),
                uncond_out[2].hidden.data(), uncond_out[3].hidden.data()};
            fusion_advance(bundle.fusion, fu, h_uncond, a_t, 0, false);
            out_u = fusion_eval(bundle.fusion, fu, false, false);
        }
        for (RegionId r : kRegions) {
            const size_t ri = size_t(r);
            const std::vector<double> guided =
                cfg.cond_only ? out_c.logits[ri]
                              : cfg_combine(out_u.logits[ri], out_c.logits[ri], cfg.gamma);
            prev[ri] = sample_token(guided, rng, cfg.temperature);
            tokens[ri].push_back(prev[ri]);
        }
    }

    std::array<Tensor, kNumRegions> out;
    for (RegionId r : kRegions) {
        Tensor decoded = bundle.tokenizers[size_t(r)].decode_tokens(tokens[size_t(r)]);
        out[size_t(r)] = bundle.stats.denormalize(r, decoded);
    }
    return out;
}

bool causality_probe_fn(const GenerateFn& gen, const std::vector<double>& audio,
                        double t_perturb_s, double sample_rate, double chunk_s,
                        double frames_per_chunk, uint64_t noise_seed) {
    const size_t cut = size_t(t_perturb_s * sample_rate);
    if (cut > audio.size()) throw std::invalid_argument("causality probe: cut beyond audio");

    std::vector<double> perturbed = audio;
    Rng noise(noise_seed);
    for (size_t i = cut; i < perturbed.size(); ++i) perturbed[i] = noise.normal(0.0, 0.1);

    const auto base = gen(audio);
    const auto probe = gen(perturbed);

    // frames from chunks that ended at or before the perturbation point
    const size_t safe_chunks = size_t(t_perturb_s / chunk_s);
    const size_t safe_frames = size_t(double(safe_chunks) * frames_per_chunk);
    for (size_t r = 0; r < kNumRegions; ++r) {
        const size_t rows = std::min({safe_frames, base[r].rows(), probe[r].rows()});
        for (size_t t = 0; t < rows; ++t)
            for (size_t c = 0; c < base[r].cols(); ++c)
                if (base[r].at(t, c) != probe[r].at(t, c)) return false;
    }
    return true;
}

bool causality_probe(const ModelBundle& bundle, const std::vector<double>& audio,
                     double t_perturb_s, const StreamConfig& cfg, uint64_t seed) {
    auto run = [&](const std::vector<double>& samples) {
        auto b = std::make_shared<ModelBundle>(bundle);
        StreamSession session(b, cfg, seed);
        const size_t chunk = size_t(cfg.chunk_s * bundle.mel_cfg.sample_rate + 0.5);
        std::array<std::vector<double>, kNumRegions> acc;
        size_t pos = 0;
        while (pos + chunk <= samples.size()) {
            auto frames = session.push_audio_chunk(samples.data() + pos, chunk, false);
            for (size_t r = 0; r < kNumRegions; ++r)
                acc[r].insert(acc[r].end(), frames[r].data.begin(), frames[r].data.end());
            pos += chunk;
        }
        std::array<Tensor, kNumRegions> out;
        for (size_t r = 0; r < kNumRegions; ++r) {
            const size_t dim = bundle.stats.mean[r].size();
            out[r] = Tensor({acc[r].size() / dim, dim}, std::move(acc[r]));
        }
        return out;
    };
    return causality_probe_fn(run, audio, t_perturb_s, bundle.mel_cfg.sample_rate, cfg.chunk_s,
                              double(kDownsample), seed ^ 0x90153ULL);
}

}  // namespace gest
