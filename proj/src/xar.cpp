#include "gest/xar.hpp"

#include <cmath>
#include <stdexcept>

#include "gest/kernels.hpp"

namespace gest {

using ag::Var;

namespace {

Tensor randn_scaled(Rng& rng, std::vector<size_t> shape, double fan_in) {
    return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(std::max(fan_in, 1.0)));
}

std::vector<double> positions_from(size_t start, size_t n) {
    std::vector<double> pos(n);
    for (size_t i = 0; i < n; ++i) pos[i] = double(start + i);
    return pos;
}

}  // namespace

AttnLayer make_attn_layer(ag::ParamSet& ps, Rng& rng, const std::string& name, size_t d) {
    AttnLayer a;
    a.ln_g = ps.add(Tensor::full({1, d}, 1.0), name + ".ln.g");
    a.ln_b = ps.add(Tensor::zeros({1, d}), name + ".ln.b");
    a.wq = ps.add(randn_scaled(rng, {d, d}, double(d)), name + ".wq");
    a.wk = ps.add(randn_scaled(rng, {d, d}, double(d)), name + ".wk");
    a.wv = ps.add(randn_scaled(rng, {d, d}, double(d)), name + ".wv");
    a.wo = ps.add(randn_scaled(rng, {d, d}, double(d)), name + ".wo");
    return a;
}

FfnLayer make_ffn_layer(ag::ParamSet& ps, Rng& rng, const std::string& name, size_t d,
                        size_t mult) {
    FfnLayer f;
    f.ln_g = ps.add(Tensor::full({1, d}, 1.0), name + ".ln.g");
    f.ln_b = ps.add(Tensor::zeros({1, d}), name + ".ln.b");
    f.w1 = ps.add(randn_scaled(rng, {mult * d, d}, double(d)), name + ".w1");
    f.b1 = ps.add(Tensor::zeros({1, mult * d}), name + ".b1");
    f.w2 = ps.add(randn_scaled(rng, {d, mult * d}, double(mult * d)), name + ".w2");
    f.b2 = ps.add(Tensor::zeros({1, d}), name + ".b2");
    return f;
}

ExpertModel ExpertModel::init(const ExpertConfig& cfg, const Tensor& codebook_entries,
                              uint64_t seed) {
    if (codebook_entries.rows() != cfg.vocab || codebook_entries.cols() != cfg.code_dim)
        throw std::invalid_argument("expert: codebook shape does not match config");
    ExpertModel m;
    m.cfg = cfg;
    m.token_embed = codebook_entries;
    Rng rng(seed ^ 0xe0be57ULL);

    const size_t d = cfg.d_model;
    m.emb_w1 = m.params.add(randn_scaled(rng, {d, cfg.code_dim}, double(cfg.code_dim)), "emb.w1");
    m.emb_b1 = m.params.add(Tensor::zeros({1, d}), "emb.b1");
    m.emb_w2 = m.params.add(randn_scaled(rng, {d, d}, double(d)), "emb.w2");
    m.emb_b2 = m.params.add(Tensor::zeros({1, d}), "emb.b2");
    m.bos = m.params.add(Tensor::randn({1, d}, rng, 0.1), "bos");
    m.null_audio = m.params.add(Tensor::randn({1, cfg.d_audio}, rng, 0.1), "null_audio");
    m.sym_embed =
        m.params.add(Tensor::randn({cfg.n_symbols + 1, cfg.d_audio}, rng, 0.1), "sym_embed");
    m.audio_in_w =
        m.params.add(randn_scaled(rng, {d, cfg.d_audio}, double(cfg.d_audio)), "audio_in.w");
    m.audio_in_b = m.params.add(Tensor::zeros({1, d}), "audio_in.b");
    m.cond_ln_g = m.params.add(Tensor::full({1, d}, 1.0), "cond_ln.g");
    m.cond_ln_b = m.params.add(Tensor::zeros({1, d}), "cond_ln.b");

    for (size_t b = 0; b < cfg.blocks; ++b) {
        Block blk;
        const std::string base = "b" + std::to_string(b);
        for (size_t i = 0; i < cfg.cross_layers; ++i)
            blk.cross.push_back(make_attn_layer(m.params, rng, base + ".ca" + std::to_string(i), d));
        for (size_t i = 0; i < cfg.self_layers; ++i)
            blk.self_attn.push_back(
                make_attn_layer(m.params, rng, base + ".sa" + std::to_string(i), d));
        blk.ffn = make_ffn_layer(m.params, rng, base + ".ffn", d, cfg.ffn_mult);
        m.blocks.push_back(std::move(blk));
    }
    m.final_ln_g = m.params.add(Tensor::full({1, d}, 1.0), "final_ln.g");
    m.final_ln_b = m.params.add(Tensor::zeros({1, d}), "final_ln.b");
    m.cls_w = m.params.add(randn_scaled(rng, {cfg.vocab, d}, double(d)), "cls.w");
    m.cls_b = m.params.add(Tensor::zeros({1, cfg.vocab}), "cls.b");
    return m;
}

ExpertModel::Forward ExpertModel::forward(const std::vector<size_t>& input_tokens, bool with_bos,
                                          const ag::Var& audio_tokens,
                                          const std::vector<size_t>& symbols, bool drop_audio,
                                          bool drop_symbols, size_t start_pos,
                                          const Tensor* history_noise) const {
    const size_t rows = input_tokens.size() + (with_bos ? 1 : 0);
    if (audio_tokens->value.rows() != rows)
        throw std::invalid_argument("expert forward: audio length must equal step count");
    if (symbols.size() != rows)
        throw std::invalid_argument("expert forward: symbol length must equal step count");
    for (size_t t : input_tokens)
        if (t >= cfg.vocab) throw std::invalid_argument("expert forward: token index >= K");

    // embedded history: codebook rows through the MLP, BOS at position 0
    Var x;
    if (!input_tokens.empty()) {
        Var code = ag::embedding(ag::constant(token_embed), input_tokens);
        Var emb = ag::linear(ag::gelu(ag::linear(code, emb_w1, emb_b1)), emb_w2, emb_b2);
        x = with_bos ? ag::concat_rows(bos, emb) : emb;
    } else {
        x = bos;
    }
    if (history_noise) {
        if (!history_noise->same_shape(x->value))
            throw std::invalid_argument("expert forward: noise shape mismatch");
        x = ag::add(x, ag::constant(*history_noise));
    }

    // conditioning stream: audio (or learned null) plus symbol embedding
    Var audio_part =
        drop_audio ? ag::select_rows(audio_tokens, null_audio, std::vector<uint8_t>(rows, 1))
                   : audio_tokens;
    std::vector<size_t> sym_idx(rows, 0);
    if (!drop_symbols)
        for (size_t i = 0; i < rows; ++i) sym_idx[i] = symbols[i];
    Var cond = ag::add(audio_part, ag::embedding(sym_embed, sym_idx));
    cond = ag::layernorm(ag::linear(cond, audio_in_w, audio_in_b), cond_ln_g, cond_ln_b);

    const auto pos = positions_from(start_pos, rows);
    const size_t hd = cfg.d_model / cfg.n_heads;
    const auto mask = ag::AttnMask::causal(rows, cfg.history);

    for (const Block& blk : blocks) {
        for (const AttnLayer& a : blk.cross) {
            Var xn = ag::layernorm(x, a.ln_g, a.ln_b);
            Var q = ag::rotary(ag::linear(xn, a.wq, Var()), pos, hd);
            Var k = ag::rotary(ag::linear(cond, a.wk, Var()), pos, hd);
            Var v = ag::linear(cond, a.wv, Var());
            x = ag::add(x,
                        ag::linear(ag::masked_attention(q, k, v, mask, cfg.n_heads), a.wo, Var()));
        }
        for (const AttnLayer& a : blk.self_attn) {
            Var xn = ag::layernorm(x, a.ln_g, a.ln_b);
            Var q = ag::rotary(ag::linear(xn, a.wq, Var()), pos, hd);
            Var k = ag::rotary(ag::linear(xn, a.wk, Var()), pos, hd);
            Var v = ag::linear(xn, a.wv, Var());
            x = ag::add(x,
                        ag::linear(ag::masked_attention(q, k, v, mask, cfg.n_heads), a.wo, Var()));
        }
        Var xn = ag::layernorm(x, blk.ffn.ln_g, blk.ffn.ln_b);
        x = ag::add(x, ag::linear(ag::gelu(ag::linear(xn, blk.ffn.w1, blk.ffn.b1)), blk.ffn.w2,
                                  blk.ffn.b2));
    }
    Forward out;
    out.hidden = ag::layernorm(x, final_ln_g, final_ln_b);
    out.logits = ag::linear(out.hidden, cls_w, cls_b);
    return out;
}

Tensor inject_noise(size_t rows, size_t cols, double p_seq, double sigma, Rng& rng) {
    if (sigma < 0.0) throw std::invalid_argument("inject_noise: sigma must be >= 0");
    Tensor noise({rows, cols});
    if (sigma == 0.0) return noise;
    if (!rng.bernoulli(p_seq)) return noise;
    for (auto& v : noise.data) v = rng.normal(0.0, sigma);
    return noise;
}

NamedArrays ExpertModel::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "expert";
    a.meta["region"] = region_name(cfg.region);
    a.meta["vocab"] = cfg.vocab;
    a.meta["code_dim"] = cfg.code_dim;
    a.meta["d_model"] = cfg.d_model;
    a.meta["n_heads"] = cfg.n_heads;
    a.meta["blocks"] = cfg.blocks;
    a.meta["cross_layers"] = cfg.cross_layers;
    a.meta["self_layers"] = cfg.self_layers;
    a.meta["history"] = cfg.history;
    a.meta["d_audio"] = cfg.d_audio;
    a.meta["n_symbols"] = cfg.n_symbols;
    a.meta["ffn_mult"] = cfg.ffn_mult;
    a.meta["noise_sigma"] = cfg.noise_sigma;
    a.meta["p_noise_max"] = cfg.p_noise_max;
    a.meta["noise_fixed_p"] = cfg.noise_fixed_p;
    a.meta["p_cf"] = cfg.p_cf;
    a.add("token_embed", token_embed);
    for (const auto& p : params.params) a.add(p->name, p->value);
    return a;
}

ExpertModel ExpertModel::from_arrays(const NamedArrays& a) {
    ExpertConfig cfg;
    cfg.region = region_from_name(a.meta.at("region").get<std::string>());
    cfg.vocab = a.meta.at("vocab").get<size_t>();
    cfg.code_dim = a.meta.at("code_dim").get<size_t>();
    cfg.d_model = a.meta.at("d_model").get<size_t>();
    cfg.n_heads = a.meta.at("n_heads").get<size_t>();
    cfg.blocks = a.meta.at("blocks").get<size_t>();
    cfg.cross_layers = a.meta.at("cross_layers").get<size_t>();
    cfg.self_layers = a.meta.at("self_layers").get<size_t>();
    cfg.history = a.meta.at("history").get<size_t>();
    cfg.d_audio = a.meta.at("d_audio").get<size_t>();
    cfg.n_symbols = a.meta.at("n_symbols").get<size_t>();
    cfg.ffn_mult = a.meta.at("ffn_mult").get<size_t>();
    cfg.noise_sigma = a.meta.at("noise_sigma").get<double>();
    cfg.p_noise_max = a.meta.at("p_noise_max").get<double>();
    cfg.noise_fixed_p = a.meta.at("noise_fixed_p").get<bool>();
    cfg.p_cf = a.meta.at("p_cf").get<double>();
    ExpertModel m = init(cfg, a.require("token_embed"), 0);
    for (auto& p : m.params.params) {
        const Tensor& t = a.require(p->name);
        if (t.shape != p->value.shape)
            throw std::runtime_error("expert checkpoint shape mismatch: " + p->name);
        p->value = t;
    }
    return m;
}

// ---------------------------------------------------------------------------
// incremental inference
// ---------------------------------------------------------------------------

ExpertState expert_open(const ExpertModel& m) {
    ExpertState st;
    st.model_fingerprint = m.weights_fingerprint();
    return st;
}

void expert_advance(const ExpertModel& m, ExpertState& st, size_t prev_token,
                    const double* audio_token, size_t symbol, bool verify) {
    if (verify && st.model_fingerprint != m.weights_fingerprint())
        throw std::runtime_error("expert state does not belong to this model");
    if (symbol > m.cfg.n_symbols) throw std::invalid_argument("expert step: symbol out of range");
    if (st.step > 0) {
        if (prev_token >= m.cfg.vocab) throw std::invalid_argument("expert step: token >= K");
        st.token_ring.push_back(prev_token);
        if (st.token_ring.size() > m.cfg.history) st.token_ring.erase(st.token_ring.begin());
    }
    std::vector<double> cond(m.cfg.d_audio);
    if (audio_token)
        std::copy(audio_token, audio_token + m.cfg.d_audio, cond.begin());
    else
        std::copy(m.null_audio->value.data.begin(), m.null_audio->value.data.end(), cond.begin());
    st.cond_ring.push_back(std::move(cond));
    st.sym_ring.push_back(symbol);
    if (st.cond_ring.size() > m.cfg.history) {
        st.cond_ring.erase(st.cond_ring.begin());
        st.sym_ring.erase(st.sym_ring.begin());
    }
    ++st.step;
}

ExpertStepOut expert_eval(const ExpertModel& m, const ExpertState& st, bool conditioned,
                          bool verify) {
    if (verify && st.model_fingerprint != m.weights_fingerprint())
        throw std::runtime_error("expert state does not belong to this model");
    if (st.step == 0) throw std::runtime_error("expert_eval: advance the state first");
    const size_t rows = st.cond_ring.size();
    const bool with_bos = st.step <= m.cfg.history;  // BOS row still in window

    Tensor audio({rows, m.cfg.d_audio});
    for (size_t i = 0; i < rows; ++i)
        std::copy(st.cond_ring[i].begin(), st.cond_ring[i].end(), audio.row_ptr(i));
    std::vector<size_t> symbols(st.sym_ring.begin(), st.sym_ring.end());

    auto fwd = m.forward(st.token_ring, with_bos, ag::constant(audio), symbols, !conditioned,
                         !conditioned, st.step - rows, nullptr);
    ExpertStepOut out;
    const size_t last = rows - 1;
    out.logits.assign(fwd.logits->value.row_ptr(last),
                      fwd.logits->value.row_ptr(last) + m.cfg.vocab);
    out.hidden.assign(fwd.hidden->value.row_ptr(last),
                      fwd.hidden->value.row_ptr(last) + m.cfg.d_model);
    return out;
}

ExpertStepOut expert_step(const ExpertModel& m, ExpertState& st, size_t prev_token, bool is_bos,
                          const double* audio_token, size_t symbol) {
    if (is_bos && st.step != 0)
        throw std::invalid_argument("expert step: BOS only valid at the stream head");
    expert_advance(m, st, prev_token, audio_token, symbol);
    return expert_eval(m, st, true);
}

NamedArrays ExpertState::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "expert_state";
    a.meta["model_fingerprint"] = model_fingerprint;
    a.meta["step"] = step;
    {
        Tensor t({token_ring.size()});
        for (size_t i = 0; i < token_ring.size(); ++i) t.data[i] = double(token_ring[i]);
        a.add("tokens", t);
    }
    {
        Tensor t({sym_ring.size()});
        for (size_t i = 0; i < sym_ring.size(); ++i) t.data[i] = double(sym_ring[i]);
        a.add("symbols", t);
    }
    const size_t d = cond_ring.empty() ? 0 : cond_ring[0].size();
    Tensor c({cond_ring.size(), d});
    for (size_t i = 0; i < cond_ring.size(); ++i)
        std::copy(cond_ring[i].begin(), cond_ring[i].end(), c.row_ptr(i));
    a.add("cond", c);
    return a;
}

ExpertState ExpertState::from_arrays(const NamedArrays& a) {
    ExpertState st;
    st.model_fingerprint = a.meta.at("model_fingerprint").get<uint64_t>();
    st.step = a.meta.at("step").get<size_t>();
    for (double v : a.require("tokens").data) st.token_ring.push_back(size_t(v));
    for (double v : a.require("symbols").data) st.sym_ring.push_back(size_t(v));
    const Tensor& c = a.require("cond");
    for (size_t i = 0; i < c.rows(); ++i)
        st.cond_ring.emplace_back(c.row_ptr(i), c.row_ptr(i) + c.cols());
    return st;
}

size_t ExpertState::state_bytes() const {
    size_t n = sizeof(*this);
    n += token_ring.size() * sizeof(size_t);
    n += sym_ring.size() * sizeof(size_t);
    for (const auto& r : cond_ring) n += r.size() * sizeof(double);
    return n;
}

// ---------------------------------------------------------------------------
// dataset / training
// ---------------------------------------------------------------------------

SequenceDataset build_sequence_dataset(const std::vector<SynthSession>& sessions,
                                       const std::array<SvqTokenizer, kNumRegions>& tokenizers,
                                       const NormStats& stats, const MelExtractor& mel) {
    SequenceDataset data;
    for (const auto& sess : sessions) {
        const size_t t_f = sess.frames() - sess.frames() % kDownsample;
        const size_t steps = t_f / kDownsample;

        for (RegionId r : kRegions) {
            Tensor norm = stats.normalize(r, sess.poses[size_t(r)]);
            Tensor trimmed({t_f, norm.cols()});
            std::copy(norm.data.begin(), norm.data.begin() + ptrdiff_t(t_f * norm.cols()),
                      trimmed.data.begin());
            data.tokens[size_t(r)].push_back(tokenizers[size_t(r)].tokenize(trimmed));
        }

        Tensor frames = mel.extract(sess.waveform);
        const size_t want = steps * 16;
        if (frames.rows() < want)
            throw std::runtime_error("dataset: waveform shorter than motion stream");
        Tensor mel_trim({want, frames.cols()});
        std::copy(frames.data.begin(), frames.data.begin() + ptrdiff_t(want * frames.cols()),
                  mel_trim.data.begin());
        data.mel_frames.push_back(std::move(mel_trim));

        std::vector<size_t> sym(steps, 0);
        const double token_period = double(kDownsample) / sess.frame_rate;
        for (const auto& ev : sess.symbols) {
            const size_t step = size_t(ev.time_s / token_period);
            if (step < steps) sym[step] = 1 + ev.category;
        }
        data.symbols.push_back(std::move(sym));
    }
    return data;
}

ExpertTrainResult train_experts(const SequenceDataset& data,
                                const std::array<SvqTokenizer, kNumRegions>& tokenizers,
                                AudioEncoder& audio_enc, const ExpertConfig& base_cfg,
                                const ExpertTrainOpts& opts) {
    if (data.mel_frames.empty()) throw std::invalid_argument("train_experts: empty dataset");

    ExpertTrainResult result;
    ag::ParamSet all;
    for (RegionId r : kRegions) {
        ExpertConfig cfg = base_cfg;
        cfg.region = r;
        cfg.vocab = tokenizers[size_t(r)].codebook.size();
        cfg.code_dim = tokenizers[size_t(r)].codebook.dim();
        result.experts[size_t(r)] =
            ExpertModel::init(cfg, tokenizers[size_t(r)].codebook.entries, opts.seed + size_t(r));
        all.absorb(result.experts[size_t(r)].params);
    }
    all.absorb(audio_enc.params);

    ag::Adam opt(opts.lr);
    Rng rng(opts.seed ^ 0x7ea1ULL);

    const size_t L = opts.seq_len;
    for (size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const double c =
            opts.epochs > 1 ? 0.5 * (1.0 + std::cos(M_PI * double(epoch) / double(opts.epochs - 1)))
                            : 1.0;
        opt.lr = opts.lr * (0.05 + 0.95 * c);
        for (size_t step = 0; step < opts.steps_per_epoch; ++step) {
            all.zero_grad();
            Var total;
            for (size_t item = 0; item < opts.batch; ++item) {
                const size_t sess = rng.uniform_int(data.mel_frames.size());
                const size_t steps = data.steps(sess);
                if (steps < L)
                    throw std::runtime_error("train_experts: session shorter than seq_len");
                const size_t o = rng.uniform_int(steps - L + 1);

                Tensor mel_win({L * 16, data.mel_frames[sess].cols()});
                std::copy(data.mel_frames[sess].row_ptr(o * 16),
                          data.mel_frames[sess].row_ptr(o * 16) + ptrdiff_t(mel_win.numel()),
                          mel_win.data.begin());
                Var audio = audio_enc.encode(ag::constant(mel_win));

                std::vector<size_t> symbols(data.symbols[sess].begin() + ptrdiff_t(o),
                                            data.symbols[sess].begin() + ptrdiff_t(o + L));

                for (RegionId r : kRegions) {
                    ExpertModel& m = result.experts[size_t(r)];
                    const auto& stream = data.tokens[size_t(r)][sess];
                    std::vector<size_t> targets(stream.begin() + ptrdiff_t(o),
                                                stream.begin() + ptrdiff_t(o + L));
                    const bool with_bos = o == 0;
                    std::vector<size_t> inputs;
                    if (with_bos)
                        inputs.assign(stream.begin(), stream.begin() + ptrdiff_t(L - 1));
                    else
                        inputs.assign(stream.begin() + ptrdiff_t(o - 1),
                                      stream.begin() + ptrdiff_t(o + L - 1));

                    const double p_seq = m.cfg.noise_fixed_p ? m.cfg.p_noise_max
                                                             : rng.uniform(0.0, m.cfg.p_noise_max);
                    Tensor noise = inject_noise(L, m.cfg.d_model, p_seq, m.cfg.noise_sigma, rng);
                    const bool drop_audio = rng.bernoulli(m.cfg.p_cf);
                    const bool drop_sym = rng.bernoulli(m.cfg.p_cf);

                    auto fwd =
                        m.forward(inputs, with_bos, audio, symbols, drop_audio, drop_sym, o, &noise);
                    Var loss = ag::softmax_cross_entropy(fwd.logits, targets);
                    total = total ? ag::add(total, loss) : loss;
                }
            }
            total = ag::scale(total, 1.0 / double(opts.batch));
            if (!std::isfinite(total->value.data[0]))
                throw std::runtime_error("train_experts: loss diverged (non-finite)");
            ag::backward(total);
            opt.step(all);
            result.loss_curve.push_back(total->value.data[0]);
        }
    }
    return result;
}

double expert_nll(const ExpertModel& m, const AudioEncoder& enc, const SequenceDataset& data,
                  size_t seq_len, bool conditioned) {
    double acc = 0.0;
    size_t count = 0;
    for (size_t sess = 0; sess < data.mel_frames.size(); ++sess) {
        const auto& stream = data.tokens[size_t(m.cfg.region)][sess];
        const size_t steps = data.steps(sess);
        for (size_t o = 0; o + seq_len <= steps; o += seq_len) {
            Tensor mel_win({seq_len * 16, data.mel_frames[sess].cols()});
            std::copy(data.mel_frames[sess].row_ptr(o * 16),
                      data.mel_frames[sess].row_ptr(o * 16) + ptrdiff_t(mel_win.numel()),
                      mel_win.data.begin());
            Var audio = ag::constant(enc.encode_value(mel_win));
            std::vector<size_t> symbols(data.symbols[sess].begin() + ptrdiff_t(o),
                                        data.symbols[sess].begin() + ptrdiff_t(o + seq_len));
            std::vector<size_t> targets(stream.begin() + ptrdiff_t(o),
                                        stream.begin() + ptrdiff_t(o + seq_len));
            const bool with_bos = o == 0;
            std::vector<size_t> inputs;
            if (with_bos)
                inputs.assign(stream.begin(), stream.begin() + ptrdiff_t(seq_len - 1));
            else
                inputs.assign(stream.begin() + ptrdiff_t(o - 1),
                              stream.begin() + ptrdiff_t(o + seq_len - 1));
            auto fwd =
                m.forward(inputs, with_bos, audio, symbols, !conditioned, !conditioned, o, nullptr);
            auto loss = ag::softmax_cross_entropy(fwd.logits, targets);
            acc += loss->value.data[0] * double(seq_len);
            count += seq_len;
        }
    }
    return acc / double(count);
}

}  // namespace gest
