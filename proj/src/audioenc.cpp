#include "gest/audioenc.hpp"

#include <cmath>
#include <stdexcept>

#include "gest/kernels.hpp"
#include "gest/streamops.hpp"

namespace gest {

using ag::Var;

namespace {
Tensor randn_scaled(Rng& rng, std::vector<size_t> shape, double fan_in) {
    return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(std::max(fan_in, 1.0)));
}
}  // namespace

AudioEncoder AudioEncoder::init(const AudioEncConfig& cfg, uint64_t seed) {
    AudioEncoder enc;
    enc.cfg = cfg;
    Rng rng(seed ^ 0xa0d10ULL);

    auto conv = [&](const std::string& name, size_t cout, size_t cin, size_t dil) {
        ConvLayer c;
        c.k = 3;
        c.dil = dil;
        c.stride = 1;
        c.pad = ag::Pad::causal;
        c.w = enc.params.add(randn_scaled(rng, {cout, 3 * cin}, double(3 * cin)), name + ".w");
        c.b = enc.params.add(Tensor::zeros({1, cout}), name + ".b");
        return c;
    };
    enc.proj = conv("proj", cfg.hidden, cfg.n_mels, 1);
    for (size_t i = 0; i < cfg.dilations.size(); ++i)
        enc.pyramid.push_back(
            conv("pyr" + std::to_string(i), cfg.hidden, cfg.hidden, cfg.dilations[i]));
    enc.agg_w = enc.params.add(
        randn_scaled(rng, {cfg.d_audio, cfg.frames_per_token * cfg.hidden},
                     double(cfg.frames_per_token * cfg.hidden)),
        "agg.w");
    enc.agg_b = enc.params.add(Tensor::zeros({1, cfg.d_audio}), "agg.b");
    return enc;
}

Var AudioEncoder::encode(const Var& frames) const {
    if (frames->value.cols() != cfg.n_mels)
        throw std::invalid_argument("audioenc: mel width mismatch");
    if (frames->value.rows() % cfg.frames_per_token != 0)
        throw std::invalid_argument("audioenc: frame count must be a multiple of 16");
    Var h = ag::conv1d(frames, proj.w, proj.b, proj.k, proj.dil, 1, ag::Pad::causal);
    for (const auto& layer : pyramid)
        h = ag::add(h, ag::conv1d(ag::gelu(h), layer.w, layer.b, layer.k, layer.dil, 1,
                                  ag::Pad::causal));
    Var stacked = ag::reshape_rows(h, cfg.frames_per_token * cfg.hidden);
    return ag::linear(stacked, agg_w, agg_b);
}

Tensor AudioEncoder::encode_value(const Tensor& frames) const {
    return encode(ag::constant(frames))->value;
}

NamedArrays AudioEncoder::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "audio_encoder";
    a.meta["n_mels"] = cfg.n_mels;
    a.meta["hidden"] = cfg.hidden;
    a.meta["d_audio"] = cfg.d_audio;
    a.meta["dilations"] = cfg.dilations;
    a.meta["frames_per_token"] = cfg.frames_per_token;
    for (const auto& p : params.params) a.add(p->name, p->value);
    return a;
}

AudioEncoder AudioEncoder::from_arrays(const NamedArrays& a) {
    AudioEncConfig cfg;
    cfg.n_mels = a.meta.at("n_mels").get<size_t>();
    cfg.hidden = a.meta.at("hidden").get<size_t>();
    cfg.d_audio = a.meta.at("d_audio").get<size_t>();
    cfg.dilations = a.meta.at("dilations").get<std::vector<size_t>>();
    cfg.frames_per_token = a.meta.at("frames_per_token").get<size_t>();
    AudioEncoder enc = init(cfg, 0);
    for (auto& p : enc.params.params) {
        const Tensor& t = a.require(p->name);
        if (t.shape != p->value.shape)
            throw std::runtime_error("audioenc checkpoint shape mismatch: " + p->name);
        p->value = t;
    }
    return enc;
}

// ---------------------------------------------------------------------------
// streaming
// ---------------------------------------------------------------------------

AudioEncState audioenc_open(const AudioEncoder& enc) {
    AudioEncState st;
    st.model_fingerprint = enc.weights_fingerprint();
    st.mel.history.assign(0, 0.0);  // sized by the extractor on first use
    auto hist_for = [&](const ConvLayer& c) {
        const size_t span = (c.k - 1) * c.dil;
        const size_t cin = c.w->value.cols() / c.k;
        return std::vector<double>(span * cin, 0.0);
    };
    st.conv_hist.push_back(hist_for(enc.proj));
    for (const auto& l : enc.pyramid) st.conv_hist.push_back(hist_for(l));
    st.frame_buf.assign(enc.cfg.frames_per_token * enc.cfg.hidden, 0.0);
    return st;
}

Tensor audioenc_push_frames(const AudioEncoder& enc, AudioEncState& st, const Tensor& frames,
                            bool verify) {
    if (verify && st.model_fingerprint != enc.weights_fingerprint())
        throw std::runtime_error("audio encoder state does not belong to this model");
    if (frames.cols() != enc.cfg.n_mels)
        throw std::invalid_argument("audioenc: mel width mismatch");
    const size_t hidden = enc.cfg.hidden;
    const size_t group = enc.cfg.frames_per_token;

    std::vector<std::vector<double>> tokens;
    std::vector<double> h(hidden), act(hidden), conv_out(hidden);
    for (size_t i = 0; i < frames.rows(); ++i) {
        streamops::conv_step(enc.proj, st.conv_hist[0], frames.row_ptr(i), enc.cfg.n_mels,
                             h.data());
        for (size_t li = 0; li < enc.pyramid.size(); ++li) {
            streamops::gelu_row(h.data(), act.data(), hidden);
            streamops::conv_step(enc.pyramid[li], st.conv_hist[li + 1], act.data(), hidden,
                                 conv_out.data());
            kern::vadd(h.data(), conv_out.data(), h.data(), hidden);
        }
        std::copy(h.begin(), h.end(), st.frame_buf.begin() + ptrdiff_t(st.buffered * hidden));
        if (++st.buffered == group) {
            std::vector<double> tok(enc.cfg.d_audio);
            streamops::linear_row(enc.agg_w->value, enc.agg_b->value, st.frame_buf.data(),
                                  tok.data());
            tokens.push_back(std::move(tok));
            st.buffered = 0;
        }
    }
    Tensor out({tokens.size(), enc.cfg.d_audio});
    for (size_t i = 0; i < tokens.size(); ++i)
        std::copy(tokens[i].begin(), tokens[i].end(), out.row_ptr(i));
    return out;
}

Tensor audioenc_push_samples(const AudioEncoder& enc, const MelExtractor& mel, AudioEncState& st,
                             const double* samples, size_t n, bool verify) {
    if (st.mel.history.empty() && st.mel.frames_emitted == 0)
        st.mel = mel.open();
    Tensor frames = mel.push(samples, n, st.mel);
    return audioenc_push_frames(enc, st, frames, verify);
}

NamedArrays AudioEncState::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "audioenc_state";
    a.meta["model_fingerprint"] = model_fingerprint;
    a.meta["buffered"] = buffered;
    a.meta["mel_frames_emitted"] = mel.frames_emitted;
    a.add("mel.history", Tensor({mel.history.size()}, mel.history));
    a.add("mel.pending", Tensor({mel.pending.size()}, mel.pending));
    a.add("frame_buf", Tensor({frame_buf.size()}, frame_buf));
    for (size_t i = 0; i < conv_hist.size(); ++i)
        a.add("hist" + std::to_string(i), Tensor({conv_hist[i].size()}, conv_hist[i]));
    return a;
}

AudioEncState AudioEncState::from_arrays(const NamedArrays& a) {
    AudioEncState st;
    st.model_fingerprint = a.meta.at("model_fingerprint").get<uint64_t>();
    st.buffered = a.meta.at("buffered").get<size_t>();
    st.mel.frames_emitted = a.meta.at("mel_frames_emitted").get<size_t>();
    st.mel.history = a.require("mel.history").data;
    st.mel.pending = a.require("mel.pending").data;
    st.frame_buf = a.require("frame_buf").data;
    for (size_t i = 0;; ++i) {
        const Tensor* t = a.find("hist" + std::to_string(i));
        if (!t) break;
        st.conv_hist.push_back(t->data);
    }
    return st;
}

}  // namespace gest
