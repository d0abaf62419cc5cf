#include "gest/fuse.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "gest/kernels.hpp"

namespace gest {

using ag::Var;

std::vector<FuseLayerKind> FuseConfig::parsed_order() const {
    std::vector<FuseLayerKind> out;
    std::string tok;
    for (size_t i = 0; i <= layer_order.size(); ++i) {
        if (i == layer_order.size() || layer_order[i] == ',') {
            if (tok == "spatial")
                out.push_back(FuseLayerKind::spatial);
            else if (tok == "temporal")
                out.push_back(FuseLayerKind::temporal);
            else if (tok == "cross")
                out.push_back(FuseLayerKind::cross);
            else
                throw std::invalid_argument("fuse: unknown layer kind '" + tok + "'");
            tok.clear();
        } else {
            tok += layer_order[i];
        }
    }
    if (out.size() != 3) throw std::invalid_argument("fuse: layer order must name three layers");
    return out;
}

namespace {
Tensor randn_scaled(Rng& rng, std::vector<size_t> shape, double fan_in) {
    return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(std::max(fan_in, 1.0)));
}
}  // namespace

FusionModel FusionModel::init(const FuseConfig& cfg, uint64_t seed,
                              const std::array<ExpertModel, kNumRegions>* experts) {
    FusionModel m;
    m.cfg = cfg;
    (void)cfg.parsed_order();  // validate early
    Rng rng(seed ^ 0xf05e11ULL);
    const size_t d = cfg.d_model;

    for (RegionId r : kRegions)
        m.pilor_w[size_t(r)] =
            m.params.add(Tensor::zeros({d, d}), std::string("pilor.") + region_name(r));
    m.mask_embed = m.params.add(Tensor::randn({1, d}, rng, 0.1), "mask_embed");
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
        blk.spatial = make_attn_layer(m.params, rng, base + ".sp", d);
        blk.temporal = make_attn_layer(m.params, rng, base + ".tm", d);
        blk.cross = make_attn_layer(m.params, rng, base + ".ca", d);
        blk.ffn = make_ffn_layer(m.params, rng, base + ".ffn", d, cfg.ffn_mult);
        m.blocks.push_back(std::move(blk));
    }
    m.final_ln_g = m.params.add(Tensor::full({1, d}, 1.0), "final_ln.g");
    m.final_ln_b = m.params.add(Tensor::zeros({1, d}), "final_ln.b");
    for (RegionId r : kRegions) {
        const std::string base = std::string("cls.") + region_name(r);
        Tensor w = experts ? (*experts)[size_t(r)].cls_w->value
                           : randn_scaled(rng, {cfg.vocab, d}, double(d));
        Tensor bb = experts ? (*experts)[size_t(r)].cls_b->value : Tensor::zeros({1, cfg.vocab});
        if (w.rows() != cfg.vocab || w.cols() != d)
            throw std::invalid_argument("fuse: classifier shape mismatch with experts");
        m.cls_w[size_t(r)] = m.params.add(std::move(w), base + ".w");
        m.cls_b[size_t(r)] = m.params.add(std::move(bb), base + ".b");
    }
    return m;
}

Var FusionModel::pilor_adapt(RegionId r, const Var& h) const {
    return ag::add(h, ag::linear(h, pilor_w[size_t(r)], Var()));
}

namespace {

// attention masks over the time-major interleaved layout (row = t*R + r)
ag::AttnMask spatial_mask(size_t t_len) {
    ag::AttnMask m;
    m.tq = m.tk = t_len * kNumRegions;
    m.allow.assign(m.tq * m.tk, 0);
    for (size_t t = 0; t < t_len; ++t)
        for (size_t a = 0; a < kNumRegions; ++a)
            for (size_t b = 0; b < kNumRegions; ++b)
                m.allow[(t * kNumRegions + a) * m.tk + (t * kNumRegions + b)] = 1;
    return m;
}

ag::AttnMask temporal_mask(size_t t_len, size_t window) {
    ag::AttnMask m;
    m.tq = m.tk = t_len * kNumRegions;
    m.allow.assign(m.tq * m.tk, 0);
    for (size_t ti = 0; ti < t_len; ++ti)
        for (size_t tj = 0; tj <= ti; ++tj) {
            if (ti - tj >= window) continue;
            for (size_t r = 0; r < kNumRegions; ++r)
                m.allow[(ti * kNumRegions + r) * m.tk + (tj * kNumRegions + r)] = 1;
        }
    return m;
}

ag::AttnMask cross_mask(size_t t_len, size_t window) {
    ag::AttnMask m;
    m.tq = t_len * kNumRegions;
    m.tk = t_len;
    m.allow.assign(m.tq * m.tk, 0);
    for (size_t ti = 0; ti < t_len; ++ti)
        for (size_t s = 0; s <= ti; ++s) {
            if (ti - s >= window) continue;
            for (size_t r = 0; r < kNumRegions; ++r)
                m.allow[(ti * kNumRegions + r) * m.tk + s] = 1;
        }
    return m;
}

}  // namespace

FusionModel::Forward FusionModel::forward(const std::array<ag::Var, kNumRegions>& hiddens,
                                          const std::vector<uint8_t>& mask_bits,
                                          const ag::Var& audio_tokens,
                                          const std::vector<size_t>& symbols, bool drop_audio,
                                          bool drop_symbols, size_t start_pos) const {
    const size_t t_len = hiddens[0]->value.rows();
    const size_t d = cfg.d_model;
    for (const auto& h : hiddens)
        if (h->value.rows() != t_len || h->value.cols() != d)
            throw std::invalid_argument("fuse forward: hidden shape mismatch");
    if (audio_tokens->value.rows() != t_len)
        throw std::invalid_argument("fuse forward: audio length mismatch");
    if (!mask_bits.empty() && mask_bits.size() != t_len * kNumRegions)
        throw std::invalid_argument("fuse forward: mask size mismatch");
    if (symbols.size() != t_len) throw std::invalid_argument("fuse forward: symbol length");

    // adapt and interleave time-major: row t*R + r
    std::array<Var, kNumRegions> adapted;
    for (RegionId r : kRegions) adapted[size_t(r)] = pilor_adapt(r, hiddens[size_t(r)]);
    Var all = ag::concat_rows(ag::concat_rows(adapted[0], adapted[1]),
                              ag::concat_rows(adapted[2], adapted[3]));
    std::vector<size_t> interleave(t_len * kNumRegions);
    for (size_t t = 0; t < t_len; ++t)
        for (size_t r = 0; r < kNumRegions; ++r)
            interleave[t * kNumRegions + r] = r * t_len + t;
    Var x = ag::gather_rows(all, interleave);

    if (!mask_bits.empty()) {
        // region-major plan bits -> time-major row mask
        std::vector<uint8_t> row_mask(t_len * kNumRegions, 0);
        for (size_t r = 0; r < kNumRegions; ++r)
            for (size_t t = 0; t < t_len; ++t)
                row_mask[t * kNumRegions + r] = mask_bits[r * t_len + t];
        x = ag::select_rows(x, mask_embed, row_mask);
    }

    Var audio_part =
        drop_audio ? ag::select_rows(audio_tokens, null_audio, std::vector<uint8_t>(t_len, 1))
                   : audio_tokens;
    std::vector<size_t> sym_idx(t_len, 0);
    if (!drop_symbols)
        for (size_t i = 0; i < t_len; ++i) sym_idx[i] = symbols[i];
    Var cond = ag::add(audio_part, ag::embedding(sym_embed, sym_idx));
    cond = ag::layernorm(ag::linear(cond, audio_in_w, audio_in_b), cond_ln_g, cond_ln_b);

    std::vector<double> row_pos(t_len * kNumRegions), audio_pos(t_len);
    for (size_t t = 0; t < t_len; ++t) {
        audio_pos[t] = double(start_pos + t);
        for (size_t r = 0; r < kNumRegions; ++r) row_pos[t * kNumRegions + r] = double(start_pos + t);
    }
    const size_t hd = d / cfg.n_heads;
    const auto sp_mask = spatial_mask(t_len);
    const auto tm_mask = temporal_mask(t_len, cfg.window);
    const auto cr_mask = cross_mask(t_len, cfg.window);
    const auto order = cfg.parsed_order();

    for (const Block& blk : blocks) {
        for (FuseLayerKind kind : order) {
            const AttnLayer& a = kind == FuseLayerKind::spatial    ? blk.spatial
                                 : kind == FuseLayerKind::temporal ? blk.temporal
                                                                   : blk.cross;
            Var xn = ag::layernorm(x, a.ln_g, a.ln_b);
            Var attn;
            if (kind == FuseLayerKind::spatial) {
                // all positions inside one step share a rotary angle; skip it
                Var q = ag::linear(xn, a.wq, Var());
                Var k = ag::linear(xn, a.wk, Var());
                Var v = ag::linear(xn, a.wv, Var());
                attn = ag::masked_attention(q, k, v, sp_mask, cfg.n_heads);
            } else if (kind == FuseLayerKind::temporal) {
                Var q = ag::rotary(ag::linear(xn, a.wq, Var()), row_pos, hd);
                Var k = ag::rotary(ag::linear(xn, a.wk, Var()), row_pos, hd);
                Var v = ag::linear(xn, a.wv, Var());
                attn = ag::masked_attention(q, k, v, tm_mask, cfg.n_heads);
            } else {
                Var q = ag::rotary(ag::linear(xn, a.wq, Var()), row_pos, hd);
                Var k = ag::rotary(ag::linear(cond, a.wk, Var()), audio_pos, hd);
                Var v = ag::linear(cond, a.wv, Var());
                attn = ag::masked_attention(q, k, v, cr_mask, cfg.n_heads);
            }
            x = ag::add(x, ag::linear(attn, a.wo, Var()));
        }
        Var xn = ag::layernorm(x, blk.ffn.ln_g, blk.ffn.ln_b);
        x = ag::add(x, ag::linear(ag::gelu(ag::linear(xn, blk.ffn.w1, blk.ffn.b1)), blk.ffn.w2,
                                  blk.ffn.b2));
    }

    Var h = ag::layernorm(x, final_ln_g, final_ln_b);
    Forward out;
    for (size_t r = 0; r < kNumRegions; ++r) {
        std::vector<size_t> rows(t_len);
        for (size_t t = 0; t < t_len; ++t) rows[t] = t * kNumRegions + r;
        out.logits[r] = ag::linear(ag::gather_rows(h, rows), cls_w[r], cls_b[r]);
    }
    return out;
}

NamedArrays FusionModel::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "fusion";
    a.meta["vocab"] = cfg.vocab;
    a.meta["d_model"] = cfg.d_model;
    a.meta["n_heads"] = cfg.n_heads;
    a.meta["blocks"] = cfg.blocks;
    a.meta["window"] = cfg.window;
    a.meta["d_audio"] = cfg.d_audio;
    a.meta["n_symbols"] = cfg.n_symbols;
    a.meta["ffn_mult"] = cfg.ffn_mult;
    a.meta["p_cf"] = cfg.p_cf;
    a.meta["lambda_ugm_max"] = cfg.lambda_ugm_max;
    a.meta["p_region_max"] = cfg.p_region_max;
    a.meta["layer_order"] = cfg.layer_order;
    for (const auto& p : params.params) a.add(p->name, p->value);
    return a;
}

FusionModel FusionModel::from_arrays(const NamedArrays& a) {
    FuseConfig cfg;
    cfg.vocab = a.meta.at("vocab").get<size_t>();
    cfg.d_model = a.meta.at("d_model").get<size_t>();
    cfg.n_heads = a.meta.at("n_heads").get<size_t>();
    cfg.blocks = a.meta.at("blocks").get<size_t>();
    cfg.window = a.meta.at("window").get<size_t>();
    cfg.d_audio = a.meta.at("d_audio").get<size_t>();
    cfg.n_symbols = a.meta.at("n_symbols").get<size_t>();
    cfg.ffn_mult = a.meta.at("ffn_mult").get<size_t>();
    cfg.p_cf = a.meta.at("p_cf").get<double>();
    cfg.lambda_ugm_max = a.meta.at("lambda_ugm_max").get<double>();
    cfg.p_region_max = a.meta.at("p_region_max").get<double>();
    cfg.layer_order = a.meta.at("layer_order").get<std::string>();
    FusionModel m = init(cfg, 0, nullptr);
    for (auto& p : m.params.params) {
        const Tensor& t = a.require(p->name);
        if (t.shape != p->value.shape)
            throw std::runtime_error("fusion checkpoint shape mismatch: " + p->name);
        p->value = t;
    }
    return m;
}

// ---------------------------------------------------------------------------
// masking / guidance primitives
// ---------------------------------------------------------------------------

double cosine_schedule(size_t s, size_t total_steps, double lambda_max) {
    if (total_steps == 0) throw std::invalid_argument("cosine_schedule: total steps must be > 0");
    if (s > total_steps) throw std::invalid_argument("cosine_schedule: step beyond total");
    return lambda_max * (1.0 - std::cos(M_PI * double(s) / double(total_steps))) / 2.0;
}

size_t MaskPlan::count() const {
    size_t n = 0;
    for (uint8_t b : bits) n += b;
    return n;
}

MaskPlan MaskPlan::none(size_t t_len) {
    MaskPlan p;
    p.t_len = t_len;
    p.bits.assign(kNumRegions * t_len, 0);
    return p;
}

MaskPlan ugm_mask(const Tensor& confidences, double ratio, size_t m_max, Rng& /*rng*/) {
    if (confidences.rows() != kNumRegions)
        throw std::invalid_argument("ugm_mask: confidences must be [R x T]");
    if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("ugm_mask: ratio outside [0,1]");
    const size_t t_len = confidences.cols();
    MaskPlan plan = MaskPlan::none(t_len);

    size_t m_eff = size_t(ratio * double(m_max));
    const size_t positions = kNumRegions * t_len;
    if (m_eff > positions) {
        std::fprintf(stderr, "warning: ugm_mask clamping M_eff %zu to %zu positions\n", m_eff,
                     positions);
        m_eff = positions;
    }
    if (m_eff == 0) return plan;

    // (confidence, region, time), ascending; ties resolve to lowest (r, t)
    std::vector<size_t> idx(positions);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        const double ca = confidences.data[a], cb = confidences.data[b];
        if (ca != cb) return ca < cb;
        return a < b;  // region-major layout = (region, time) lexicographic
    });
    for (size_t i = 0; i < m_eff; ++i) plan.bits[idx[i]] = 1;
    return plan;
}

std::optional<RegionId> region_mask(Rng& rng, double p_max) {
    const double p = rng.uniform(0.0, p_max);
    if (!rng.bernoulli(p)) return std::nullopt;
    return kRegions[rng.uniform_int(kNumRegions)];
}

ag::Var fuse_loss(const std::array<ag::Var, kNumRegions>& logits,
                  const std::array<std::vector<size_t>, kNumRegions>& targets,
                  const MaskPlan& plan) {
    const size_t total = plan.count();
    if (total == 0) {
        std::fprintf(stderr, "warning: fuse_loss over an empty mask; returning 0\n");
        return ag::constant(Tensor({1}, {0.0}));
    }
    Var loss;
    for (size_t r = 0; r < kNumRegions; ++r) {
        std::vector<uint8_t> select(plan.t_len);
        size_t count_r = 0;
        for (size_t t = 0; t < plan.t_len; ++t) {
            select[t] = plan.bits[r * plan.t_len + t];
            count_r += select[t];
        }
        if (count_r == 0) continue;
        Var ce = ag::softmax_cross_entropy(logits[r], targets[r], select);
        Var weighted = ag::scale(ce, double(count_r) / double(total));
        loss = loss ? ag::add(loss, weighted) : weighted;
    }
    return loss;
}

std::vector<double> cfg_combine(const std::vector<double>& l_uncond,
                                const std::vector<double>& l_cond, double gamma) {
    if (l_uncond.size() != l_cond.size())
        throw std::invalid_argument("cfg_combine: shape mismatch");
    if (gamma < 1.0)
        std::fprintf(stderr, "warning: guidance scale %.3f below 1 (paper uses gamma >= 1)\n",
                     gamma);
    if (gamma == 1.0) return l_cond;  // exact affine identity
    std::vector<double> out(l_cond.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = l_uncond[i] + gamma * (l_cond[i] - l_uncond[i]);
    return out;
}

size_t sample_token(const std::vector<double>& logits, Rng& rng, double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("sample_token: temperature must be > 0");
    double mx = -HUGE_VAL;
    for (double v : logits) {
        if (!std::isfinite(v)) throw std::runtime_error("sample_token: non-finite logits");
        mx = std::max(mx, v);
    }
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp((logits[i] - mx) / temperature);
        z += p[i];
    }
    const double u = rng.uniform() * z;
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return i;
    }
    return p.size() - 1;
}

// ---------------------------------------------------------------------------
// incremental inference
// ---------------------------------------------------------------------------

FusionState fusion_open(const FusionModel& m) {
    FusionState st;
    st.model_fingerprint = m.weights_fingerprint();
    return st;
}

void fusion_advance(const FusionModel& m, FusionState& st,
                    const std::array<const double*, kNumRegions>& hiddens,
                    const double* audio_token, size_t symbol, bool verify) {
    if (verify && st.model_fingerprint != m.weights_fingerprint())
        throw std::runtime_error("fusion state does not belong to this model");
    for (size_t r = 0; r < kNumRegions; ++r) {
        st.hidden_ring[r].emplace_back(hiddens[r], hiddens[r] + m.cfg.d_model);
        if (st.hidden_ring[r].size() > m.cfg.window) st.hidden_ring[r].erase(st.hidden_ring[r].begin());
    }
    std::vector<double> cond(m.cfg.d_audio);
    if (audio_token)
        std::copy(audio_token, audio_token + m.cfg.d_audio, cond.begin());
    else
        std::copy(m.null_audio->value.data.begin(), m.null_audio->value.data.end(), cond.begin());
    st.cond_ring.push_back(std::move(cond));
    st.sym_ring.push_back(symbol);
    if (st.cond_ring.size() > m.cfg.window) {
        st.cond_ring.erase(st.cond_ring.begin());
        st.sym_ring.erase(st.sym_ring.begin());
    }
    ++st.step;
}

FuseStepOut fusion_eval(const FusionModel& m, const FusionState& st, bool conditioned,
                        bool verify) {
    if (verify && st.model_fingerprint != m.weights_fingerprint())
        throw std::runtime_error("fusion state does not belong to this model");
    if (st.step == 0) throw std::runtime_error("fusion_eval: advance the state first");
    const size_t rows = st.cond_ring.size();
    std::array<Var, kNumRegions> hiddens;
    for (size_t r = 0; r < kNumRegions; ++r) {
        Tensor h({rows, m.cfg.d_model});
        for (size_t i = 0; i < rows; ++i)
            std::copy(st.hidden_ring[r][i].begin(), st.hidden_ring[r][i].end(), h.row_ptr(i));
        hiddens[r] = ag::constant(std::move(h));
    }
    Tensor audio({rows, m.cfg.d_audio});
    for (size_t i = 0; i < rows; ++i)
        std::copy(st.cond_ring[i].begin(), st.cond_ring[i].end(), audio.row_ptr(i));
    std::vector<size_t> symbols(st.sym_ring.begin(), st.sym_ring.end());

    auto fwd = m.forward(hiddens, {}, ag::constant(audio), symbols, !conditioned, !conditioned,
                         st.step - rows);
    FuseStepOut out;
    for (size_t r = 0; r < kNumRegions; ++r)
        out.logits[r].assign(fwd.logits[r]->value.row_ptr(rows - 1),
                             fwd.logits[r]->value.row_ptr(rows - 1) + m.cfg.vocab);
    return out;
}

NamedArrays FusionState::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "fusion_state";
    a.meta["model_fingerprint"] = model_fingerprint;
    a.meta["step"] = step;
    for (size_t r = 0; r < kNumRegions; ++r) {
        const auto& ring = hidden_ring[r];
        const size_t d = ring.empty() ? 0 : ring[0].size();
        Tensor h({ring.size(), d});
        for (size_t i = 0; i < ring.size(); ++i)
            std::copy(ring[i].begin(), ring[i].end(), h.row_ptr(i));
        a.add(std::string("hidden.") + region_name(RegionId(r)), h);
    }
    const size_t d = cond_ring.empty() ? 0 : cond_ring[0].size();
    Tensor c({cond_ring.size(), d});
    for (size_t i = 0; i < cond_ring.size(); ++i)
        std::copy(cond_ring[i].begin(), cond_ring[i].end(), c.row_ptr(i));
    a.add("cond", c);
    Tensor sym({sym_ring.size()});
    for (size_t i = 0; i < sym_ring.size(); ++i) sym.data[i] = double(sym_ring[i]);
    a.add("symbols", sym);
    return a;
}

FusionState FusionState::from_arrays(const NamedArrays& a) {
    FusionState st;
    st.model_fingerprint = a.meta.at("model_fingerprint").get<uint64_t>();
    st.step = a.meta.at("step").get<size_t>();
    for (size_t r = 0; r < kNumRegions; ++r) {
        const Tensor& h = a.require(std::string("hidden.") + region_name(RegionId(r)));
        for (size_t i = 0; i < h.rows(); ++i)
            st.hidden_ring[r].emplace_back(h.row_ptr(i), h.row_ptr(i) + h.cols());
    }
    const Tensor& c = a.require("cond");
    for (size_t i = 0; i < c.rows(); ++i)
        st.cond_ring.emplace_back(c.row_ptr(i), c.row_ptr(i) + c.cols());
    for (double v : a.require("symbols").data) st.sym_ring.push_back(size_t(v));
    return st;
}

size_t FusionState::state_bytes() const {
    size_t n = sizeof(*this);
    for (const auto& ring : hidden_ring)
        for (const auto& r : ring) n += r.size() * sizeof(double);
    for (const auto& r : cond_ring) n += r.size() * sizeof(double);
    n += sym_ring.size() * sizeof(size_t);
    return n;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

struct FuseWindow {
    std::array<Tensor, kNumRegions> hidden_cond, hidden_uncond;
    std::array<std::vector<size_t>, kNumRegions> targets;
    Tensor audio;
    std::vector<size_t> symbols;
    size_t start_pos = 0;
    double l_local = 0.0;  // frozen-expert CE on this window, monitoring only
};

std::vector<FuseWindow> precompute_windows(const SequenceDataset& data,
                                           const std::array<ExpertModel, kNumRegions>& experts,
                                           const AudioEncoder& enc, size_t seq_len) {
    std::vector<FuseWindow> out;
    for (size_t sess = 0; sess < data.mel_frames.size(); ++sess) {
        const size_t steps = data.steps(sess);
        for (size_t o = 0; o + seq_len <= steps; o += seq_len) {
            FuseWindow w;
            w.start_pos = o;
            Tensor mel_win({seq_len * 16, data.mel_frames[sess].cols()});
            std::copy(data.mel_frames[sess].row_ptr(o * 16),
                      data.mel_frames[sess].row_ptr(o * 16) + ptrdiff_t(mel_win.numel()),
                      mel_win.data.begin());
            w.audio = enc.encode_value(mel_win);
            w.symbols.assign(data.symbols[sess].begin() + ptrdiff_t(o),
                             data.symbols[sess].begin() + ptrdiff_t(o + seq_len));

            double l_local_sum = 0.0;
            for (RegionId r : kRegions) {
                const auto& stream = data.tokens[size_t(r)][sess];
                w.targets[size_t(r)].assign(stream.begin() + ptrdiff_t(o),
                                            stream.begin() + ptrdiff_t(o + seq_len));
                const bool with_bos = o == 0;
                std::vector<size_t> inputs;
                if (with_bos)
                    inputs.assign(stream.begin(), stream.begin() + ptrdiff_t(seq_len - 1));
                else
                    inputs.assign(stream.begin() + ptrdiff_t(o - 1),
                                  stream.begin() + ptrdiff_t(o + seq_len - 1));
                const ExpertModel& m = experts[size_t(r)];
                auto cond = m.forward(inputs, with_bos, ag::constant(w.audio), w.symbols, false,
                                      false, o, nullptr);
                auto uncond = m.forward(inputs, with_bos, ag::constant(w.audio), w.symbols, true,
                                        true, o, nullptr);
                w.hidden_cond[size_t(r)] = cond.hidden->value;
                w.hidden_uncond[size_t(r)] = uncond.hidden->value;
                l_local_sum +=
                    ag::softmax_cross_entropy(cond.logits, w.targets[size_t(r)])->value.data[0];
            }
            w.l_local = l_local_sum;
            out.push_back(std::move(w));
        }
    }
    return out;
}

}  // namespace

FuseTrainResult train_fuse(const SequenceDataset& data,
                           const std::array<ExpertModel, kNumRegions>& experts,
                           const AudioEncoder& audio_enc, const FuseConfig& cfg,
                           const FuseTrainOpts& opts) {
    std::array<uint64_t, kNumRegions> expert_fps;
    for (size_t r = 0; r < kNumRegions; ++r) expert_fps[r] = experts[r].weights_fingerprint();
    const uint64_t enc_fp = audio_enc.weights_fingerprint();

    FuseTrainResult result;
    result.model = FusionModel::init(cfg, opts.seed, &experts);
    FusionModel& m = result.model;

    auto windows = precompute_windows(data, experts, audio_enc, opts.seq_len);
    if (windows.empty()) throw std::invalid_argument("train_fuse: no training windows");

    ag::Adam opt(opts.lr);
    Rng rng(opts.seed ^ 0xf1e1dULL);
    const size_t total_steps = opts.epochs * opts.steps_per_epoch;
    size_t global_step = 0;

    for (size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const double c =
            opts.epochs > 1 ? 0.5 * (1.0 + std::cos(M_PI * double(epoch) / double(opts.epochs - 1)))
                            : 1.0;
        opt.lr = opts.lr * (0.05 + 0.95 * c);
        for (size_t step = 0; step < opts.steps_per_epoch; ++step, ++global_step) {
            const double lambda = cosine_schedule(global_step, total_steps, cfg.lambda_ugm_max);
            m.params.zero_grad();
            Var total;
            FuseTrainStepLog log;
            log.lambda_ugr = lambda;
            double local_sum = 0.0;

            for (size_t item = 0; item < opts.batch; ++item) {
                const FuseWindow& w = windows[rng.uniform_int(windows.size())];
                const bool drop_audio = rng.bernoulli(cfg.p_cf);
                const bool drop_sym = rng.bernoulli(cfg.p_cf);
                const auto& hid = drop_audio ? w.hidden_uncond : w.hidden_cond;
                std::array<Var, kNumRegions> hvars;
                for (size_t r = 0; r < kNumRegions; ++r) hvars[r] = ag::constant(hid[r]);
                Var audio = ag::constant(w.audio);

                // confidences from the current model on clean inputs
                Tensor conf({kNumRegions, opts.seq_len});
                {
                    auto probe = m.forward(hvars, {}, audio, w.symbols, drop_audio, drop_sym,
                                           w.start_pos);
                    for (size_t r = 0; r < kNumRegions; ++r) {
                        const Tensor& lg = probe.logits[r]->value;
                        for (size_t t = 0; t < opts.seq_len; ++t) {
                            const double* row = lg.row_ptr(t);
                            double mx = row[0];
                            for (size_t k = 1; k < cfg.vocab; ++k) mx = std::max(mx, row[k]);
                            double z = 0.0;
                            for (size_t k = 0; k < cfg.vocab; ++k) z += std::exp(row[k] - mx);
                            conf.at(r, t) =
                                std::exp(row[w.targets[r][t]] - mx) / z;
                        }
                    }
                }
                const double ratio = rng.uniform(0.0, lambda);
                MaskPlan plan = ugm_mask(conf, ratio, kNumRegions * opts.seq_len, rng);
                if (auto dropped = region_mask(rng, cfg.p_region_max)) {
                    plan.dropped = dropped;
                    for (size_t t = 0; t < opts.seq_len; ++t) plan.set(*dropped, t);
                }
                log.mask_count += plan.count();

                if (plan.count() == 0) continue;  // nothing to learn from this draw
                auto fwd = m.forward(hvars, plan.bits, audio, w.symbols, drop_audio, drop_sym,
                                     w.start_pos);
                Var loss = fuse_loss(fwd.logits, w.targets, plan);
                total = total ? ag::add(total, loss) : loss;
                local_sum += w.l_local;
            }
            if (!total) {
                result.steps.push_back(log);
                continue;
            }
            total = ag::scale(total, 1.0 / double(opts.batch));
            if (!std::isfinite(total->value.data[0]))
                throw std::runtime_error("train_fuse: loss diverged (non-finite)");
            ag::backward(total);
            opt.step(m.params);

            log.l_fuse = total->value.data[0];
            log.l_local = local_sum / double(opts.batch);
            log.l_ar = opts.lambda_local * log.l_local + opts.lambda_fuse * log.l_fuse;
            result.steps.push_back(log);
        }
    }

    for (size_t r = 0; r < kNumRegions; ++r)
        if (experts[r].weights_fingerprint() != expert_fps[r])
            throw std::runtime_error("train_fuse: frozen expert weights drifted");
    if (audio_enc.weights_fingerprint() != enc_fp)
        throw std::runtime_error("train_fuse: frozen audio encoder drifted");
    return result;
}

double fuse_nll(const FusionModel& m, const std::array<ExpertModel, kNumRegions>& experts,
                const AudioEncoder& enc, const SequenceDataset& data, size_t seq_len,
                std::optional<RegionId> masked_region, bool conditioned) {
    auto windows = precompute_windows(data, experts, enc, seq_len);
    double acc = 0.0;
    size_t count = 0;
    for (const auto& w : windows) {
        std::array<Var, kNumRegions> hvars;
        const auto& hid = conditioned ? w.hidden_cond : w.hidden_uncond;
        for (size_t r = 0; r < kNumRegions; ++r) hvars[r] = ag::constant(hid[r]);
        MaskPlan plan = MaskPlan::none(seq_len);
        if (masked_region)
            for (size_t t = 0; t < seq_len; ++t) plan.set(*masked_region, t);
        auto fwd = m.forward(hvars, masked_region ? plan.bits : std::vector<uint8_t>{},
                             ag::constant(w.audio), w.symbols, !conditioned, !conditioned,
                             w.start_pos);
        if (masked_region) {
            Var loss = fuse_loss(fwd.logits, w.targets, plan);
            acc += loss->value.data[0] * double(plan.count());
            count += plan.count();
        } else {
            for (size_t r = 0; r < kNumRegions; ++r) {
                Var loss = ag::softmax_cross_entropy(fwd.logits[r], w.targets[r]);
                acc += loss->value.data[0] * double(seq_len);
                count += seq_len;
            }
        }
    }
    return acc / double(count);
}

}  // namespace gest
