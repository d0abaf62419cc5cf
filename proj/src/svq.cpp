#include "gest/svq.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "gest/kernels.hpp"
#include "gest/streamops.hpp"

namespace gest {

using ag::Var;

namespace {

Tensor randn_scaled(Rng& rng, std::vector<size_t> shape, double fan_in) {
    Tensor t = Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(std::max(fan_in, 1.0)));
    return t;
}

ConvLayer make_conv(ag::ParamSet& ps, Rng& rng, const std::string& name, size_t cout, size_t cin,
                    size_t k, size_t dil, size_t stride, ag::Pad pad) {
    ConvLayer c;
    c.k = k;
    c.dil = dil;
    c.stride = stride;
    c.pad = pad;
    c.w = ps.add(randn_scaled(rng, {cout, k * cin}, double(k * cin)), name + ".w");
    c.b = ps.add(Tensor::zeros({1, cout}), name + ".b");
    return c;
}

Var apply_conv(const ConvLayer& c, const Var& x) {
    return ag::conv1d(x, c.w, c.b, c.k, c.dil, c.stride, c.pad);
}

Var apply_res(const ResBlock& rb, Var x) {
    for (const auto& layer : rb.layers) x = ag::add(x, apply_conv(layer, ag::gelu(x)));
    return x;
}

ResBlock make_res(ag::ParamSet& ps, Rng& rng, const std::string& name, size_t ch, size_t layers,
                  ag::Pad pad) {
    ResBlock rb;
    for (size_t i = 0; i < layers; ++i) {
        const size_t dil = size_t(1) << i;  // 1, 2, 4, ...
        rb.layers.push_back(
            make_conv(ps, rng, name + ".l" + std::to_string(i), ch, ch, 3, dil, 1, pad));
    }
    return rb;
}

}  // namespace

// ---------------------------------------------------------------------------
// autoencoder
// ---------------------------------------------------------------------------

StreamAutoencoder StreamAutoencoder::init(const SvqConfig& cfg, uint64_t seed) {
    StreamAutoencoder ae;
    ae.cfg = cfg;
    Rng rng(seed);

    ae.enc_stem = make_conv(ae.params, rng, "enc.stem", cfg.hidden, cfg.pose_dim, 3, 1, 1,
                            ag::Pad::same);
    for (size_t s = 0; s < 2; ++s) {
        ae.enc_down[s] = make_conv(ae.params, rng, "enc.down" + std::to_string(s), cfg.hidden,
                                   cfg.hidden, 4, 1, 2, ag::Pad::same);
        ae.enc_res[s] = make_res(ae.params, rng, "enc.res" + std::to_string(s), cfg.hidden,
                                 cfg.res_layers, ag::Pad::same);
    }
    ae.enc_head_w = ae.params.add(randn_scaled(rng, {cfg.latent_dim, cfg.hidden}, double(cfg.hidden)),
                                  "enc.head.w");
    ae.enc_head_b = ae.params.add(Tensor::zeros({1, cfg.latent_dim}), "enc.head.b");

    ae.dec_in_w = ae.params.add(
        randn_scaled(rng, {cfg.hidden, cfg.latent_dim}, double(cfg.latent_dim)), "dec.in.w");
    ae.dec_in_b = ae.params.add(Tensor::zeros({1, cfg.hidden}), "dec.in.b");
    for (size_t s = 0; s < 2; ++s)
        ae.dec_res[s] = make_res(ae.params, rng, "dec.res" + std::to_string(s), cfg.hidden,
                                 cfg.res_layers, ag::Pad::causal);
    ae.dec_out = make_conv(ae.params, rng, "dec.out", cfg.pose_dim, cfg.hidden, 3, 1, 1,
                           ag::Pad::causal);
    return ae;
}

Var StreamAutoencoder::encode(const Var& window) const {
    if (window.get() == nullptr) throw std::invalid_argument("encode: null input");
    if (window->value.cols() != cfg.pose_dim)
        throw std::invalid_argument("encode: channel mismatch");
    if (window->value.rows() % kDownsample != 0)
        throw std::invalid_argument("encode: window length must be divisible by 4");
    Var x = ag::gelu(apply_conv(enc_stem, window));
    for (size_t s = 0; s < 2; ++s) {
        x = apply_conv(enc_down[s], x);
        x = apply_res(enc_res[s], x);
    }
    return ag::linear(x, enc_head_w, enc_head_b);
}

Var StreamAutoencoder::decode(const Var& latents) const {
    if (latents->value.cols() != cfg.latent_dim)
        throw std::invalid_argument("decode: latent dim mismatch");
    Var x = ag::linear(latents, dec_in_w, dec_in_b);
    for (size_t s = 0; s < 2; ++s) {
        x = ag::upsample_nn2(x);
        x = apply_res(dec_res[s], x);
    }
    return apply_conv(dec_out, x);
}

Tensor StreamAutoencoder::encode_value(const Tensor& window) const {
    return encode(ag::constant(window))->value;
}

Tensor StreamAutoencoder::decode_value(const Tensor& latents) const {
    return decode(ag::constant(latents))->value;
}

NamedArrays StreamAutoencoder::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "stream_autoencoder";
    a.meta["region"] = region_name(cfg.region);
    a.meta["pose_dim"] = cfg.pose_dim;
    a.meta["hidden"] = cfg.hidden;
    a.meta["latent_dim"] = cfg.latent_dim;
    a.meta["code_dim"] = cfg.code_dim;
    a.meta["codebook_size"] = cfg.codebook_size;
    a.meta["res_layers"] = cfg.res_layers;
    a.meta["ema_decay"] = cfg.ema_decay;
    for (const auto& p : params.params) a.add(p->name, p->value);
    return a;
}

StreamAutoencoder StreamAutoencoder::from_arrays(const NamedArrays& a) {
    SvqConfig cfg;
    cfg.region = region_from_name(a.meta.at("region").get<std::string>());
    cfg.pose_dim = a.meta.at("pose_dim").get<size_t>();
    cfg.hidden = a.meta.at("hidden").get<size_t>();
    cfg.latent_dim = a.meta.at("latent_dim").get<size_t>();
    cfg.code_dim = a.meta.at("code_dim").get<size_t>();
    cfg.codebook_size = a.meta.at("codebook_size").get<size_t>();
    cfg.res_layers = a.meta.at("res_layers").get<size_t>();
    cfg.ema_decay = a.meta.at("ema_decay").get<double>();
    StreamAutoencoder ae = init(cfg, 0);
    for (auto& p : ae.params.params) {
        const Tensor& t = a.require(p->name);
        if (t.shape != p->value.shape)
            throw std::runtime_error("checkpoint shape mismatch for " + p->name);
        p->value = t;
    }
    return ae;
}

// ---------------------------------------------------------------------------
// streaming decoder
// ---------------------------------------------------------------------------

namespace {

// Causal conv layers of the decoder in execution order: res blocks then out.
std::vector<const ConvLayer*> decoder_convs(const StreamAutoencoder& ae) {
    std::vector<const ConvLayer*> out;
    for (size_t s = 0; s < 2; ++s)
        for (const auto& l : ae.dec_res[s].layers) out.push_back(&l);
    out.push_back(&ae.dec_out);
    return out;
}

}  // namespace

DecoderState decoder_open(const StreamAutoencoder& ae) {
    DecoderState st;
    st.model_fingerprint = ae.weights_fingerprint();
    for (const ConvLayer* c : decoder_convs(ae)) {
        const size_t span = (c->k - 1) * c->dil;
        const size_t cin = c->w->value.cols() / c->k;
        st.conv_hist.emplace_back(span * cin, 0.0);
    }
    return st;
}

Tensor decoder_push(const StreamAutoencoder& ae, DecoderState& st, const Tensor& latents,
                    bool verify) {
    if (verify && st.model_fingerprint != ae.weights_fingerprint())
        throw std::runtime_error("decoder state does not belong to this model");
    if (latents.cols() != ae.cfg.latent_dim)
        throw std::invalid_argument("decoder_push: latent dim mismatch");
    const size_t hidden = ae.cfg.hidden;
    const auto convs = decoder_convs(ae);
    const size_t per_stage = ae.cfg.res_layers;

    Tensor out({latents.rows() * kDownsample, ae.cfg.pose_dim});
    std::vector<double> h(hidden), act(hidden), conv_out(std::max(hidden, ae.cfg.pose_dim));

    for (size_t step = 0; step < latents.rows(); ++step) {
        // in-projection at token rate, then two nearest-neighbor x2 stages
        kern::matvec(ae.dec_in_w->value.data.data(), latents.row_ptr(step), h.data(), hidden,
                     ae.cfg.latent_dim);
        kern::vadd(h.data(), ae.dec_in_b->value.data.data(), h.data(), hidden);

        std::vector<std::vector<double>> frames = {h, h};  // stage-0 rate: x2
        for (size_t s = 0; s < 2; ++s) {
            if (s == 1) {
                std::vector<std::vector<double>> up;
                up.reserve(frames.size() * 2);
                for (auto& f : frames) {
                    up.push_back(f);
                    up.push_back(f);
                }
                frames = std::move(up);
            }
            for (size_t li = 0; li < per_stage; ++li) {
                const ConvLayer& c = *convs[s * per_stage + li];
                auto& hist = st.conv_hist[s * per_stage + li];
                for (auto& f : frames) {
                    streamops::gelu_row(f.data(), act.data(), hidden);
                    streamops::conv_step(c, hist, act.data(), hidden, conv_out.data());
                    kern::vadd(f.data(), conv_out.data(), f.data(), hidden);
                }
            }
        }
        // output conv at frame rate
        auto& out_hist = st.conv_hist.back();
        for (size_t i = 0; i < frames.size(); ++i) {
            streamops::conv_step(ae.dec_out, out_hist, frames[i].data(), hidden,
                                 out.row_ptr(step * kDownsample + i));
        }
    }
    return out;
}

NamedArrays DecoderState::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "decoder_state";
    a.meta["model_fingerprint"] = model_fingerprint;
    for (size_t i = 0; i < conv_hist.size(); ++i)
        a.add("hist" + std::to_string(i), Tensor({conv_hist[i].size()}, conv_hist[i]));
    return a;
}

DecoderState DecoderState::from_arrays(const NamedArrays& a) {
    DecoderState st;
    st.model_fingerprint = a.meta.at("model_fingerprint").get<uint64_t>();
    for (size_t i = 0;; ++i) {
        const Tensor* t = a.find("hist" + std::to_string(i));
        if (!t) break;
        st.conv_hist.push_back(t->data);
    }
    return st;
}

// ---------------------------------------------------------------------------
// codebook
// ---------------------------------------------------------------------------

size_t Codebook::nearest(const double* z) const {
    return kern::argmin_sqdist(z, entries.data.data(), size(), dim(), nullptr);
}

double Codebook::utilization(double usage_floor) const {
    size_t used = 0;
    for (double n : ema_counts)
        if (n >= usage_floor) ++used;
    return double(used) / double(size());
}

QuantizeResult quantize(const Tensor& z_code, const Codebook& cb) {
    if (cb.size() == 0) throw std::invalid_argument("quantize: empty codebook");
    if (z_code.cols() != cb.dim()) throw std::invalid_argument("quantize: code dim mismatch");
    QuantizeResult out;
    out.tokens.resize(z_code.rows());
    out.dequantized = Tensor({z_code.rows(), cb.dim()});
    for (size_t t = 0; t < z_code.rows(); ++t) {
        const size_t k = cb.nearest(z_code.row_ptr(t));
        out.tokens[t] = k;
        std::copy(cb.entries.row_ptr(k), cb.entries.row_ptr(k) + cb.dim(),
                  out.dequantized.row_ptr(t));
    }
    return out;
}

void ema_update(Codebook& cb, const std::vector<size_t>& assignments,
                const Tensor& batch_latents) {
    if (assignments.size() != batch_latents.rows())
        throw std::invalid_argument("ema_update: assignment/latent mismatch");
    const size_t k = cb.size(), d = cb.dim();
    std::vector<double> counts(k, 0.0);
    Tensor sums({k, d});
    for (size_t t = 0; t < assignments.size(); ++t) {
        counts[assignments[t]] += 1.0;
        kern::vadd(sums.row_ptr(assignments[t]), batch_latents.row_ptr(t),
                   sums.row_ptr(assignments[t]), d);
    }
    const double g = cb.decay;
    for (size_t i = 0; i < k; ++i) {
        cb.ema_counts[i] = g * cb.ema_counts[i] + (1.0 - g) * counts[i];
        for (size_t c = 0; c < d; ++c)
            cb.ema_sums.at(i, c) = g * cb.ema_sums.at(i, c) + (1.0 - g) * sums.at(i, c);
        const double denom = std::max(cb.ema_counts[i], cb.eps);
        for (size_t c = 0; c < d; ++c) cb.entries.at(i, c) = cb.ema_sums.at(i, c) / denom;
    }
}

size_t reset_dead_codes(Codebook& cb, const Tensor& recent_latents, double usage_floor,
                        Rng& rng) {
    if (recent_latents.rows() == 0)
        throw std::invalid_argument("reset_dead_codes: no recent latents");
    size_t resets = 0;
    for (size_t i = 0; i < cb.size(); ++i) {
        if (cb.ema_counts[i] >= usage_floor) continue;
        const size_t pick = rng.uniform_int(recent_latents.rows());
        std::copy(recent_latents.row_ptr(pick), recent_latents.row_ptr(pick) + cb.dim(),
                  cb.entries.row_ptr(i));
        cb.ema_counts[i] = 1.0;
        std::copy(cb.entries.row_ptr(i), cb.entries.row_ptr(i) + cb.dim(), cb.ema_sums.row_ptr(i));
        ++resets;
    }
    return resets;
}

// ---------------------------------------------------------------------------
// tokenizer (stage-2 product)
// ---------------------------------------------------------------------------

SvqTokenizer SvqTokenizer::init(StreamAutoencoder ae, uint64_t seed) {
    SvqTokenizer tok;
    const SvqConfig& cfg = ae.cfg;
    Rng rng(seed ^ 0x5cfe11aaULL);

    // fixed map into the code space: lossless when the dims agree, otherwise a
    // seeded random projection (only codebook and head train in stage 2)
    if (cfg.code_dim == cfg.latent_dim) {
        tok.pre_proj = Tensor({cfg.code_dim, cfg.latent_dim});
        for (size_t i = 0; i < cfg.code_dim; ++i) tok.pre_proj.at(i, i) = 1.0;
    } else {
        tok.pre_proj = randn_scaled(rng, {cfg.code_dim, cfg.latent_dim}, double(cfg.latent_dim));
    }

    tok.codebook.decay = cfg.ema_decay;
    tok.codebook.eps = cfg.ema_eps;
    tok.codebook.entries = Tensor::randn({cfg.codebook_size, cfg.code_dim}, rng, 0.5);
    tok.codebook.ema_counts.assign(cfg.codebook_size, 1.0);
    tok.codebook.ema_sums = tok.codebook.entries;

    const size_t mlp_hidden = 2 * cfg.code_dim;
    // skip path starts as identity-or-random, the nonlinear branch at zero
    Tensor wl({cfg.latent_dim, cfg.code_dim});
    if (cfg.latent_dim == cfg.code_dim) {
        for (size_t i = 0; i < cfg.latent_dim; ++i) wl.at(i, i) = 1.0;
    } else {
        wl = randn_scaled(rng, {cfg.latent_dim, cfg.code_dim}, double(cfg.code_dim));
    }
    tok.head_wl = tok.head_params.add(std::move(wl), "head.wl");
    tok.head_bl = tok.head_params.add(Tensor::zeros({1, cfg.latent_dim}), "head.bl");
    tok.head_w1 = tok.head_params.add(
        randn_scaled(rng, {mlp_hidden, cfg.code_dim}, double(cfg.code_dim)), "head.w1");
    tok.head_b1 = tok.head_params.add(Tensor::zeros({1, mlp_hidden}), "head.b1");
    tok.head_w2 = tok.head_params.add(Tensor::zeros({cfg.latent_dim, mlp_hidden}), "head.w2");
    tok.head_b2 = tok.head_params.add(Tensor::zeros({1, cfg.latent_dim}), "head.b2");

    tok.ae = std::move(ae);
    return tok;
}

Tensor SvqTokenizer::pre_project(const Tensor& latents) const {
    Tensor out({latents.rows(), pre_proj.rows()});
    for (size_t t = 0; t < latents.rows(); ++t)
        kern::matvec(pre_proj.data.data(), latents.row_ptr(t), out.row_ptr(t), pre_proj.rows(),
                     pre_proj.cols());
    return out;
}

Var SvqTokenizer::project(const Var& dequantized) const {
    Var skip = ag::linear(dequantized, head_wl, head_bl);
    Var hidden = ag::gelu(ag::linear(dequantized, head_w1, head_b1));
    return ag::add(skip, ag::linear(hidden, head_w2, head_b2));
}

Tensor SvqTokenizer::project_value(const Tensor& dequantized) const {
    return project(ag::constant(dequantized))->value;
}

std::vector<size_t> SvqTokenizer::tokenize(const Tensor& poses_norm) const {
    const Tensor latents = ae.encode_value(poses_norm);
    return quantize(pre_project(latents), codebook).tokens;
}

Tensor SvqTokenizer::decode_tokens(const std::vector<size_t>& tokens) const {
    Tensor zhat({tokens.size(), codebook.dim()});
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= codebook.size()) throw std::invalid_argument("token index out of range");
        std::copy(codebook.entries.row_ptr(tokens[t]),
                  codebook.entries.row_ptr(tokens[t]) + codebook.dim(), zhat.row_ptr(t));
    }
    return ae.decode_value(project_value(zhat));
}

Tensor SvqTokenizer::decode_token_step(size_t token, DecoderState& st, bool verify) const {
    if (token >= codebook.size()) throw std::invalid_argument("token index out of range");
    Tensor zhat({1, codebook.dim()});
    std::copy(codebook.entries.row_ptr(token), codebook.entries.row_ptr(token) + codebook.dim(),
              zhat.row_ptr(0));
    return decoder_push(ae, st, project_value(zhat), verify);
}

NamedArrays SvqTokenizer::to_arrays() const {
    NamedArrays a = ae.to_arrays();
    a.meta["kind"] = "svq_tokenizer";
    a.add("pre_proj", pre_proj);
    a.add("codebook.entries", codebook.entries);
    a.add("codebook.counts", Tensor({codebook.ema_counts.size()}, codebook.ema_counts));
    a.add("codebook.sums", codebook.ema_sums);
    for (const auto& p : head_params.params) a.add(p->name, p->value);
    return a;
}

SvqTokenizer SvqTokenizer::from_arrays(const NamedArrays& a) {
    SvqTokenizer tok = init(StreamAutoencoder::from_arrays(a), 0);
    tok.pre_proj = a.require("pre_proj");
    tok.codebook.entries = a.require("codebook.entries");
    tok.codebook.ema_counts = a.require("codebook.counts").data;
    tok.codebook.ema_sums = a.require("codebook.sums");
    tok.codebook.decay = tok.ae.cfg.ema_decay;
    tok.codebook.eps = tok.ae.cfg.ema_eps;
    for (auto& p : tok.head_params.params) p->value = a.require(p->name);
    return tok;
}

Var straight_through(const Var& z, const Tensor& dequantized) {
    Tensor delta = dequantized;
    for (size_t i = 0; i < delta.numel(); ++i) delta.data[i] -= z->value.data[i];
    return ag::add(z, ag::constant(std::move(delta)));
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {
// cosine decay to 5% of the base rate; keeps late-epoch loss curves monotone
double epoch_lr(double base, size_t epoch, size_t epochs) {
    if (epochs <= 1) return base;
    const double c = 0.5 * (1.0 + std::cos(M_PI * double(epoch) / double(epochs - 1)));
    return base * (0.05 + 0.95 * c);
}
}  // namespace

StreamAutoencoder train_stage1(const std::vector<Tensor>& windows, const SvqConfig& cfg,
                               const SvqTrainOpts& opts, StageLog* log) {
    if (windows.empty()) throw std::invalid_argument("train_stage1: no windows");
    StreamAutoencoder ae = StreamAutoencoder::init(cfg, opts.seed);
    ag::Adam opt(opts.lr);
    Rng shuffle_rng(opts.seed ^ 0x7a1e5ULL);

    std::vector<size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);

    for (size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        opt.lr = epoch_lr(opts.lr, epoch, opts.epochs);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        double epoch_loss = 0.0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size(); start += opts.batch) {
            const size_t end = std::min(order.size(), start + opts.batch);
            ae.params.zero_grad();
            Var total;
            for (size_t i = start; i < end; ++i) {
                Var w = ag::constant(windows[order[i]]);
                Var loss = ag::l1_loss(ae.decode(ae.encode(w)), w);
                total = total ? ag::add(total, loss) : loss;
            }
            total = ag::scale(total, opts.lambda_ae / double(end - start));
            if (!std::isfinite(total->value.data[0]))
                throw std::runtime_error("train_stage1: loss diverged (non-finite) at epoch " +
                                         std::to_string(epoch));
            ag::backward(total);
            opt.step(ae.params);
            epoch_loss += total->value.data[0];
            ++batches;
        }
        if (log) log->epoch_losses.push_back(epoch_loss / double(batches));
    }
    return ae;
}

SvqTokenizer train_stage2(const std::vector<Tensor>& windows, StreamAutoencoder frozen_ae,
                          const SvqTrainOpts& opts, StageLog* log) {
    if (windows.empty()) throw std::invalid_argument("train_stage2: no windows");
    const uint64_t frozen_before = frozen_ae.weights_fingerprint();
    SvqTokenizer tok = SvqTokenizer::init(std::move(frozen_ae), opts.seed);

    // frozen-encoder latents are fixed; compute once
    std::vector<Tensor> z_codes;
    z_codes.reserve(windows.size());
    for (const auto& w : windows) z_codes.push_back(tok.pre_project(tok.ae.encode_value(w)));

    // data-dependent codebook init: seeded sample of latent rows
    {
        Rng init_rng(opts.seed ^ 0xc0deb00cULL);
        const size_t k = tok.codebook.size();
        for (size_t i = 0; i < k; ++i) {
            const Tensor& z = z_codes[init_rng.uniform_int(z_codes.size())];
            const size_t row = init_rng.uniform_int(z.rows());
            std::copy(z.row_ptr(row), z.row_ptr(row) + z.cols(), tok.codebook.entries.row_ptr(i));
        }
        tok.codebook.ema_counts.assign(k, 1.0);
        tok.codebook.ema_sums = tok.codebook.entries;
    }

    ag::Adam opt(opts.lr);
    Rng shuffle_rng(opts.seed ^ 0x9b2f1ULL);
    Rng reset_rng(opts.seed ^ 0xdeadc0deULL);
    std::vector<size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);
    size_t step = 0;

    for (size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        opt.lr = epoch_lr(opts.lr, epoch, opts.epochs);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        double epoch_loss = 0.0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size(); start += opts.batch) {
            const size_t end = std::min(order.size(), start + opts.batch);
            tok.head_params.zero_grad();
            tok.ae.params.zero_grad();

            // batch latents for the EMA update
            size_t rows = 0;
            for (size_t i = start; i < end; ++i) rows += z_codes[order[i]].rows();
            Tensor batch_z({rows, tok.codebook.dim()});
            std::vector<size_t> batch_assign(rows);

            Var total;
            size_t cursor = 0;
            for (size_t i = start; i < end; ++i) {
                const Tensor& zc = z_codes[order[i]];
                QuantizeResult q = quantize(zc, tok.codebook);
                std::copy(zc.data.begin(), zc.data.end(), batch_z.row_ptr(cursor));
                std::copy(q.tokens.begin(), q.tokens.end(), batch_assign.begin() + cursor);
                cursor += zc.rows();

                Var recon = tok.ae.decode(tok.project(ag::constant(q.dequantized)));
                Var loss = ag::scale(ag::l1_loss(recon, ag::constant(windows[order[i]])),
                                     opts.lambda_rec);
                // commitment monitor: encoder side is frozen, no trainable path
                Var commit = ag::mse_loss(ag::constant(zc), ag::constant(q.dequantized));
                loss = ag::add(loss, ag::scale(commit, opts.lambda_cb));
                total = total ? ag::add(total, loss) : loss;
            }
            total = ag::scale(total, 1.0 / double(end - start));
            if (!std::isfinite(total->value.data[0]))
                throw std::runtime_error("train_stage2: loss diverged (non-finite)");
            ag::backward(total);
            opt.step(tok.head_params);

            ema_update(tok.codebook, batch_assign, batch_z);
            ++step;
            if (step % tok.ae.cfg.reset_interval == 0)
                reset_dead_codes(tok.codebook, batch_z, tok.ae.cfg.usage_floor, reset_rng);

            epoch_loss += total->value.data[0];
            ++batches;
        }
        if (log) log->epoch_losses.push_back(epoch_loss / double(batches));
    }

    if (tok.ae.weights_fingerprint() != frozen_before)
        throw std::runtime_error("train_stage2: frozen autoencoder weights drifted");
    if (log) log->final_utilization = tok.codebook.utilization(tok.ae.cfg.usage_floor);
    return tok;
}

double quantized_recon_l1(const SvqTokenizer& tok, const std::vector<Tensor>& windows) {
    double acc = 0.0;
    for (const auto& w : windows) {
        const Tensor rec = tok.decode_tokens(tok.tokenize(w));
        double err = 0.0;
        for (size_t i = 0; i < w.numel(); ++i) err += std::abs(rec.data[i] - w.data[i]);
        acc += err / double(w.numel());
    }
    return acc / double(windows.size());
}

double continuous_recon_l1(const StreamAutoencoder& ae, const std::vector<Tensor>& windows) {
    double acc = 0.0;
    for (const auto& w : windows) {
        const Tensor rec = ae.decode_value(ae.encode_value(w));
        double err = 0.0;
        for (size_t i = 0; i < w.numel(); ++i) err += std::abs(rec.data[i] - w.data[i]);
        acc += err / double(w.numel());
    }
    return acc / double(windows.size());
}

}  // namespace gest
