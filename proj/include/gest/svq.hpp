#pragma once

#include <optional>
#include <vector>

#include "gest/autograd.hpp"
#include "gest/io.hpp"
#include "gest/rng.hpp"
#include "gest/synth.hpp"

namespace gest {

// Streamable vector-quantized motion tokenizer for one region: bidirectional
// encoder, strictly causal decoder (output frame t depends only on latent
// steps <= floor(t/4)), EMA codebook in a fixed linear code space, and a
// trainable projection head back into the decoder latent space.

inline constexpr size_t kDownsample = 4;  // temporal factor, two stride-2 stages

struct SvqConfig {
    RegionId region = RegionId::upper_body;
    size_t pose_dim = 8;
    size_t hidden = 32;
    size_t latent_dim = 32;     // decoder latent space (256 at paper scale)
    size_t code_dim = 16;       // codebook space (128 at paper scale)
    size_t codebook_size = 64;  // K (2048 at paper scale)
    size_t res_layers = 2;      // dilated residual conv layers per stage
    double ema_decay = 0.99;
    double ema_eps = 1e-5;
    double usage_floor = 1.0;
    size_t reset_interval = 50;
};

struct ConvLayer {
    ag::Var w, b;
    size_t k = 3, dil = 1, stride = 1;
    ag::Pad pad = ag::Pad::causal;
};

struct ResBlock {
    std::vector<ConvLayer> layers;  // x = x + conv(gelu(x)) per layer
};

struct StreamAutoencoder {
    SvqConfig cfg;
    ag::ParamSet params;

    // encoder (bidirectional): stem -> 2 x [stride-2 conv + res block] -> head
    ConvLayer enc_stem;
    std::array<ConvLayer, 2> enc_down;
    std::array<ResBlock, 2> enc_res;
    ag::Var enc_head_w, enc_head_b;

    // decoder (causal): in -> 2 x [nn-upsample x2 + causal res block] -> out conv
    ag::Var dec_in_w, dec_in_b;
    std::array<ResBlock, 2> dec_res;
    ConvLayer dec_out;

    static StreamAutoencoder init(const SvqConfig& cfg, uint64_t seed);

    ag::Var encode(const ag::Var& window) const;   // [T x dim] -> [T/4 x latent]
    ag::Var decode(const ag::Var& latents) const;  // [T/4 x latent] -> [T x dim]
    Tensor encode_value(const Tensor& window) const;
    Tensor decode_value(const Tensor& latents) const;

    NamedArrays to_arrays() const;
    static StreamAutoencoder from_arrays(const NamedArrays& a);
    uint64_t weights_fingerprint() const { return fingerprint(to_arrays()); }
};

// Carried state for chunked causal decoding. Rejects resumption against a
// different model via the weights fingerprint.
struct DecoderState {
    uint64_t model_fingerprint = 0;
    std::vector<std::vector<double>> conv_hist;  // per causal conv, oldest first
    NamedArrays to_arrays() const;
    static DecoderState from_arrays(const NamedArrays& a);
};

DecoderState decoder_open(const StreamAutoencoder& ae);
// latents [n x latent] -> poses [4n x dim]; bit-identical to batch decode.
// verify=false skips the per-call fingerprint hash (callers that already
// validated the pairing, like the stream session, use it on the hot path).
Tensor decoder_push(const StreamAutoencoder& ae, DecoderState& st, const Tensor& latents,
                    bool verify = true);

struct Codebook {
    Tensor entries;                  // [K x code_dim]
    std::vector<double> ema_counts;  // N_k
    Tensor ema_sums;                 // m_k, entries = m / max(N, eps)
    double decay = 0.99;
    double eps = 1e-5;

    size_t size() const { return entries.rows(); }
    size_t dim() const { return entries.cols(); }
    size_t nearest(const double* z) const;
    double utilization(double usage_floor) const;  // fraction with N_k >= floor
};

struct QuantizeResult {
    std::vector<size_t> tokens;
    Tensor dequantized;  // [T x code_dim]
};

// Nearest-neighbor assignment in code space; ties break to the lowest index.
QuantizeResult quantize(const Tensor& z_code, const Codebook& cb);

// N_k <- g N_k + (1-g) count_k ; m_k <- g m_k + (1-g) sum of assigned latents ;
// entries = m / max(N, eps). Unassigned codes decay with the ratio preserved.
void ema_update(Codebook& cb, const std::vector<size_t>& assignments, const Tensor& batch_latents);

// Codes with N_k < usage_floor are re-seeded from recent latents. Returns the
// number of resets.
size_t reset_dead_codes(Codebook& cb, const Tensor& recent_latents, double usage_floor, Rng& rng);

// Stage-2 product: frozen autoencoder + fixed pre-projection into code space +
// EMA codebook + trainable MLP projection head back to the decoder space.
struct SvqTokenizer {
    StreamAutoencoder ae;  // frozen
    Tensor pre_proj;       // [code_dim x latent_dim], fixed at stage-2 start
    Codebook codebook;
    ag::ParamSet head_params;
    // code -> latent MLP with a linear skip: Wl z + bl + W2 gelu(W1 z + b1).
    // Identity-initializable when the dims agree.
    ag::Var head_wl, head_bl, head_w1, head_b1, head_w2, head_b2;

    static SvqTokenizer init(StreamAutoencoder ae, uint64_t seed);

    Tensor pre_project(const Tensor& latents) const;  // [T x latent] -> [T x code]
    ag::Var project(const ag::Var& dequantized) const;
    Tensor project_value(const Tensor& dequantized) const;

    // normalized poses [T x dim] (T divisible by 4) -> tokens of length T/4
    std::vector<size_t> tokenize(const Tensor& poses_norm) const;
    Tensor decode_tokens(const std::vector<size_t>& tokens) const;  // batch path
    // streaming path: one token -> 4 pose frames
    Tensor decode_token_step(size_t token, DecoderState& st, bool verify = true) const;

    NamedArrays to_arrays() const;
    static SvqTokenizer from_arrays(const NamedArrays& a);
    uint64_t weights_fingerprint() const { return fingerprint(to_arrays()); }
};

// value = dequantized, gradient passes through to z unchanged
ag::Var straight_through(const ag::Var& z, const Tensor& dequantized);

struct SvqTrainOpts {
    size_t epochs = 30;
    size_t batch = 16;
    double lr = 2e-3;
    uint64_t seed = 1;
    double lambda_ae = 1.0;   // stage 1
    double lambda_rec = 1.0;  // stage 2
    double lambda_cb = 0.2;   // stage 2 commitment weight
};

struct StageLog {
    std::vector<double> epoch_losses;
    double final_utilization = 0.0;
};

StreamAutoencoder train_stage1(const std::vector<Tensor>& windows, const SvqConfig& cfg,
                               const SvqTrainOpts& opts, StageLog* log = nullptr);

SvqTokenizer train_stage2(const std::vector<Tensor>& windows, StreamAutoencoder frozen_ae,
                          const SvqTrainOpts& opts, StageLog* log = nullptr);

// Mean L1 between decoded-quantized reconstruction and input over windows.
double quantized_recon_l1(const SvqTokenizer& tok, const std::vector<Tensor>& windows);
double continuous_recon_l1(const StreamAutoencoder& ae, const std::vector<Tensor>& windows);

}  // namespace gest
