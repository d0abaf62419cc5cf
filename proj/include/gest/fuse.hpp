#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "gest/xar.hpp"

namespace gest {

// xAR-Fuse: per-region residual adapters align frozen expert states, then a
// causal fusion transformer whose blocks factor into inter-region spatial
// attention (within a time step), causal global temporal attention, and
// causal audio-motion cross attention, with region-specific classifiers.

enum class FuseLayerKind { spatial, temporal, cross };

struct FuseConfig {
    size_t vocab = 64;
    size_t d_model = 64;  // equals the expert state width (residual adapters)
    size_t n_heads = 4;
    size_t blocks = 3;  // L_fuse
    size_t window = 32;
    size_t d_audio = 32;
    size_t n_symbols = 8;
    size_t ffn_mult = 2;
    double p_cf = 0.1;
    double lambda_ugm_max = 0.5;  // cosine schedule cap
    double p_region_max = 0.2;    // region-drop probability upper bound
    std::string layer_order = "spatial,temporal,cross";

    std::vector<FuseLayerKind> parsed_order() const;
};

struct FusionModel {
    FuseConfig cfg;
    ag::ParamSet params;

    std::array<ag::Var, kNumRegions> pilor_w;  // zero-initialized residual maps
    ag::Var mask_embed;                        // learned replacement for masked slots
    ag::Var null_audio, sym_embed;
    ag::Var audio_in_w, audio_in_b, cond_ln_g, cond_ln_b;

    struct Block {
        AttnLayer spatial, temporal, cross;
        FfnLayer ffn;
    };
    std::vector<Block> blocks;
    ag::Var final_ln_g, final_ln_b;
    std::array<ag::Var, kNumRegions> cls_w, cls_b;

    // Classifiers start from the experts' classifiers when given.
    static FusionModel init(const FuseConfig& cfg, uint64_t seed,
                            const std::array<ExpertModel, kNumRegions>* experts = nullptr);

    // h~ = h + W_r h
    ag::Var pilor_adapt(RegionId r, const ag::Var& h) const;

    // Teacher-forced forward over expert hiddens [T x d] per region.
    // mask_bits is region-major [R x T] (1 = replaced by the mask embedding).
    struct Forward {
        std::array<ag::Var, kNumRegions> logits;  // [T x K] each
    };
    Forward forward(const std::array<ag::Var, kNumRegions>& hiddens,
                    const std::vector<uint8_t>& mask_bits, const ag::Var& audio_tokens,
                    const std::vector<size_t>& symbols, bool drop_audio, bool drop_symbols,
                    size_t start_pos) const;

    NamedArrays to_arrays() const;
    static FusionModel from_arrays(const NamedArrays& a);
    uint64_t weights_fingerprint() const { return fingerprint(to_arrays()); }
};

// ---------------------------------------------------------------------------
// masking / guidance primitives
// ---------------------------------------------------------------------------

// lambda(s) = lambda_max * (1 - cos(pi s / S)) / 2, monotone, 0 at s=0.
double cosine_schedule(size_t s, size_t total_steps, double lambda_max);

struct MaskPlan {
    size_t t_len = 0;
    std::vector<uint8_t> bits;  // region-major [R x T]
    std::optional<RegionId> dropped;

    size_t count() const;
    bool at(RegionId r, size_t t) const { return bits[size_t(r) * t_len + t] != 0; }
    void set(RegionId r, size_t t) { bits[size_t(r) * t_len + t] = 1; }
    static MaskPlan none(size_t t_len);
};

// Masks exactly floor(ratio * m_max) positions with the smallest confidence;
// ties break toward the lowest (region, time) index. Deterministic.
MaskPlan ugm_mask(const Tensor& confidences /* [R x T] */, double ratio, size_t m_max, Rng& rng);

// With probability drawn from U(0, p_max), one uniformly chosen region.
std::optional<RegionId> region_mask(Rng& rng, double p_max);

// Mean NLL over masked positions only (0 with a warning when nothing is
// masked). Targets are region-major.
ag::Var fuse_loss(const std::array<ag::Var, kNumRegions>& logits,
                  const std::array<std::vector<size_t>, kNumRegions>& targets,
                  const MaskPlan& plan);

// l_uncond + gamma * (l_cond - l_uncond); gamma == 1 returns l_cond bitwise.
std::vector<double> cfg_combine(const std::vector<double>& l_uncond,
                                const std::vector<double>& l_cond, double gamma);

// Categorical sample from softmax(logits / temperature).
size_t sample_token(const std::vector<double>& logits, Rng& rng, double temperature = 1.0);

// ---------------------------------------------------------------------------
// incremental inference
// ---------------------------------------------------------------------------

// Raw-input sliding window, like ExpertState: expert hidden rows per region,
// conditioning rows, symbols.
struct FusionState {
    uint64_t model_fingerprint = 0;
    size_t step = 0;
    std::array<std::vector<std::vector<double>>, kNumRegions> hidden_ring;
    std::vector<std::vector<double>> cond_ring;
    std::vector<size_t> sym_ring;

    NamedArrays to_arrays() const;
    static FusionState from_arrays(const NamedArrays& a);
    size_t state_bytes() const;
};

FusionState fusion_open(const FusionModel& m);

void fusion_advance(const FusionModel& m, FusionState& st,
                    const std::array<const double*, kNumRegions>& hiddens,
                    const double* audio_token, size_t symbol, bool verify = true);

struct FuseStepOut {
    std::array<std::vector<double>, kNumRegions> logits;
};
FuseStepOut fusion_eval(const FusionModel& m, const FusionState& st, bool conditioned = true,
                        bool verify = true);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct FuseTrainOpts {
    size_t epochs = 4;
    size_t steps_per_epoch = 40;
    size_t batch = 8;
    size_t seq_len = 32;
    double lr = 2e-3;
    uint64_t seed = 1;
    double lambda_local = 0.3;
    double lambda_fuse = 1.0;
};

struct FuseTrainStepLog {
    double l_fuse = 0.0;
    double l_local = 0.0;
    double l_ar = 0.0;
    double lambda_ugr = 0.0;
    size_t mask_count = 0;
};

struct FuseTrainResult {
    FusionModel model;
    std::vector<FuseTrainStepLog> steps;
};

// Trains adapters, fusion blocks and classifiers; experts and audio encoder
// stay frozen (fingerprints checked). L_local is evaluated on the frozen
// experts as a monitoring term inside L_AR; gradients flow through L_fuse.
FuseTrainResult train_fuse(const SequenceDataset& data,
                           const std::array<ExpertModel, kNumRegions>& experts,
                           const AudioEncoder& audio_enc, const FuseConfig& cfg,
                           const FuseTrainOpts& opts);

// Teacher-forced fusion NLL on a dataset. With masked_region set, that
// region's trajectory is fully masked and the NLL is over its positions;
// otherwise no corruption and the NLL runs over all positions.
double fuse_nll(const FusionModel& m, const std::array<ExpertModel, kNumRegions>& experts,
                const AudioEncoder& enc, const SequenceDataset& data, size_t seq_len,
                std::optional<RegionId> masked_region = std::nullopt, bool conditioned = true);

}  // namespace gest
