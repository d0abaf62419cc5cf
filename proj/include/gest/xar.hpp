#pragma once

#include <array>
#include <optional>
#include <vector>

#include "gest/audioenc.hpp"
#include "gest/autograd.hpp"
#include "gest/streamops.hpp"
#include "gest/svq.hpp"

namespace gest {

// Region-eXpert causal autoregressive transformer: next-token prediction on
// one region's SVQ token stream conditioned on past/current audio (and
// optional symbol) tokens. Strictly causal in both attention families, with
// a bounded 32-token history.

struct ExpertConfig {
    RegionId region = RegionId::upper_body;
    size_t vocab = 64;     // K
    size_t code_dim = 8;   // SVQ codebook embedding width
    size_t d_model = 64;   // 256 at paper scale
    size_t n_heads = 4;
    size_t blocks = 2;        // L_xAR
    size_t cross_layers = 3;  // causal audio-motion cross attention per block
    size_t self_layers = 3;   // causal temporal self attention per block
    size_t history = 32;      // max past motion tokens attended
    size_t d_audio = 32;
    size_t n_symbols = 8;
    size_t ffn_mult = 2;
    double noise_sigma = 0.1;
    double p_noise_max = 0.2;  // per-sequence p ~ U(0, p_noise_max)
    bool noise_fixed_p = false;  // alternative: fixed p = p_noise_max
    double p_cf = 0.1;
};

struct AttnLayer {
    ag::Var ln_g, ln_b, wq, wk, wv, wo;
};

struct FfnLayer {
    ag::Var ln_g, ln_b, w1, b1, w2, b2;
};

AttnLayer make_attn_layer(ag::ParamSet& ps, Rng& rng, const std::string& name, size_t d);
FfnLayer make_ffn_layer(ag::ParamSet& ps, Rng& rng, const std::string& name, size_t d,
                        size_t mult);

struct ExpertModel {
    ExpertConfig cfg;
    Tensor token_embed;  // frozen SVQ codebook entries [K x code_dim]
    ag::ParamSet params;

    ag::Var emb_w1, emb_b1, emb_w2, emb_b2;  // code_dim -> d_model MLP
    ag::Var bos;                             // learned begin-of-stream row
    ag::Var null_audio;                      // learned null conditioning row
    ag::Var sym_embed;                       // [n_symbols+1 x d_audio], row 0 = none
    ag::Var audio_in_w, audio_in_b;          // d_audio -> d_model
    ag::Var cond_ln_g, cond_ln_b;

    struct Block {
        std::vector<AttnLayer> cross, self_attn;
        FfnLayer ffn;
    };
    std::vector<Block> blocks;
    ag::Var final_ln_g, final_ln_b;
    ag::Var cls_w, cls_b;  // d_model -> K

    static ExpertModel init(const ExpertConfig& cfg, const Tensor& codebook_entries,
                            uint64_t seed);

    // Teacher-forced batch forward. tokens[0..T-1] are the ground-truth
    // stream; row t is emb(tokens[t-1]) (BOS when with_bos and t==0, else the
    // preceding context token), audio row t conditions step t. start_pos sets
    // the absolute rotary positions. Returns logits [T x K] and hiddens
    // [T x d_model] (h^r_t, the classifier input).
    struct Forward {
        ag::Var logits;
        ag::Var hidden;
    };
    Forward forward(const std::vector<size_t>& input_tokens, bool with_bos,
                    const ag::Var& audio_tokens, const std::vector<size_t>& symbols,
                    bool drop_audio, bool drop_symbols, size_t start_pos,
                    const Tensor* history_noise = nullptr) const;

    NamedArrays to_arrays() const;
    static ExpertModel from_arrays(const NamedArrays& a);
    uint64_t weights_fingerprint() const { return fingerprint(to_arrays()); }
};

// With per-sequence probability p_seq, adds iid N(0, sigma^2) to every row.
// Returns the noise tensor actually applied (zeros when the draw fails), so
// teacher-forced forwards can replay it.
Tensor inject_noise(size_t rows, size_t cols, double p_seq, double sigma, Rng& rng);

// ---------------------------------------------------------------------------
// incremental inference
// ---------------------------------------------------------------------------

// The state carries the raw inputs of the sliding window (token ids,
// conditioning rows, symbols), not per-layer K/V. Each step reruns the
// windowed forward, which is the only scheme under which "tokens beyond 32
// are ignored" holds exactly through stacked attention layers; it also lets
// the conditional and unconditional guidance passes share one state.
struct ExpertState {
    uint64_t model_fingerprint = 0;
    size_t step = 0;                      // next absolute position
    std::vector<size_t> token_ring;       // last <= history context tokens
    std::vector<std::vector<double>> cond_ring;  // last <= history raw audio rows
    std::vector<size_t> sym_ring;

    NamedArrays to_arrays() const;
    static ExpertState from_arrays(const NamedArrays& a);
    size_t state_bytes() const;
};

ExpertState expert_open(const ExpertModel& m);

struct ExpertStepOut {
    std::vector<double> logits;  // [K]
    std::vector<double> hidden;  // [d_model] h^r_t
};

// Advances the window by one step: prev_token is the token sampled at t-1
// (ignored at the stream head), audio_token is a_t.
void expert_advance(const ExpertModel& m, ExpertState& st, size_t prev_token,
                    const double* audio_token, size_t symbol, bool verify = true);

// Evaluates the current step from the window; conditioned = false runs the
// null-conditioned pass for guidance. Pure given the state.
ExpertStepOut expert_eval(const ExpertModel& m, const ExpertState& st, bool conditioned = true,
                          bool verify = true);

// advance + conditioned eval in one call
ExpertStepOut expert_step(const ExpertModel& m, ExpertState& st, size_t prev_token, bool is_bos,
                          const double* audio_token, size_t symbol);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

// Token streams and aligned conditioning for every session, all regions.
struct SequenceDataset {
    std::array<std::vector<std::vector<size_t>>, kNumRegions> tokens;  // [region][session]
    std::vector<Tensor> mel_frames;                 // [session] (16 per token step)
    std::vector<std::vector<size_t>> symbols;       // [session][token step], 0 = none
    size_t steps(size_t session) const { return symbols[session].size(); }
};

SequenceDataset build_sequence_dataset(const std::vector<SynthSession>& sessions,
                                       const std::array<SvqTokenizer, kNumRegions>& tokenizers,
                                       const NormStats& stats, const MelExtractor& mel);

struct ExpertTrainOpts {
    size_t epochs = 4;
    size_t batch = 8;
    size_t seq_len = 32;
    double lr = 2e-3;
    uint64_t seed = 1;
    size_t steps_per_epoch = 40;
};

struct ExpertTrainResult {
    std::array<ExpertModel, kNumRegions> experts;
    std::vector<double> loss_curve;  // combined L_local per step
};

// Trains the four experts jointly with the shared audio encoder (which is
// updated in place), minimizing the summed per-region cross entropy.
ExpertTrainResult train_experts(const SequenceDataset& data,
                                const std::array<SvqTokenizer, kNumRegions>& tokenizers,
                                AudioEncoder& audio_enc, const ExpertConfig& base_cfg,
                                const ExpertTrainOpts& opts);

// Mean held-out next-token NLL for one region (teacher forced);
// conditioned = false evaluates with audio and symbols dropped to the nulls.
double expert_nll(const ExpertModel& m, const AudioEncoder& enc, const SequenceDataset& data,
                  size_t seq_len, bool conditioned = true);

}  // namespace gest
