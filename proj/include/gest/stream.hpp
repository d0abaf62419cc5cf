#pragma once

#include <functional>
#include <memory>

#include "gest/fuse.hpp"

namespace gest {

// Zero-look-ahead chunked runtime: 200 ms audio chunks drive audio encoder ->
// experts -> fusion -> guided sampling -> causal SVQ decode, emitting 4 pose
// frames per region per chunk.

struct ModelBundle {
    std::array<SvqTokenizer, kNumRegions> tokenizers;
    AudioEncoder audio_enc;
    std::array<ExpertModel, kNumRegions> experts;
    FusionModel fusion;
    NormStats stats;
    MelConfig mel_cfg;
    double frame_rate = 20.0;

    // cross-checks vocab/dims/rates between the parts
    void validate() const;
    nlohmann::json manifest() const;

    void save(const std::string& dir) const;
    static ModelBundle load(const std::string& dir);
};

struct StreamConfig {
    double gamma = 1.25;
    double temperature = 1.0;
    bool cond_only = false;  // skip the unconditional pass (gamma ignored)
    double chunk_s = 0.2;
};

struct LatencyReport {
    double first_token_latency_ms = 0.0;
    double chunk_period_ms = 200.0;
    std::vector<double> per_chunk_ms;

    double mean_chunk_ms() const;
    double max_chunk_ms() const;
    double real_time_factor() const { return mean_chunk_ms() / chunk_period_ms; }
    nlohmann::json to_json() const;
};

class StreamSession {
public:
    StreamSession(std::shared_ptr<const ModelBundle> bundle, StreamConfig cfg, uint64_t seed);

    // One audio chunk in, any completed pose frames out (4 per region per full
    // chunk at desk rates). A short final chunk is zero-padded and flagged;
    // emitted frames are trimmed to the true duration.
    std::array<Tensor, kNumRegions> push_audio_chunk(const double* samples, size_t n,
                                                     bool final_chunk = false);
    // feature passthrough: mel frames instead of samples
    std::array<Tensor, kNumRegions> push_features(const Tensor& mel_frames);

    // optional symbol conditioning, applied at the step covering time_s
    void queue_symbol(double time_s, size_t category);

    size_t steps_processed() const { return step_; }
    size_t frames_emitted() const { return frames_emitted_; }
    size_t state_bytes() const;
    const LatencyReport& latency() const { return latency_; }
    bool closed() const { return closed_; }

    NamedArrays serialize() const;
    static StreamSession deserialize(std::shared_ptr<const ModelBundle> bundle,
                                     const NamedArrays& a);

private:
    std::array<Tensor, kNumRegions> run_steps(const Tensor& audio_tokens);

    std::shared_ptr<const ModelBundle> bundle_;
    StreamConfig cfg_;
    MelExtractor mel_;
    AudioEncState audio_state_;
    std::array<ExpertState, kNumRegions> expert_states_;
    FusionState fusion_cond_, fusion_uncond_;
    std::array<DecoderState, kNumRegions> decoder_states_;
    std::array<size_t, kNumRegions> prev_token_{};
    std::vector<std::pair<double, size_t>> symbol_queue_;
    Rng rng_;
    size_t step_ = 0;
    size_t frames_emitted_ = 0;
    size_t real_samples_ = 0;
    bool closed_ = false;
    LatencyReport latency_;
};

// Offline reference: batch audio front end + the same AR loop + batch decode.
// Streaming output over the same audio matches within 1e-8.
std::array<Tensor, kNumRegions> generate_offline(const ModelBundle& bundle,
                                                 const std::vector<double>& samples,
                                                 const StreamConfig& cfg, uint64_t seed);

// Runs a generator twice, once with audio after t_perturb replaced by noise;
// passes iff every pose frame from chunks that ended at or before t_perturb
// is bit-identical. Generic over the generator so tests can probe mocks.
using GenerateFn =
    std::function<std::array<Tensor, kNumRegions>(const std::vector<double>& audio)>;
bool causality_probe_fn(const GenerateFn& gen, const std::vector<double>& audio,
                        double t_perturb_s, double sample_rate, double chunk_s,
                        double frames_per_chunk, uint64_t noise_seed);

// The shipped-architecture probe: streams the bundle over the audio.
bool causality_probe(const ModelBundle& bundle, const std::vector<double>& audio,
                     double t_perturb_s, const StreamConfig& cfg, uint64_t seed);

}  // namespace gest
