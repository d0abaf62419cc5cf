#pragma once

#include <vector>

#include "gest/autograd.hpp"
#include "gest/io.hpp"
#include "gest/mel.hpp"
#include "gest/svq.hpp"

namespace gest {

// Strictly causal audio encoder: left-padded projection conv, dilated causal
// conv pyramid with residuals, then non-overlapping stride-16 aggregation so
// one audio token covers exactly the 16 mel frames of a 200 ms chunk.
struct AudioEncConfig {
    size_t n_mels = 64;
    size_t hidden = 64;   // 128 at paper scale
    size_t d_audio = 64;  // 256 at paper scale
    std::vector<size_t> dilations = {1, 2, 4, 8};
    size_t frames_per_token = 16;
};

struct AudioEncoder {
    AudioEncConfig cfg;
    ag::ParamSet params;
    ConvLayer proj;                  // k3 causal, n_mels -> hidden
    std::vector<ConvLayer> pyramid;  // k3 causal, dilation per level, residual
    ag::Var agg_w, agg_b;            // [d_audio x 16*hidden] token aggregation

    static AudioEncoder init(const AudioEncConfig& cfg, uint64_t seed);

    // [n x n_mels] (n divisible by frames_per_token) -> [n/16 x d_audio]
    ag::Var encode(const ag::Var& frames) const;
    Tensor encode_value(const Tensor& frames) const;

    size_t parameter_count() const { return params.count(); }

    NamedArrays to_arrays() const;
    static AudioEncoder from_arrays(const NamedArrays& a);
    uint64_t weights_fingerprint() const { return fingerprint(to_arrays()); }
};

// All causal state needed to resume streaming featurization + encoding.
struct AudioEncState {
    uint64_t model_fingerprint = 0;
    MelState mel;
    std::vector<std::vector<double>> conv_hist;
    std::vector<double> frame_buf;  // pyramid outputs awaiting a full token
    size_t buffered = 0;

    NamedArrays to_arrays() const;
    static AudioEncState from_arrays(const NamedArrays& a);
};

AudioEncState audioenc_open(const AudioEncoder& enc);

// mel frames in, zero or more audio tokens out; bit-identical to the batch
// encode over the same frame stream.
Tensor audioenc_push_frames(const AudioEncoder& enc, AudioEncState& st, const Tensor& frames,
                            bool verify = true);

// raw samples in (feature extraction + encoding), tokens out
Tensor audioenc_push_samples(const AudioEncoder& enc, const MelExtractor& mel, AudioEncState& st,
                             const double* samples, size_t n, bool verify = true);

}  // namespace gest
