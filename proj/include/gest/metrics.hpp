#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "gest/tensor.hpp"

namespace gest {

// Gaussian fit of per-clip feature vectors.
struct FeatureSet {
    Tensor features;              // [N x d]
    std::vector<double> mean;     // [d]
    std::vector<double> cov;      // [d x d], symmetric (sample covariance)
    size_t dim() const { return mean.size(); }
    static FeatureSet from_features(Tensor features);
};

// Frozen random-projection + tanh featurizer standing in for a pretrained
// gesture encoder. Same seed and inputs give identical features; absolute
// distance values are therefore only comparable within one featurizer seed.
FeatureSet featurize(const std::vector<Tensor>& motion_windows, uint64_t seed,
                     size_t feature_dim = 32);

// ||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2)), square root via
// eigendecomposition of the symmetrized product. Non-negative up to roundoff.
double fgd(const FeatureSet& a, const FeatureSet& b);

// 1/(2 N (N-1) T) sum_i sum_{j != i} sum_t |p_i,t - p_j,t|_1 with the listed
// channels (e.g. global translation) excluded first.
double l1_diversity(const std::vector<Tensor>& generations,
                    const std::vector<size_t>& exclude_channels = {});

struct BeatSet {
    std::vector<double> times;  // strictly increasing, seconds
};

// Strict local minima of the frame-to-frame velocity norm, gated below the
// median velocity.
BeatSet detect_motion_beats(const Tensor& poses, double frame_rate);

// mean over motion beats of exp(-min_a (b - a)^2 / (2 sigma^2)), in [0, 1].
double beat_constancy(const BeatSet& motion_beats, const BeatSet& audio_beats, double sigma);

// mean squared difference over all (frame, channel)
double param_mse(const Tensor& gt, const Tensor& pred);

// Symmetric eigendecomposition (cyclic Jacobi), exposed for tests.
// a is row-major [n x n] and is destroyed. eigvecs stores column k = vector k.
void sym_eig(std::vector<double> a, size_t n, std::vector<double>& eigvals,
             std::vector<double>& eigvecs);

nlohmann::json metric_record(const std::string& name, double value,
                             const nlohmann::json& config, const std::vector<uint64_t>& seeds);

}  // namespace gest
