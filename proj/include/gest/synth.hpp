#pragma once

#include <array>
#include <string>
#include <vector>

#include "gest/io.hpp"
#include "gest/tensor.hpp"

namespace gest {

// The four body regions, fixed canonical order.
enum class RegionId : size_t { upper_body = 0, lower_body = 1, hands = 2, face = 3 };
inline constexpr size_t kNumRegions = 4;
inline constexpr std::array<RegionId, kNumRegions> kRegions = {
    RegionId::upper_body, RegionId::lower_body, RegionId::hands, RegionId::face};

const char* region_name(RegionId r);
RegionId region_from_name(const std::string& name);

struct RegionSpec {
    RegionId region;
    size_t dim;
};

// Full-scale parameterization: Rot6D joints, FLAME expression + jaw, lower
// body with translation and four contact flags.
std::vector<RegionSpec> paper_region_dims();  // 78 / 61 / 180 / 103
// Reduced dims used by CI-scale training and most tests.
std::vector<RegionSpec> desk_region_dims();  // 8 / 6 / 16 / 8

struct SymbolEvent {
    double time_s;
    size_t category;
};

// One procedurally generated beat-coupled session: motion per region, a pulse
// train + noise waveform, ground-truth beat times and a sparse symbol stream.
struct SynthSession {
    uint64_t seed = 0;
    double duration_s = 0.0;
    double frame_rate = 20.0;
    double sample_rate = 16000.0;
    std::vector<RegionSpec> spec;
    std::array<Tensor, kNumRegions> poses;  // [T_f x dim]
    std::vector<double> waveform;
    std::vector<double> beat_times;
    std::vector<SymbolEvent> symbols;

    size_t frames() const { return poses[0].rows(); }
    const Tensor& region_poses(RegionId r) const { return poses[size_t(r)]; }

    NamedArrays to_arrays() const;
    static SynthSession from_arrays(const NamedArrays& a);
    void save(const std::string& path) const { to_arrays().save(path); }
    static SynthSession load(const std::string& path) {
        return from_arrays(NamedArrays::load(path));
    }
};

// Deterministic in (seed, duration, spec, rates). Regions share the beat
// envelope and one low-frequency oscillator pair; per-region bands put the
// highest frequencies and amplitudes on the hands, the lowest on the lower
// body. The last four lower-body channels are binary contact-like signals.
SynthSession gen_session(uint64_t seed, double duration_s, const std::vector<RegionSpec>& spec,
                         double frame_rate = 20.0, double sample_rate = 16000.0,
                         bool with_symbols = true);

// Sliding windows over one region tensor, in time order.
struct WindowView {
    const Tensor* src = nullptr;
    size_t start = 0;
    size_t len = 0;
    Tensor materialize() const;
};
std::vector<WindowView> sliding_windows(const Tensor& poses, size_t t_w, size_t stride);

// Per-channel affine normalization fitted on the training split only.
struct NormStats {
    std::array<std::vector<double>, kNumRegions> mean;
    std::array<std::vector<double>, kNumRegions> stddev;  // floored at kStdFloor
    static constexpr double kStdFloor = 1e-6;

    static NormStats fit(const std::vector<SynthSession>& train);
    Tensor normalize(RegionId r, const Tensor& poses) const;
    Tensor denormalize(RegionId r, const Tensor& poses) const;

    NamedArrays to_arrays() const;
    static NormStats from_arrays(const NamedArrays& a);
};

}  // namespace gest
