#include "gest/synth.hpp"

#include <cmath>
#include <stdexcept>

#include "gest/rng.hpp"

namespace gest {

const char* region_name(RegionId r) {
    switch (r) {
        case RegionId::upper_body: return "upper_body";
        case RegionId::lower_body: return "lower_body";
        case RegionId::hands: return "hands";
        case RegionId::face: return "face";
    }
    return "?";
}

RegionId region_from_name(const std::string& name) {
    for (RegionId r : kRegions)
        if (name == region_name(r)) return r;
    throw std::invalid_argument("unknown region: " + name);
}

std::vector<RegionSpec> paper_region_dims() {
    return {{RegionId::upper_body, 78},
            {RegionId::lower_body, 61},
            {RegionId::hands, 180},
            {RegionId::face, 103}};
}

std::vector<RegionSpec> desk_region_dims() {
    return {{RegionId::upper_body, 8},
            {RegionId::lower_body, 6},
            {RegionId::hands, 16},
            {RegionId::face, 8}};
}

namespace {

struct RegionBand {
    double f_lo, f_hi;  // oscillator frequency band, Hz
    double amplitude;   // velocity scale
};

RegionBand band_for(RegionId r) {
    switch (r) {
        case RegionId::hands: return {1.875, 3.125, 0.5};
        case RegionId::upper_body: return {1.25, 1.875, 0.35};
        case RegionId::face: return {1.25, 1.875, 0.25};
        case RegionId::lower_body: return {0.625, 0.9375, 0.2};
    }
    return {1.0, 2.0, 1.0};
}

constexpr size_t kContactChannels = 4;  // trailing lower-body channels

// Stroke-arch speed envelope: one |sin| arch per beat interval. Motion
// freezes at every beat and bursts mid-interval; the arch is rising/falling
// everywhere else, so beats are the only local minima of the speed.
double speed_envelope(double t, const std::vector<double>& beats) {
    if (beats.empty()) return 0.55;
    double b_prev, b_next;
    if (t < beats.front()) {
        b_prev = beats.front() - 0.5;
        b_next = beats.front();
    } else if (t >= beats.back()) {
        b_prev = beats.back();
        b_next = beats.back() + 0.5;
    } else {
        size_t i = 0;
        while (i + 1 < beats.size() && beats[i + 1] <= t) ++i;
        b_prev = beats[i];
        b_next = beats[i + 1];
    }
    const double u = (t - b_prev) / (b_next - b_prev);
    return 0.02 + 0.53 * std::abs(std::sin(M_PI * u));
}

}  // namespace

SynthSession gen_session(uint64_t seed, double duration_s, const std::vector<RegionSpec>& spec,
                         double frame_rate, double sample_rate, bool with_symbols) {
    if (duration_s < 1.0) throw std::invalid_argument("gen_session: duration must be >= 1 s");
    if (spec.empty()) throw std::invalid_argument("gen_session: zero regions");

    SynthSession s;
    s.seed = seed;
    s.duration_s = duration_s;
    s.frame_rate = frame_rate;
    s.sample_rate = sample_rate;
    s.spec = spec;

    Rng rng(seed);

    // beat grid: jittered inter-beat intervals on a 0.1 s lattice, offset by
    // half a frame so each beat falls inside a unique velocity step
    double t = 0.325 + 0.1 * double(rng.uniform_int(3));
    while (t < duration_s - 0.2) {
        s.beat_times.push_back(t);
        t += 0.4 + 0.2 * double(rng.uniform_int(2));
    }

    // waveform: background noise plus a decaying two-tone burst per beat
    const size_t n_samples = size_t(std::llround(duration_s * sample_rate));
    s.waveform.resize(n_samples);
    for (auto& v : s.waveform) v = rng.normal(0.0, 0.01);
    for (double b : s.beat_times) {
        const size_t start = size_t(b * sample_rate);
        const size_t len = size_t(0.06 * sample_rate);
        for (size_t i = 0; i < len && start + i < n_samples; ++i) {
            const double tt = double(i) / sample_rate;
            const double env = std::exp(-tt / 0.015);
            s.waveform[start + i] += 0.6 * env *
                                     (std::sin(2.0 * M_PI * 440.0 * tt) +
                                      0.5 * std::sin(2.0 * M_PI * 880.0 * tt));
        }
    }

    const size_t t_f = size_t(std::llround(duration_s * frame_rate));

    // Every session strings together motifs from a global, seed-independent
    // dictionary (a recurring gesture vocabulary); only motif order, beat
    // timing, envelopes and offsets vary per session. Held-out sessions are
    // therefore built from the same motifs as training ones, which is what
    // makes the streams tokenizable at desk scale.
    constexpr size_t kMotifs = 3;
    constexpr double kSegBlend = 0.3;  // crossfade seconds at segment joins

    // one oscillator pair shared by all regions couples them beyond timing
    const double shared_freq = 1.25;
    const double shared_phase = 2.0 * M_PI * double(rng.uniform_int(8)) / 8.0;

    // session-level motif schedule shared by all regions; motif changes land
    // on beats so the crossfade sag hides inside the beat dip
    struct Segment {
        double start;
        size_t motif;
    };
    std::vector<Segment> segments;
    {
        segments.push_back({0.0, rng.uniform_int(kMotifs)});
        size_t bi = 0;
        while (bi + 4 < s.beat_times.size()) {
            bi += 4 + rng.uniform_int(5);  // switch every 4..8 beats
            if (bi >= s.beat_times.size()) break;
            segments.push_back({s.beat_times[bi], rng.uniform_int(kMotifs)});
        }
    }
    auto segment_at = [&](double t) {
        size_t i = segments.size() - 1;
        while (i > 0 && segments[i].start > t) --i;
        return i;
    };

    for (const RegionSpec& rs : spec) {
        const RegionBand band = band_for(rs.region);
        const bool has_contacts = rs.region == RegionId::lower_body && rs.dim > kContactChannels;
        const size_t osc_dim = has_contacts ? rs.dim - kContactChannels : rs.dim;
        const size_t n_pairs = osc_dim / 2;

        // global dictionary for this region's pair layout
        Rng dict_rng(0xd1c70000ULL + size_t(rs.region) * 97 + n_pairs);
        std::vector<std::vector<double>> motif_freq(kMotifs), motif_phase(kMotifs);
        for (size_t m = 0; m < kMotifs; ++m) {
            motif_freq[m].resize(n_pairs);
            motif_phase[m].resize(n_pairs);
            for (size_t p = 0; p < n_pairs; ++p) {
                // frequencies on a grid commensurate with the token rate so
                // waveform phase classes recur step to step
                const double fstep = 0.625;  // token rate 5 Hz / 8
                const size_t lo = size_t(std::ceil(band.f_lo / fstep));
                const size_t hi = size_t(std::floor(band.f_hi / fstep));
                motif_freq[m][p] = fstep * double(lo + dict_rng.uniform_int(hi - lo + 1));
                motif_phase[m][p] = 2.0 * M_PI * double(dict_rng.uniform_int(8)) / 8.0;
            }
        }

        // contact flips are slow so step discontinuities stay small next to
        // the hands' oscillation amplitude
        std::vector<double> contact_freq(has_contacts ? kContactChannels : 0);
        std::vector<double> contact_phase(contact_freq.size());
        for (size_t c = 0; c < contact_freq.size(); ++c) {
            contact_freq[c] = rng.uniform(0.04, 0.12);
            contact_phase[c] = rng.uniform(0.0, 2.0 * M_PI);
        }

        // shared rest pose: session identity lives in motif order and beat
        // timing, not in per-session DC shifts the tokens cannot carry
        std::vector<double> offset(rs.dim, 0.0);

        // per-pair direction for motif m at time t; pair 0 is the shared
        // cross-region oscillator, the rest come from the dictionary
        auto pair_dir = [&](size_t m, size_t p, double t, double& dx, double& dy) {
            const double f = p == 0 ? shared_freq : motif_freq[m][p];
            const double ph = p == 0 ? shared_phase : motif_phase[m][p];
            const double a = 2.0 * M_PI * f * t + ph;
            const double w = p == 0 ? 1.0 : 0.35;
            dx = w * std::cos(a);
            dy = w * std::sin(a);
        };

        // Pose is amplitude-modulated oscillation around the rest offset, not
        // an integral: the envelope pinches all motion at each beat (velocity
        // minima land on beats exactly) and a window's content is a function
        // of (motif, oscillator phase, dip placement) alone.
        Tensor poses({t_f, rs.dim});
        for (size_t k = 0; k < t_f; ++k) {
            const double tk = double(k) / frame_rate;
            const double env = speed_envelope(tk, s.beat_times);
            const size_t seg = segment_at(tk);
            const size_t cur = segments[seg].motif;
            const size_t prev = seg > 0 ? segments[seg - 1].motif : cur;
            double alpha = 1.0;
            if (seg > 0) {
                const double u = (tk - segments[seg].start + 0.5 * kSegBlend) / kSegBlend;
                if (u < 1.0) alpha = std::max(0.0, u * u * (3.0 - 2.0 * u));  // smoothstep
            }
            for (size_t c = 0; c < rs.dim; ++c) poses.at(k, c) = offset[c];
            for (size_t p = 0; p < n_pairs; ++p) {
                double cx, cy, px, py;
                pair_dir(cur, p, tk, cx, cy);
                pair_dir(prev, p, tk, px, py);
                poses.at(k, 2 * p) +=
                    band.amplitude * env * ((1.0 - alpha) * px + alpha * cx);
                poses.at(k, 2 * p + 1) +=
                    band.amplitude * env * ((1.0 - alpha) * py + alpha * cy);
            }
            // odd width leaves the last oscillator channel at the offset
            if (has_contacts) {
                for (size_t c = 0; c < kContactChannels; ++c) {
                    const double a = 2.0 * M_PI * contact_freq[c] * tk + contact_phase[c];
                    poses.at(k, osc_dim + c) = std::sin(a) > 0.0 ? 1.0 : 0.0;
                }
            }
        }
        s.poses[size_t(rs.region)] = std::move(poses);
    }

    if (with_symbols) {
        double ts = rng.uniform(0.5, 1.5);
        while (ts < duration_s) {
            s.symbols.push_back({ts, rng.uniform_int(8)});
            ts += rng.uniform(1.0, 2.5);
        }
    }
    return s;
}

Tensor WindowView::materialize() const {
    Tensor out({len, src->cols()});
    std::copy(src->row_ptr(start), src->row_ptr(start) + len * src->cols(), out.data.begin());
    return out;
}

std::vector<WindowView> sliding_windows(const Tensor& poses, size_t t_w, size_t stride) {
    if (stride < 1) throw std::invalid_argument("sliding_windows: stride must be >= 1");
    if (t_w > poses.rows())
        throw std::runtime_error("sliding_windows: window longer than sequence (empty dataset)");
    const size_t count = (poses.rows() - t_w) / stride + 1;
    std::vector<WindowView> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) out.push_back({&poses, i * stride, t_w});
    return out;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

NamedArrays SynthSession::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "synth_session";
    a.meta["seed"] = seed;
    a.meta["duration_s"] = duration_s;
    a.meta["frame_rate"] = frame_rate;
    a.meta["sample_rate"] = sample_rate;
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& rs : spec)
        regions.push_back({{"name", region_name(rs.region)}, {"dim", rs.dim}});
    a.meta["regions"] = regions;

    for (const auto& rs : spec)
        a.add(std::string("poses/") + region_name(rs.region), poses[size_t(rs.region)]);
    a.add("waveform", Tensor({waveform.size()}, waveform));
    a.add("beat_times", Tensor({beat_times.size()}, beat_times));
    Tensor sym({symbols.size(), 2});
    for (size_t i = 0; i < symbols.size(); ++i) {
        sym.at(i, 0) = symbols[i].time_s;
        sym.at(i, 1) = double(symbols[i].category);
    }
    a.add("symbols", sym);
    return a;
}

SynthSession SynthSession::from_arrays(const NamedArrays& a) {
    SynthSession s;
    s.seed = a.meta.at("seed").get<uint64_t>();
    s.duration_s = a.meta.at("duration_s").get<double>();
    s.frame_rate = a.meta.at("frame_rate").get<double>();
    s.sample_rate = a.meta.at("sample_rate").get<double>();
    for (const auto& r : a.meta.at("regions")) {
        RegionSpec rs{region_from_name(r.at("name").get<std::string>()),
                      r.at("dim").get<size_t>()};
        s.spec.push_back(rs);
        s.poses[size_t(rs.region)] = a.require(std::string("poses/") + region_name(rs.region));
    }
    s.waveform = a.require("waveform").data;
    s.beat_times = a.require("beat_times").data;
    const Tensor& sym = a.require("symbols");
    for (size_t i = 0; i < sym.rows(); ++i)
        s.symbols.push_back({sym.at(i, 0), size_t(sym.at(i, 1))});
    return s;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

NormStats NormStats::fit(const std::vector<SynthSession>& train) {
    if (train.empty()) throw std::invalid_argument("NormStats: empty training split");
    NormStats st;
    for (const RegionSpec& rs : train[0].spec) {
        const size_t r = size_t(rs.region);
        const size_t d = rs.dim;
        std::vector<double> sum(d, 0.0), sumsq(d, 0.0);
        size_t n = 0;
        for (const auto& sess : train) {
            const Tensor& p = sess.poses[r];
            for (size_t k = 0; k < p.rows(); ++k)
                for (size_t c = 0; c < d; ++c) {
                    sum[c] += p.at(k, c);
                    sumsq[c] += p.at(k, c) * p.at(k, c);
                }
            n += p.rows();
        }
        st.mean[r].resize(d);
        st.stddev[r].resize(d);
        for (size_t c = 0; c < d; ++c) {
            st.mean[r][c] = sum[c] / double(n);
            const double var =
                std::max(0.0, sumsq[c] / double(n) - st.mean[r][c] * st.mean[r][c]);
            st.stddev[r][c] = std::max(std::sqrt(var), kStdFloor);
        }
    }
    return st;
}

Tensor NormStats::normalize(RegionId r, const Tensor& poses) const {
    const auto& mu = mean[size_t(r)];
    const auto& sd = stddev[size_t(r)];
    if (poses.cols() != mu.size()) throw std::invalid_argument("normalize: channel mismatch");
    Tensor out = poses;
    for (size_t k = 0; k < out.rows(); ++k)
        for (size_t c = 0; c < mu.size(); ++c) out.at(k, c) = (out.at(k, c) - mu[c]) / sd[c];
    return out;
}

Tensor NormStats::denormalize(RegionId r, const Tensor& poses) const {
    const auto& mu = mean[size_t(r)];
    const auto& sd = stddev[size_t(r)];
    if (poses.cols() != mu.size()) throw std::invalid_argument("denormalize: channel mismatch");
    Tensor out = poses;
    for (size_t k = 0; k < out.rows(); ++k)
        for (size_t c = 0; c < mu.size(); ++c) out.at(k, c) = out.at(k, c) * sd[c] + mu[c];
    return out;
}

NamedArrays NormStats::to_arrays() const {
    NamedArrays a;
    a.meta["kind"] = "norm_stats";
    for (RegionId r : kRegions) {
        if (mean[size_t(r)].empty()) continue;
        const size_t d = mean[size_t(r)].size();
        a.add(std::string("mean/") + region_name(r), Tensor({d}, mean[size_t(r)]));
        a.add(std::string("std/") + region_name(r), Tensor({d}, stddev[size_t(r)]));
    }
    return a;
}

NormStats NormStats::from_arrays(const NamedArrays& a) {
    NormStats st;
    for (RegionId r : kRegions) {
        const Tensor* m = a.find(std::string("mean/") + region_name(r));
        if (!m) continue;
        st.mean[size_t(r)] = m->data;
        st.stddev[size_t(r)] = a.require(std::string("std/") + region_name(r)).data;
    }
    return st;
}

}  // namespace gest
