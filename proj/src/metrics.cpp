#include "gest/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "gest/kernels.hpp"
#include "gest/rng.hpp"

namespace gest {

FeatureSet FeatureSet::from_features(Tensor features) {
    const size_t n = features.rows(), d = features.cols();
    if (n < 2) throw std::invalid_argument("FeatureSet: need at least 2 samples");
    FeatureSet fs;
    fs.mean.assign(d, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t c = 0; c < d; ++c) fs.mean[c] += features.at(i, c);
    for (auto& m : fs.mean) m /= double(n);

    fs.cov.assign(d * d, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t a = 0; a < d; ++a) {
            const double da = features.at(i, a) - fs.mean[a];
            for (size_t b = a; b < d; ++b)
                fs.cov[a * d + b] += da * (features.at(i, b) - fs.mean[b]);
        }
    for (size_t a = 0; a < d; ++a)
        for (size_t b = a; b < d; ++b) {
            const double v = fs.cov[a * d + b] / double(n - 1);
            fs.cov[a * d + b] = v;
            fs.cov[b * d + a] = v;  // symmetrized by construction
        }
    if (n < d + 1) {
        std::fprintf(stderr, "warning: %zu samples for %zu-dim features; regularizing\n", n, d);
        for (size_t a = 0; a < d; ++a) fs.cov[a * d + a] += 1e-6;
    }
    fs.features = std::move(features);
    return fs;
}

FeatureSet featurize(const std::vector<Tensor>& motion_windows, uint64_t seed,
                     size_t feature_dim) {
    if (motion_windows.empty()) throw std::invalid_argument("featurize: no windows");
    const size_t flat = motion_windows[0].numel();
    for (const auto& w : motion_windows)
        if (w.numel() != flat) throw std::invalid_argument("featurize: inconsistent window size");

    Rng rng(seed);
    Tensor proj({feature_dim, flat});
    const double scale = 1.0 / std::sqrt(double(flat));
    for (auto& v : proj.data) v = rng.normal(0.0, scale);
    std::vector<double> bias(feature_dim);
    for (auto& v : bias) v = rng.normal(0.0, 0.1);

    Tensor feats({motion_windows.size(), feature_dim});
    for (size_t i = 0; i < motion_windows.size(); ++i) {
        kern::matvec(proj.data.data(), motion_windows[i].data.data(), feats.row_ptr(i),
                     feature_dim, flat);
        for (size_t c = 0; c < feature_dim; ++c)
            feats.at(i, c) = std::tanh(feats.at(i, c) + bias[c]);
    }
    return FeatureSet::from_features(std::move(feats));
}

// ---------------------------------------------------------------------------
// symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

void sym_eig(std::vector<double> a, size_t n, std::vector<double>& eigvals,
             std::vector<double>& eigvecs) {
    eigvecs.assign(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) eigvecs[i * n + i] = 1.0;

    double frob = 0.0;
    for (double v : a) frob += v * v;
    const double tol = 1e-28 * std::max(frob, 1e-300);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < n; ++p)
            for (size_t q = p + 1; q < n; ++q) off += 2.0 * a[p * n + q] * a[p * n + q];
        if (off <= tol) break;

        for (size_t p = 0; p < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (size_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (size_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i], aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                for (size_t i = 0; i < n; ++i) {
                    const double vip = eigvecs[i * n + p], viq = eigvecs[i * n + q];
                    eigvecs[i * n + p] = c * vip - s * viq;
                    eigvecs[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    eigvals.resize(n);
    for (size_t i = 0; i < n; ++i) eigvals[i] = a[i * n + i];
}

namespace {

// B = V f(w) V^T for the symmetric matrix behind (w, V)
std::vector<double> rebuild(const std::vector<double>& eigvals,
                            const std::vector<double>& eigvecs, size_t n, double (*f)(double)) {
    std::vector<double> out(n * n, 0.0);
    for (size_t k = 0; k < n; ++k) {
        const double fv = f(eigvals[k]);
        if (fv == 0.0) continue;
        for (size_t i = 0; i < n; ++i) {
            const double vik = eigvecs[i * n + k] * fv;
            for (size_t j = 0; j < n; ++j) out[i * n + j] += vik * eigvecs[j * n + k];
        }
    }
    return out;
}

double clamped_sqrt(double v) { return v > 0.0 ? std::sqrt(v) : 0.0; }

void check_psd(const std::vector<double>& eigvals, double scale) {
    for (double w : eigvals)
        if (w < -1e-8 * std::max(scale, 1.0))
            throw std::runtime_error("fgd: covariance not PSD after regularization");
}

}  // namespace

double fgd(const FeatureSet& a, const FeatureSet& b) {
    const size_t d = a.dim();
    if (b.dim() != d) throw std::invalid_argument("fgd: feature dim mismatch");

    double mu_term = 0.0;
    for (size_t i = 0; i < d; ++i) {
        const double diff = a.mean[i] - b.mean[i];
        mu_term += diff * diff;
    }
    double tr_a = 0.0, tr_b = 0.0;
    for (size_t i = 0; i < d; ++i) {
        tr_a += a.cov[i * d + i];
        tr_b += b.cov[i * d + i];
    }

    // sqrt(Ca) via eigendecomposition, then sqrt of the symmetrized
    // sqrt(Ca) Cb sqrt(Ca); trace of that is Tr((Ca Cb)^(1/2))
    std::vector<double> w, v;
    sym_eig(a.cov, d, w, v);
    const double scale = *std::max_element(w.begin(), w.end(), [](double x, double y) {
        return std::abs(x) < std::abs(y);
    });
    check_psd(w, std::abs(scale));
    std::vector<double> sa = rebuild(w, v, d, clamped_sqrt);

    std::vector<double> m(d * d, 0.0), tmp(d * d, 0.0);
    for (size_t i = 0; i < d; ++i)
        for (size_t k = 0; k < d; ++k) {
            const double s = sa[i * d + k];
            if (s == 0.0) continue;
            for (size_t j = 0; j < d; ++j) tmp[i * d + j] += s * b.cov[k * d + j];
        }
    for (size_t i = 0; i < d; ++i)
        for (size_t k = 0; k < d; ++k) {
            const double s = tmp[i * d + k];
            if (s == 0.0) continue;
            for (size_t j = 0; j < d; ++j) m[i * d + j] += s * sa[k * d + j];
        }
    for (size_t i = 0; i < d; ++i)
        for (size_t j = i + 1; j < d; ++j) {
            const double sym = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = sym;
            m[j * d + i] = sym;
        }
    std::vector<double> wm, vm;
    sym_eig(m, d, wm, vm);
    check_psd(wm, std::abs(*std::max_element(wm.begin(), wm.end())));
    double tr_sqrt = 0.0;
    for (double x : wm) tr_sqrt += clamped_sqrt(x);

    double result = mu_term + tr_a + tr_b - 2.0 * tr_sqrt;
    if (result < 0.0) {
        if (result < -1e-10)
            throw std::runtime_error("fgd: negative beyond roundoff threshold");
        result = 0.0;
    }
    return result;
}

double l1_diversity(const std::vector<Tensor>& generations,
                    const std::vector<size_t>& exclude_channels) {
    const size_t n = generations.size();
    if (n < 2) throw std::invalid_argument("l1_diversity: need at least 2 generations");
    const size_t t_len = generations[0].rows();
    const size_t d = generations[0].cols();
    for (const auto& g : generations)
        if (g.rows() != t_len || g.cols() != d)
            throw std::invalid_argument("l1_diversity: inconsistent shapes");

    std::vector<uint8_t> keep(d, 1);
    for (size_t c : exclude_channels)
        if (c < d) keep[c] = 0;

    double acc = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            for (size_t t = 0; t < t_len; ++t)
                for (size_t c = 0; c < d; ++c)
                    if (keep[c]) acc += std::abs(generations[i].at(t, c) - generations[j].at(t, c));
        }
    return acc / (2.0 * double(n) * double(n - 1) * double(t_len));
}

BeatSet detect_motion_beats(const Tensor& poses, double frame_rate) {
    const size_t t_len = poses.rows();
    if (t_len < 3) throw std::invalid_argument("detect_motion_beats: need at least 3 frames");
    const size_t d = poses.cols();
    std::vector<double> vel(t_len - 1);
    for (size_t i = 1; i < t_len; ++i) {
        double acc = 0.0;
        for (size_t c = 0; c < d; ++c) {
            const double dv = poses.at(i, c) - poses.at(i - 1, c);
            acc += dv * dv;
        }
        vel[i - 1] = std::sqrt(acc);
    }
    std::vector<double> sorted = vel;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double median = sorted[sorted.size() / 2];

    BeatSet out;
    for (size_t i = 1; i + 1 < vel.size(); ++i) {
        if (vel[i] < vel[i - 1] && vel[i] < vel[i + 1] && vel[i] < median)
            out.times.push_back(double(i + 1) / frame_rate);  // vel[i] is the step into frame i+1
    }
    return out;
}

double beat_constancy(const BeatSet& motion_beats, const BeatSet& audio_beats, double sigma) {
    if (motion_beats.times.empty())
        throw std::runtime_error("beat_constancy: no motion beats (metric undefined)");
    if (audio_beats.times.empty())
        throw std::runtime_error("beat_constancy: no audio beats (metric undefined)");
    if (sigma <= 0.0) throw std::invalid_argument("beat_constancy: sigma must be positive");
    double acc = 0.0;
    for (double bg : motion_beats.times) {
        double best = HUGE_VAL;
        for (double ba : audio_beats.times) best = std::min(best, (bg - ba) * (bg - ba));
        acc += std::exp(-best / (2.0 * sigma * sigma));
    }
    return acc / double(motion_beats.times.size());
}

double param_mse(const Tensor& gt, const Tensor& pred) {
    if (!gt.same_shape(pred)) throw std::invalid_argument("param_mse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < gt.numel(); ++i) {
        const double d = gt.data[i] - pred.data[i];
        acc += d * d;
    }
    return acc / double(gt.numel());
}

nlohmann::json metric_record(const std::string& name, double value,
                             const nlohmann::json& config, const std::vector<uint64_t>& seeds) {
    nlohmann::json j;
    j["metric"] = name;
    j["value"] = value;
    j["config"] = config;
    j["seeds"] = seeds;
    return j;
}

}  // namespace gest
