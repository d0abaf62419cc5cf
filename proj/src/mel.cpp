#include "gest/mel.hpp"

#include <cmath>
#include <stdexcept>

namespace gest {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

void fft_radix2(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft: size must be 2^k");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / double(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

MelExtractor::MelExtractor(MelConfig cfg) : cfg_(cfg) {
    const size_t win = cfg_.window_samples();
    const size_t hop = cfg_.hop_samples();
    if (hop == 0 || hop > win) throw std::invalid_argument("mel: hop must be in (0, window]");

    fft_size_ = 1;
    while (fft_size_ < win) fft_size_ <<= 1;

    hann_.resize(win);
    for (size_t i = 0; i < win; ++i)
        hann_[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * double(i) / double(win));

    const size_t bins = fft_size_ / 2 + 1;
    filterbank_ = Tensor({cfg_.n_mels, bins});
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(cfg_.sample_rate / 2.0);
    std::vector<double> centers(cfg_.n_mels + 2);
    for (size_t m = 0; m < centers.size(); ++m)
        centers[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * double(m) / double(cfg_.n_mels + 1));
    for (size_t m = 0; m < cfg_.n_mels; ++m) {
        const double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
        for (size_t b = 0; b < bins; ++b) {
            const double f = double(b) * cfg_.sample_rate / double(fft_size_);
            double w = 0.0;
            if (f > lo && f < mid)
                w = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                w = (hi - f) / (hi - mid);
            filterbank_.at(m, b) = w;
        }
    }
}

MelState MelExtractor::open() const {
    MelState st;
    st.history.assign(cfg_.window_samples() - cfg_.hop_samples(), 0.0);
    return st;
}

std::vector<double> MelExtractor::frame_to_mel(const std::vector<double>& window) const {
    std::vector<std::complex<double>> buf(fft_size_, {0.0, 0.0});
    for (size_t i = 0; i < window.size(); ++i) buf[i] = window[i] * hann_[i];
    fft_radix2(buf);
    const size_t bins = fft_size_ / 2 + 1;
    std::vector<double> mag(bins);
    for (size_t b = 0; b < bins; ++b) mag[b] = std::abs(buf[b]);
    std::vector<double> mel(cfg_.n_mels);
    for (size_t m = 0; m < cfg_.n_mels; ++m) {
        double acc = 0.0;
        for (size_t b = 0; b < bins; ++b) acc += filterbank_.at(m, b) * mag[b];
        mel[m] = std::log(acc + 1e-6);
    }
    return mel;
}

Tensor MelExtractor::push(const double* samples, size_t n, MelState& st) const {
    const size_t win = cfg_.window_samples();
    const size_t hop = cfg_.hop_samples();
    st.pending.insert(st.pending.end(), samples, samples + n);

    std::vector<std::vector<double>> frames;
    std::vector<double> window(win);
    size_t consumed = 0;
    while (st.pending.size() - consumed >= hop) {
        std::copy(st.history.begin(), st.history.end(), window.begin());
        std::copy(st.pending.begin() + ptrdiff_t(consumed),
                  st.pending.begin() + ptrdiff_t(consumed + hop),
                  window.begin() + ptrdiff_t(win - hop));
        frames.push_back(frame_to_mel(window));
        // slide: history becomes the last win-hop samples of this window
        std::copy(window.begin() + ptrdiff_t(hop), window.end(), st.history.begin());
        consumed += hop;
        ++st.frames_emitted;
    }
    st.pending.erase(st.pending.begin(), st.pending.begin() + ptrdiff_t(consumed));

    Tensor out({frames.size(), cfg_.n_mels});
    for (size_t i = 0; i < frames.size(); ++i)
        std::copy(frames[i].begin(), frames[i].end(), out.row_ptr(i));
    return out;
}

Tensor MelExtractor::extract(const std::vector<double>& samples) const {
    MelState st = open();
    return push(samples, st);
}

}  // namespace gest
