#pragma once

#include <complex>
#include <vector>

#include "gest/tensor.hpp"

namespace gest {

// Log-mel front end built from scratch: Hann window, radix-2 FFT, triangular
// HTK-mel filterbank, log(x + 1e-6). Framing is causal: frame i covers the
// window_s seconds ENDING at sample (i+1)*hop (zero-padded at stream start),
// so a frame is emitted as soon as its last sample arrives.
struct MelConfig {
    double sample_rate = 16000.0;
    size_t n_mels = 64;
    double window_s = 0.025;
    double hop_s = 0.0125;

    size_t window_samples() const { return size_t(window_s * sample_rate + 0.5); }
    size_t hop_samples() const { return size_t(hop_s * sample_rate + 0.5); }
    double frame_rate() const { return 1.0 / hop_s; }
};

struct MelState {
    std::vector<double> history;  // last window-hop samples, oldest first
    std::vector<double> pending;  // samples not yet forming a full hop
    size_t frames_emitted = 0;
};

class MelExtractor {
public:
    explicit MelExtractor(MelConfig cfg);

    const MelConfig& config() const { return cfg_; }
    MelState open() const;

    // Consumes samples, returns zero or more complete frames [n x n_mels].
    Tensor push(const double* samples, size_t n, MelState& st) const;
    Tensor push(const std::vector<double>& samples, MelState& st) const {
        return push(samples.data(), samples.size(), st);
    }

    // Whole-waveform convenience; identical to chunked pushes.
    Tensor extract(const std::vector<double>& samples) const;

    size_t fft_size() const { return fft_size_; }

private:
    std::vector<double> frame_to_mel(const std::vector<double>& window) const;

    MelConfig cfg_;
    size_t fft_size_ = 0;
    std::vector<double> hann_;
    Tensor filterbank_;  // [n_mels x (fft/2+1)]
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// In-place iterative radix-2 FFT (n must be a power of two).
void fft_radix2(std::vector<std::complex<double>>& a);

}  // namespace gest
