#pragma once

#include <string>
#include <vector>

namespace gest {

// 16-bit PCM mono WAV with the canonical 44-byte header. Samples map to
// [-1, 1] through the 32767 scale.
struct WavData {
    double sample_rate = 16000.0;
    std::vector<double> samples;
};

WavData read_wav(const std::string& path);
void write_wav(const std::string& path, const WavData& wav);

}  // namespace gest
