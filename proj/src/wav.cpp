#include "gest/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace gest {

namespace {
struct WavHeader {
    char riff[4];
    uint32_t chunk_size;
    char wave[4];
    char fmt[4];
    uint32_t fmt_size;
    uint16_t audio_format;
    uint16_t channels;
    uint32_t sample_rate;
    uint32_t byte_rate;
    uint16_t block_align;
    uint16_t bits;
    char data[4];
    uint32_t data_size;
};
static_assert(sizeof(WavHeader) == 44, "canonical header layout");
}  // namespace

WavData read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open wav: " + path);
    WavHeader h{};
    is.read(reinterpret_cast<char*>(&h), sizeof(h));
    if (!is || std::memcmp(h.riff, "RIFF", 4) != 0 || std::memcmp(h.wave, "WAVE", 4) != 0 ||
        std::memcmp(h.fmt, "fmt ", 4) != 0 || std::memcmp(h.data, "data", 4) != 0)
        throw std::runtime_error("not a canonical wav file: " + path);
    if (h.audio_format != 1 || h.channels != 1 || h.bits != 16)
        throw std::runtime_error("wav must be 16-bit PCM mono: " + path);

    WavData out;
    out.sample_rate = h.sample_rate;
    const size_t n = h.data_size / 2;
    std::vector<int16_t> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(h.data_size));
    if (!is) throw std::runtime_error("truncated wav data: " + path);
    out.samples.resize(n);
    for (size_t i = 0; i < n; ++i) out.samples[i] = double(raw[i]) / 32767.0;
    return out;
}

void write_wav(const std::string& path, const WavData& wav) {
    std::vector<int16_t> raw(wav.samples.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        double v = wav.samples[i];
        if (v > 1.0) v = 1.0;
        if (v < -1.0) v = -1.0;
        raw[i] = int16_t(std::lround(v * 32767.0));
    }
    WavHeader h{};
    std::memcpy(h.riff, "RIFF", 4);
    std::memcpy(h.wave, "WAVE", 4);
    std::memcpy(h.fmt, "fmt ", 4);
    std::memcpy(h.data, "data", 4);
    h.fmt_size = 16;
    h.audio_format = 1;
    h.channels = 1;
    h.sample_rate = uint32_t(wav.sample_rate);
    h.bits = 16;
    h.block_align = 2;
    h.byte_rate = h.sample_rate * 2;
    h.data_size = uint32_t(raw.size() * 2);
    h.chunk_size = 36 + h.data_size;

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write wav: " + path);
    os.write(reinterpret_cast<const char*>(&h), sizeof(h));
    os.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size() * 2));
    if (!os) throw std::runtime_error("wav write failed: " + path);
}

}  // namespace gest
