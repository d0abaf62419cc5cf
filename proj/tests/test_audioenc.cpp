#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "gest/audioenc.hpp"
#include "gest/synth.hpp"
#include "gest/wav.hpp"
#include "testutil.hpp"

using namespace gest;
using gest::testutil::randu;

namespace {
AudioEncConfig tiny_cfg() {
    AudioEncConfig cfg;
    cfg.n_mels = 64;
    cfg.hidden = 24;
    cfg.d_audio = 32;
    return cfg;
}
}  // namespace

// ---------------------------------------------------------------------------
// mel features
// ---------------------------------------------------------------------------

TEST_CASE("mel: silence maps to the constant log floor") {
    MelExtractor mel({});
    std::vector<double> silence(16000, 0.0);
    Tensor frames = mel.extract(silence);
    REQUIRE(frames.rows() > 0);
    for (double v : frames.data) CHECK(v == doctest::Approx(std::log(1e-6)));
}

TEST_CASE("mel: frame count and rate alignment") {
    MelExtractor mel({});
    // one second at 16 kHz, 12.5 ms hop -> 80 frames, each ending in the past
    std::vector<double> x(16000, 0.1);
    Tensor frames = mel.extract(x);
    CHECK(frames.rows() == 80);
    CHECK(frames.cols() == 64);
}

TEST_CASE("mel: pure sine at a band center peaks in that band") {
    MelExtractor mel({});
    const MelConfig& cfg = mel.config();
    // independently derived band-center frequency (same HTK formula)
    for (size_t band : std::vector<size_t>{10, 25, 40}) {
        const double mel_lo = 2595.0 * std::log10(1.0 + 0.0 / 700.0);
        const double mel_hi = 2595.0 * std::log10(1.0 + (cfg.sample_rate / 2.0) / 700.0);
        const double center_mel =
            mel_lo + (mel_hi - mel_lo) * double(band + 1) / double(cfg.n_mels + 1);
        const double f = 700.0 * (std::pow(10.0, center_mel / 2595.0) - 1.0);

        std::vector<double> x(8000);
        for (size_t i = 0; i < x.size(); ++i)
            x[i] = std::sin(2.0 * M_PI * f * double(i) / cfg.sample_rate);
        Tensor frames = mel.extract(x);
        // use a steady mid-stream frame
        const size_t t = frames.rows() / 2;
        size_t argmax = 0;
        for (size_t m = 1; m < frames.cols(); ++m)
            if (frames.at(t, m) > frames.at(t, argmax)) argmax = m;
        CHECK(argmax == band);
    }
}

TEST_CASE("mel: chunked featurization equals whole-waveform featurization") {
    MelExtractor mel({});
    Rng rng(3);
    std::vector<double> x(9600);
    for (auto& v : x) v = rng.normal(0.0, 0.2);
    Tensor whole = mel.extract(x);

    MelState st = mel.open();
    std::vector<double> chunked_rows;
    size_t pos = 0, total = 0;
    Rng chunks(4);
    while (pos < x.size()) {
        const size_t n = std::min(x.size() - pos, size_t(1 + chunks.uniform_int(700)));
        Tensor part = mel.push(x.data() + pos, n, st);
        chunked_rows.insert(chunked_rows.end(), part.data.begin(), part.data.end());
        total += part.rows();
        pos += n;
    }
    REQUIRE(total == whole.rows());
    CHECK(chunked_rows == whole.data);
}

TEST_CASE("mel: hop larger than window is rejected") {
    MelConfig cfg;
    cfg.hop_s = 0.05;
    CHECK_THROWS(MelExtractor(cfg));
}

TEST_CASE("fft matches a naive dft") {
    Rng rng(5);
    const size_t n = 64;
    std::vector<std::complex<double>> a(n);
    for (auto& v : a) v = {rng.normal(), rng.normal()};
    auto fft = a;
    fft_radix2(fft);
    for (size_t k = 0; k < n; ++k) {
        std::complex<double> acc{0.0, 0.0};
        for (size_t t = 0; t < n; ++t)
            acc += a[t] * std::exp(std::complex<double>(0.0, -2.0 * M_PI * double(k * t) / n));
        CHECK(std::abs(acc - fft[k]) < 1e-9);
    }
}

// ---------------------------------------------------------------------------
// causal encoder
// ---------------------------------------------------------------------------

TEST_CASE("encoder: 16 mel frames in, exactly one audio token out") {
    auto enc = AudioEncoder::init(tiny_cfg(), 1);
    Rng rng(2);
    Tensor tok = enc.encode_value(randu(rng, {16, 64}));
    CHECK(tok.rows() == 1);
    CHECK(tok.cols() == 32);
    CHECK_THROWS(enc.encode_value(randu(rng, {17, 64})));
}

TEST_CASE("encoder: future frame perturbation never reaches an earlier token") {
    auto enc = AudioEncoder::init(tiny_cfg(), 3);
    Rng rng(4);
    Tensor frames = randu(rng, {48, 64});
    Tensor base = enc.encode_value(frames);
    Tensor frames2 = frames;
    for (size_t c = 0; c < 64; ++c) frames2.at(17, c) += 10.0;  // inside token 1
    Tensor out = enc.encode_value(frames2);
    for (size_t c = 0; c < 32; ++c) CHECK(out.at(0, c) == base.at(0, c));
    bool changed = false;
    for (size_t c = 0; c < 32; ++c)
        if (out.at(1, c) != base.at(1, c)) changed = true;
    CHECK(changed);
}

TEST_CASE("encoder: zero look-ahead at 50 random cut points") {
    auto enc = AudioEncoder::init(tiny_cfg(), 5);
    Rng rng(6);
    Tensor frames = randu(rng, {64, 64});
    Tensor base = enc.encode_value(frames);
    for (int trial = 0; trial < 50; ++trial) {
        const size_t cut = 1 + rng.uniform_int(63);
        Tensor perturbed = frames;
        for (size_t t = cut; t < 64; ++t)
            for (size_t c = 0; c < 64; ++c) perturbed.at(t, c) += rng.normal();
        Tensor out = enc.encode_value(perturbed);
        const size_t safe_tokens = cut / 16;  // tokens fully before the cut
        for (size_t j = 0; j < safe_tokens; ++j)
            for (size_t c = 0; c < 32; ++c) CHECK(out.at(j, c) == base.at(j, c));
    }
}

TEST_CASE("encoder: streaming one frame at a time equals batch") {
    auto enc = AudioEncoder::init(tiny_cfg(), 7);
    Rng rng(8);
    Tensor frames = randu(rng, {64, 64});
    Tensor batch = enc.encode_value(frames);

    AudioEncState st = audioenc_open(enc);
    std::vector<double> streamed;
    for (size_t i = 0; i < 64; ++i) {
        Tensor one({1, 64});
        std::copy(frames.row_ptr(i), frames.row_ptr(i) + 64, one.row_ptr(0));
        Tensor tok = audioenc_push_frames(enc, st, one);
        streamed.insert(streamed.end(), tok.data.begin(), tok.data.end());
    }
    REQUIRE(streamed.size() == batch.numel());
    double max_diff = 0.0;
    for (size_t i = 0; i < streamed.size(); ++i)
        max_diff = std::max(max_diff, std::abs(streamed[i] - batch.data[i]));
    CHECK(max_diff <= 1e-10);
}

TEST_CASE("encoder: state serialization resumes bit-identically") {
    auto enc = AudioEncoder::init(tiny_cfg(), 9);
    Rng rng(10);
    Tensor frames = randu(rng, {32, 64});

    AudioEncState full = audioenc_open(enc);
    Tensor all = audioenc_push_frames(enc, full, frames);

    AudioEncState st = audioenc_open(enc);
    Tensor head({20, 64});
    std::copy(frames.data.begin(), frames.data.begin() + 20 * 64, head.data.begin());
    audioenc_push_frames(enc, st, head);
    AudioEncState resumed = AudioEncState::from_arrays(st.to_arrays());
    Tensor tail({12, 64});
    std::copy(frames.data.begin() + 20 * 64, frames.data.end(), tail.data.begin());
    Tensor out = audioenc_push_frames(enc, resumed, tail);
    REQUIRE(out.rows() == 1);
    for (size_t c = 0; c < 32; ++c) CHECK(out.at(0, c) == all.at(1, c));
}

TEST_CASE("encoder: state rejects a different model") {
    auto enc1 = AudioEncoder::init(tiny_cfg(), 11);
    auto enc2 = AudioEncoder::init(tiny_cfg(), 12);
    AudioEncState st = audioenc_open(enc1);
    Rng rng(13);
    CHECK_THROWS_AS(audioenc_push_frames(enc2, st, randu(rng, {16, 64})), std::runtime_error);
}

TEST_CASE("rate alignment on synthetic sessions") {
    auto enc = AudioEncoder::init(tiny_cfg(), 14);
    MelExtractor mel({});
    auto s = gen_session(21, 4.0, desk_region_dims());
    Tensor frames = mel.extract(s.waveform);
    // trim to whole tokens, as the runtime does
    const size_t usable = frames.rows() - frames.rows() % 16;
    Tensor trimmed({usable, frames.cols()});
    std::copy(frames.data.begin(), frames.data.begin() + usable * frames.cols(),
              trimmed.data.begin());
    Tensor tokens = enc.encode_value(trimmed);
    CHECK(tokens.rows() == s.frames() / 4);  // |audio tokens| = |pose frames| / 4
}

TEST_CASE("parameter budget at paper defaults") {
    AudioEncConfig paper;
    paper.n_mels = 64;
    paper.hidden = 128;
    paper.d_audio = 256;
    auto enc = AudioEncoder::init(paper, 1);
    const size_t count = enc.parameter_count();
    std::printf("audio encoder parameters at paper defaults: %zu\n", count);
    CHECK(count <= 1000000);
}

TEST_CASE("checkpoint round trip") {
    auto enc = AudioEncoder::init(tiny_cfg(), 15);
    auto back = AudioEncoder::from_arrays(enc.to_arrays());
    CHECK(back.weights_fingerprint() == enc.weights_fingerprint());
    Rng rng(16);
    Tensor frames = randu(rng, {16, 64});
    CHECK(back.encode_value(frames).data == enc.encode_value(frames).data);
}

TEST_CASE("wav round trip within quantization error") {
    Rng rng(17);
    WavData w;
    w.sample_rate = 16000;
    w.samples.resize(1600);
    for (auto& v : w.samples) v = rng.uniform(-0.9, 0.9);
    const std::string path = (std::filesystem::temp_directory_path() / "gest_rt.wav").string();
    write_wav(path, w);
    WavData r = read_wav(path);
    REQUIRE(r.samples.size() == w.samples.size());
    CHECK(r.sample_rate == 16000);
    for (size_t i = 0; i < r.samples.size(); ++i)
        CHECK(std::abs(r.samples[i] - w.samples[i]) < 1.0 / 32000.0);
    std::remove(path.c_str());
}
