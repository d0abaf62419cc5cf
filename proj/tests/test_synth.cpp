#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "gest/metrics.hpp"
#include "gest/synth.hpp"

using namespace gest;

TEST_CASE("same seed twice gives bit-identical sessions") {
    auto a = gen_session(7, 5.0, desk_region_dims());
    auto b = gen_session(7, 5.0, desk_region_dims());
    for (RegionId r : kRegions)
        CHECK(a.poses[size_t(r)].data == b.poses[size_t(r)].data);
    CHECK(a.waveform == b.waveform);
    CHECK(a.beat_times == b.beat_times);
    REQUIRE(a.symbols.size() == b.symbols.size());
    for (size_t i = 0; i < a.symbols.size(); ++i) {
        CHECK(a.symbols[i].time_s == b.symbols[i].time_s);
        CHECK(a.symbols[i].category == b.symbols[i].category);
    }
    auto c = gen_session(8, 5.0, desk_region_dims());
    CHECK(a.poses[0].data != c.poses[0].data);
}

TEST_CASE("frame count arithmetic") {
    auto s = gen_session(1, 2.0, desk_region_dims(), 20.0);
    CHECK(s.frames() == 40);
    for (const auto& rs : desk_region_dims())
        CHECK(s.poses[size_t(rs.region)].rows() == 40);
}

TEST_CASE("config errors") {
    CHECK_THROWS(gen_session(1, 0.5, desk_region_dims()));
    CHECK_THROWS(gen_session(1, 2.0, {}));
}

TEST_CASE("beat times strictly increasing, inside the session") {
    auto s = gen_session(3, 20.0, desk_region_dims());
    REQUIRE(s.beat_times.size() > 10);
    for (size_t i = 1; i < s.beat_times.size(); ++i)
        CHECK(s.beat_times[i] > s.beat_times[i - 1]);
    CHECK(s.beat_times.front() > 0.0);
    CHECK(s.beat_times.back() < s.duration_s);
}

TEST_CASE("windows: count, tiling, first window") {
    auto s = gen_session(2, 2.0, desk_region_dims(), 20.0);  // 40 frames
    const Tensor& upper = s.poses[size_t(RegionId::upper_body)];

    auto w = sliding_windows(upper, 16, 8);
    CHECK(w.size() == 4);  // floor((40-16)/8)+1

    auto tiled = sliding_windows(upper, 16, 16);
    CHECK(tiled.size() == 2);
    CHECK(tiled[0].start == 0);
    CHECK(tiled[1].start == 16);

    Tensor first = w[0].materialize();
    CHECK(first.rows() == 16);
    for (size_t t = 0; t < 16; ++t)
        for (size_t c = 0; c < upper.cols(); ++c) CHECK(first.at(t, c) == upper.at(t, c));

    CHECK_THROWS(sliding_windows(upper, 41, 8));  // empty dataset
    CHECK_THROWS(sliding_windows(upper, 16, 0));
}

TEST_CASE("normalization: round trip, constant channels, train-split mean") {
    std::vector<SynthSession> train;
    for (uint64_t seed : {10, 11, 12}) train.push_back(gen_session(seed, 8.0, desk_region_dims()));
    NormStats st = NormStats::fit(train);

    for (RegionId r : kRegions) {
        const Tensor& p = train[0].poses[size_t(r)];
        Tensor n = st.normalize(r, p);
        Tensor back = st.denormalize(r, n);
        double max_err = 0.0;
        for (size_t i = 0; i < p.numel(); ++i)
            max_err = std::max(max_err, std::abs(back.data[i] - p.data[i]));
        CHECK(max_err < 1e-10);
    }

    // per-channel mean over the whole training split is ~0 after normalization
    for (RegionId r : kRegions) {
        const size_t d = train[0].poses[size_t(r)].cols();
        std::vector<double> mean(d, 0.0);
        size_t n = 0;
        for (const auto& s : train) {
            Tensor norm = st.normalize(r, s.poses[size_t(r)]);
            for (size_t t = 0; t < norm.rows(); ++t)
                for (size_t c = 0; c < d; ++c) mean[c] += norm.at(t, c);
            n += norm.rows();
        }
        for (size_t c = 0; c < d; ++c) CHECK(std::abs(mean[c] / double(n)) <= 1e-6);
    }

    // constant channel normalizes to zero everywhere
    SynthSession fake = train[0];
    for (size_t t = 0; t < fake.poses[0].rows(); ++t) fake.poses[0].at(t, 0) = 3.25;
    NormStats st2 = NormStats::fit({fake});
    Tensor n2 = st2.normalize(RegionId::upper_body, fake.poses[0]);
    for (size_t t = 0; t < n2.rows(); ++t) CHECK(n2.at(t, 0) == 0.0);
}

TEST_CASE("beat coupling: BC > 0.8 across a 20-seed suite") {
    for (uint64_t seed = 100; seed < 120; ++seed) {
        auto s = gen_session(seed, 30.0, desk_region_dims());
        BeatSet motion = detect_motion_beats(s.poses[size_t(RegionId::upper_body)], s.frame_rate);
        BeatSet audio{s.beat_times};
        const double bc = beat_constancy(motion, audio, 0.1);
        INFO("seed ", seed, " bc ", bc);
        CHECK(bc > 0.8);
    }
}

TEST_CASE("region separability: hands move more than lower body") {
    for (uint64_t seed = 200; seed < 210; ++seed) {
        auto s = gen_session(seed, 10.0, desk_region_dims());
        auto mean_delta = [](const Tensor& p) {
            double acc = 0.0;
            for (size_t t = 1; t < p.rows(); ++t)
                for (size_t c = 0; c < p.cols(); ++c)
                    acc += std::abs(p.at(t, c) - p.at(t - 1, c));
            return acc / double((p.rows() - 1) * p.cols());
        };
        CHECK(mean_delta(s.poses[size_t(RegionId::hands)]) >
              mean_delta(s.poses[size_t(RegionId::lower_body)]));
    }
}

TEST_CASE("lower-body contact channels are binary") {
    auto s = gen_session(5, 6.0, desk_region_dims());
    const Tensor& lower = s.poses[size_t(RegionId::lower_body)];
    for (size_t t = 0; t < lower.rows(); ++t)
        for (size_t c = lower.cols() - 4; c < lower.cols(); ++c) {
            const double v = lower.at(t, c);
            CHECK((v == 0.0 || v == 1.0));
        }
}

TEST_CASE("symbol stream is sparse and ordered") {
    auto s = gen_session(6, 20.0, desk_region_dims());
    REQUIRE(!s.symbols.empty());
    CHECK(double(s.symbols.size()) / s.duration_s <= 1.0);
    for (size_t i = 1; i < s.symbols.size(); ++i)
        CHECK(s.symbols[i].time_s > s.symbols[i - 1].time_s);
    for (const auto& e : s.symbols) CHECK(e.category < 8);
}

TEST_CASE("session container round trip is exact") {
    auto s = gen_session(9, 3.0, desk_region_dims());
    const std::string path =
        (std::filesystem::temp_directory_path() / "gest_session_rt.garr").string();
    s.save(path);
    SynthSession r = SynthSession::load(path);
    CHECK(r.seed == s.seed);
    CHECK(r.frame_rate == s.frame_rate);
    for (RegionId reg : kRegions)
        CHECK(r.poses[size_t(reg)].data == s.poses[size_t(reg)].data);
    CHECK(r.waveform == s.waveform);
    CHECK(r.beat_times == s.beat_times);
    CHECK(r.symbols.size() == s.symbols.size());
    std::remove(path.c_str());
}

TEST_CASE("paper dims are the documented defaults") {
    auto dims = paper_region_dims();
    CHECK(dims[0].dim == 78);   // upper
    CHECK(dims[1].dim == 61);   // lower (54 rot + 3 translation + 4 contacts)
    CHECK(dims[2].dim == 180);  // hands
    CHECK(dims[3].dim == 103);  // face
}
