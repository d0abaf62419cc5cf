#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gest/kernels.hpp"
#include "gest/rng.hpp"

using namespace gest;

namespace {
std::vector<double> random_vec(Rng& rng, size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, scale);
    return v;
}
}  // namespace

TEST_CASE("backend listing always includes scalar") {
    auto names = kern::available();
    REQUIRE(!names.empty());
    CHECK(names[0] == "scalar");
}

TEST_CASE("simd variants match the scalar reference") {
    const auto& ref = kern::scalar_backend();
    for (const auto& name : kern::available()) {
        if (name == "scalar") continue;
        kern::set_backend(name);
        const auto& simd = kern::active();
        INFO("backend ", name);
        Rng rng(42);
        // odd lengths exercise the remainder loops
        for (size_t n : {1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 64, 129, 1000}) {
            auto a = random_vec(rng, n);
            auto b = random_vec(rng, n);

            const double d0 = ref.dot(a.data(), b.data(), n);
            const double d1 = simd.dot(a.data(), b.data(), n);
            CHECK(std::abs(d0 - d1) <= 1e-12 * std::max(1.0, std::abs(d0)));

            const double s0 = ref.sqdist(a.data(), b.data(), n);
            const double s1 = simd.sqdist(a.data(), b.data(), n);
            CHECK(std::abs(s0 - s1) <= 1e-12 * std::max(1.0, s0));

            auto y0 = random_vec(rng, n);
            auto y1 = y0;
            ref.axpy(0.37, a.data(), y0.data(), n);
            simd.axpy(0.37, a.data(), y1.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(y0[i] == doctest::Approx(y1[i]).epsilon(1e-14));

            auto z0 = a, z1 = a;
            ref.scal(-1.75, z0.data(), n);
            simd.scal(-1.75, z1.data(), n);
            CHECK(z0 == z1);

            std::vector<double> o0(n), o1(n);
            ref.vadd(a.data(), b.data(), o0.data(), n);
            simd.vadd(a.data(), b.data(), o1.data(), n);
            CHECK(o0 == o1);
            ref.vmul(a.data(), b.data(), o0.data(), n);
            simd.vmul(a.data(), b.data(), o1.data(), n);
            CHECK(o0 == o1);
        }
        // matvec across odd geometry
        for (auto [rows, cols] :
             {std::pair<size_t, size_t>{1, 1}, {3, 5}, {8, 8}, {13, 7}, {64, 33}}) {
            auto w = random_vec(rng, rows * cols);
            auto x = random_vec(rng, cols);
            std::vector<double> y0(rows), y1(rows);
            ref.matvec(w.data(), x.data(), y0.data(), rows, cols);
            simd.matvec(w.data(), x.data(), y1.data(), rows, cols);
            for (size_t i = 0; i < rows; ++i)
                CHECK(std::abs(y0[i] - y1[i]) <= 1e-12 * std::max(1.0, std::abs(y0[i])));
        }
    }
    kern::set_backend("auto");
}

TEST_CASE("argmin tie-break prefers the lowest index in every backend") {
    // codes 0 and 1 are identical, the query is equidistant
    std::vector<double> codes = {1.0, 0.0, 1.0, 0.0, -1.0, 0.0};
    std::vector<double> z = {0.0, 0.0};
    for (const auto& name : kern::available()) {
        kern::set_backend(name);
        double dist = -1.0;
        const size_t k = kern::argmin_sqdist(z.data(), codes.data(), 3, 2, &dist);
        CHECK(k == 0);
        CHECK(dist == doctest::Approx(1.0));
    }
    kern::set_backend("auto");
}

TEST_CASE("argmin agrees across backends on random codebooks") {
    Rng rng(7);
    const auto& ref = kern::scalar_backend();
    for (const auto& name : kern::available()) {
        if (name == "scalar") continue;
        kern::set_backend(name);
        const auto& simd = kern::active();
        for (int trial = 0; trial < 50; ++trial) {
            const size_t k = 1 + rng.uniform_int(64);
            const size_t d = 1 + rng.uniform_int(33);
            auto codes = random_vec(rng, k * d);
            auto z = random_vec(rng, d);
            CHECK(ref.argmin_sqdist(z.data(), codes.data(), k, d, nullptr) ==
                  simd.argmin_sqdist(z.data(), codes.data(), k, d, nullptr));
        }
    }
    kern::set_backend("auto");
}

TEST_CASE("unknown backend is rejected") { CHECK_THROWS(kern::set_backend("quantum")); }
