#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>

namespace gest {

// Deterministic RNG used everywhere. splitmix64-seeded xoshiro256++ with
// hand-rolled distributions so that results do not depend on the standard
// library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        // splitmix64 expansion of the seed into the xoshiro state
        uint64_t x = seed;
        for (auto& si : s_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            si = z ^ (z >> 31);
        }
        has_cached_normal_ = false;
        cached_normal_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        // multiply-shift; bias is negligible for the ranges used here
        return uint64_t((__uint128_t(next_u64()) * n) >> 64);
    }

    // standard normal via Box-Muller (cached pair)
    double normal() {
        if (has_cached_normal_) {
            has_cached_normal_ = false;
            return cached_normal_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        cached_normal_ = r * std::sin(a);
        has_cached_normal_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Full state round-trip, used by stream session serialization.
    std::string serialize() const {
        std::ostringstream os;
        os << s_[0] << ' ' << s_[1] << ' ' << s_[2] << ' ' << s_[3] << ' '
           << (has_cached_normal_ ? 1 : 0);
        if (has_cached_normal_) {
            os << ' ';
            os.precision(17);
            os << cached_normal_;
        }
        return os.str();
    }

    static Rng deserialize(const std::string& text) {
        Rng r;
        std::istringstream is(text);
        int cached = 0;
        is >> r.s_[0] >> r.s_[1] >> r.s_[2] >> r.s_[3] >> cached;
        r.has_cached_normal_ = cached != 0;
        if (r.has_cached_normal_) is >> r.cached_normal_;
        return r;
    }

private:
    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t s_[4] = {};
    bool has_cached_normal_ = false;
    double cached_normal_ = 0.0;
};

}  // namespace gest
