#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gest/autograd.hpp"
#include "gest/rng.hpp"
#include "gest/tensor.hpp"

namespace gest::testutil {

inline Tensor randu(Rng& rng, std::vector<size_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

struct GradCase {
    std::string name;
    std::function<double(uint64_t seed)> run;  // returns max relative error for one point
};

inline double max_err_over_points(const GradCase& c, int points, uint64_t seed0) {
    double worst = 0.0;
    for (int i = 0; i < points; ++i) worst = std::max(worst, c.run(seed0 + uint64_t(i)));
    return worst;
}

}  // namespace gest::testutil
