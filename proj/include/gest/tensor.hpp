#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "gest/rng.hpp"

namespace gest {

// Dense row-major tensor of doubles. Double precision everywhere: the
// equivalence and gradient contracts in the tests are sharp because of it.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape)) throw std::invalid_argument("tensor shape/data mismatch");
    }

    static size_t numel_of(const std::vector<size_t>& s) {
        return std::accumulate(s.begin(), s.end(), size_t{1}, std::multiplies<>());
    }

    static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<size_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor randn(std::vector<size_t> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.normal(0.0, stddev);
        return t;
    }

    static Tensor from_row(const std::vector<double>& row) {
        return Tensor({1, row.size()}, row);
    }

    size_t numel() const { return data.size(); }
    size_t rank() const { return shape.size(); }
    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

    double& at(size_t r, size_t c) { return data[r * cols() + c]; }
    double at(size_t r, size_t c) const { return data[r * cols() + c]; }

    double* row_ptr(size_t r) { return data.data() + r * cols(); }
    const double* row_ptr(size_t r) const { return data.data() + r * cols(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

}  // namespace gest
