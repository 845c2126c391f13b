#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace knnlm {

/// Dense row-major tensor of doubles. Training code runs in 64-bit;
/// checkpoints store 32-bit (see checkpoint.hpp).
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }

    static size_t numel_of(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t d : s) n *= d;
        return n;
    }

    size_t numel() const { return data.size(); }
    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double* row(size_t i) { return data.data() + i * cols(); }
    const double* row(size_t i) const { return data.data() + i * cols(); }

    double& at(size_t i, size_t j) { return data[i * cols() + j]; }
    double at(size_t i, size_t j) const { return data[i * cols() + j]; }

    std::span<double> flat() { return {data.data(), data.size()}; }
    std::span<const double> flat() const { return {data.data(), data.size()}; }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace knnlm
