#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spes {

// Dense row-major tensor. Rank is 1 or 2 everywhere in this codebase;
// shapes are always explicit, there is no broadcasting.
template <typename T>
struct TensorT {
    std::vector<int64_t> shape;
    std::vector<T> data;

    TensorT() = default;
    TensorT(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("tensor: shape/data size mismatch");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int64_t> s) {
        int64_t n = numel_of(s);
        return TensorT(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
    }

    static TensorT full(std::vector<int64_t> s, T v) {
        int64_t n = numel_of(s);
        return TensorT(std::move(s), std::vector<T>(static_cast<size_t>(n), v));
    }

    static TensorT randn(std::vector<int64_t> s, std::mt19937_64& rng, double stddev) {
        int64_t n = numel_of(s);
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<T> d(static_cast<size_t>(n));
        for (auto& x : d) x = static_cast<T>(dist(rng));
        return TensorT(std::move(s), std::move(d));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t rows() const { return shape.at(0); }
    int64_t cols() const { return shape.at(1); }

    T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    T at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> d(data.size());
        for (size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
        return TensorT<U>(shape, std::move(d));
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace spes
