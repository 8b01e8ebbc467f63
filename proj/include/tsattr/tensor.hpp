#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsattr {

// Dense row-major f64 tensor. Rank is arbitrary but most of the code works
// with rank-2 (rows x cols) views.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }
    Tensor(std::vector<int64_t> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != numel_of(shape))
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e < 0) throw std::invalid_argument("Tensor: negative extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor identity(int64_t n) {
        Tensor t({n, n});
        for (int64_t i = 0; i < n; ++i) t.v[static_cast<size_t>(i * n + i)] = 1.0;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const {
        if (shape.size() < 2) return shape.empty() ? 1 : 1;
        int64_t c = 1;
        for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    double& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols() + c)]; }
    double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    Tensor reshaped(std::vector<int64_t> s) const {
        if (numel_of(s) != numel()) throw std::invalid_argument("reshape: element count mismatch");
        return Tensor(std::move(s), v);
    }

    void add_(const Tensor& o) {
        if (!same_shape(o)) throw std::invalid_argument("add_: shape mismatch");
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
    }
    void scale_(double c) {
        for (double& x : v) x *= c;
    }

    double sum() const { return std::accumulate(v.begin(), v.end(), 0.0); }
    double abs_sum() const {
        double s = 0.0;
        for (double x : v) s += std::fabs(x);
        return s;
    }
    double max_abs() const {
        double s = 0.0;
        for (double x : v) s = std::max(s, std::fabs(x));
        return s;
    }
    double dot(const Tensor& o) const {
        if (!same_shape(o)) throw std::invalid_argument("dot: shape mismatch");
        double s = 0.0;
        for (size_t i = 0; i < v.size(); ++i) s += v[i] * o.v[i];
        return s;
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace tsattr
