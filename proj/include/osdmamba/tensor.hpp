#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <utility>

#include "osdmamba/common.hpp"

namespace osd {

// Dense row-major N-D array of doubles. Rank 0 (shape {}) is a scalar with
// one element. Tensors are plain values; autodiff lives in autograd.hpp.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(static_cast<size_t>(numel_of(shape_)), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }

    const Shape& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty() && shape_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double item() const {
        if (numel() != 1) throw ContractError("item() requires a one-element tensor, got shape " + shape_str(shape_));
        return data_[0];
    }

    // row-major strides
    Shape strides() const {
        Shape st(shape_.size());
        int64_t acc = 1;
        for (int64_t i = rank() - 1; i >= 0; --i) {
            st[static_cast<size_t>(i)] = acc;
            acc *= shape_[static_cast<size_t>(i)];
        }
        return st;
    }

    Tensor reshaped(Shape s) const {
        if (numel_of(s) != numel())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    void add_(const Tensor& other) {
        if (other.numel() != numel())
            throw DimensionError("add_: size mismatch " + shape_str(shape_) + " vs " + shape_str(other.shape_));
        const double* o = other.data();
        double* d = data();
        for (int64_t i = 0; i < numel(); ++i) d[i] += o[i];
    }

    void axpy_(double a, const Tensor& other) {
        const double* o = other.data();
        double* d = data();
        for (int64_t i = 0; i < numel(); ++i) d[i] += a * o[i];
    }

    void scale_(double a) {
        for (double& v : data_) v *= a;
    }

private:
    void check_shape() const {
        for (int64_t d : shape_)
            if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline Tensor random_uniform(Rng& rng, Shape s, double lo, double hi) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline Tensor random_normal(Rng& rng, Shape s, double mean = 0.0, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = mean + stddev * rng.normal();
    return t;
}

}  // namespace osd
