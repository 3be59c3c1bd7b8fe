// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "samt/errors.hpp"

namespace samt {

/// Multiply-accumulate counters. Kernels add their work once per call, so the
/// totals are independent of thread scheduling.
struct MacCounters {
    std::atomic<std::uint64_t> attention{0};
    std::atomic<std::uint64_t> linear{0};

    void reset() {
        attention = 0;
        linear = 0;
    }
    std::uint64_t total() const { return attention.load() + linear.load(); }
};

inline MacCounters& mac_counters() {
    static MacCounters counters;
    return counters;
}

/// Dense row-major array with an explicit shape.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    Tensor(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        require_input(data_.size() == element_count(shape_),
                      "tensor data length does not match shape");
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T(0)) {
        return Tensor({rows, cols}, fill);
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_.front(); }
    std::size_t cols() const { return shape_.size() < 2 ? (shape_.empty() ? 0 : 1) : shape_.back(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    /// Appends one row to a rank-2 tensor (used by growing caches).
    void append_row(std::span<const T> values) {
        if (shape_.empty()) shape_ = {0, values.size()};
        require_contract(shape_.size() == 2 && values.size() == shape_[1], "append_row width mismatch");
        data_.insert(data_.end(), values.begin(), values.end());
        ++shape_[0];
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    friend bool operator==(const Tensor&, const Tensor&) = default;

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// out += a, elementwise.
template <typename T>
void add_inplace(Tensor<T>& out, const Tensor<T>& a) {
    require_contract(out.size() == a.size(), "add_inplace size mismatch");
    T* o = out.data();
    const T* x = a.data();
    for (std::size_t i = 0, n = out.size(); i < n; ++i) o[i] += x[i];
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out = a;
    add_inplace(out, b);
    return out;
}

/// Copies columns [col, col+width) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t col, std::size_t width) {
    Tensor<T> out = Tensor<T>::matrix(x.rows(), width);
    for (std::size_t r = 0; r < x.rows(); ++r)
        std::copy_n(x.data() + r * x.cols() + col, width, out.data() + r * width);
    return out;
}

/// Writes `src` into columns [col, col+src.cols()) of `dst`.
template <typename T>
void assign_cols(Tensor<T>& dst, const Tensor<T>& src, std::size_t col) {
    for (std::size_t r = 0; r < src.rows(); ++r)
        std::copy_n(src.data() + r * src.cols(), src.cols(), dst.data() + r * dst.cols() + col);
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_contract(a.size() == b.size(), "max_abs_diff size mismatch");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace samt
