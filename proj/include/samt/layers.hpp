// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "samt/attention.hpp"
#include "samt/errors.hpp"
#include "samt/tensor.hpp"

namespace samt {

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
struct LayerNorm {
    Tensor<T> gain;
    Tensor<T> bias;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t d) : gain({d}, T(1)), bias({d}) {}

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gain", gain);
        f(prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNormCache {
    Tensor<T> xhat;
    std::vector<T> inv_std;
};

template <typename T>
Tensor<T> layer_norm_forward(const LayerNorm<T>& ln, const Tensor<T>& x, LayerNormCache<T>* cache = nullptr) {
    const std::size_t d = x.cols();
    require_input(d == ln.gain.size(), "layer norm width mismatch");
    Tensor<T> y(x.shape());
    if (cache) {
        cache->xhat = Tensor<T>(x.shape());
        cache->inv_std.assign(x.rows(), T(0));
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const T* xr = x.data() + r * d;
        T mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        T* yr = y.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) {
            const T h = (xr[c] - mean) * inv;
            if (cache) cache->xhat(r, c) = h;
            yr[c] = h * ln.gain[c] + ln.bias[c];
        }
        if (cache) cache->inv_std[r] = inv;
    }
    return y;
}

template <typename T>
Tensor<T> layer_norm_backward(const LayerNorm<T>& ln, const LayerNormCache<T>& cache, const Tensor<T>& dy,
                              LayerNorm<T>& grads) {
    const std::size_t d = dy.cols();
    require_contract(cache.xhat.same_shape(dy), "layer norm backward without matching forward state");
    Tensor<T> dx(dy.shape());
    std::vector<T> dh(d);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        const T* g = dy.data() + r * d;
        const T* h = cache.xhat.data() + r * d;
        T sum_dh = 0, sum_dh_h = 0;
        for (std::size_t c = 0; c < d; ++c) {
            grads.gain[c] += g[c] * h[c];
            grads.bias[c] += g[c];
            dh[c] = g[c] * ln.gain[c];
            sum_dh += dh[c];
            sum_dh_h += dh[c] * h[c];
        }
        const T inv = cache.inv_std[r];
        const T nd = static_cast<T>(d);
        T* dxr = dx.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dxr[c] = inv * (dh[c] - sum_dh / nd - h[c] * sum_dh_h / nd);
    }
    return dx;
}

/// Position-wise feed-forward network with ReLU.
template <typename T>
struct FeedForward {
    Linear<T> in, out;

    FeedForward() = default;
    FeedForward(std::size_t d_model, std::size_t d_ff) : in(d_model, d_ff), out(d_ff, d_model) {}

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        in.visit(prefix + ".in", f);
        out.visit(prefix + ".out", f);
    }
};

template <typename T>
struct FeedForwardCache {
    Tensor<T> x, hidden; // hidden is post-ReLU
};

template <typename T>
Tensor<T> feed_forward(const FeedForward<T>& ffn, const Tensor<T>& x, FeedForwardCache<T>* cache = nullptr) {
    auto hidden = linear_forward(ffn.in, x);
    for (auto& v : hidden.values()) v = v > T(0) ? v : T(0);
    auto y = linear_forward(ffn.out, hidden);
    if (cache) {
        cache->x = x;
        cache->hidden = std::move(hidden);
    }
    return y;
}

template <typename T>
Tensor<T> feed_forward_backward(const FeedForward<T>& ffn, const FeedForwardCache<T>& cache, const Tensor<T>& dy,
                                FeedForward<T>& grads) {
    auto dh = linear_backward(ffn.out, cache.hidden, dy, grads.out);
    for (std::size_t i = 0; i < dh.size(); ++i)
        if (!(cache.hidden[i] > T(0))) dh[i] = T(0);
    return linear_backward(ffn.in, cache.x, dh, grads.in);
}

/// Rows of `table` selected by `ids`.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const TokenId> ids) {
    const std::size_t d = table.cols();
    Tensor<T> out = Tensor<T>::matrix(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require_input(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < table.rows(), "token id out of range");
        std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    return out;
}

template <typename T>
void embedding_backward(Tensor<T>& grad_table, std::span<const TokenId> ids, const Tensor<T>& dy) {
    const std::size_t d = grad_table.cols();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        T* g = grad_table.data() + static_cast<std::size_t>(ids[i]) * d;
        const T* src = dy.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) g[c] += src[c];
    }
}

/// Fixed sinusoidal encoding for one position.
template <typename T>
void add_positional_encoding_row(T* row, std::size_t pos, std::size_t d) {
    for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        row[i] += static_cast<T>(std::sin(angle));
        if (i + 1 < d) row[i + 1] += static_cast<T>(std::cos(angle));
    }
}

template <typename T>
void add_positional_encoding(Tensor<T>& x, std::size_t first_pos = 0) {
    for (std::size_t r = 0; r < x.rows(); ++r) add_positional_encoding_row(x.data() + r * x.cols(), first_pos + r, x.cols());
}

/// Non-overlapping average pooling along time; a short tail group averages
/// only its own members.
template <typename T>
Tensor<T> pool_encoder_output(const Tensor<T>& z, std::size_t kernel) {
    require_input(kernel >= 1, "pooling kernel must be at least 1");
    if (kernel == 1) return z;
    const std::size_t n = z.rows(), d = z.cols();
    const std::size_t out_len = (n + kernel - 1) / kernel;
    Tensor<T> out = Tensor<T>::matrix(out_len, d);
    for (std::size_t g = 0; g < out_len; ++g) {
        const std::size_t begin = g * kernel, end = std::min(n, begin + kernel);
        T* o = out.data() + g * d;
        for (std::size_t r = begin; r < end; ++r)
            for (std::size_t c = 0; c < d; ++c) o[c] += z(r, c);
        const T inv = T(1) / static_cast<T>(end - begin);
        for (std::size_t c = 0; c < d; ++c) o[c] *= inv;
    }
    return out;
}

template <typename T>
Tensor<T> pool_encoder_output_backward(const Tensor<T>& dy, std::size_t input_len, std::size_t kernel) {
    if (kernel == 1) return dy;
    const std::size_t d = dy.cols();
    Tensor<T> dz = Tensor<T>::matrix(input_len, d);
    for (std::size_t g = 0; g < dy.rows(); ++g) {
        const std::size_t begin = g * kernel, end = std::min(input_len, begin + kernel);
        const T inv = T(1) / static_cast<T>(end - begin);
        for (std::size_t r = begin; r < end; ++r)
            for (std::size_t c = 0; c < d; ++c) dz(r, c) = dy(g, c) * inv;
    }
    return dz;
}

/// Inverted dropout. An empty mask means identity (eval mode or rate 0).
template <typename T>
struct DropoutMask {
    std::vector<T> scale;
};

template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& x, double rate, std::mt19937_64* rng, DropoutMask<T>* mask) {
    if (!rng || rate <= 0) {
        if (mask) mask->scale.clear();
        return x;
    }
    require_input(rate < 1, "dropout rate must be below 1");
    std::bernoulli_distribution keep(1.0 - rate);
    const T kept = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> scale(x.size());
    for (auto& s : scale) s = keep(*rng) ? kept : T(0);
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= scale[i];
    if (mask) mask->scale = std::move(scale);
    return y;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& dy, const DropoutMask<T>& mask) {
    if (mask.scale.empty()) return dy;
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask.scale[i];
    return dx;
}

/// Sum of token cross-entropies over rows whose target is not PAD; `dlogits`
/// receives d(sum)/d(logits) scaled by `grad_scale`.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets, T grad_scale, Tensor<T>* dlogits) {
    const std::size_t v = logits.cols();
    require_contract(targets.size() == logits.rows(), "target count does not match logits");
    if (dlogits) *dlogits = Tensor<T>(logits.shape());
    T total = 0;
    std::vector<T> p(v);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        if (targets[r] == vocab::kPad) continue;
        std::copy_n(logits.data() + r * v, v, p.begin());
        T mx = p[0];
        for (T x : p) mx = std::max(mx, x);
        T sum = 0;
        for (T& x : p) {
            x = std::exp(x - mx);
            sum += x;
        }
        const auto t = static_cast<std::size_t>(targets[r]);
        total += -(logits(r, t) - mx - std::log(sum));
        if (dlogits) {
            T* d = dlogits->data() + r * v;
            for (std::size_t c = 0; c < v; ++c) d[c] = grad_scale * p[c] / sum;
            d[t] -= grad_scale;
        }
    }
    return total;
}

} // namespace samt
