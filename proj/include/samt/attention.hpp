// SPDX-License-Identifier: Apache-2.0
#pragma once

// Attention masks and masked scaled dot-product attention.
//
// Two evaluation routes share one mask description:
//   * attention_dense materializes the full [n_q, n_k] logit matrix with an
//     additive mask and is the reference path;
//   * attention_band visits only each row's contiguous [begin, end) span, so
//     its work is the sum of row widths.
// Every mask family here (full, band, causal band, hybrid global-local) is
// contiguous per row, so each mask carries its band descriptor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "samt/errors.hpp"
#include "samt/tensor.hpp"
#include "samt/tokenizer.hpp"

namespace samt {

struct RowSpan {
    std::size_t begin = 0;
    std::size_t end = 0; // exclusive

    std::size_t width() const { return end - begin; }
    bool contains(std::size_t j) const { return j >= begin && j < end; }
    friend bool operator==(const RowSpan&, const RowSpan&) = default;
};

enum class MaskKind { Full, Band, CausalBand, HybridGlobalLocal };

/// Per-query metadata for the hybrid mask: the query's token kind and the
/// encoder frame it is aligned to (ignored for global rows).
struct QueryMeta {
    TokenKind kind = TokenKind::Time;
    std::int64_t frame = 0;
};

/// Only Velocity / NoteOn / NoteOff queries are local; Time and the special
/// tokens attend globally.
inline bool is_local_query(TokenKind kind) {
    return kind == TokenKind::NoteOn || kind == TokenKind::NoteOff || kind == TokenKind::Velocity;
}

struct MaskSpec {
    MaskKind kind = MaskKind::Full;
    std::size_t window = 1;
    std::vector<QueryMeta> query_meta;
};

/// Large negative stand-in for -inf on the dense path; exp() of it underflows
/// to exactly zero after max subtraction without producing NaN.
inline constexpr double kMaskedLogit = -1e9;

class AttentionMask {
public:
    AttentionMask() = default;

    /// Mask whose allowed set in row i is exactly spans[i].
    AttentionMask(std::size_t cols, std::vector<RowSpan> spans) : cols_(cols), band_(std::move(spans)) {
        for (std::size_t i = 0; i < band_->size(); ++i) {
            const RowSpan& s = (*band_)[i];
            require_contract(s.begin <= s.end && s.end <= cols_, "row span out of bounds");
            require_contract(s.width() > 0, "attention mask row " + std::to_string(i) + " is fully masked");
        }
        rows_ = band_->size();
    }

    /// Arbitrary mask from a predicate. A band descriptor is attached when
    /// every row's allowed set is contiguous.
    template <typename Pred>
    static AttentionMask from_predicate(std::size_t rows, std::size_t cols, Pred&& allowed) {
        AttentionMask m;
        m.rows_ = rows;
        m.cols_ = cols;
        m.allowed_.assign(rows * cols, 0);
        std::vector<RowSpan> spans(rows);
        bool contiguous = true;
        for (std::size_t i = 0; i < rows; ++i) {
            std::size_t first = cols, last = 0, count = 0;
            for (std::size_t j = 0; j < cols; ++j) {
                if (!allowed(i, j)) continue;
                m.allowed_[i * cols + j] = 1;
                first = std::min(first, j);
                last = j;
                ++count;
            }
            require_contract(count > 0, "attention mask row " + std::to_string(i) + " is fully masked");
            spans[i] = {first, last + 1};
            contiguous = contiguous && (last + 1 - first == count);
        }
        if (contiguous) m.band_ = std::move(spans);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    bool allowed(std::size_t i, std::size_t j) const {
        if (!allowed_.empty()) return allowed_[i * cols_ + j] != 0;
        return (*band_)[i].contains(j);
    }

    /// 0 where attention is allowed, -inf elsewhere.
    template <typename T>
    T additive(std::size_t i, std::size_t j) const {
        return allowed(i, j) ? T(0) : -std::numeric_limits<T>::infinity();
    }

    template <typename T>
    Tensor<T> to_additive() const {
        Tensor<T> m = Tensor<T>::matrix(rows_, cols_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) m(i, j) = additive<T>(i, j);
        return m;
    }

    const std::optional<std::vector<RowSpan>>& band() const { return band_; }

    std::size_t allowed_count() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) n += allowed(i, j);
        return n;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> allowed_;
    std::optional<std::vector<RowSpan>> band_;
};

inline AttentionMask build_full_mask(std::size_t n_q, std::size_t n_k) {
    require_input(n_q >= 1 && n_k >= 1, "mask dimensions must be positive");
    return AttentionMask(n_k, std::vector<RowSpan>(n_q, RowSpan{0, n_k}));
}

/// Symmetric band: allowed iff |i - j| <= floor(w / 2).
inline AttentionMask build_band_mask(std::size_t n, std::size_t w) {
    require_input(n >= 1, "sequence length must be positive");
    require_input(w >= 1, "window must be at least 1");
    const std::size_t half = w / 2;
    std::vector<RowSpan> spans(n);
    for (std::size_t i = 0; i < n; ++i) spans[i] = {i > half ? i - half : 0, std::min(n, i + half + 1)};
    return AttentionMask(n, std::move(spans));
}

/// Causal band: allowed iff 0 <= i - j <= w.
inline RowSpan causal_band_row(std::size_t i, std::size_t w) { return {i > w ? i - w : 0, i + 1}; }

inline AttentionMask build_causal_band_mask(std::size_t n, std::size_t w) {
    require_input(n >= 1, "sequence length must be positive");
    require_input(w >= 1, "window must be at least 1");
    std::vector<RowSpan> spans(n);
    for (std::size_t i = 0; i < n; ++i) spans[i] = causal_band_row(i, w);
    return AttentionMask(n, std::move(spans));
}

/// Lower-triangular mask (causal attention without a window).
inline AttentionMask build_causal_mask(std::size_t n) { return build_causal_band_mask(n, std::max<std::size_t>(n, 1)); }

/// One row of the hybrid global-local mask.
inline RowSpan hybrid_row(const QueryMeta& q, std::size_t key_len, std::size_t w) {
    if (!is_local_query(q.kind)) return {0, key_len};
    require_input(q.frame >= 0 && static_cast<std::size_t>(q.frame) < key_len,
                  "aligned frame " + std::to_string(q.frame) + " outside [0, " + std::to_string(key_len) + ")");
    const auto t = static_cast<std::size_t>(q.frame);
    return {t > w ? t - w : 0, std::min(key_len, t + w + 1)};
}

/// Time-type (and special) queries see every key; other queries see keys
/// with |j - t_i| <= w.
inline AttentionMask build_hybrid_mask(std::span<const QueryMeta> queries, std::size_t key_len, std::size_t w) {
    require_input(key_len >= 1, "key length must be positive");
    require_input(w >= 1, "window must be at least 1");
    std::vector<RowSpan> spans(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) spans[i] = hybrid_row(queries[i], key_len, w);
    return AttentionMask(key_len, std::move(spans));
}

inline AttentionMask build_mask(const MaskSpec& spec, std::size_t n_q, std::size_t n_k) {
    switch (spec.kind) {
    case MaskKind::Full: return build_full_mask(n_q, n_k);
    case MaskKind::Band:
        require_input(n_q == n_k, "band mask needs a square score matrix");
        return build_band_mask(n_q, spec.window);
    case MaskKind::CausalBand:
        require_input(n_q == n_k, "causal band mask needs a square score matrix");
        return build_causal_band_mask(n_q, spec.window);
    case MaskKind::HybridGlobalLocal:
        require_input(spec.query_meta.size() == n_q, "hybrid mask needs one metadata entry per query");
        return build_hybrid_mask(spec.query_meta, n_k, spec.window);
    }
    throw InputError("unknown mask kind");
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention

/// Forward state kept for the backward pass. Probabilities are stored per
/// row over that row's span; the dense path stores full rows, with exact
/// zeros at masked positions.
template <typename T>
struct AttentionCache {
    Tensor<T> q, k, v;
    std::vector<RowSpan> spans;
    std::vector<std::size_t> offsets; // start of row i in probs
    std::vector<T> probs;
    bool valid = false;

    std::span<const T> row_probs(std::size_t i) const { return {probs.data() + offsets[i], spans[i].width()}; }
};

template <typename T>
struct AttentionGrads {
    Tensor<T> dq, dk, dv;
};

namespace detail {

template <typename T>
void check_qkv(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    require_input(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention expects rank-2 Q, K, V");
    require_input(q.cols() == k.cols(), "Q and K widths differ: " + shape_string(q.shape()) + " vs " +
                                            shape_string(k.shape()));
    require_input(k.rows() == v.rows(), "K and V lengths differ");
    require_input(q.cols() > 0, "head dimension must be positive");
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

/// softmax over `logits` in place, max-subtracted, fixed summation order.
template <typename T>
void softmax_inplace(std::span<T> logits) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T x : logits) mx = std::max(mx, x);
    T sum = 0;
    for (T& x : logits) {
        x = std::exp(x - mx);
        sum += x;
    }
    const T inv = T(1) / sum;
    for (T& x : logits) x *= inv;
}

} // namespace detail

/// Reference path: softmax((QK^T + M) / sqrt(d_k)) V over the full matrix.
template <typename T>
Tensor<T> attention_dense(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionMask& mask,
                          AttentionCache<T>* cache = nullptr) {
    detail::check_qkv(q, k, v);
    const std::size_t n_q = q.rows(), n_k = k.rows(), d_k = q.cols(), d_v = v.cols();
    require_input(mask.rows() == n_q && mask.cols() == n_k, "mask shape does not match scores");
    const T scale = T(1) / std::sqrt(static_cast<T>(d_k));
    Tensor<T> out = Tensor<T>::matrix(n_q, d_v);
    std::vector<T> p(n_k);
    if (cache) {
        cache->spans.assign(n_q, RowSpan{0, n_k});
        cache->offsets.resize(n_q);
        cache->probs.assign(n_q * n_k, T(0));
    }
    for (std::size_t i = 0; i < n_q; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < n_k; ++j) {
            const bool ok = mask.allowed(i, j);
            any = any || ok;
            const T m = ok ? T(0) : static_cast<T>(kMaskedLogit);
            p[j] = (detail::dot(q.data() + i * d_k, k.data() + j * d_k, d_k) + m) * scale;
        }
        require_contract(any, "attention row " + std::to_string(i) + " is fully masked");
        detail::softmax_inplace(std::span<T>(p));
        T* o = out.data() + i * d_v;
        for (std::size_t j = 0; j < n_k; ++j) {
            const T* vr = v.data() + j * d_v;
            for (std::size_t c = 0; c < d_v; ++c) o[c] += p[j] * vr[c];
        }
        if (cache) {
            cache->offsets[i] = i * n_k;
            std::copy(p.begin(), p.end(), cache->probs.begin() + static_cast<std::ptrdiff_t>(i * n_k));
        }
    }
    mac_counters().attention += n_q * n_k * (d_k + d_v);
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->valid = true;
    }
    return out;
}

/// Band path: each row only touches keys in its span.
template <typename T>
Tensor<T> attention_band(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::span<const RowSpan> band,
                         AttentionCache<T>* cache = nullptr) {
    detail::check_qkv(q, k, v);
    const std::size_t n_q = q.rows(), n_k = k.rows(), d_k = q.cols(), d_v = v.cols();
    require_input(band.size() == n_q, "band descriptor has wrong number of rows");
    const T scale = T(1) / std::sqrt(static_cast<T>(d_k));
    Tensor<T> out = Tensor<T>::matrix(n_q, d_v);
    std::size_t work = 0;
    if (cache) {
        cache->spans.assign(band.begin(), band.end());
        cache->offsets.resize(n_q);
        cache->probs.clear();
    }
    std::vector<T> p;
    for (std::size_t i = 0; i < n_q; ++i) {
        const RowSpan s = band[i];
        require_contract(s.width() > 0, "attention row " + std::to_string(i) + " has an empty band");
        require_contract(s.end <= n_k, "band row exceeds key length");
        p.resize(s.width());
        for (std::size_t j = s.begin; j < s.end; ++j)
            p[j - s.begin] = detail::dot(q.data() + i * d_k, k.data() + j * d_k, d_k) * scale;
        detail::softmax_inplace(std::span<T>(p));
        T* o = out.data() + i * d_v;
        for (std::size_t j = s.begin; j < s.end; ++j) {
            const T pj = p[j - s.begin];
            const T* vr = v.data() + j * d_v;
            for (std::size_t c = 0; c < d_v; ++c) o[c] += pj * vr[c];
        }
        work += s.width();
        if (cache) {
            cache->offsets[i] = cache->probs.size();
            cache->probs.insert(cache->probs.end(), p.begin(), p.end());
        }
    }
    mac_counters().attention += work * (d_k + d_v);
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->valid = true;
    }
    return out;
}

template <typename T>
Tensor<T> attention_band(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionMask& mask,
                         AttentionCache<T>* cache = nullptr) {
    require_input(mask.band().has_value(), "mask is not contiguous per row; use attention_dense");
    require_input(mask.cols() == k.rows(), "mask width does not match key length");
    return attention_band(q, k, v, std::span<const RowSpan>(*mask.band()), cache);
}

/// Gradients of sum(grad_out * attention(Q, K, V)) with respect to Q, K, V.
/// Works for both routes: positions outside a row's span (or with zero
/// probability) get exactly zero gradient.
template <typename T>
AttentionGrads<T> attention_backward(const Tensor<T>& grad_out, const AttentionCache<T>& cache) {
    require_contract(cache.valid, "attention backward called without saved forward state");
    const auto& q = cache.q;
    const auto& k = cache.k;
    const auto& v = cache.v;
    const std::size_t n_q = q.rows(), d_k = q.cols(), d_v = v.cols();
    require_contract(grad_out.rows() == n_q && grad_out.cols() == d_v, "attention grad_out shape mismatch");
    const T scale = T(1) / std::sqrt(static_cast<T>(d_k));
    AttentionGrads<T> g{Tensor<T>(q.shape()), Tensor<T>(k.shape()), Tensor<T>(v.shape())};
    std::vector<T> ds;
    std::size_t work = 0;
    for (std::size_t i = 0; i < n_q; ++i) {
        const RowSpan s = cache.spans[i];
        const auto p = cache.row_probs(i);
        const T* go = grad_out.data() + i * d_v;
        ds.resize(s.width());
        T weighted = 0;
        for (std::size_t j = s.begin; j < s.end; ++j) {
            const T pj = p[j - s.begin];
            T* dv = g.dv.data() + j * d_v;
            for (std::size_t c = 0; c < d_v; ++c) dv[c] += pj * go[c];
            const T dp = detail::dot(go, v.data() + j * d_v, d_v);
            ds[j - s.begin] = dp;
            weighted += pj * dp;
        }
        T* dq = g.dq.data() + i * d_k;
        const T* qi = q.data() + i * d_k;
        for (std::size_t j = s.begin; j < s.end; ++j) {
            const T pj = p[j - s.begin];
            if (pj == T(0)) continue;
            const T dsj = pj * (ds[j - s.begin] - weighted) * scale;
            const T* kj = k.data() + j * d_k;
            T* dk = g.dk.data() + j * d_k;
            for (std::size_t c = 0; c < d_k; ++c) {
                dq[c] += dsj * kj[c];
                dk[c] += dsj * qi[c];
            }
        }
        work += s.width();
    }
    mac_counters().attention += 2 * work * (d_k + d_v);
    return g;
}

// ---------------------------------------------------------------------------
// Linear projection (shared by MHA and the model)

/// y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
    Tensor<T> weight;
    Tensor<T> bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out) : weight({in, out}), bias({out}) {}

    std::size_t in_features() const { return weight.rows(); }
    std::size_t out_features() const { return weight.cols(); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

template <typename T>
void linear_row(const Linear<T>& lin, const T* x, T* y) {
    const std::size_t in = lin.in_features(), out = lin.out_features();
    std::copy_n(lin.bias.data(), out, y);
    const T* w = lin.weight.data();
    for (std::size_t k = 0; k < in; ++k) {
        const T xk = x[k];
        if (xk == T(0)) continue;
        const T* wr = w + k * out;
        for (std::size_t c = 0; c < out; ++c) y[c] += xk * wr[c];
    }
}

template <typename T>
Tensor<T> linear_forward(const Linear<T>& lin, const Tensor<T>& x) {
    require_input(x.cols() == lin.in_features(), "linear input width " + std::to_string(x.cols()) +
                                                     " != " + std::to_string(lin.in_features()));
    Tensor<T> y = Tensor<T>::matrix(x.rows(), lin.out_features());
    for (std::size_t r = 0; r < x.rows(); ++r) linear_row(lin, x.data() + r * x.cols(), y.data() + r * y.cols());
    mac_counters().linear += x.rows() * lin.in_features() * lin.out_features();
    return y;
}

/// Accumulates dW, db into `grads` and returns dx.
template <typename T>
Tensor<T> linear_backward(const Linear<T>& lin, const Tensor<T>& x, const Tensor<T>& dy, Linear<T>& grads) {
    const std::size_t in = lin.in_features(), out = lin.out_features();
    Tensor<T> dx = Tensor<T>::matrix(x.rows(), in);
    const T* w = lin.weight.data();
    T* dw = grads.weight.data();
    T* db = grads.bias.data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const T* g = dy.data() + r * out;
        const T* xr = x.data() + r * in;
        T* dxr = dx.data() + r * in;
        for (std::size_t c = 0; c < out; ++c) db[c] += g[c];
        for (std::size_t k = 0; k < in; ++k) {
            const T* wr = w + k * out;
            dxr[k] = detail::dot(g, wr, out);
            const T xk = xr[k];
            if (xk == T(0)) continue;
            T* dwr = dw + k * out;
            for (std::size_t c = 0; c < out; ++c) dwr[c] += xk * g[c];
        }
    }
    mac_counters().linear += 2 * x.rows() * in * out;
    return dx;
}

// ---------------------------------------------------------------------------
// Multi-head attention

enum class AttentionPath { Dense, Band };

template <typename T>
struct MhaParams {
    Linear<T> q, k, v, o;

    MhaParams() = default;
    explicit MhaParams(std::size_t d_model) : q(d_model, d_model), k(d_model, d_model), v(d_model, d_model), o(d_model, d_model) {}

    std::size_t d_model() const { return q.in_features(); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        q.visit(prefix + ".q", f);
        k.visit(prefix + ".k", f);
        v.visit(prefix + ".v", f);
        o.visit(prefix + ".o", f);
    }
};

template <typename T>
struct MhaCache {
    Tensor<T> xq, xkv;
    Tensor<T> q, k, v;
    Tensor<T> concat;
    std::vector<AttentionCache<T>> heads;
    bool valid = false;
};

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionMask& mask,
                 AttentionPath path, AttentionCache<T>* cache) {
    if (path == AttentionPath::Band && mask.band()) return attention_band(q, k, v, mask, cache);
    return attention_dense(q, k, v, mask, cache);
}

/// Attention over already-projected Q, K, V split into `heads` column groups;
/// returns the concatenated head outputs (before the output projection).
template <typename T>
Tensor<T> multi_head_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionMask& mask,
                          std::size_t heads, AttentionPath path, std::vector<AttentionCache<T>>* caches) {
    const std::size_t d_model = q.cols();
    const std::size_t d_k = d_model / heads;
    Tensor<T> concat = Tensor<T>::matrix(q.rows(), d_model);
    if (caches) caches->assign(heads, {});
    for (std::size_t h = 0; h < heads; ++h) {
        const auto out = attend(slice_cols(q, h * d_k, d_k), slice_cols(k, h * d_k, d_k), slice_cols(v, h * d_k, d_k),
                                mask, path, caches ? &(*caches)[h] : nullptr);
        assign_cols(concat, out, h * d_k);
    }
    return concat;
}

template <typename T>
Tensor<T> multi_head_attention(const MhaParams<T>& p, const Tensor<T>& x_q, const Tensor<T>& x_kv,
                               const AttentionMask& mask, std::size_t heads, AttentionPath path = AttentionPath::Band,
                               MhaCache<T>* cache = nullptr) {
    const std::size_t d_model = p.d_model();
    require_input(heads >= 1 && d_model % heads == 0, "d_model must be divisible by the head count");
    require_input(x_q.cols() == d_model && x_kv.cols() == d_model, "MHA input width does not match d_model");
    require_input(mask.rows() == x_q.rows() && mask.cols() == x_kv.rows(), "MHA mask shape mismatch");
    auto q = linear_forward(p.q, x_q);
    auto k = linear_forward(p.k, x_kv);
    auto v = linear_forward(p.v, x_kv);
    auto concat = multi_head_core(q, k, v, mask, heads, path, cache ? &cache->heads : nullptr);
    auto out = linear_forward(p.o, concat);
    if (cache) {
        cache->xq = x_q;
        cache->xkv = x_kv;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->concat = std::move(concat);
        cache->valid = true;
    }
    return out;
}

template <typename T>
struct MhaInputGrads {
    Tensor<T> dx_q, dx_kv;
};

/// Accumulates parameter gradients into `grads`; returns input gradients.
template <typename T>
MhaInputGrads<T> multi_head_attention_backward(const MhaParams<T>& p, const MhaCache<T>& cache, const Tensor<T>& grad_out,
                                               MhaParams<T>& grads) {
    require_contract(cache.valid, "MHA backward called without saved forward state");
    const std::size_t heads = cache.heads.size();
    const std::size_t d_k = p.d_model() / heads;
    const auto d_concat = linear_backward(p.o, cache.concat, grad_out, grads.o);
    Tensor<T> dq(cache.q.shape()), dk(cache.k.shape()), dv(cache.v.shape());
    for (std::size_t h = 0; h < heads; ++h) {
        const auto g = attention_backward(slice_cols(d_concat, h * d_k, d_k), cache.heads[h]);
        assign_cols(dq, g.dq, h * d_k);
        assign_cols(dk, g.dk, h * d_k);
        assign_cols(dv, g.dv, h * d_k);
    }
    MhaInputGrads<T> out;
    out.dx_q = linear_backward(p.q, cache.xq, dq, grads.q);
    out.dx_kv = linear_backward(p.k, cache.xkv, dk, grads.k);
    add_inplace(out.dx_kv, linear_backward(p.v, cache.xkv, dv, grads.v));
    return out;
}

} // namespace samt
