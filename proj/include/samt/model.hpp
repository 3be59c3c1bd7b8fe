// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pre-LN encoder-decoder transcription model.
//
// Encoder: input projection + sinusoidal positions, then blocks of
//   x += Dropout(MHA(LN(x)));  x += Dropout(FFN(LN(x)))
// followed by a final LN. Each decoder layer l cross-attends to the encoder
// output average-pooled by pooling[l]. Decoder blocks are
//   x += Dropout(SelfMHA(LN(x)));  x += Dropout(CrossMHA(LN(x), Z_l));
//   x += Dropout(FFN(LN(x)))
// with a final LN and a projection to vocabulary logits.

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "samt/attention.hpp"
#include "samt/config.hpp"
#include "samt/errors.hpp"
#include "samt/layers.hpp"
#include "samt/tensor.hpp"
#include "samt/tokenizer.hpp"

namespace samt {

enum class EncoderSelfAttention { Full, Local };
enum class DecoderSelfAttention { Full, CausalLocal };
enum class CrossAttention { Full, HybridGlobalLocal };

enum class Variant { Baseline, V1, V2, V3, V4, V5 };

inline std::string to_string(Variant v) {
    switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::V1: return "V1";
    case Variant::V2: return "V2";
    case Variant::V3: return "V3";
    case Variant::V4: return "V4";
    case Variant::V5: return "V5";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::Baseline, Variant::V1, Variant::V2, Variant::V3, Variant::V4, Variant::V5})
        if (s == to_string(v)) return v;
    throw InputError("unknown variant '" + s + "' (expected baseline, V1..V5)");
}

/// Coarse-to-fine pooling: kernels 4, 2, 1 spread evenly over the layers,
/// giving 4,4,2,2,1,1 for six layers.
inline std::vector<std::size_t> hierarchical_pooling(std::size_t layers) {
    std::vector<std::size_t> k(layers, 1);
    if (layers <= 1) return k;
    for (std::size_t l = 0; l < layers; ++l) {
        const double stage = std::round(2.0 * static_cast<double>(l) / static_cast<double>(layers - 1));
        k[l] = std::size_t{4} >> static_cast<int>(stage);
    }
    return k;
}

struct ModelConfig {
    std::size_t n_input = 512;
    std::size_t d_model = 512;
    std::size_t heads = 8;
    std::size_t d_ff = 1024;
    std::size_t enc_layers = 6;
    std::size_t dec_layers = 6;
    std::size_t window = 64;
    double dropout = 0.1;
    std::size_t vocab_size = static_cast<std::size_t>(vocab::kSize);
    std::size_t max_output_len = 1024;
    std::vector<std::size_t> pooling = hierarchical_pooling(6);
    EncoderSelfAttention enc_self = EncoderSelfAttention::Local;
    DecoderSelfAttention dec_self = DecoderSelfAttention::CausalLocal;
    CrossAttention cross = CrossAttention::HybridGlobalLocal;
    AttentionPath path = AttentionPath::Band;

    void validate() const {
        require_input(d_model >= 1 && heads >= 1 && d_model % heads == 0, "d_model must be divisible by heads");
        require_input(n_input >= 1 && d_ff >= 1, "layer widths must be positive");
        require_input(enc_layers >= 1 && dec_layers >= 1, "need at least one encoder and decoder layer");
        require_input(window >= 1, "window must be at least 1");
        require_input(dropout >= 0 && dropout < 1, "dropout must be in [0, 1)");
        require_input(vocab_size == static_cast<std::size_t>(vocab::kSize), "vocab_size must be 987");
        require_input(max_output_len >= 2, "max_output_len must be at least 2");
        require_input(pooling.size() == dec_layers, "pooling schedule needs one kernel per decoder layer");
        for (auto k : pooling) require_input(k >= 1, "pooling kernels must be at least 1");
    }

    /// Canonical text: fixed key order, one key=value per line.
    std::string to_text() const {
        std::string s;
        auto put = [&](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
        put("n_input", std::to_string(n_input));
        put("d_model", std::to_string(d_model));
        put("heads", std::to_string(heads));
        put("d_ff", std::to_string(d_ff));
        put("enc_layers", std::to_string(enc_layers));
        put("dec_layers", std::to_string(dec_layers));
        put("window", std::to_string(window));
        put("dropout", format_double(dropout));
        put("vocab_size", std::to_string(vocab_size));
        put("max_output_len", std::to_string(max_output_len));
        put("pooling", join_sizes(pooling));
        put("enc_self", enc_self == EncoderSelfAttention::Full ? "full" : "local");
        put("dec_self", dec_self == DecoderSelfAttention::Full ? "full" : "causal_local");
        put("cross", cross == CrossAttention::Full ? "full" : "hybrid");
        put("attention_path", path == AttentionPath::Band ? "band" : "dense");
        put("positional", "sinusoidal");
        return s;
    }

    /// Reads keys named `prefix + key`; missing keys keep `base` values.
    static ModelConfig from_keys(const KeyValues& kv, const std::string& prefix = "") { return from_keys(kv, prefix, ModelConfig()); }

    static ModelConfig from_keys(const KeyValues& kv, const std::string& prefix, ModelConfig base) {
        ModelConfig c = base;
        auto key = [&](const char* k) { return prefix + k; };
        c.n_input = kv.get_size(key("n_input"), c.n_input);
        c.d_model = kv.get_size(key("d_model"), c.d_model);
        c.heads = kv.get_size(key("heads"), c.heads);
        c.d_ff = kv.get_size(key("d_ff"), c.d_ff);
        c.enc_layers = kv.get_size(key("enc_layers"), c.enc_layers);
        const std::size_t old_dec = c.dec_layers;
        c.dec_layers = kv.get_size(key("dec_layers"), c.dec_layers);
        c.window = kv.get_size(key("window"), c.window);
        c.dropout = kv.get_double(key("dropout"), c.dropout);
        c.vocab_size = kv.get_size(key("vocab_size"), c.vocab_size);
        c.max_output_len = kv.get_size(key("max_output_len"), c.max_output_len);
        if (c.dec_layers != old_dec) c.pooling.assign(c.dec_layers, 1);
        if (kv.has(key("variant"))) c = with_variant(c, parse_variant(kv.get(key("variant"), "")));
        c.pooling = kv.get_sizes(key("pooling"), c.pooling);
        const std::string es = kv.get(key("enc_self"), c.enc_self == EncoderSelfAttention::Full ? "full" : "local");
        require_input(es == "full" || es == "local", "enc_self must be full or local");
        c.enc_self = es == "full" ? EncoderSelfAttention::Full : EncoderSelfAttention::Local;
        const std::string ds = kv.get(key("dec_self"), c.dec_self == DecoderSelfAttention::Full ? "full" : "causal_local");
        require_input(ds == "full" || ds == "causal_local", "dec_self must be full or causal_local");
        c.dec_self = ds == "full" ? DecoderSelfAttention::Full : DecoderSelfAttention::CausalLocal;
        const std::string cr = kv.get(key("cross"), c.cross == CrossAttention::Full ? "full" : "hybrid");
        require_input(cr == "full" || cr == "hybrid", "cross must be full or hybrid");
        c.cross = cr == "full" ? CrossAttention::Full : CrossAttention::HybridGlobalLocal;
        const std::string ap = kv.get(key("attention_path"), c.path == AttentionPath::Band ? "band" : "dense");
        require_input(ap == "band" || ap == "dense", "attention_path must be band or dense");
        c.path = ap == "band" ? AttentionPath::Band : AttentionPath::Dense;
        require_input(kv.get(key("positional"), "sinusoidal") == "sinusoidal", "only sinusoidal positions are supported");
        c.validate();
        return c;
    }

    static ModelConfig from_text(std::string_view text) {
        const auto kv = KeyValues::parse(text);
        auto c = from_keys(kv);
        kv.reject_unused("model config");
        return c;
    }

    /// Attention/pooling columns of one model row.
    static ModelConfig with_variant(ModelConfig c, Variant v) {
        c.enc_self = v == Variant::Baseline ? EncoderSelfAttention::Full : EncoderSelfAttention::Local;
        c.dec_self = (v == Variant::Baseline || v == Variant::V1) ? DecoderSelfAttention::Full
                                                                  : DecoderSelfAttention::CausalLocal;
        c.cross = (v == Variant::V3 || v == Variant::V4 || v == Variant::V5) ? CrossAttention::HybridGlobalLocal
                                                                              : CrossAttention::Full;
        if (v == Variant::V4)
            c.pooling.assign(c.dec_layers, 4);
        else if (v == Variant::V5)
            c.pooling = hierarchical_pooling(c.dec_layers);
        else
            c.pooling.assign(c.dec_layers, 1);
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct EncoderLayer {
    LayerNorm<T> ln_attn;
    MhaParams<T> attn;
    LayerNorm<T> ln_ffn;
    FeedForward<T> ffn;

    EncoderLayer() = default;
    explicit EncoderLayer(const ModelConfig& c)
        : ln_attn(c.d_model), attn(c.d_model), ln_ffn(c.d_model), ffn(c.d_model, c.d_ff) {}

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        ln_attn.visit(prefix + ".ln_attn", f);
        attn.visit(prefix + ".attn", f);
        ln_ffn.visit(prefix + ".ln_ffn", f);
        ffn.visit(prefix + ".ffn", f);
    }
};

template <typename T>
struct DecoderLayer {
    LayerNorm<T> ln_self;
    MhaParams<T> self_attn;
    LayerNorm<T> ln_cross;
    MhaParams<T> cross_attn;
    LayerNorm<T> ln_ffn;
    FeedForward<T> ffn;

    DecoderLayer() = default;
    explicit DecoderLayer(const ModelConfig& c)
        : ln_self(c.d_model), self_attn(c.d_model), ln_cross(c.d_model), cross_attn(c.d_model), ln_ffn(c.d_model),
          ffn(c.d_model, c.d_ff) {}

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        ln_self.visit(prefix + ".ln_self", f);
        self_attn.visit(prefix + ".self_attn", f);
        ln_cross.visit(prefix + ".ln_cross", f);
        cross_attn.visit(prefix + ".cross_attn", f);
        ln_ffn.visit(prefix + ".ln_ffn", f);
        ffn.visit(prefix + ".ffn", f);
    }
};

template <typename T>
struct ModelParams {
    Linear<T> input;
    std::vector<EncoderLayer<T>> encoder;
    LayerNorm<T> enc_norm;
    Tensor<T> embedding;
    std::vector<DecoderLayer<T>> decoder;
    LayerNorm<T> dec_norm;
    Linear<T> output;

    ModelParams() = default;

    /// Zero weights, unit LN gains: the shape template for gradients.
    explicit ModelParams(const ModelConfig& c)
        : input(c.n_input, c.d_model), encoder(c.enc_layers, EncoderLayer<T>(c)), enc_norm(c.d_model),
          embedding({c.vocab_size, c.d_model}), decoder(c.dec_layers, DecoderLayer<T>(c)), dec_norm(c.d_model),
          output(c.d_model, c.vocab_size) {}

    /// Visits every parameter tensor in a fixed order with its dotted name.
    template <typename F>
    void visit(F&& f) {
        input.visit("input", f);
        for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit("encoder." + std::to_string(i), f);
        enc_norm.visit("enc_norm", f);
        f(std::string("embedding"), embedding);
        for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].visit("decoder." + std::to_string(i), f);
        dec_norm.visit("dec_norm", f);
        output.visit("output", f);
    }

    template <typename F>
    void visit(F&& f) const {
        const_cast<ModelParams*>(this)->visit([&](const std::string& n, Tensor<T>& t) { f(n, static_cast<const Tensor<T>&>(t)); });
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        visit([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
        return n;
    }

    /// Zeros every tensor (LN gains included).
    void zero() {
        visit([](const std::string&, Tensor<T>& t) { t.fill(T(0)); });
    }

    template <typename U>
    ModelParams<U> cast(const ModelConfig& c) const {
        ModelParams<U> out(c);
        auto dst = out.named_tensors();
        std::size_t i = 0;
        visit([&](const std::string&, const Tensor<T>& t) { *dst[i++].second = t.template cast<U>(); });
        return out;
    }
};

/// Gradient buffer with the same layout as the parameters, all zeros.
template <typename T>
ModelParams<T> zero_grads(const ModelConfig& c) {
    ModelParams<T> g(c);
    g.zero();
    return g;
}

inline bool is_bias_like(const std::string& name) {
    auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends_with(".bias") || ends_with(".gain");
}

/// Truncated normal (std 0.02, cut at 2 std) for weights and embeddings,
/// zero biases, unit LN gains.
template <typename T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed, double stddev = 0.02) {
    c.validate();
    ModelParams<T> p(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    p.visit([&](const std::string& name, Tensor<T>& t) {
        if (is_bias_like(name)) return;
        for (auto& v : t.values()) {
            double z;
            do {
                z = normal(rng);
            } while (std::abs(z) > 2.0);
            v = static_cast<T>(z * stddev);
        }
    });
    return p;
}

// ---------------------------------------------------------------------------
// Masks

inline AttentionMask encoder_self_mask(const ModelConfig& c, std::size_t n) {
    return c.enc_self == EncoderSelfAttention::Full ? build_full_mask(n, n) : build_band_mask(n, c.window);
}

inline RowSpan decoder_self_row(const ModelConfig& c, std::size_t i) {
    return c.dec_self == DecoderSelfAttention::Full ? RowSpan{0, i + 1} : causal_band_row(i, c.window);
}

inline AttentionMask decoder_self_mask(const ModelConfig& c, std::size_t n) {
    return c.dec_self == DecoderSelfAttention::Full ? build_causal_mask(n) : build_causal_band_mask(n, c.window);
}

/// Alignment metadata for a query whose decoder input token has `kind`, given
/// the most recent Time bin so far (-1 if none). Frames are rescaled by the
/// pooling kernel and clamped to the pooled length.
inline QueryMeta align_query(TokenKind kind, std::int64_t last_time_bin, std::size_t kernel, std::size_t key_len) {
    if (last_time_bin < 0 || !is_local_query(kind)) return {TokenKind::Time, 0};
    const auto frame = std::min<std::int64_t>(last_time_bin / static_cast<std::int64_t>(kernel),
                                              static_cast<std::int64_t>(key_len) - 1);
    return {kind, frame};
}

inline std::vector<QueryMeta> align_queries(std::span<const TokenId> ids, std::size_t kernel, std::size_t key_len) {
    std::vector<QueryMeta> meta(ids.size());
    std::int64_t last = -1;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const Token t = decode(ids[i]);
        if (t.kind == TokenKind::Time) last = t.value;
        meta[i] = align_query(t.kind, last, kernel, key_len);
    }
    return meta;
}

inline AttentionMask cross_mask(const ModelConfig& c, std::span<const TokenId> ids, std::size_t kernel, std::size_t key_len) {
    if (c.cross == CrossAttention::Full) return build_full_mask(ids.size(), key_len);
    const auto meta = align_queries(ids, kernel, key_len);
    return build_hybrid_mask(meta, key_len, c.window);
}

// ---------------------------------------------------------------------------
// Encoder

template <typename T>
struct EncoderLayerCache {
    LayerNormCache<T> ln_attn;
    MhaCache<T> attn;
    DropoutMask<T> drop_attn;
    LayerNormCache<T> ln_ffn;
    FeedForwardCache<T> ffn;
    DropoutMask<T> drop_ffn;
};

template <typename T>
struct EncoderCache {
    Tensor<T> features;
    std::vector<EncoderLayerCache<T>> layers;
    LayerNormCache<T> final_norm;
};

template <typename T>
Tensor<T> encode(const ModelConfig& c, const ModelParams<T>& p, const Tensor<T>& features,
                 EncoderCache<T>* cache = nullptr, std::mt19937_64* rng = nullptr) {
    require_input(features.rank() == 2 && features.cols() == c.n_input,
                  "features must be [T, " + std::to_string(c.n_input) + "], got " + shape_string(features.shape()));
    require_input(features.rows() >= 1, "features must have at least one frame");
    const std::size_t n = features.rows();
    auto x = linear_forward(p.input, features);
    add_positional_encoding(x);
    const auto mask = encoder_self_mask(c, n);
    if (cache) {
        cache->features = features;
        cache->layers.assign(c.enc_layers, {});
    }
    for (std::size_t l = 0; l < c.enc_layers; ++l) {
        const auto& L = p.encoder[l];
        EncoderLayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
        auto h = layer_norm_forward(L.ln_attn, x, lc ? &lc->ln_attn : nullptr);
        auto a = multi_head_attention(L.attn, h, h, mask, c.heads, c.path, lc ? &lc->attn : nullptr);
        add_inplace(x, dropout_forward(a, c.dropout, rng, lc ? &lc->drop_attn : nullptr));
        h = layer_norm_forward(L.ln_ffn, x, lc ? &lc->ln_ffn : nullptr);
        auto f = feed_forward(L.ffn, h, lc ? &lc->ffn : nullptr);
        add_inplace(x, dropout_forward(f, c.dropout, rng, lc ? &lc->drop_ffn : nullptr));
        require_contract(x.all_finite(), "non-finite activations in encoder layer " + std::to_string(l));
    }
    return layer_norm_forward(p.enc_norm, x, cache ? &cache->final_norm : nullptr);
}

/// Backpropagates dZ through the encoder, accumulating into `grads`.
template <typename T>
void encode_backward(const ModelConfig& c, const ModelParams<T>& p, const EncoderCache<T>& cache, const Tensor<T>& dz,
                     ModelParams<T>& grads) {
    auto dx = layer_norm_backward(p.enc_norm, cache.final_norm, dz, grads.enc_norm);
    for (std::size_t l = c.enc_layers; l-- > 0;) {
        const auto& L = p.encoder[l];
        auto& G = grads.encoder[l];
        const auto& lc = cache.layers[l];
        auto df = dropout_backward(dx, lc.drop_ffn);
        auto dh = feed_forward_backward(L.ffn, lc.ffn, df, G.ffn);
        add_inplace(dx, layer_norm_backward(L.ln_ffn, lc.ln_ffn, dh, G.ln_ffn));
        auto da = dropout_backward(dx, lc.drop_attn);
        auto g = multi_head_attention_backward(L.attn, lc.attn, da, G.attn);
        add_inplace(g.dx_q, g.dx_kv);
        add_inplace(dx, layer_norm_backward(L.ln_attn, lc.ln_attn, g.dx_q, G.ln_attn));
    }
    linear_backward(p.input, cache.features, dx, grads.input);
}

/// Encoder output pooled for each decoder layer.
template <typename T>
std::vector<Tensor<T>> pooled_views(const ModelConfig& c, const Tensor<T>& z) {
    std::vector<Tensor<T>> views;
    views.reserve(c.dec_layers);
    for (std::size_t l = 0; l < c.dec_layers; ++l) {
        auto same = std::find(c.pooling.begin(), c.pooling.begin() + static_cast<std::ptrdiff_t>(l), c.pooling[l]);
        if (same != c.pooling.begin() + static_cast<std::ptrdiff_t>(l))
            views.push_back(views[static_cast<std::size_t>(same - c.pooling.begin())]);
        else
            views.push_back(pool_encoder_output(z, c.pooling[l]));
    }
    return views;
}

// ---------------------------------------------------------------------------
// Decoder, teacher-forced (whole sequence at once)

template <typename T>
struct DecoderLayerCache {
    LayerNormCache<T> ln_self;
    MhaCache<T> self_attn;
    DropoutMask<T> drop_self;
    LayerNormCache<T> ln_cross;
    MhaCache<T> cross_attn;
    DropoutMask<T> drop_cross;
    LayerNormCache<T> ln_ffn;
    FeedForwardCache<T> ffn;
    DropoutMask<T> drop_ffn;
};

template <typename T>
struct DecoderCache {
    std::vector<TokenId> ids;
    std::vector<DecoderLayerCache<T>> layers;
    LayerNormCache<T> final_norm;
    Tensor<T> final_hidden;
};

/// Logits [ids.size(), vocab] for every position of a decoder input sequence.
template <typename T>
Tensor<T> decode_forward(const ModelConfig& c, const ModelParams<T>& p, std::span<const Tensor<T>> views,
                         std::span<const TokenId> ids, DecoderCache<T>* cache = nullptr,
                         std::mt19937_64* rng = nullptr) {
    require_input(!ids.empty(), "decoder input must not be empty");
    require_input(views.size() == c.dec_layers, "need one encoder view per decoder layer");
    require_input(ids.size() <= c.max_output_len, "decoder input exceeds max_output_len");
    const std::size_t n = ids.size();
    auto x = embedding_lookup(p.embedding, ids);
    add_positional_encoding(x);
    const auto self_mask = decoder_self_mask(c, n);
    if (cache) {
        cache->ids.assign(ids.begin(), ids.end());
        cache->layers.assign(c.dec_layers, {});
    }
    for (std::size_t l = 0; l < c.dec_layers; ++l) {
        const auto& L = p.decoder[l];
        DecoderLayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
        auto h = layer_norm_forward(L.ln_self, x, lc ? &lc->ln_self : nullptr);
        auto a = multi_head_attention(L.self_attn, h, h, self_mask, c.heads, c.path, lc ? &lc->self_attn : nullptr);
        add_inplace(x, dropout_forward(a, c.dropout, rng, lc ? &lc->drop_self : nullptr));

        const auto& z = views[l];
        const auto xmask = cross_mask(c, ids, c.pooling[l], z.rows());
        h = layer_norm_forward(L.ln_cross, x, lc ? &lc->ln_cross : nullptr);
        a = multi_head_attention(L.cross_attn, h, z, xmask, c.heads, c.path, lc ? &lc->cross_attn : nullptr);
        add_inplace(x, dropout_forward(a, c.dropout, rng, lc ? &lc->drop_cross : nullptr));

        h = layer_norm_forward(L.ln_ffn, x, lc ? &lc->ln_ffn : nullptr);
        auto f = feed_forward(L.ffn, h, lc ? &lc->ffn : nullptr);
        add_inplace(x, dropout_forward(f, c.dropout, rng, lc ? &lc->drop_ffn : nullptr));
        require_contract(x.all_finite(), "non-finite activations in decoder layer " + std::to_string(l));
    }
    auto y = layer_norm_forward(p.dec_norm, x, cache ? &cache->final_norm : nullptr);
    auto logits = linear_forward(p.output, y);
    if (cache) cache->final_hidden = std::move(y);
    return logits;
}

/// Returns dL/d(view) for each decoder layer's encoder view.
template <typename T>
std::vector<Tensor<T>> decode_backward(const ModelConfig& c, const ModelParams<T>& p, const DecoderCache<T>& cache,
                                       const Tensor<T>& dlogits, ModelParams<T>& grads) {
    auto dy = linear_backward(p.output, cache.final_hidden, dlogits, grads.output);
    auto dx = layer_norm_backward(p.dec_norm, cache.final_norm, dy, grads.dec_norm);
    std::vector<Tensor<T>> dviews(c.dec_layers);
    for (std::size_t l = c.dec_layers; l-- > 0;) {
        const auto& L = p.decoder[l];
        auto& G = grads.decoder[l];
        const auto& lc = cache.layers[l];

        auto dh = feed_forward_backward(L.ffn, lc.ffn, dropout_backward(dx, lc.drop_ffn), G.ffn);
        add_inplace(dx, layer_norm_backward(L.ln_ffn, lc.ln_ffn, dh, G.ln_ffn));

        auto gc = multi_head_attention_backward(L.cross_attn, lc.cross_attn, dropout_backward(dx, lc.drop_cross), G.cross_attn);
        dviews[l] = std::move(gc.dx_kv);
        add_inplace(dx, layer_norm_backward(L.ln_cross, lc.ln_cross, gc.dx_q, G.ln_cross));

        auto gs = multi_head_attention_backward(L.self_attn, lc.self_attn, dropout_backward(dx, lc.drop_self), G.self_attn);
        add_inplace(gs.dx_q, gs.dx_kv);
        add_inplace(dx, layer_norm_backward(L.ln_self, lc.ln_self, gs.dx_q, G.ln_self));
    }
    embedding_backward(grads.embedding, cache.ids, dx);
    return dviews;
}

/// Teacher-forced logits for a full decoder input sequence (no caching).
template <typename T>
Tensor<T> teacher_forced_logits(const ModelConfig& c, const ModelParams<T>& p, const Tensor<T>& features,
                                std::span<const TokenId> ids) {
    const auto z = encode(c, p, features);
    const auto views = pooled_views(c, z);
    return decode_forward<T>(c, p, views, ids);
}

// ---------------------------------------------------------------------------
// Incremental decoding with a key/value cache

template <typename T>
struct KVCache {
    // [layer][head] -> [len, d_k]
    std::vector<std::vector<Tensor<T>>> self_k, self_v;
    std::vector<std::vector<Tensor<T>>> cross_k, cross_v;
    std::vector<TokenId> tokens;
    std::int64_t last_time_bin = -1;

    std::size_t length() const { return tokens.size(); }
};

/// Projects every layer's pooled encoder view into per-head cross-attention
/// keys and values once per sequence.
template <typename T>
KVCache<T> start_decoding(const ModelConfig& c, const ModelParams<T>& p, const Tensor<T>& z) {
    const auto views = pooled_views(c, z);
    const std::size_t d_k = c.d_model / c.heads;
    KVCache<T> cache;
    cache.self_k.assign(c.dec_layers, std::vector<Tensor<T>>(c.heads, Tensor<T>({0, d_k})));
    cache.self_v = cache.self_k;
    cache.cross_k.resize(c.dec_layers);
    cache.cross_v.resize(c.dec_layers);
    for (std::size_t l = 0; l < c.dec_layers; ++l) {
        const auto k = linear_forward(p.decoder[l].cross_attn.k, views[l]);
        const auto v = linear_forward(p.decoder[l].cross_attn.v, views[l]);
        for (std::size_t h = 0; h < c.heads; ++h) {
            cache.cross_k[l].push_back(slice_cols(k, h * d_k, d_k));
            cache.cross_v[l].push_back(slice_cols(v, h * d_k, d_k));
        }
    }
    return cache;
}

/// Consumes one decoder input token and returns next-token logits [1, vocab].
template <typename T>
Tensor<T> decode_step(const ModelConfig& c, const ModelParams<T>& p, KVCache<T>& cache, TokenId token) {
    require_contract(cache.self_k.size() == c.dec_layers, "decode_step without start_decoding");
    require_contract(cache.length() < c.max_output_len, "decoder input would exceed max_output_len (" +
                                                            std::to_string(c.max_output_len) + ")");
    const Token tok = decode(token);
    const std::size_t pos = cache.length();
    cache.tokens.push_back(token);
    if (tok.kind == TokenKind::Time) cache.last_time_bin = tok.value;

    const std::size_t d_k = c.d_model / c.heads;
    const std::array<TokenId, 1> one{token};
    auto x = embedding_lookup(p.embedding, std::span<const TokenId>(one));
    add_positional_encoding(x, pos);

    for (std::size_t l = 0; l < c.dec_layers; ++l) {
        const auto& L = p.decoder[l];
        // self-attention over the cache
        auto h = layer_norm_forward(L.ln_self, x);
        auto q = linear_forward(L.self_attn.q, h);
        auto k = linear_forward(L.self_attn.k, h);
        auto v = linear_forward(L.self_attn.v, h);
        const std::array<RowSpan, 1> self_row{decoder_self_row(c, pos)};
        Tensor<T> concat = Tensor<T>::matrix(1, c.d_model);
        for (std::size_t hd = 0; hd < c.heads; ++hd) {
            auto& kc = cache.self_k[l][hd];
            auto& vc = cache.self_v[l][hd];
            kc.append_row(std::span<const T>(k.data() + hd * d_k, d_k));
            vc.append_row(std::span<const T>(v.data() + hd * d_k, d_k));
            const auto out = attention_band(slice_cols(q, hd * d_k, d_k), kc, vc, std::span<const RowSpan>(self_row));
            assign_cols(concat, out, hd * d_k);
        }
        add_inplace(x, linear_forward(L.self_attn.o, concat));

        // cross-attention over the cached encoder projections
        h = layer_norm_forward(L.ln_cross, x);
        q = linear_forward(L.cross_attn.q, h);
        const std::size_t key_len = cache.cross_k[l][0].rows();
        std::array<RowSpan, 1> cross_row{RowSpan{0, key_len}};
        if (c.cross == CrossAttention::HybridGlobalLocal)
            cross_row[0] = hybrid_row(align_query(tok.kind, cache.last_time_bin, c.pooling[l], key_len), key_len, c.window);
        for (std::size_t hd = 0; hd < c.heads; ++hd) {
            const auto out = attention_band(slice_cols(q, hd * d_k, d_k), cache.cross_k[l][hd], cache.cross_v[l][hd],
                                            std::span<const RowSpan>(cross_row));
            assign_cols(concat, out, hd * d_k);
        }
        add_inplace(x, linear_forward(L.cross_attn.o, concat));

        h = layer_norm_forward(L.ln_ffn, x);
        add_inplace(x, feed_forward(L.ffn, h));
        require_contract(x.all_finite(), "non-finite activations in decoder layer " + std::to_string(l));
    }
    return linear_forward(p.output, layer_norm_forward(p.dec_norm, x));
}

/// Lowest index among the maximal entries.
template <typename T>
TokenId argmax_token(std::span<const T> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return static_cast<TokenId>(best);
}

struct DecodeOptions {
    std::size_t max_len = 0; // 0: use the model's max_output_len
    bool stop_at_eos = true;
};

/// Greedy decoding from BOS. Returns the full sequence including BOS and,
/// when produced, EOS.
template <typename T>
std::vector<TokenId> greedy_decode(const ModelConfig& c, const ModelParams<T>& p, const Tensor<T>& features,
                                   DecodeOptions opt = {}) {
    const std::size_t max_len = opt.max_len ? std::min(opt.max_len, c.max_output_len) : c.max_output_len;
    const auto z = encode(c, p, features);
    auto cache = start_decoding(c, p, z);
    std::vector<TokenId> out{vocab::kBos};
    while (out.size() < max_len) {
        const auto logits = decode_step(c, p, cache, out.back());
        const TokenId next = argmax_token(std::span<const T>(logits.values()));
        out.push_back(next);
        if (opt.stop_at_eos && next == vocab::kEos) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Teacher-forced loss and gradients

template <typename T>
struct TrainingExample {
    Tensor<T> features;
    std::vector<TokenId> targets; // BOS ... EOS, optionally PAD-extended
};

/// Target positions that contribute to the loss (everything after BOS up to
/// and including EOS).
inline std::size_t supervised_length(std::span<const TokenId> targets) {
    require_input(targets.size() >= 2 && targets.front() == vocab::kBos, "targets must start with BOS");
    const auto eos = std::find(targets.begin(), targets.end(), vocab::kEos);
    require_input(eos != targets.end(), "targets must contain EOS");
    for (auto it = eos + 1; it != targets.end(); ++it) require_input(*it == vocab::kPad, "only PAD may follow EOS");
    return static_cast<std::size_t>(eos - targets.begin());
}

/// Summed cross-entropy of one example; gradients scaled by `grad_scale` are
/// added to `grads`.
template <typename T>
T example_forward_backward(const ModelConfig& c, const ModelParams<T>& p, const TrainingExample<T>& ex, T grad_scale,
                           ModelParams<T>& grads, std::mt19937_64* rng) {
    const std::size_t n = supervised_length(ex.targets);
    const std::span<const TokenId> inputs(ex.targets.data(), n);
    const std::span<const TokenId> labels(ex.targets.data() + 1, n);

    EncoderCache<T> enc_cache;
    const auto z = encode(c, p, ex.features, &enc_cache, rng);
    const auto views = pooled_views(c, z);
    DecoderCache<T> dec_cache;
    const auto logits = decode_forward<T>(c, p, views, inputs, &dec_cache, rng);
    Tensor<T> dlogits;
    const T loss = cross_entropy(logits, labels, grad_scale, &dlogits);
    require_contract(std::isfinite(loss), "non-finite loss");

    const auto dviews = decode_backward(c, p, dec_cache, dlogits, grads);
    Tensor<T> dz(z.shape());
    for (std::size_t l = 0; l < c.dec_layers; ++l)
        add_inplace(dz, pool_encoder_output_backward(dviews[l], z.rows(), c.pooling[l]));
    encode_backward(c, p, enc_cache, dz, grads);
    return loss;
}

template <typename T>
void add_grads(ModelParams<T>& into, const ModelParams<T>& from) {
    auto dst = into.named_tensors();
    std::size_t i = 0;
    from.visit([&](const std::string&, const Tensor<T>& t) { add_inplace(*dst[i++].second, t); });
}

/// Mean cross-entropy over all supervised target positions of the batch.
/// `grads` is overwritten. Dropout draws from a per-item stream seeded by
/// `dropout_seed`; results do not depend on `threads`.
template <typename T>
T forward_backward(const ModelConfig& c, const ModelParams<T>& p, std::span<const TrainingExample<T>> batch,
                   ModelParams<T>& grads, std::uint64_t dropout_seed = 0, std::size_t threads = 1) {
    require_input(!batch.empty(), "empty batch");
    std::size_t count = 0;
    for (const auto& ex : batch) count += supervised_length(ex.targets);
    const T scale = T(1) / static_cast<T>(count);

    std::vector<ModelParams<T>> item_grads(batch.size());
    std::vector<T> losses(batch.size());
    std::vector<std::exception_ptr> errors(batch.size());
    auto run = [&](std::size_t i) {
        try {
            item_grads[i] = zero_grads<T>(c);
            std::mt19937_64 rng(dropout_seed * 0x9E3779B97F4A7C15ull + i);
            losses[i] = example_forward_backward(c, p, batch[i], scale, item_grads[i], c.dropout > 0 ? &rng : nullptr);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, batch.size()));
    if (threads == 1) {
        for (std::size_t i = 0; i < batch.size(); ++i) run(i);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t i = t; i < batch.size(); i += threads) run(i);
            });
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    grads = std::move(item_grads[0]);
    T total = losses[0];
    for (std::size_t i = 1; i < batch.size(); ++i) {
        add_grads(grads, item_grads[i]);
        total += losses[i];
    }
    const T loss = total * scale;
    require_contract(std::isfinite(loss), "non-finite loss");
    return loss;
}

} // namespace samt
