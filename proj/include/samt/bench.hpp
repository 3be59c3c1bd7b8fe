// SPDX-License-Identifier: Apache-2.0
#pragma once

// Efficiency sweep over model variants, input lengths and window sizes.
// MAC counts are the primary, hardware-independent signal; wall time and
// resident-memory growth are reported alongside.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include <sys/resource.h>

#include "samt/config.hpp"
#include "samt/errors.hpp"
#include "samt/model.hpp"

namespace samt {

/// Small model used for CPU benchmarking.
inline ModelConfig bench_model_config() {
    ModelConfig c;
    c.n_input = 512;
    c.d_model = 64;
    c.heads = 4;
    c.d_ff = 128;
    c.enc_layers = 2;
    c.dec_layers = 6;
    c.window = 16;
    c.dropout = 0.0;
    c.max_output_len = 1024;
    c.pooling.assign(6, 1);
    return c;
}

struct BenchScenario {
    std::vector<Variant> variants{Variant::Baseline, Variant::V5};
    std::vector<std::size_t> lengths{256, 512};
    std::vector<std::size_t> windows{16};
    std::size_t reps = 3;
    std::size_t warmup = 1;
    std::uint64_t seed = 0;
    std::size_t token_budget = 32;
    double mem_budget_mb = 0; // 0: unlimited
    ModelConfig model = bench_model_config();

    void validate() const {
        require_input(!variants.empty() && !lengths.empty() && !windows.empty(), "scenario needs variants, lengths and windows");
        for (auto n : lengths) require_input(n > 0, "lengths must be positive");
        for (auto w : windows) require_input(w > 0, "windows must be positive");
        require_input(reps >= 3, "reps must be at least 3");
        require_input(token_budget >= 1, "token_budget must be at least 1");
        model.validate();
    }

    static BenchScenario from_keys(const KeyValues& kv) {
        BenchScenario s;
        if (kv.has("variants")) {
            s.variants.clear();
            for (const auto& v : kv.get_strings("variants", {})) s.variants.push_back(parse_variant(v));
        }
        s.lengths = kv.get_sizes("lengths", s.lengths);
        s.windows = kv.get_sizes("windows", s.windows);
        s.reps = kv.get_size("reps", s.reps);
        s.warmup = kv.get_size("warmup", s.warmup);
        s.seed = kv.get_size("seed", s.seed);
        s.token_budget = kv.get_size("token_budget", s.token_budget);
        s.mem_budget_mb = kv.get_double("mem_budget_mb", s.mem_budget_mb);
        s.model = ModelConfig::from_keys(kv, "model.", s.model);
        kv.reject_unused("scenario");
        s.validate();
        return s;
    }

    static BenchScenario parse(std::string_view text) { return from_keys(KeyValues::parse(text)); }
};

struct BenchRecord {
    Variant variant = Variant::Baseline;
    std::size_t n = 0;
    std::size_t w = 0;
    double time_s = 0;
    std::uint64_t mem_bytes = 0;
    std::uint64_t macs = 0;
    std::uint64_t encoder_attention_macs = 0;
    bool failed = false;
};

inline std::uint64_t peak_rss_bytes() {
    rusage ru{};
    getrusage(RUSAGE_SELF, &ru);
    return static_cast<std::uint64_t>(ru.ru_maxrss) * 1024u;
}

/// Rough working-set estimate of one eval-mode run, used for the budget check.
inline double estimated_bytes(const ModelConfig& c, std::size_t n, std::size_t budget) {
    const double enc_span = c.enc_self == EncoderSelfAttention::Full ? static_cast<double>(n)
                                                                     : static_cast<double>(std::min(n, c.window + 1));
    const double activations = 16.0 * static_cast<double>(n) * static_cast<double>(std::max(c.d_model, c.d_ff));
    const double scores = static_cast<double>(n) * enc_span * static_cast<double>(c.heads);
    const double cache = 2.0 * static_cast<double>(budget + n) * static_cast<double>(c.d_model * c.dec_layers);
    return 4.0 * (activations + scores + cache);
}

/// Encoder self-attention MACs for one forward pass at length n.
inline std::uint64_t encoder_attention_macs(const ModelConfig& c, const ModelParams<float>& p, const Tensor<float>& x) {
    mac_counters().reset();
    encode(c, p, x);
    return mac_counters().attention.load();
}

inline BenchRecord bench_cell(const BenchScenario& s, Variant v, std::size_t n, std::size_t w) {
    ModelConfig c = ModelConfig::with_variant(s.model, v);
    c.window = w;
    c.max_output_len = std::max(c.max_output_len, s.token_budget);
    BenchRecord rec{v, n, w};
    if (s.mem_budget_mb > 0 && estimated_bytes(c, n, s.token_budget) > s.mem_budget_mb * 1024 * 1024) {
        rec.failed = true;
        return rec;
    }
    const auto params = init_params<float>(c, s.seed);
    std::mt19937_64 rng(s.seed + n);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    Tensor<float> features = Tensor<float>::matrix(n, c.n_input);
    for (auto& x : features.values()) x = normal(rng);
    const DecodeOptions opt{s.token_budget, false};

    for (std::size_t i = 0; i < s.warmup; ++i) greedy_decode(c, params, features, opt);

    const std::uint64_t rss_before = peak_rss_bytes();
    std::vector<double> times;
    for (std::size_t i = 0; i < s.reps; ++i) {
        mac_counters().reset();
        const auto t0 = std::chrono::steady_clock::now();
        greedy_decode(c, params, features, opt);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
        const std::uint64_t macs = mac_counters().total();
        require_contract(i == 0 || macs == rec.macs, "MAC count changed between repetitions");
        rec.macs = macs;
    }
    rec.mem_bytes = peak_rss_bytes() - rss_before;
    std::sort(times.begin(), times.end());
    rec.time_s = std::max(times[times.size() / 2], 1e-9);
    rec.encoder_attention_macs = encoder_attention_macs(c, params, features);
    return rec;
}

/// Cells run sequentially in variant-major order.
inline std::vector<BenchRecord> run_bench(const BenchScenario& s) {
    s.validate();
    std::vector<BenchRecord> out;
    for (Variant v : s.variants)
        for (std::size_t n : s.lengths)
            for (std::size_t w : s.windows) out.push_back(bench_cell(s, v, n, w));
    return out;
}

inline std::string bench_csv(const std::vector<BenchRecord>& records) {
    std::string out = "variant,N,w,time_s,mem_bytes,macs\n";
    char buf[256];
    for (const auto& r : records) {
        if (r.failed)
            std::snprintf(buf, sizeof buf, "%s,%zu,%zu,failed,0,0\n", to_string(r.variant).c_str(), r.n, r.w);
        else
            std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.9g,%llu,%llu\n", to_string(r.variant).c_str(), r.n, r.w, r.time_s,
                          static_cast<unsigned long long>(r.mem_bytes), static_cast<unsigned long long>(r.macs));
        out += buf;
    }
    return out;
}

} // namespace samt
