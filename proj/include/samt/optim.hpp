// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "samt/errors.hpp"
#include "samt/model.hpp"
#include "samt/tensor.hpp"

namespace samt {

struct AdamWConfig {
    double lr = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamWState {
    std::vector<Tensor<T>> m, v;
    std::uint64_t step = 0;

    bool initialized() const { return !m.empty(); }
    friend bool operator==(const AdamWState&, const AdamWState&) = default;
};

/// Decoupled weight decay: p <- p * (1 - lr * wd), then the bias-corrected
/// Adam update. Moments start at zero on the first call.
template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                std::span<const std::string> names, AdamWState<T>& state, const AdamWConfig& cfg) {
    require_input(cfg.lr >= 0, "learning rate must be non-negative");
    require_contract(params.size() == grads.size(), "parameter and gradient lists differ in length");
    if (!state.initialized()) {
        for (const auto* p : params) {
            state.m.emplace_back(p->shape());
            state.v.emplace_back(p->shape());
        }
    }
    require_contract(state.m.size() == params.size(), "optimizer state does not match parameters");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        require_contract(grads[i]->same_shape(*params[i]), "gradient shape mismatch for " + names[i]);
        require_contract(grads[i]->all_finite(), "non-finite gradient for parameter " + names[i]);
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* p = params[i]->data();
        const T* g = grads[i]->data();
        T* m = state.m[i].data();
        T* v = state.v[i].data();
        for (std::size_t j = 0, n = params[i]->size(); j < n; ++j) {
            double pj = static_cast<double>(p[j]) * decay;
            const double gj = g[j];
            const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            pj -= cfg.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
            p[j] = static_cast<T>(pj);
        }
    }
}

template <typename T>
void adamw_step(ModelParams<T>& params, ModelParams<T>& grads, AdamWState<T>& state, const AdamWConfig& cfg) {
    std::vector<Tensor<T>*> ps;
    std::vector<const Tensor<T>*> gs;
    std::vector<std::string> names;
    for (auto& [n, t] : params.named_tensors()) {
        names.push_back(n);
        ps.push_back(t);
    }
    for (auto& [n, t] : grads.named_tensors()) gs.push_back(t);
    adamw_step<T>(ps, gs, names, state, cfg);
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping. max_norm <= 0 disables clipping.
template <typename T>
double clip_grad_norm(ModelParams<T>& grads, double max_norm) {
    double sq = 0;
    grads.visit([&](const std::string&, const Tensor<T>& t) {
        for (T v : t.values()) sq += static_cast<double>(v) * static_cast<double>(v);
    });
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        grads.visit([&](const std::string&, Tensor<T>& t) {
            for (T& v : t.values()) v *= s;
        });
    }
    return norm;
}

} // namespace samt
