// SPDX-License-Identifier: Apache-2.0
#include "stgr/training/optim.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "stgr/error.hpp"

namespace stgr::train {

using tensor::Tensor;

double cosine_lr(double lr0, double lr_min, std::uint64_t t, std::uint64_t total) {
    if (total == 0 || t >= total) return t == 0 && total == 0 ? lr0 : lr_min;
    const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
    return f * lr0 + (1.0 - f) * lr_min;
}

bool decays(const Parameter& p) {
    const auto& s = p.value.shape();
    return !(s.size() <= 1 || s[0] == 1);
}

AdamW::AdamW(const ParamRegistry& registry, AdamWConfig cfg, std::uint64_t total_steps)
    : registry_(registry), cfg_(cfg), total_(total_steps) {
    if (cfg.lr < 0 || cfg.weight_decay < 0 || cfg.eps <= 0 || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 ||
        cfg.beta2 >= 1 || cfg.lr_min_ratio < 0 || cfg.lr_min_ratio > 1 || cfg.max_grad_norm < 0)
        throw ConfigError("optimizer settings out of range");
    for (auto* p : registry.trainable()) state_.emplace(p, Moments{Tensor(p->value.shape()), Tensor(p->value.shape())});
}

double AdamW::current_lr() const { return cosine_lr(cfg_.lr, cfg_.lr * cfg_.lr_min_ratio, t_, total_); }

void AdamW::step(std::span<const tensor::ParamGrad> grads) {
    std::unordered_map<const Parameter*, const Tensor*> by_param;
    for (const auto& g : grads) {
        if (!state_.contains(g.param)) {
            if (registry_.find(g.param->name) == g.param)
                throw ContractError(fmt::format("gradient supplied for frozen parameter {}", g.param->name));
            throw ContractError(fmt::format("gradient supplied for unregistered parameter {}", g.param->name));
        }
        if (g.grad.shape() != g.param->value.shape())
            throw ShapeError(fmt::format("gradient for {} has the wrong shape", g.param->name));
        by_param[g.param] = &g.grad;
    }
    double clip = 1.0;
    if (cfg_.max_grad_norm > 0) {
        double sq = 0.0;
        for (auto* p : registry_.trainable()) {
            const auto it = by_param.find(p);
            if (it == by_param.end()) continue;
            for (double v : it->second->data()) sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg_.max_grad_norm) clip = cfg_.max_grad_norm / norm;
    }
    const double lr = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double step_size = lr / bc1;
    const double bc2_sqrt = std::sqrt(bc2);
    for (auto* p : registry_.trainable()) {
        auto& st = state_.at(p);
        const auto it = by_param.find(p);
        const Tensor* g = it == by_param.end() ? nullptr : it->second;
        const bool decay = cfg_.weight_decay > 0 && decays(*p);
        auto w = p->value.data();
        auto m = st.m.data();
        auto v = st.v.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g ? clip * (*g)[i] : 0.0;
            if (decay) w[i] *= 1.0 - lr * cfg_.weight_decay;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            w[i] -= step_size * m[i] / (std::sqrt(v[i]) / bc2_sqrt + cfg_.eps);
        }
    }
}

} // namespace stgr::train
