// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>

#include "stgr/tensorcore/tape.hpp"
#include "stgr/training/registry.hpp"

namespace stgr::train {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double lr_min_ratio = 0.01;
    double max_grad_norm = 0.0;  // 0 disables clipping
};

/// lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2, exact at both ends.
double cosine_lr(double lr0, double lr_min, std::uint64_t t, std::uint64_t total);

/// Row vectors ([1 x c]: biases, norm gains, edge scales, the balance logit) are
/// not decayed.
bool decays(const Parameter& p);

/// AdamW with decoupled weight decay, as in torch.optim.AdamW.
class AdamW {
public:
    AdamW(const ParamRegistry& registry, AdamWConfig cfg, std::uint64_t total_steps);

    /// One update. Trainable parameters without an entry in `grads` get a zero
    /// gradient. A gradient for a frozen or unregistered tensor is a ContractError.
    void step(std::span<const tensor::ParamGrad> grads);

    std::uint64_t steps() const { return t_; }
    double current_lr() const;
    const AdamWConfig& config() const { return cfg_; }

private:
    struct Moments {
        tensor::Tensor m, v;
    };

    const ParamRegistry& registry_;
    AdamWConfig cfg_;
    std::uint64_t total_;
    std::uint64_t t_ = 0;
    std::unordered_map<const Parameter*, Moments> state_;
};

} // namespace stgr::train
