// SPDX-License-Identifier: Apache-2.0
#include "stgr/tensorcore/tape.hpp"

#include <fmt/format.h>

#include "stgr/error.hpp"

namespace stgr::tensor {

const Tensor& Var::value() const { return tape_->value(*this); }

Tape::Tape(Mode mode, DropoutKey key) : mode_(mode), key_(key) {}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), nullptr, false, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
    nodes_.push_back(Node{Tensor{}, &p, p.requires_grad, {}});
    return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const {
    const auto& n = nodes_[v.id()];
    return n.param ? n.param->value : n.value;
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) {
        if (in.tape_ != this) throw ArgumentError("op mixes values from different tapes");
        needs = needs || nodes_[in.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), nullptr, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
}

Tensor* Tape::grad_target(Var v) {
    const auto id = v.id();
    if (!nodes_[id].needs_grad) return nullptr;
    if (!has_grad_[id]) {
        grads_[id] = Tensor(value(v).shape());
        has_grad_[id] = true;
    }
    return &grads_[id];
}

void Tape::sweep(Var loss) {
    if (loss.tape_ != this) throw ArgumentError("loss is not recorded on this tape");
    if (value(loss).size() != 1)
        throw ArgumentError(fmt::format("backward needs a scalar loss, got shape {}", shape_string(value(loss).shape())));
    grads_.assign(nodes_.size(), Tensor{});
    has_grad_.assign(nodes_.size(), false);
    if (!nodes_[loss.id()].needs_grad) return;
    grads_[loss.id()] = Tensor(value(loss).shape(), 1.0);
    has_grad_[loss.id()] = true;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!has_grad_[i] || !n.backward) continue;
        n.backward(*this, grads_[i]);
    }
}

std::vector<ParamGrad> Tape::gradients(Var loss) {
    sweep(loss);
    std::vector<ParamGrad> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].param && nodes_[i].needs_grad && has_grad_[i]) out.push_back({nodes_[i].param, grads_[i]});
    }
    return out;
}

void Tape::backward(Var loss) {
    const auto grads = gradients(loss);
    accumulate(grads);
}

Tensor Tape::grad(Var v) const {
    if (v.id() < has_grad_.size() && has_grad_[v.id()]) return grads_[v.id()];
    return Tensor(value(v).shape());
}

void accumulate(std::span<const ParamGrad> grads) {
    for (const auto& pg : grads) {
        auto& p = *pg.param;
        if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
        auto dst = p.grad.data();
        auto src = pg.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
}

} // namespace stgr::tensor
