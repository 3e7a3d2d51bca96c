// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "stgr/tensorcore/tensor.hpp"

namespace stgr::tensor {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// eval: dropout is the identity. train: dropout draws from the tape's key.
enum class Mode { eval, train };

/// Identifies the dropout stream: every mask element is a pure function of
/// (seed, layer id, step, stream, element index).
struct DropoutKey {
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::uint64_t stream = 0;
};

struct ParamGrad {
    Parameter* param;
    Tensor grad;
};

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede outputs and
/// a single reverse sweep visits each node once. A tape belongs to one thread.
/// References returned by value() stay valid for the lifetime of the tape.
class Tape {
public:
    /// Receives the gradient flowing into a node and pushes it to the node's inputs.
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    explicit Tape(Mode mode = Mode::eval, DropoutKey key = {});
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);

    /// Leaf bound to a parameter. Gradients flow to it only if p.requires_grad.
    Var param(Parameter& p);

    const Tensor& value(Var v) const;
    bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }
    Mode mode() const { return mode_; }
    const DropoutKey& dropout_key() const { return key_; }
    std::size_t size() const { return nodes_.size(); }

    /// Appends an op output. `backward` is kept only if some input needs a gradient.
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

    /// Zero-initialised gradient buffer for `v`, or nullptr if `v` needs no gradient.
    /// Only valid inside a backward sweep.
    Tensor* grad_target(Var v);

    /// Gradient of a scalar loss with respect to every parameter leaf, in leaf order.
    /// Parameters are not modified.
    std::vector<ParamGrad> gradients(Var loss);

    /// Adds d loss / d p into p.grad for every trainable leaf.
    void backward(Var loss);

    /// Gradient of the last swept loss with respect to `v` (zero tensor if none reached it).
    Tensor grad(Var v) const;

private:
    struct Node {
        Tensor value;
        Parameter* param = nullptr;
        bool needs_grad = false;
        BackwardFn backward;
    };

    void sweep(Var loss);

    Mode mode_;
    DropoutKey key_;
    std::deque<Node> nodes_;  // deque: references to values survive appends
    std::vector<Tensor> grads_;
    std::vector<bool> has_grad_;
};

/// Adds each gradient into its parameter's accumulator.
void accumulate(std::span<const ParamGrad> grads);

} // namespace stgr::tensor
