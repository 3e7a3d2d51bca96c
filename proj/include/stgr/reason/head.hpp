// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "stgr/maskcore/mask.hpp"
#include "stgr/tvid/tvid.hpp"

namespace stgr::reason {

using tensor::Tape;
using tensor::Tensor;
using tensor::Var;
using tvid::ParamRef;

/// Everything a scoring head may look at for one scene.
struct HeadInputs {
    std::span<const mask::Mask> candidates;
    const Tensor& pair_iou;  // [N x N] exact mask IoU
    Var features;            // [N x d_v]
    Var guidance;            // [K x d_v]
};

struct HeadOutputs {
    Var scores;         // [N x 1], in (0, 1)
    Var predicted_iou;  // [N x 1]
};

/// A per-candidate confidence model trained by the training loop.
class ScoringHead {
public:
    virtual ~ScoringHead() = default;

    virtual HeadOutputs forward(Tape& tape, const HeadInputs& in) = 0;
    virtual void collect(std::vector<ParamRef>& out) = 0;
    virtual std::string kind() const = 0;
};

/// Exact pairwise IoU matrix of a candidate list.
Tensor pair_iou_matrix(std::span<const mask::Mask> masks);

} // namespace stgr::reason
