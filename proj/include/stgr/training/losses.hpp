// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "stgr/maskcore/mask.hpp"
#include "stgr/tensorcore/ops.hpp"

namespace stgr::train {

using tensor::Tape;
using tensor::Tensor;
using tensor::Var;

struct LossWeights {
    double ce = 1.0;
    double nce = 0.5;
    double reg = 0.5;
    double tau_nce = 0.07;
};

/// Mean binary cross-entropy; probabilities are clamped to [eps, 1 - eps].
Var selection_ce_loss(Var scores, std::span<const int> labels, double eps = 1e-7);

/// Mean over guidance rows k of
///   -log( exp(<g_k,h+>/tau) / (exp(<g_k,h+>/tau) + sum_j exp(<g_k,h_j>/tau)) ).
/// `negatives` may be absent (empty negative set), in which case every term is 0.
Var info_nce_loss(Var guidance, Var positive, std::optional<Var> negatives, double tau);

/// Mean Smooth-L1 between predicted [N x 1] and true IoU.
Var iou_regression_loss(Var predicted, std::span<const double> true_iou);

struct LossParts {
    Var ce;
    std::optional<Var> nce;  // absent for scenes without positives
    Var reg;
};

/// lambda_ce L_ce + lambda_nce L_nce + lambda_reg L_reg. Terms with weight 0 are left
/// out of the sum, so (1, 0, 0) returns L_ce bit for bit.
Var total_loss(const LossParts& parts, const LossWeights& w);

struct CandidateLabels {
    std::vector<int> labels;
    std::vector<double> true_iou;
};

/// label = 1 iff the best IoU against any GT lesion reaches `threshold`.
CandidateLabels label_candidates(std::span<const mask::Mask> candidates, std::span<const mask::Mask> gt,
                                 double threshold = 0.5);

} // namespace stgr::train
