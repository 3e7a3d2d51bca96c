// SPDX-License-Identifier: Apache-2.0
#include "stgr/training/losses.hpp"

#include <cmath>

#include <fmt/format.h>

#include "stgr/error.hpp"

namespace stgr::train {

using namespace stgr::tensor;

Var selection_ce_loss(Var scores, std::span<const int> labels, double eps) {
    const auto n = scores.value().size();
    if (n == 0) throw ArgumentError("cross-entropy over zero candidates");
    if (labels.size() != n) throw ShapeError(fmt::format("{} scores but {} labels", n, labels.size()));
    Tensor y(scores.value().shape());
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ArgumentError(fmt::format("label {} is not binary", labels[i]));
        y[i] = labels[i];
    }
    Tape& t = scores.tape();
    const Var p = clamp(scores, eps, 1.0 - eps);
    const Var yv = t.constant(y);
    const Var pos = mul(yv, log(p));
    const Var negp = mul(add_scalar(neg(yv), 1.0), log(add_scalar(neg(p), 1.0)));
    return neg(mean(add(pos, negp)));
}

Var info_nce_loss(Var guidance, Var positive, std::optional<Var> negatives, double tau) {
    if (!(tau > 0.0)) throw ConfigError(fmt::format("tau_nce must be positive, got {}", tau));
    const auto d = guidance.value().cols();
    if (guidance.value().rows() == 0) throw ArgumentError("InfoNCE needs at least one guidance vector");
    if (positive.value().rows() != 1 || positive.value().cols() != d)
        throw ShapeError(fmt::format("positive must be [1 x {}], got {}", d, shape_string(positive.value().shape())));
    const double inv_tau = 1.0 / tau;
    const Var s_pos = scale(matmul(guidance, transpose(positive)), inv_tau);
    Var logits = s_pos;
    if (negatives && negatives->value().rows() > 0) {
        if (negatives->value().cols() != d)
            throw ShapeError(fmt::format("negatives have dim {}, guidance {}", negatives->value().cols(), d));
        const Var s_neg = scale(matmul(guidance, transpose(*negatives)), inv_tau);
        const Var parts[] = {s_pos, s_neg};
        logits = concat_cols(parts);
    }
    return mean(sub(logsumexp_rows(logits), s_pos));
}

Var iou_regression_loss(Var predicted, std::span<const double> true_iou) {
    const auto n = predicted.value().size();
    if (true_iou.size() != n) throw ShapeError(fmt::format("{} predictions but {} targets", n, true_iou.size()));
    if (n == 0) throw ArgumentError("IoU regression over zero candidates");
    Tensor target(predicted.value().shape());
    for (std::size_t i = 0; i < n; ++i) target[i] = true_iou[i];
    return mean(smooth_l1(sub(predicted, predicted.tape().constant(std::move(target)))));
}

namespace {

void require_finite(Var v, const char* term) {
    const double x = v.value().item();
    if (!std::isfinite(x)) throw NumericDomainError(fmt::format("loss term {} is not finite ({})", term, x));
}

} // namespace

Var total_loss(const LossParts& parts, const LossWeights& w) {
    require_finite(parts.ce, "ce");
    if (parts.nce) require_finite(*parts.nce, "nce");
    require_finite(parts.reg, "reg");
    std::optional<Var> acc;
    auto push = [&](Var term, double weight) {
        if (weight == 0.0) return;
        const Var scaled = weight == 1.0 ? term : scale(term, weight);
        acc = acc ? add(*acc, scaled) : scaled;
    };
    push(parts.ce, w.ce);
    if (parts.nce) push(*parts.nce, w.nce);
    push(parts.reg, w.reg);
    if (!acc) return scale(parts.ce, 0.0);
    return *acc;
}

CandidateLabels label_candidates(std::span<const mask::Mask> candidates, std::span<const mask::Mask> gt,
                                 double threshold) {
    CandidateLabels out;
    out.labels.reserve(candidates.size());
    out.true_iou.reserve(candidates.size());
    for (const auto& c : candidates) {
        double best = 0.0;
        for (const auto& g : gt) best = std::max(best, mask::iou(c, g));
        out.true_iou.push_back(best);
        out.labels.push_back(!gt.empty() && best >= threshold ? 1 : 0);
    }
    return out;
}

} // namespace stgr::train
