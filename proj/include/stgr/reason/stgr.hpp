// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stgr/reason/head.hpp"

namespace stgr::reason {

using tensor::Parameter;

struct StgrConfig {
    std::size_t dim = 64;  // d_v
    std::size_t layers = 3;
    std::size_t heads = 4;
    std::size_t adapter_dim = 64;
    std::size_t head_hidden = 0;  // 0 -> dim / 2
    double layernorm_eps = 1e-5;
    /// Keep only each node's top-k edges when N exceeds 256. 0 disables pruning.
    std::size_t edge_top_k = 0;

    std::size_t hidden() const { return head_hidden ? head_hidden : dim / 2; }
};

/// Linear map x W + b.
struct Dense {
    Parameter weight;
    Parameter bias;

    Var operator()(Tape& tape, Var x);
};

/// Residual bottleneck block: x -> gelu(x W_down + b_down) W_up + b_up.
/// The up projection starts at zero so the block is inert at initialisation.
struct BottleneckAdapter {
    Dense down;
    Dense up;

    Var operator()(Tape& tape, Var x);
};

struct AttentionParams {
    Dense q, k, v, o;
};

struct LayerParams {
    Parameter ln1_gain, ln1_bias;
    AttentionParams self_attn;
    Parameter edge_scale;  // [1 x heads], per-head gamma on edge bias
    BottleneckAdapter adapter1;
    Parameter ln2_gain, ln2_bias;
    AttentionParams cross_attn;
    BottleneckAdapter adapter2;
};

/// Two-layer MLP ending in a sigmoid: d_v -> hidden -> 1.
struct MlpHead {
    Dense hidden;
    Dense out;

    Var operator()(Tape& tape, Var x);
};

/// Parameter counts per group.
struct ParamCounts {
    std::uint64_t attention = 0;           // projections, their biases, norms, edge scales
    std::uint64_t square_projections = 0;  // d_v x d_v projection matrices only
    std::uint64_t adapters = 0;
    std::uint64_t heads = 0;
    std::uint64_t balance = 0;

    std::uint64_t total() const { return attention + adapters + heads + balance; }
};

/// Graph reasoner over candidate masks: edge construction, L rounds of edge-biased
/// self-attention and guidance cross-attention, then confidence and IoU heads.
class StgrHead final : public ScoringHead {
public:
    StgrHead(const StgrConfig& cfg, Rng& rng);
    StgrHead(const StgrHead&) = delete;
    StgrHead& operator=(const StgrHead&) = delete;

    HeadOutputs forward(Tape& tape, const HeadInputs& in) override;
    void collect(std::vector<ParamRef>& out) override;
    std::string kind() const override { return "stgr"; }

    const StgrConfig& config() const { return cfg_; }
    std::vector<LayerParams>& layers() { return layers_; }
    MlpHead& confidence_head() { return confidence_; }
    MlpHead& iou_head() { return iou_; }
    Parameter& balance_logit() { return balance_; }

private:
    StgrConfig cfg_;
    std::vector<LayerParams> layers_;
    MlpHead confidence_;
    MlpHead iou_;
    Parameter balance_;  // [1 x 1]; alpha = sigmoid(balance)
};

/// Edge affinities alpha * IoU(m_i, m_j) + (1 - alpha) * cos(h_i, h_j), with
/// alpha = sigmoid(balance_logit). Cosine with a zero vector is 0.
Var build_edges(const Tensor& pair_iou, Var features, Var balance_logit);

/// Convenience overload computing the IoU matrix from masks.
Tensor build_edges(std::span<const mask::Mask> masks, const Tensor& features, double balance_logit);

/// Keeps, for every node, its `k` strongest edges (and their mirrors); others become 0.
Var prune_edges(Var edges, std::size_t k);

/// Pre-norm self-attention over nodes with per-head additive edge bias, residual,
/// and bottleneck adapter:
///   out = attn(LN(H)) ; out += adapter(out) ; return H + out
/// where attention logits are q_i . k_j / sqrt(d_h) + gamma_head * E_ij.
Var msa_layer(Tape& tape, Var nodes, Var edges, LayerParams& p, std::size_t heads, double eps);

/// Pre-norm cross-attention from nodes (queries) to guidance vectors (keys/values),
/// residual and adapter as in msa_layer.
Var mca_layer(Tape& tape, Var nodes, Var guidance, LayerParams& p, std::size_t heads, double eps);

struct SelectionResult {
    std::vector<double> scores;
    std::vector<double> predicted_iou;
    std::vector<std::size_t> selected;
    mask::Mask merged_mask;
};

/// Indices with score > tau_sel and the union of their masks (empty mask if none).
SelectionResult select_candidates(std::span<const mask::Mask> candidates, std::vector<double> scores,
                                  std::vector<double> predicted_iou, double tau_sel);

/// Text record: one "key: values" line each for scene, candidates, scores,
/// predicted_iou, selected and merged_mask (mask text form). Doubles are printed
/// in shortest round-trip form, so the record is a byte-exact fingerprint.
std::string selection_to_text(const SelectionResult& r, std::string_view scene_id);

/// Full inference: edges once, L x (msa; mca), both heads, thresholded selection.
SelectionResult stgr_forward(std::span<const mask::Mask> candidates, const Tensor& features,
                             const tvid::GuidanceSet& guidance, StgrHead& head, double tau_sel);

/// Exact parameter counts, enumerated from the head's tensors.
ParamCounts count_params(StgrHead& head);

} // namespace stgr::reason
