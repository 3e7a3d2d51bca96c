// SPDX-License-Identifier: Apache-2.0
#include "stgr/reason/stgr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "stgr/error.hpp"

namespace stgr::reason {

using namespace stgr::tensor;
using tvid::gaussian;
using tvid::Group;

namespace {

Dense make_dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng, double std) {
    return Dense{Parameter(name + ".weight", gaussian(rng, in, out, std)), Parameter(name + ".bias", Tensor({1, out}))};
}

Dense make_dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    return make_dense(name, in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

AttentionParams make_attention(const std::string& name, std::size_t d, Rng& rng) {
    return AttentionParams{make_dense(name + ".q", d, d, rng), make_dense(name + ".k", d, d, rng),
                           make_dense(name + ".v", d, d, rng), make_dense(name + ".o", d, d, rng)};
}

BottleneckAdapter make_adapter(const std::string& name, std::size_t d, std::size_t bottleneck, Rng& rng) {
    return BottleneckAdapter{make_dense(name + ".down", d, bottleneck, rng), make_dense(name + ".up", bottleneck, d, rng, 0.0)};
}

void collect_dense(Dense& d, Group g, std::vector<ParamRef>& out) {
    out.push_back({&d.weight, g});
    out.push_back({&d.bias, g});
}

void collect_attention(AttentionParams& a, std::vector<ParamRef>& out) {
    for (Dense* d : {&a.q, &a.k, &a.v, &a.o}) collect_dense(*d, Group::stgr, out);
}

void collect_adapter(BottleneckAdapter& a, std::vector<ParamRef>& out) {
    collect_dense(a.down, Group::adapter, out);
    collect_dense(a.up, Group::adapter, out);
}

void require_finite(const Tensor& t, const char* what) {
    for (double v : t.data())
        if (!std::isfinite(v)) throw NumericDomainError(fmt::format("non-finite value in {}", what));
}

} // namespace

Tensor pair_iou_matrix(std::span<const mask::Mask> masks) {
    const auto n = masks.size();
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        out(i, i) = mask::iou(masks[i], masks[i]);
        for (std::size_t j = i + 1; j < n; ++j) out(i, j) = out(j, i) = mask::iou(masks[i], masks[j]);
    }
    return out;
}

Var Dense::operator()(Tape& tape, Var x) { return add_row(matmul(x, tape.param(weight)), tape.param(bias)); }

Var BottleneckAdapter::operator()(Tape& tape, Var x) { return up(tape, gelu(down(tape, x))); }

Var MlpHead::operator()(Tape& tape, Var x) { return sigmoid(out(tape, gelu(hidden(tape, x)))); }

StgrHead::StgrHead(const StgrConfig& cfg, Rng& rng)
    : cfg_(cfg),
      confidence_{make_dense("stgr.head.confidence.hidden", cfg.dim, cfg.hidden(), rng),
                  make_dense("stgr.head.confidence.out", cfg.hidden(), 1, rng)},
      iou_{make_dense("stgr.head.iou.hidden", cfg.dim, cfg.hidden(), rng),
           make_dense("stgr.head.iou.out", cfg.hidden(), 1, rng)},
      balance_("stgr.balance_logit", Tensor({1, 1})) {
    if (cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0)
        throw ConfigError(fmt::format("graph dim {} must be a positive multiple of heads {}", cfg.dim, cfg.heads));
    if (cfg.adapter_dim == 0) throw ConfigError("adapter_dim must be positive");
    if (cfg.hidden() == 0) throw ConfigError("head hidden width must be positive");
    const auto d = cfg.dim;
    layers_.reserve(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto p = fmt::format("stgr.layer{}", l);
        layers_.push_back(LayerParams{
            Parameter(p + ".ln1.gain", Tensor({1, d}, 1.0)),
            Parameter(p + ".ln1.bias", Tensor({1, d})),
            make_attention(p + ".self_attn", d, rng),
            Parameter(p + ".edge_scale", Tensor({1, cfg.heads})),
            make_adapter(p + ".adapter1", d, cfg.adapter_dim, rng),
            Parameter(p + ".ln2.gain", Tensor({1, d}, 1.0)),
            Parameter(p + ".ln2.bias", Tensor({1, d})),
            make_attention(p + ".cross_attn", d, rng),
            make_adapter(p + ".adapter2", d, cfg.adapter_dim, rng),
        });
    }
}

void StgrHead::collect(std::vector<ParamRef>& out) {
    for (auto& l : layers_) {
        out.push_back({&l.ln1_gain, Group::stgr});
        out.push_back({&l.ln1_bias, Group::stgr});
        collect_attention(l.self_attn, out);
        out.push_back({&l.edge_scale, Group::stgr});
        collect_adapter(l.adapter1, out);
        out.push_back({&l.ln2_gain, Group::stgr});
        out.push_back({&l.ln2_bias, Group::stgr});
        collect_attention(l.cross_attn, out);
        collect_adapter(l.adapter2, out);
    }
    collect_dense(confidence_.hidden, Group::stgr, out);
    collect_dense(confidence_.out, Group::stgr, out);
    collect_dense(iou_.hidden, Group::stgr, out);
    collect_dense(iou_.out, Group::stgr, out);
    out.push_back({&balance_, Group::stgr});
}

Var build_edges(const Tensor& pair_iou, Var features, Var balance_logit) {
    Tape& tape = features.tape();
    const auto n = features.value().rows();
    if (pair_iou.rows() != n || pair_iou.cols() != n)
        throw ShapeError(fmt::format("edge construction: {} feature rows but IoU matrix {}", n,
                                     shape_string(pair_iou.shape())));
    if (balance_logit.value().size() != 1) throw ShapeError("balance logit must be a single value");
    const Var unit = row_normalize(features);
    const Var cosine = clamp(matmul(unit, transpose(unit)), -1.0, 1.0);
    const Var alpha = sigmoid(balance_logit);
    const Var spatial = mul(alpha, tape.constant(pair_iou));
    const Var semantic = mul(add_scalar(neg(alpha), 1.0), cosine);
    return add(spatial, semantic);
}

Tensor build_edges(std::span<const mask::Mask> masks, const Tensor& features, double balance_logit) {
    if (masks.empty()) throw ArgumentError("build_edges: no candidates");
    if (features.rows() != masks.size())
        throw ShapeError(fmt::format("build_edges: {} masks but {} feature rows", masks.size(), features.rows()));
    Tape tape(Mode::eval);
    return build_edges(pair_iou_matrix(masks), tape.constant(features), tape.constant(Tensor::scalar(balance_logit)))
        .value();
}

Var prune_edges(Var edges, std::size_t k) {
    const Tensor& e = edges.value();
    const auto n = e.rows();
    if (k == 0 || k >= n) return edges;
    Tensor keep({n, n});
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [&](std::size_t a, std::size_t b) { return e(i, a) > e(i, b) || (e(i, a) == e(i, b) && a < b); });
        for (std::size_t r = 0; r < k; ++r) keep(i, order[r]) = keep(order[r], i) = 1.0;
    }
    return mul(edges, edges.tape().constant(std::move(keep)));
}

Var msa_layer(Tape& tape, Var nodes, Var edges, LayerParams& p, std::size_t heads, double eps) {
    const auto d = nodes.value().cols();
    const auto n = nodes.value().rows();
    if (edges.value().rows() != n || edges.value().cols() != n)
        throw ShapeError(fmt::format("msa_layer: {} nodes but edge matrix {}", n, shape_string(edges.value().shape())));
    const auto dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const Var x = layernorm(nodes, tape.param(p.ln1_gain), tape.param(p.ln1_bias), eps);
    const Var q = p.self_attn.q(tape, x);
    const Var k = p.self_attn.k(tape, x);
    const Var v = p.self_attn.v(tape, x);
    const Var gamma = tape.param(p.edge_scale);
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        const Var qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Var kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Var vh = slice_cols(v, h * dh, (h + 1) * dh);
        Var logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
        logits = add(logits, mul(slice_cols(gamma, h, h + 1), edges));
        require_finite(logits.value(), "self-attention logits");
        // Reductions over the node axis are canonical: relabelling nodes permutes the
        // output rows without changing a single bit.
        outs.push_back(matmul(softmax(logits, 1), vh, Summation::canonical));
    }
    Var out = p.self_attn.o(tape, concat_cols(outs));
    out = add(out, p.adapter1(tape, out));
    return add(nodes, out);
}

Var mca_layer(Tape& tape, Var nodes, Var guidance, LayerParams& p, std::size_t heads, double eps) {
    const auto d = nodes.value().cols();
    if (guidance.value().rows() == 0 || guidance.value().size() == 0)
        throw ArgumentError("mca_layer: no guidance vectors");
    if (guidance.value().cols() != d)
        throw ShapeError(fmt::format("mca_layer: guidance dim {} != node dim {}", guidance.value().cols(), d));
    const auto dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const Var x = layernorm(nodes, tape.param(p.ln2_gain), tape.param(p.ln2_bias), eps);
    const Var q = p.cross_attn.q(tape, x);
    const Var k = p.cross_attn.k(tape, guidance);
    const Var v = p.cross_attn.v(tape, guidance);
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        const Var qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Var kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Var vh = slice_cols(v, h * dh, (h + 1) * dh);
        const Var logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
        require_finite(logits.value(), "cross-attention logits");
        outs.push_back(matmul(softmax(logits, 1), vh));
    }
    Var out = p.cross_attn.o(tape, concat_cols(outs));
    out = add(out, p.adapter2(tape, out));
    return add(nodes, out);
}

HeadOutputs StgrHead::forward(Tape& tape, const HeadInputs& in) {
    const auto n = in.features.value().rows();
    if (n == 0) throw ArgumentError("graph reasoning needs at least one candidate");
    if (in.features.value().cols() != cfg_.dim)
        throw ShapeError(fmt::format("node features have dim {}, graph expects {}", in.features.value().cols(), cfg_.dim));
    Var edges = build_edges(in.pair_iou, in.features, tape.param(balance_));
    if (cfg_.edge_top_k > 0 && n > 256) edges = prune_edges(edges, cfg_.edge_top_k);
    Var h = in.features;
    for (auto& layer : layers_) {
        h = msa_layer(tape, h, edges, layer, cfg_.heads, cfg_.layernorm_eps);
        h = mca_layer(tape, h, in.guidance, layer, cfg_.heads, cfg_.layernorm_eps);
    }
    return HeadOutputs{confidence_(tape, h), iou_(tape, h)};
}

SelectionResult select_candidates(std::span<const mask::Mask> candidates, std::vector<double> scores,
                                  std::vector<double> predicted_iou, double tau_sel) {
    if (candidates.empty()) throw ArgumentError("selection over zero candidates");
    SelectionResult r{std::move(scores), std::move(predicted_iou), {}, mask::Mask(candidates[0].height(), candidates[0].width())};
    std::vector<mask::Mask> chosen;
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
        if (r.scores[i] > tau_sel) {
            r.selected.push_back(i);
            chosen.push_back(candidates[i]);
        }
    }
    if (!chosen.empty()) r.merged_mask = mask::union_all(chosen);
    return r;
}

std::string selection_to_text(const SelectionResult& r, std::string_view scene_id) {
    std::string out = fmt::format("scene: {}\ncandidates: {}\nscores:", scene_id, r.scores.size());
    for (double s : r.scores) out += fmt::format(" {}", s);
    out += "\npredicted_iou:";
    for (double s : r.predicted_iou) out += fmt::format(" {}", s);
    out += "\nselected:";
    for (std::size_t i : r.selected) out += fmt::format(" {}", i);
    out += fmt::format("\nmerged_mask: {}\n", r.merged_mask.to_string());
    return out;
}

SelectionResult stgr_forward(std::span<const mask::Mask> candidates, const Tensor& features,
                             const tvid::GuidanceSet& guidance, StgrHead& head, double tau_sel) {
    if (candidates.empty()) throw ArgumentError("stgr_forward: scene has no candidates");
    if (features.rows() != candidates.size())
        throw ShapeError(fmt::format("stgr_forward: {} candidates but {} feature rows", candidates.size(), features.rows()));
    Tape tape(Mode::eval);
    const Tensor iou = pair_iou_matrix(candidates);
    const HeadInputs in{candidates, iou, tape.constant(features), tape.constant(guidance.vectors)};
    const HeadOutputs out = head.forward(tape, in);
    const auto& s = out.scores.value().data();
    const auto& q = out.predicted_iou.value().data();
    return select_candidates(candidates, {s.begin(), s.end()}, {q.begin(), q.end()}, tau_sel);
}

ParamCounts count_params(StgrHead& head) {
    std::vector<ParamRef> refs;
    head.collect(refs);
    const auto d = head.config().dim;
    ParamCounts c;
    for (const auto& r : refs) {
        const auto n = static_cast<std::uint64_t>(r.param->value.size());
        const auto& name = r.param->name;
        if (r.group == Group::adapter) c.adapters += n;
        else if (name.find(".head.") != std::string::npos) c.heads += n;
        else if (name == "stgr.balance_logit") c.balance += n;
        else {
            c.attention += n;
            const auto& s = r.param->value.shape();
            if (name.ends_with(".weight") && s.size() == 2 && s[0] == d && s[1] == d) c.square_projections += n;
        }
    }
    return c;
}

} // namespace stgr::reason
