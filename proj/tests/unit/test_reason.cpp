// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"

#include "stgr/error.hpp"
#include "stgr/reason/stgr.hpp"
#include "stgr/tensorcore/gradcheck.hpp"

using namespace stgr;
using namespace stgr::tensor;
using namespace stgr::reason;
using stgr::mask::Mask;
using tvid::gaussian;
using tvid::GuidanceSet;

namespace {

constexpr std::uint32_t kH = 24, kW = 24;

std::vector<oracle::Bitmap> random_blobs(Rng& rng, std::size_t n) {
    std::vector<oracle::Bitmap> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(oracle::ellipse(kH, kW, rng.uniform(4, 20), rng.uniform(4, 20), rng.uniform(2, 7), rng.uniform(2, 7)));
    return out;
}

std::vector<Mask> to_masks(const std::vector<oracle::Bitmap>& bits) {
    std::vector<Mask> out;
    for (const auto& b : bits) out.push_back(Mask::from_bitmap(kH, kW, b));
    return out;
}

/// Every trainable tensor gets random values, so zero-initialised blocks take part.
void randomize(StgrHead& head, Rng& rng, double s = 0.3) {
    std::vector<ParamRef> refs;
    head.collect(refs);
    for (auto& r : refs)
        for (auto& v : r.param->value.data()) v += s * rng.normal();
}

std::vector<long double> gamma_of(const LayerParams& p) {
    return {p.edge_scale.value.data().begin(), p.edge_scale.value.data().end()};
}

oracle::AttnWeights weights_of(const AttentionParams& a) {
    return {&a.q.weight.value, &a.q.bias.value, &a.k.weight.value, &a.k.bias.value,
            &a.v.weight.value, &a.v.bias.value, &a.o.weight.value, &a.o.bias.value};
}

oracle::Mat oracle_msa(const oracle::Mat& h, const oracle::Mat& e, const LayerParams& p, std::size_t heads, double eps) {
    const auto x = oracle::layer_norm(h, p.ln1_gain.value, p.ln1_bias.value, eps);
    auto out = oracle::attention(x, x, weights_of(p.self_attn), heads, gamma_of(p), e);
    out = oracle::mat_add(out, oracle::adapter(out, p.adapter1.down.weight.value, p.adapter1.down.bias.value,
                                               p.adapter1.up.weight.value, p.adapter1.up.bias.value));
    return oracle::mat_add(h, out);
}

oracle::Mat oracle_mca(const oracle::Mat& h, const oracle::Mat& g, const LayerParams& p, std::size_t heads, double eps) {
    const auto x = oracle::layer_norm(h, p.ln2_gain.value, p.ln2_bias.value, eps);
    auto out = oracle::attention(x, g, weights_of(p.cross_attn), heads, {}, {});
    out = oracle::mat_add(out, oracle::adapter(out, p.adapter2.down.weight.value, p.adapter2.down.bias.value,
                                               p.adapter2.up.weight.value, p.adapter2.up.bias.value));
    return oracle::mat_add(h, out);
}

void check_close(const Tensor& got, const oracle::Mat& want, double tol) {
    REQUIRE(got.rows() == want.size());
    for (std::size_t i = 0; i < got.rows(); ++i)
        for (std::size_t j = 0; j < got.cols(); ++j) {
            INFO("(" << i << "," << j << ")");
            CHECK(std::abs(got(i, j) - static_cast<double>(want[i][j])) <= tol);
        }
}

StgrConfig small_config(std::size_t dim = 8, std::size_t layers = 2, std::size_t heads = 2) {
    StgrConfig cfg;
    cfg.dim = dim;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.adapter_dim = 6;
    return cfg;
}

std::vector<double> row_of(const Tensor& t, std::size_t i) {
    return {t.data().begin() + static_cast<std::ptrdiff_t>(i * t.cols()),
            t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * t.cols())};
}

} // namespace

TEST_CASE("build_edges") {
    Rng rng(1);
    const auto bits = random_blobs(rng, 7);
    const auto masks = to_masks(bits);
    Tensor feats = gaussian(rng, 7, 5, 1.0);
    for (std::size_t j = 0; j < 5; ++j) feats(3, j) = 0.0;  // one degenerate node

    SUBCASE("matches a per-pair scalar oracle") {
        for (double logit : {-1.3, 0.0, 0.7}) {
            const Tensor e = build_edges(masks, feats, logit);
            const long double alpha = 1.0L / (1.0L + std::exp(-static_cast<long double>(logit)));
            for (std::size_t i = 0; i < 7; ++i)
                for (std::size_t j = 0; j < 7; ++j) {
                    const long double want = alpha * oracle::iou(bits[i], bits[j]) +
                                             (1 - alpha) * oracle::cosine(row_of(feats, i), row_of(feats, j));
                    CHECK(std::abs(e(i, j) - static_cast<double>(want)) <= 1e-12);
                }
        }
    }

    SUBCASE("symmetric, ranged, unit diagonal for non-degenerate nodes") {
        const double logit = 0.4;
        const double alpha = 1.0 / (1.0 + std::exp(-logit));
        const Tensor e = build_edges(masks, feats, logit);
        for (std::size_t i = 0; i < 7; ++i) {
            for (std::size_t j = 0; j < 7; ++j) {
                CHECK(e(i, j) == e(j, i));
                CHECK(e(i, j) >= alpha - 1 - 1e-15);
                CHECK(e(i, j) <= 1.0 + 1e-15);
            }
            if (i != 3) CHECK(e(i, i) == doctest::Approx(1.0).epsilon(1e-14));
        }
        CHECK(e(3, 3) == doctest::Approx(alpha).epsilon(1e-14));
    }

    SUBCASE("worked values") {
        // Large logit, identical masks: pure spatial identity.
        const std::vector<Mask> same{masks[0], masks[0]};
        Tensor f({2, 2}, std::vector<double>{1, 0, 0, 1});
        CHECK(build_edges(same, f, 40.0)(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
        // Very negative logit, identical features: pure semantic identity.
        Tensor g({2, 2}, std::vector<double>{0.3, -2, 0.3, -2});
        const std::vector<Mask> apart{masks[0], mask::complement(masks[0])};
        CHECK(build_edges(apart, g, -40.0)(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
        // alpha = 0.5, IoU = 0.2, cosine = 0.8 gives 0.5.
        Mask a = Mask::from_intervals(1, 10, std::vector<mask::Interval>{{0, 2}});
        Mask b = Mask::from_intervals(1, 10, std::vector<mask::Interval>{{1, 5}});
        REQUIRE(mask::iou(a, b) == doctest::Approx(0.2));
        Tensor h({2, 2}, std::vector<double>{1, 0, 0.8, 0.6});
        CHECK(build_edges(std::vector<Mask>{a, b}, h, 0.0)(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
    }

    SUBCASE("identical features order edges by IoU for any alpha") {
        Tensor same({7, 5});
        for (std::size_t i = 0; i < 7; ++i)
            for (std::size_t j = 0; j < 5; ++j) same(i, j) = 1.0 + static_cast<double>(j);
        const Tensor iou = pair_iou_matrix(masks);
        for (double logit : {-3.0, -0.5, 0.0, 2.0}) {
            const Tensor e = build_edges(masks, same, logit);
            for (std::size_t p = 0; p < iou.size(); ++p)
                for (std::size_t q = 0; q < iou.size(); ++q)
                    if (iou[p] < iou[q]) CHECK(e[p] <= e[q]);
        }
    }

    SUBCASE("shape errors") {
        CHECK_THROWS_AS(build_edges(masks, gaussian(rng, 6, 5, 1.0), 0.0), ShapeError);
        std::vector<Mask> mixed{masks[0], Mask(kH + 1, kW)};
        CHECK_THROWS_AS(build_edges(mixed, gaussian(rng, 2, 5, 1.0), 0.0), ShapeError);
    }

    SUBCASE("gradients reach features and the balance logit") {
        Parameter h("h", feats);
        Parameter a("a", Tensor::scalar(0.3));
        const Tensor iou = pair_iou_matrix(masks);
        const Tensor w = gaussian(rng, 7, 7, 1.0);
        h.value(3, 0) = 0.5;  // keep every row away from the normalisation kink
        const auto report = grad_check(
            [&](Tape& t) { return sum(mul(build_edges(iou, t.param(h), t.param(a)), t.constant(w))); },
            std::vector<Parameter*>{&h, &a});
        CHECK(report.passed);
    }
}

TEST_CASE("msa_layer") {
    Rng rng(2);
    auto cfg = small_config(6, 1, 2);
    StgrHead head(cfg, rng);
    randomize(head, rng);
    auto& p = head.layers()[0];

    SUBCASE("3-node graph matches a scalar attention oracle") {
        const Tensor h = gaussian(rng, 3, 6, 1.0);
        Tensor e({3, 3}, std::vector<double>{1, 0.2, -0.4, 0.2, 1, 0.7, -0.4, 0.7, 1});
        Tape tape;
        const Tensor got = msa_layer(tape, tape.constant(h), tape.constant(e), p, 2, cfg.layernorm_eps).value();
        check_close(got, oracle_msa(oracle::to_mat(h), oracle::to_mat(e), p, 2, cfg.layernorm_eps), 1e-10);
    }

    SUBCASE("single node attends to itself") {
        const Tensor h = gaussian(rng, 1, 6, 1.0);
        Tape tape;
        const Tensor got = msa_layer(tape, tape.constant(h), tape.constant(Tensor({1, 1}, 1.0)), p, 2, 1e-5).value();
        // Attention weight 1 on self: the head output is the value row itself.
        const auto x = oracle::layer_norm(oracle::to_mat(h), p.ln1_gain.value, p.ln1_bias.value, 1e-5);
        auto attn = oracle::affine(oracle::affine(x, p.self_attn.v.weight.value, p.self_attn.v.bias.value),
                                   p.self_attn.o.weight.value, p.self_attn.o.bias.value);
        attn = oracle::mat_add(attn, oracle::adapter(attn, p.adapter1.down.weight.value, p.adapter1.down.bias.value,
                                                     p.adapter1.up.weight.value, p.adapter1.up.bias.value));
        check_close(got, oracle::mat_add(oracle::to_mat(h), attn), 1e-12);
    }

    SUBCASE("zero edge scales ignore the edge matrix") {
        p.edge_scale.value.fill(0.0);
        const Tensor h = gaussian(rng, 4, 6, 1.0);
        Tape tape;
        const Tensor a = msa_layer(tape, tape.constant(h), tape.constant(gaussian(rng, 4, 4, 3.0)), p, 2, 1e-5).value();
        const Tensor b = msa_layer(tape, tape.constant(h), tape.constant(Tensor({4, 4})), p, 2, 1e-5).value();
        CHECK(a == b);
        check_close(a, oracle_msa(oracle::to_mat(h), {}, p, 2, 1e-5), 1e-10);
    }

    SUBCASE("non-finite logits are a numeric-domain error") {
        const Tensor h = gaussian(rng, 2, 6, 1.0);
        Tensor e({2, 2}, std::vector<double>{1, std::nan(""), std::nan(""), 1});
        Tape tape;
        CHECK_THROWS_AS(msa_layer(tape, tape.constant(h), tape.constant(e), p, 2, 1e-5), NumericDomainError);
    }
}

TEST_CASE("mca_layer") {
    Rng rng(3);
    auto cfg = small_config(4, 1, 2);
    StgrHead head(cfg, rng);
    randomize(head, rng);
    auto& p = head.layers()[0];

    SUBCASE("N=2, K=2 matches a scalar cross-attention oracle") {
        const Tensor h = gaussian(rng, 2, 4, 1.0);
        const Tensor g = gaussian(rng, 2, 4, 1.0);
        Tape tape;
        const Tensor got = mca_layer(tape, tape.constant(h), tape.constant(g), p, 2, 1e-5).value();
        check_close(got, oracle_mca(oracle::to_mat(h), oracle::to_mat(g), p, 2, 1e-5), 1e-10);
    }

    SUBCASE("single guidance vector gets all the weight") {
        const Tensor h = gaussian(rng, 3, 4, 1.0);
        const Tensor g = gaussian(rng, 1, 4, 1.0);
        Tape tape;
        const Tensor got = mca_layer(tape, tape.constant(h), tape.constant(g), p, 2, 1e-5).value();
        auto attn = oracle::affine(oracle::affine(oracle::to_mat(g), p.cross_attn.v.weight.value, p.cross_attn.v.bias.value),
                                   p.cross_attn.o.weight.value, p.cross_attn.o.bias.value);
        attn = oracle::mat_add(attn, oracle::adapter(attn, p.adapter2.down.weight.value, p.adapter2.down.bias.value,
                                                     p.adapter2.up.weight.value, p.adapter2.up.bias.value));
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                CHECK(std::abs(got(i, j) - (h(i, j) + static_cast<double>(attn[0][j]))) < 1e-12);
    }

    SUBCASE("zero value path leaves the residual only") {
        for (auto* t : {&p.cross_attn.v.weight, &p.cross_attn.v.bias, &p.cross_attn.o.bias, &p.adapter2.up.weight,
                       &p.adapter2.up.bias})
            t->value.fill(0.0);
        const Tensor h = gaussian(rng, 3, 4, 1.0);
        Tape tape;
        CHECK(mca_layer(tape, tape.constant(h), tape.constant(gaussian(rng, 2, 4, 1.0)), p, 2, 1e-5).value() == h);
    }

    SUBCASE("errors") {
        Tape tape;
        const Var h = tape.constant(gaussian(rng, 3, 4, 1.0));
        CHECK_THROWS_AS(mca_layer(tape, h, tape.constant(Tensor({0, 4})), p, 2, 1e-5), ArgumentError);
        CHECK_THROWS_AS(mca_layer(tape, h, tape.constant(Tensor({2, 5})), p, 2, 1e-5), ShapeError);
    }
}

TEST_CASE("stgr_forward") {
    Rng rng(4);
    auto cfg = small_config(8, 2, 2);
    StgrHead head(cfg, rng);
    randomize(head, rng);
    const auto masks = to_masks(random_blobs(rng, 6));
    const Tensor feats = gaussian(rng, 6, 8, 1.0);
    const GuidanceSet guide{gaussian(rng, 2, 8, 1.0)};

    SUBCASE("repeat runs are bit-identical") {
        const auto a = stgr_forward(masks, feats, guide, head, 0.5);
        const auto b = stgr_forward(masks, feats, guide, head, 0.5);
        CHECK(a.scores == b.scores);
        CHECK(a.predicted_iou == b.predicted_iou);
        CHECK(a.selected == b.selected);
        CHECK(a.merged_mask == b.merged_mask);
        for (double s : a.scores) CHECK((s > 0.0 && s < 1.0));
    }

    SUBCASE("permutation equivariance is exact") {
        const auto base = stgr_forward(masks, feats, guide, head, 0.5);
        Rng prng(9);
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<std::size_t> perm(6);
            std::iota(perm.begin(), perm.end(), 0);
            prng.shuffle(perm);
            std::vector<Mask> pm;
            Tensor pf({6, 8});
            for (std::size_t i = 0; i < 6; ++i) {
                pm.push_back(masks[perm[i]]);
                for (std::size_t j = 0; j < 8; ++j) pf(i, j) = feats(perm[i], j);
            }
            const auto r = stgr_forward(pm, pf, guide, head, 0.5);
            std::vector<std::size_t> mapped;
            for (std::size_t i = 0; i < 6; ++i) {
                CHECK(r.scores[i] == base.scores[perm[i]]);
                CHECK(r.predicted_iou[i] == base.predicted_iou[perm[i]]);
            }
            for (auto i : r.selected) mapped.push_back(perm[i]);
            std::sort(mapped.begin(), mapped.end());
            CHECK(mapped == base.selected);
            CHECK(r.merged_mask == base.merged_mask);
        }
    }

    SUBCASE("selection sets nest as the threshold rises") {
        const auto r = stgr_forward(masks, feats, guide, head, 0.0);
        std::vector<std::size_t> prev = r.selected;
        for (double tau = 0.05; tau <= 1.0; tau += 0.05) {
            const auto s = select_candidates(masks, r.scores, r.predicted_iou, tau);
            CHECK(std::includes(prev.begin(), prev.end(), s.selected.begin(), s.selected.end()));
            for (std::size_t i = 0; i < 6; ++i)
                CHECK((std::find(s.selected.begin(), s.selected.end(), i) != s.selected.end()) == (r.scores[i] > tau));
            prev = s.selected;
        }
    }

    SUBCASE("saturated heads select everything or nothing") {
        head.confidence_head().out.bias.value.fill(60.0);
        const auto all = stgr_forward(masks, feats, guide, head, 0.5);
        CHECK(all.selected.size() == 6);
        CHECK(all.merged_mask == mask::union_all(masks));
        head.confidence_head().out.bias.value.fill(-60.0);
        const auto none = stgr_forward(masks, feats, guide, head, 0.5);
        CHECK(none.selected.empty());
        CHECK(mask::area(none.merged_mask) == 0);
        CHECK(none.merged_mask.height() == kH);
    }

    SUBCASE("zero edge scales make the output independent of the edges") {
        for (auto& l : head.layers()) l.edge_scale.value.fill(0.0);
        Tape t1, t2;
        const Tensor iou = pair_iou_matrix(masks);
        const Tensor scrambled = gaussian(rng, 6, 6, 5.0);
        const HeadInputs a{masks, iou, t1.constant(feats), t1.constant(guide.vectors)};
        const HeadInputs b{masks, scrambled, t2.constant(feats), t2.constant(guide.vectors)};
        CHECK(head.forward(t1, a).scores.value() == head.forward(t2, b).scores.value());
    }

    SUBCASE("single candidate") {
        const auto r = stgr_forward(std::span(masks).first(1), Tensor({1, 8}, row_of(feats, 0)), guide, head, 0.5);
        CHECK(r.scores.size() == 1);
    }

    SUBCASE("errors") {
        CHECK_THROWS_AS(stgr_forward({}, Tensor({0, 8}), guide, head, 0.5), ArgumentError);
        CHECK_THROWS_AS(stgr_forward(masks, gaussian(rng, 5, 8, 1.0), guide, head, 0.5), ShapeError);
        CHECK_THROWS_AS(stgr_forward(masks, gaussian(rng, 6, 7, 1.0), guide, head, 0.5), ShapeError);
    }
}

TEST_CASE("stgr gradients pass finite differences") {
    Rng rng(5);
    StgrHead head(small_config(8, 2, 2), rng);
    randomize(head, rng);
    const auto masks = to_masks(random_blobs(rng, 4));
    const Tensor iou = pair_iou_matrix(masks);
    const Tensor feats = gaussian(rng, 4, 8, 1.0);
    const Tensor guide = gaussian(rng, 2, 8, 1.0);
    const Tensor w = gaussian(rng, 4, 1, 1.0);
    std::vector<ParamRef> refs;
    head.collect(refs);
    std::vector<Parameter*> params;
    for (auto& r : refs) params.push_back(r.param);
    const auto report = grad_check(
        [&](Tape& t) {
            const auto out = head.forward(t, HeadInputs{masks, iou, t.constant(feats), t.constant(guide)});
            return add(sum(mul(out.scores, t.constant(w))), sum(out.predicted_iou));
        },
        params);
    for (const auto& e : report.entries) INFO(e.name << " " << e.max_rel_error);
    CHECK(report.passed);
}

TEST_CASE("count_params") {
    Rng rng(6);
    StgrConfig cfg;  // d_v = 64, 3 layers, 64-dim adapters
    StgrHead head(cfg, rng);
    const auto c = count_params(head);
    CHECK(c.adapters == 3 * 2 * 8320);
    CHECK(c.square_projections == 3 * 8 * 64 * 64);
    CHECK(c.balance == 1);
    CHECK(c.heads == 2 * (64 * 32 + 32 + 32 + 1));
    // attention: 8 projections + biases, two norms, edge scales per layer
    CHECK(c.attention == 3 * (8 * (64 * 64 + 64) + 4 * 64 + 4));

    StgrConfig none = cfg;
    none.layers = 0;
    StgrHead bare(none, rng);
    const auto b = count_params(bare);
    CHECK(b.attention == 0);
    CHECK(b.adapters == 0);
    CHECK(b.total() == b.heads + b.balance);

    StgrConfig wide = cfg;
    wide.dim = 128;
    StgrHead big(wide, rng);
    CHECK(count_params(big).square_projections == 4 * c.square_projections);

    CHECK_THROWS_AS(StgrHead(small_config(6, 1, 4), rng), ConfigError);
}
