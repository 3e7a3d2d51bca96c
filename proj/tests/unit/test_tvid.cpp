// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "stgr/error.hpp"
#include "stgr/tensorcore/gradcheck.hpp"
#include "stgr/tvid/tvid.hpp"

using namespace stgr;
using namespace stgr::tensor;
using namespace stgr::tvid;

namespace {

EncoderConfig small_encoder() {
    EncoderConfig cfg;
    cfg.vocab = 20;
    cfg.max_len = 8;
    cfg.dim = 16;
    cfg.heads = 4;
    cfg.soft_tokens = 3;
    cfg.lora.rank = 4;
    cfg.lora.alpha = 8.0;
    return cfg;
}

Tensor encode(TextEncoderStub& enc, const std::vector<int>& tokens) {
    Tape tape;
    return enc.encode_tokens(tape, tokens).value();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("lora layer starts as its frozen projection") {
    Rng rng(3);
    LoraConfig cfg{4, 8.0, 0.0};
    LoraLinear lin("l", 6, 5, cfg, rng);
    CHECK(lin.scaling() == 2.0);
    CHECK(lin.effective_weight() == lin.weight().value);
    Tape tape;
    Rng xr(4);
    const Var x = tape.constant(gaussian(xr, 3, 6, 1.0));
    const Tensor y = lin.forward(x, 0).value();
    const auto ref = oracle::affine(oracle::to_mat(x.value()), lin.weight().value, lin.bias().value);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(y(i, j) == doctest::Approx(static_cast<double>(ref[i][j])).epsilon(1e-14));
    CHECK_FALSE(lin.weight().requires_grad);
    CHECK(lin.down().requires_grad);
}

TEST_CASE("lora forward equals the explicit effective weight") {
    Rng rng(5);
    LoraConfig cfg{3, 6.0, 0.0};
    LoraLinear lin("l", 4, 4, cfg, rng);
    lin.up().value = gaussian(rng, 3, 4, 0.3);
    Tape tape;
    const Var x = tape.constant(gaussian(rng, 2, 4, 1.0));
    const Tensor y = lin.forward(x, 0).value();
    // Explicit W + scaling * down * up, computed in long double.
    const auto du = oracle::mat_mul(oracle::to_mat(lin.down().value), oracle::to_mat(lin.up().value));
    auto w = oracle::to_mat(lin.weight().value);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) w[i][j] += 2.0L * du[i][j];
    const auto ref = oracle::mat_mul(oracle::to_mat(x.value()), w);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(y(i, j) - static_cast<double>(ref[i][j])) < 1e-12);
}

TEST_CASE("encode_attributes") {
    const auto cfg = small_encoder();
    Rng rng(11);
    TextEncoderStub enc(cfg, rng);
    const std::vector<std::vector<int>> toks{{1, 2, 3}, {4, 5}, {7}};

    SUBCASE("one vector per attribute, deterministic") {
        const auto a = encode_attributes(toks, enc);
        const auto b = encode_attributes(toks, enc);
        REQUIRE(a.size() == 3);
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(a[k].values.size() == cfg.dim);
            CHECK(a[k].attribute_id == static_cast<int>(k));
            CHECK(a[k].values == b[k].values);
        }
    }

    SUBCASE("zero-init adapters reproduce the adapter-free encoder") {
        auto no_lora = cfg;
        Rng rng2(11);
        TextEncoderStub base(no_lora, rng2);
        // Same seed gives the same base weights; strip the low-rank path entirely.
        for (auto* a : base.adapters()) a->down().value.fill(0.0);
        CHECK(encode(enc, toks[0]) == encode(base, toks[0]));
    }

    SUBCASE("full-rank adapter equal to W doubles the base weights") {
        auto full = cfg;
        full.lora.rank = cfg.dim;
        Rng r1(21), r2(21);
        TextEncoderStub adapted(full, r1);
        TextEncoderStub doubled(full, r2);
        for (auto* a : adapted.adapters()) {
            a->up().value = Tensor::identity(cfg.dim);
            a->down().value = a->weight().value;
            for (auto& v : a->down().value.data()) v /= a->scaling();
        }
        for (auto* a : doubled.adapters())
            for (auto& v : a->weight().value.data()) v *= 2.0;
        CHECK(max_abs_diff(encode(adapted, toks[0]), encode(doubled, toks[0])) < 1e-10);
    }

    SUBCASE("random adapters match a dense encoder carrying W + scaling * down * up") {
        Rng r1(31), r2(31), fill(32);
        TextEncoderStub adapted(cfg, r1);
        TextEncoderStub dense(cfg, r2);
        auto src = adapted.adapters();
        auto dst = dense.adapters();
        for (std::size_t i = 0; i < src.size(); ++i) {
            src[i]->up().value = gaussian(fill, cfg.lora.rank, cfg.dim, 0.5);
            dst[i]->weight().value = src[i]->effective_weight();
        }
        CHECK(max_abs_diff(encode(adapted, toks[1]), encode(dense, toks[1])) < 1e-10);
        CHECK(max_abs_diff(encode(adapted, toks[1]), encode(enc, toks[1])) > 1e-6);
    }

    SUBCASE("errors") {
        CHECK_THROWS_AS(encode_attributes({}, enc), ArgumentError);
        CHECK_THROWS_AS(encode_attributes({{}}, enc), ArgumentError);
        CHECK_THROWS_AS(encode_attributes({{99}}, enc), ArgumentError);
    }
}

TEST_CASE("soft-token path") {
    const auto cfg = small_encoder();
    Rng rng(12);
    TextEncoderStub enc(cfg, rng);
    Tape tape;
    const Var attrs = tape.constant(gaussian(rng, 3, cfg.dim, 1.0));
    const Tensor rows = enc.encode_rows(tape, attrs).value();
    REQUIRE(rows.rows() == 3);
    REQUIRE(rows.cols() == cfg.dim);
    const Tensor one = enc.encode_embedded(tape, slice_rows(attrs, 1, 2)).value();
    for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(rows(1, j) == one[j]);
    CHECK_THROWS_AS(enc.encode_embedded(tape, tape.constant(Tensor({1, 3}))), ShapeError);
}

TEST_CASE("encoder lora gradients pass finite differences") {
    auto cfg = small_encoder();
    cfg.blocks = 1;
    Rng rng(13);
    TextEncoderStub enc(cfg, rng);
    Rng fill(14);
    for (auto* a : enc.adapters()) a->up().value = gaussian(fill, cfg.lora.rank, cfg.dim, 0.1);
    const Tensor attrs = gaussian(fill, 2, cfg.dim, 1.0);
    const Tensor w = gaussian(fill, 2, cfg.dim, 1.0);
    std::vector<Parameter*> params;
    for (auto* a : enc.adapters()) {
        params.push_back(&a->down());
        params.push_back(&a->up());
    }
    const auto report = grad_check(
        [&](Tape& t) { return sum(mul(enc.encode_rows(t, t.constant(attrs)), t.constant(w))); }, params);
    for (const auto& e : report.entries) INFO(e.name << " " << e.max_rel_error);
    CHECK(report.passed);
}

TEST_CASE("frozen encoder tensors receive no gradient") {
    const auto cfg = small_encoder();
    Rng rng(15);
    TextEncoderStub enc(cfg, rng);
    Tape tape(Mode::train, {1, 0, 0});
    const Var out = enc.encode_tokens(tape, std::vector<int>{1, 2});
    const auto grads = tape.gradients(sum(out));
    for (const auto& g : grads) CHECK(g.param->requires_grad);
    std::vector<ParamRef> refs;
    enc.collect(refs);
    std::size_t lora = 0;
    for (const auto& r : refs) {
        CHECK(r.param->requires_grad == (r.group == Group::lora));
        lora += r.group == Group::lora;
    }
    CHECK(lora == 2 * 4 * cfg.blocks);
    CHECK(enc.frozen_parameters().size() == refs.size() - lora);
}

TEST_CASE("project_guidance") {
    Rng rng(17);
    Projection proj(8, 12, 6, rng);
    std::vector<AttributeVector> attrs;
    for (int k = 0; k < 3; ++k) {
        AttributeVector a;
        a.attribute_id = k;
        for (int j = 0; j < 8; ++j) a.values.push_back(rng.normal());
        attrs.push_back(a);
    }

    SUBCASE("shape contract") {
        const auto g = project_guidance(attrs, proj, 6);
        CHECK(g.count() == 3);
        CHECK(g.dim() == 6);
    }

    SUBCASE("matches a hand-computed two-layer forward") {
        proj.b1().value = gaussian(rng, 1, 12, 0.5);
        proj.b2().value = gaussian(rng, 1, 6, 0.5);
        const auto g = project_guidance(attrs, proj, 6);
        for (std::size_t k = 0; k < 3; ++k) {
            for (std::size_t j = 0; j < 6; ++j) {
                long double acc = proj.b2().value[j];
                for (std::size_t h = 0; h < 12; ++h) {
                    long double pre = proj.b1().value[h];
                    for (std::size_t i = 0; i < 8; ++i)
                        pre += static_cast<long double>(attrs[k].values[i]) * proj.w1().value(i, h);
                    acc += oracle::gelu_l(pre) * proj.w2().value(h, j);
                }
                CHECK(std::abs(g.vectors(k, j) - static_cast<double>(acc)) < 1e-12);
            }
        }
    }

    SUBCASE("zero weights give zero guidance") {
        for (auto* p : {&proj.w1(), &proj.b1(), &proj.w2(), &proj.b2()}) p->value.fill(0.0);
        const auto g = project_guidance(attrs, proj, 6);
        for (double v : g.vectors.data()) CHECK(v == 0.0);
    }

    SUBCASE("permuting attributes permutes guidance") {
        const auto g = project_guidance(attrs, proj, 6);
        std::vector<AttributeVector> perm{attrs[2], attrs[0], attrs[1]};
        const auto gp = project_guidance(perm, proj, 6);
        const std::size_t src[] = {2, 0, 1};
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t j = 0; j < 6; ++j) CHECK(gp.vectors(k, j) == g.vectors(src[k], j));
    }

    SUBCASE("dimension mismatches are config errors") {
        CHECK_THROWS_AS(project_guidance(attrs, proj, 7), ConfigError);
        std::vector<AttributeVector> wrong{AttributeVector{std::vector<double>(5, 1.0), 0}};
        CHECK_THROWS_AS(project_guidance(wrong, proj, 6), ConfigError);
        CHECK_THROWS_AS(project_guidance({}, proj, 6), ArgumentError);
    }

    SUBCASE("gradients pass finite differences") {
        const Tensor x = stack_attributes(attrs);
        const Tensor w = gaussian(rng, 3, 6, 1.0);
        std::vector<Parameter*> params{&proj.w1(), &proj.b1(), &proj.w2(), &proj.b2()};
        const auto report = grad_check(
            [&](Tape& t) { return sum(mul(proj.forward(t, t.constant(x)), t.constant(w))); }, params);
        CHECK(report.passed);
    }
}
