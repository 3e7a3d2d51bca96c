// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"

#include "stgr/error.hpp"
#include "stgr/tensorcore/checkpoint.hpp"
#include "stgr/tensorcore/gradcheck.hpp"
#include "stgr/tensorcore/ops.hpp"

using namespace stgr;
using namespace stgr::tensor;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = scale * rng.normal();
    return t;
}

void require_grad_ok(const Objective& f, std::vector<Parameter*> params) {
    const auto report = grad_check(f, params);
    INFO("max rel error " << report.max_rel_error);
    for (const auto& e : report.entries) INFO(e.name << ": " << e.max_rel_error);
    REQUIRE(report.passed);
}

} // namespace

TEST_CASE("primitive forward values") {
    Tape t;
    Rng rng(1);
    const auto a = t.constant(random_tensor(rng, {3, 4}));
    const Tensor prod = matmul(t.constant(Tensor::identity(3)), a).value();
    CHECK(prod == a.value());
    CHECK(sigmoid(t.constant(Tensor::scalar(0.0))).value().item() == 0.5);

    const auto x = random_tensor(rng, {1, 4});
    const auto g = gelu(t.constant(x)).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(g[i] - oracle::gelu(x[i])) <= 1e-12);

    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(add(a, t.constant(Tensor({4, 3}))), ShapeError);
    CHECK_THROWS_AS(log(t.constant(Tensor::scalar(0.0))), NumericDomainError);
    CHECK_THROWS_AS(exp(t.constant(Tensor::scalar(1000.0))), NumericDomainError);
    // Scalar broadcast is the only broadcast.
    CHECK(mul(a, t.constant(Tensor::scalar(2.0))).value()[5] == 2.0 * a.value()[5]);
    CHECK_THROWS_AS(add_row(a, t.constant(Tensor({1, 3}))), ShapeError);
}

TEST_CASE("softmax") {
    Tape t;
    const auto u = softmax(t.constant(Tensor({1, 5}, 0.3))).value();
    for (double v : u.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

    const auto s = softmax(t.constant(Tensor::matrix(1, 2, {1e4, 0.0}))).value();
    CHECK(std::isfinite(s[0]));
    CHECK(s[0] == 1.0);
    CHECK(s[1] == 0.0);

    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_tensor(rng, {1, 5}, 3.0);
        const auto y = softmax(t.constant(x)).value();
        long double z = 0.0L;
        for (double v : x.data()) z += std::exp(static_cast<long double>(v));
        double total = 0.0;
        for (std::size_t i = 0; i < 5; ++i) {
            const auto ref = static_cast<double>(std::exp(static_cast<long double>(x[i])) / z);
            CHECK(std::abs(y[i] - ref) <= 1e-12);
            CHECK(y[i] >= 0.0);
            total += y[i];
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
    }

    // Column softmax equals row softmax of the transpose.
    const auto m = random_tensor(rng, {3, 4});
    const auto cols = softmax(t.constant(m), 0).value();
    const auto rows = softmax(t.constant(kernels::transpose(m)), 1).value();
    CHECK(cols == kernels::transpose(rows));

    Tensor nan_in({1, 2});
    nan_in[0] = NAN;
    CHECK_THROWS_AS(softmax(t.constant(nan_in)), NumericDomainError);
}

TEST_CASE("softmax sums are independent of element order") {
    Rng rng(3);
    Tape t;
    std::vector<double> vals(9);
    for (auto& v : vals) v = rng.normal() * 4.0;
    auto perm = vals;
    rng.shuffle(perm);
    const auto a = softmax(t.constant(Tensor({1, 9}, vals))).value();
    const auto b = softmax(t.constant(Tensor({1, 9}, perm))).value();
    for (std::size_t i = 0; i < 9; ++i) {
        const auto j = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), vals[i]) - perm.begin());
        REQUIRE(a[i] == b[j]);
    }
}

TEST_CASE("layernorm") {
    Tape t;
    const auto ones = t.constant(Tensor({1, 4}, 1.0));
    const auto zeros = t.constant(Tensor({1, 4}, 0.0));
    const auto c = layernorm(t.constant(Tensor({2, 4}, 3.25)), ones, zeros, 1e-5).value();
    for (double v : c.data()) CHECK(v == 0.0);

    Rng rng(4);
    const auto x = random_tensor(rng, {3, 6}, 2.0);
    const auto bias = random_tensor(rng, {1, 6});
    const auto y0 = layernorm(t.constant(x), t.constant(Tensor({1, 6}, 0.0)), t.constant(bias), 1e-5).value();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 6; ++j) CHECK(y0(i, j) == bias[j]);

    const auto y = layernorm(t.constant(x), t.constant(Tensor({1, 6}, 1.0)), t.constant(Tensor({1, 6}, 0.0)), 0.0).value();
    for (std::size_t i = 0; i < 3; ++i) {
        long double mu = 0, var = 0;
        for (std::size_t j = 0; j < 6; ++j) mu += x(i, j);
        mu /= 6;
        for (std::size_t j = 0; j < 6; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
        var /= 6;
        double row_mean = 0, row_var = 0;
        for (std::size_t j = 0; j < 6; ++j) {
            const auto ref = static_cast<double>((x(i, j) - mu) / std::sqrt(var));
            CHECK(std::abs(y(i, j) - ref) <= 1e-12);
            row_mean += y(i, j);
        }
        row_mean /= 6;
        for (std::size_t j = 0; j < 6; ++j) row_var += (y(i, j) - row_mean) * (y(i, j) - row_mean);
        row_var /= 6;
        CHECK(std::abs(row_mean) < 1e-10);
        CHECK(std::abs(row_var - 1.0) < 1e-8);
    }
}

TEST_CASE("backward basics") {
    Rng rng(5);
    Parameter x("x", random_tensor(rng, {2, 3}));
    {
        Tape t;
        t.backward(sum(t.param(x)));
        for (double g : x.grad.data()) CHECK(g == 1.0);
    }
    x.zero_grad();
    {
        Tape t;
        const auto v = t.param(x);
        t.backward(scale(sum(mul(v, v)), 0.5));
        CHECK(x.grad == x.value);
    }
    // Accumulation: a second call adds.
    {
        Tape t;
        const auto v = t.param(x);
        t.backward(scale(sum(mul(v, v)), 0.5));
        for (std::size_t i = 0; i < x.value.size(); ++i) CHECK(x.grad[i] == 2.0 * x.value[i]);
    }
    Tape t;
    CHECK_THROWS_AS(t.backward(t.param(x)), ArgumentError);

    // Frozen leaves get nothing.
    Parameter frozen("frozen", Tensor({1, 1}, 2.0), false);
    Tape t2;
    const auto grads = t2.gradients(sum(mul(t2.param(frozen), t2.param(x))));
    REQUIRE(grads.size() == 1);
    CHECK(grads[0].param == &x);
}

TEST_CASE("grad_check") {
    Rng rng(6);
    Parameter x("x", random_tensor(rng, {1, 4}));
    Parameter* px[] = {&x};

    auto report = grad_check([&](Tape& t) { return t.constant(Tensor::scalar(1.5)); }, px);
    CHECK(report.passed);
    CHECK(report.max_rel_error == 0.0);

    const auto w = random_tensor(rng, {4, 1});
    report = grad_check([&](Tape& t) { return sum(matmul(t.param(x), t.constant(w))); }, px);
    CHECK(report.passed);
    CHECK(report.max_rel_error < 1e-9);

    int calls = 0;
    CHECK_THROWS_AS(grad_check([&](Tape& t) { return t.constant(Tensor::scalar(++calls)); }, px), ContractError);
}

TEST_CASE("every primitive passes finite differences") {
    Rng rng(7);
    Parameter a("a", random_tensor(rng, {3, 4}));
    Parameter b("b", random_tensor(rng, {3, 4}));
    Parameter m("m", random_tensor(rng, {4, 2}));
    Parameter r("r", random_tensor(rng, {1, 4}));
    Parameter s("s", random_tensor(rng, {1, 1}));
    Parameter pos("pos", Tensor({3, 4}));
    for (auto& v : pos.value.data()) v = 0.5 + rng.uniform();
    // Random linear functional of the op output, so every output element matters.
    auto weighted = [](Var v) {
        Rng w(99);
        return sum(mul(v, v.tape().constant(random_tensor(w, v.shape()))));
    };

    require_grad_ok([&](Tape& t) { return weighted(add(t.param(a), t.param(b))); }, {&a, &b});
    require_grad_ok([&](Tape& t) { return weighted(sub(t.param(a), t.param(b))); }, {&a, &b});
    require_grad_ok([&](Tape& t) { return weighted(mul(t.param(a), t.param(b))); }, {&a, &b});
    require_grad_ok([&](Tape& t) { return weighted(mul(t.param(a), t.param(s))); }, {&a, &s});
    require_grad_ok([&](Tape& t) { return weighted(mul(t.param(s), t.param(a))); }, {&a, &s});
    require_grad_ok([&](Tape& t) { return weighted(matmul(t.param(a), t.param(m))); }, {&a, &m});
    require_grad_ok([&](Tape& t) { return weighted(matmul(t.param(a), t.param(m), Summation::canonical)); },
                    {&a, &m});
    require_grad_ok([&](Tape& t) { return weighted(transpose(t.param(a))); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(add_row(t.param(a), t.param(r))); }, {&a, &r});
    require_grad_ok(
        [&](Tape& t) {
            const Var parts[] = {t.param(a), t.param(b)};
            return weighted(concat_cols(parts));
        },
        {&a, &b});
    require_grad_ok(
        [&](Tape& t) {
            const Var parts[] = {t.param(a), t.param(r)};
            return weighted(concat_rows(parts));
        },
        {&a, &r});
    require_grad_ok([&](Tape& t) { return weighted(slice_cols(t.param(a), 1, 3)); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(slice_rows(t.param(a), 1, 3)); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(mean_rows(t.param(a))); }, {&a});
    require_grad_ok([&](Tape& t) { return mean(mul(t.param(a), t.param(a))); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(gelu(t.param(a))); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(sigmoid(t.param(a))); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(exp(t.param(a))); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(log(t.param(pos))); }, {&pos});
    require_grad_ok([&](Tape& t) { return weighted(smooth_l1(scale(t.param(a), 1.7))); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(softmax(t.param(a), 1)); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(softmax(t.param(a), 0)); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(logsumexp_rows(t.param(a))); }, {&a});
    require_grad_ok([&](Tape& t) { return weighted(row_normalize(t.param(a))); }, {&a});
    Parameter gain("gain", random_tensor(rng, {1, 4}));
    Parameter bias("bias", random_tensor(rng, {1, 4}));
    require_grad_ok([&](Tape& t) { return weighted(layernorm(t.param(a), t.param(gain), t.param(bias), 1e-5)); },
                    {&a, &gain, &bias});
}

TEST_CASE("dropout") {
    Rng rng(8);
    const auto x = random_tensor(rng, {4, 8});
    Tape eval;
    const auto in = eval.constant(x);
    CHECK(dropout(in, 0.5, 3).id() == in.id());

    auto run = [&](DropoutKey key, std::uint64_t layer) {
        Tape t(Mode::train, key);
        return dropout(t.constant(x), 0.25, layer).value();
    };
    const auto a = run({1, 2, 0}, 3);
    CHECK(a == run({1, 2, 0}, 3));
    CHECK(!(a == run({1, 3, 0}, 3)));
    CHECK(!(a == run({1, 2, 0}, 4)));
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == 0.0) ++zeros;
        else CHECK(a[i] == doctest::Approx(x[i] / 0.75).epsilon(1e-15));
    }
    CHECK(zeros > 0);
    CHECK(zeros < a.size());
}

TEST_CASE("checkpoint container") {
    Rng rng(9);
    Checkpoint ck;
    ck.seed = 0xfeedULL;
    ck.tensors.push_back({"a.weight", random_tensor(rng, {3, 2})});
    ck.tensors.push_back({"b", Tensor::scalar(-0.0)});
    const auto bytes = serialize_checkpoint(ck);
    CHECK(bytes.substr(0, 8) == "STGRCKPT");
    const auto back = parse_checkpoint(bytes);
    CHECK(back.seed == ck.seed);
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.tensors[0].name == "a.weight");
    CHECK(back.tensors[0].value == ck.tensors[0].value);
    CHECK(std::signbit(back.tensors[1].value.item()));
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK_THROWS_AS(parse_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 3)), ParseError);
    CHECK_THROWS_AS(parse_checkpoint(std::string("NOTACKPT")), ParseError);
}
