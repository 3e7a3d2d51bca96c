// SPDX-License-Identifier: Apache-2.0
#include "stgr/tensorcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "stgr/error.hpp"
#include "stgr/rng.hpp"

namespace stgr::tensor {

namespace kernels {

Tensor transpose(const Tensor& a) {
    const auto r = a.rows(), c = a.cols();
    Tensor t({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) t(j, i) = a(i, j);
    return t;
}

double canonical_sum(std::span<double> terms) {
    std::sort(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += t;
    return s;
}

Tensor matmul(const Tensor& a_in, const Tensor& b_in, bool transpose_a, bool transpose_b, Summation summation) {
    if (a_in.rank() != 2 || b_in.rank() != 2)
        throw ShapeError(fmt::format("matmul needs rank-2 operands, got {} and {}", shape_string(a_in.shape()),
                                     shape_string(b_in.shape())));
    const Tensor a = transpose_a ? transpose(a_in) : a_in;
    const Tensor b = transpose_b ? transpose(b_in) : b_in;
    const auto n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k)
        throw ShapeError(fmt::format("matmul inner dimensions differ: {} x {}", shape_string(a.shape()),
                                     shape_string(b.shape())));
    Tensor out({n, m});
    if (summation == Summation::ordered) {
        for (std::size_t i = 0; i < n; ++i) {
            double* orow = out.data().data() + i * m;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = a(i, p);
                if (av == 0.0) continue;
                const double* brow = b.data().data() + p * m;
                for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
            }
        }
    } else {
        std::vector<double> terms(k);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t p = 0; p < k; ++p) terms[p] = a(i, p) * b(p, j);
                out(i, j) = canonical_sum(terms);
            }
    }
    return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace kernels

namespace {

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(fmt::format("{} needs a rank-2 tensor, got {}", op, shape_string(t.shape())));
}

void add_into(Tensor* dst, const Tensor& src) {
    if (!dst) return;
    auto d = dst->data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Elementwise op with scalar broadcasting on either side. df_a/df_b give the
// partial derivatives at (x, y).
template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F f, DA df_a, DB df_b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const bool same = av.shape() == bv.shape();
    const bool b_scalar = !same && bv.size() == 1;
    const bool a_scalar = !same && !b_scalar && av.size() == 1;
    if (!same && !a_scalar && !b_scalar)
        throw ShapeError(fmt::format("{}: shapes {} and {} differ and neither is a scalar", name,
                                     shape_string(av.shape()), shape_string(bv.shape())));
    const Tensor& big = a_scalar ? bv : av;
    Tensor out(big.shape());
    const std::size_t n = big.size();
    auto xa = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
    auto xb = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
    for (std::size_t i = 0; i < n; ++i) out[i] = f(xa(i), xb(i));
    const Var inputs[] = {a, b};
    return a.tape().record(std::move(out), inputs, [a, b, a_scalar, b_scalar, df_a, df_b](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        auto xa = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
        auto xb = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
        if (Tensor* ga = t.grad_target(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[a_scalar ? 0 : i] += g[i] * df_a(xa(i), xb(i));
        }
        if (Tensor* gb = t.grad_target(b)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[b_scalar ? 0 : i] += g[i] * df_b(xa(i), xb(i));
        }
    });
}

// Elementwise unary op; df is the derivative at x.
template <class F, class D>
Var unary(Var a, F f, D df) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    const Var inputs[] = {a};
    return a.tape().record(std::move(out), inputs, [a, df](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        const Tensor& x = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * df(x[i]);
    });
}

} // namespace

Var add(Var a, Var b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Var scale(Var a, double s) {
    return unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_scalar(Var a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var matmul(Var a, Var b, Summation summation) {
    Tensor out = kernels::matmul(a.value(), b.value(), false, false, summation);
    const Var inputs[] = {a, b};
    return a.tape().record(std::move(out), inputs, [a, b](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_target(a)) add_into(ga, kernels::matmul(g, t.value(b), false, true));
        if (Tensor* gb = t.grad_target(b)) add_into(gb, kernels::matmul(t.value(a), g, true, false));
    });
}

Var transpose(Var a) {
    require_rank2(a.value(), "transpose");
    const Var inputs[] = {a};
    return a.tape().record(kernels::transpose(a.value()), inputs, [a](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_target(a)) add_into(ga, kernels::transpose(g));
    });
}

Var add_row(Var m, Var row) {
    const Tensor& mv = m.value();
    const Tensor& rv = row.value();
    require_rank2(mv, "add_row");
    const auto r = mv.rows(), c = mv.cols();
    if (rv.size() != c)
        throw ShapeError(fmt::format("add_row: row of {} values for matrix {}", rv.size(), shape_string(mv.shape())));
    Tensor out = mv;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(i, j) += rv[j];
    const Var inputs[] = {m, row};
    return m.tape().record(std::move(out), inputs, [m, row, r, c](Tape& t, const Tensor& g) {
        add_into(t.grad_target(m), g);
        if (Tensor* gr = t.grad_target(row)) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*gr)[j] += g(i, j);
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
    const auto r = parts[0].value().rows();
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank2(p.value(), "concat_cols");
        if (p.value().rows() != r) throw ShapeError("concat_cols: row counts differ");
        offsets.push_back(total);
        total += p.value().cols();
    }
    Tensor out({r, total});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k].value();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < v.cols(); ++j) out(i, offsets[k] + j) = v(i, j);
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return parts[0].tape().record(std::move(out), ins, [ins, offsets, r](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < ins.size(); ++k) {
            Tensor* gk = t.grad_target(ins[k]);
            if (!gk) continue;
            const auto c = gk->cols();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*gk)(i, j) += g(i, offsets[k] + j);
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
    const auto c = parts[0].value().cols();
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank2(p.value(), "concat_rows");
        if (p.value().cols() != c) throw ShapeError("concat_rows: column counts differ");
        offsets.push_back(total);
        total += p.value().rows();
    }
    Tensor out({total, c});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].value().data();
        std::copy(src.begin(), src.end(), out.data().begin() + offsets[k] * c);
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return parts[0].tape().record(std::move(out), ins, [ins, offsets, c](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < ins.size(); ++k) {
            Tensor* gk = t.grad_target(ins[k]);
            if (!gk) continue;
            for (std::size_t i = 0; i < gk->size(); ++i) (*gk)[i] += g[offsets[k] * c + i];
        }
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    const Tensor& av = a.value();
    require_rank2(av, "slice_cols");
    if (begin > end || end > av.cols())
        throw ShapeError(fmt::format("slice_cols [{}, {}) out of range for {}", begin, end, shape_string(av.shape())));
    const auto r = av.rows();
    Tensor out({r, end - begin});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = av(i, j);
    const Var inputs[] = {a};
    return a.tape().record(std::move(out), inputs, [a, begin, end, r](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = begin; j < end; ++j) (*ga)(i, j) += g(i, j - begin);
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    const Tensor& av = a.value();
    require_rank2(av, "slice_rows");
    if (begin > end || end > av.rows())
        throw ShapeError(fmt::format("slice_rows [{}, {}) out of range for {}", begin, end, shape_string(av.shape())));
    const auto c = av.cols();
    Tensor out({end - begin, c});
    std::copy(av.data().begin() + begin * c, av.data().begin() + end * c, out.data().begin());
    const Var inputs[] = {a};
    return a.tape().record(std::move(out), inputs, [a, begin, c](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[begin * c + i] += g[i];
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (double x : a.value().data()) s += x;
    const Var inputs[] = {a};
    return a.tape().record(Tensor::scalar(s), inputs, [a](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (auto& x : ga->data()) x += g[0];
    });
}

Var mean(Var a) {
    const auto n = a.value().size();
    if (n == 0) throw ArgumentError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_rows(Var a) {
    const Tensor& av = a.value();
    require_rank2(av, "mean_rows");
    const auto r = av.rows(), c = av.cols();
    if (r == 0) throw ArgumentError("mean_rows of a tensor with no rows");
    Tensor out({1, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += av(i, j);
    for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
    const Var inputs[] = {a};
    return a.tape().record(std::move(out), inputs, [a, r, c](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g[j] / static_cast<double>(r);
    });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) { return unary(a, kernels::gelu, kernels::gelu_derivative); }

Var sigmoid(Var a) {
    return unary(a, kernels::sigmoid, [](double x) {
        const double y = kernels::sigmoid(x);
        return y * (1.0 - y);
    });
}

Var exp(Var a) {
    for (double x : a.value().data()) {
        if (std::isnan(x) || x > 709.0) throw NumericDomainError(fmt::format("exp({}) is not representable", x));
    }
    return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
    for (double x : a.value().data()) {
        if (!(x > 0.0)) throw NumericDomainError(fmt::format("log({}) outside the positive reals", x));
    }
    return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var clamp(Var a, double lo, double hi) {
    return unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var smooth_l1(Var a) {
    return unary(
        a, [](double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; },
        [](double x) { return std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0); });
}

Var softmax(Var a, int axis) {
    const Tensor& av = a.value();
    require_rank2(av, "softmax");
    if (axis != 0 && axis != 1) throw ArgumentError("softmax axis must be 0 or 1");
    for (double x : av.data())
        if (std::isnan(x)) throw NumericDomainError("softmax input contains NaN");
    const auto r = av.rows(), c = av.cols();
    // Lines are rows for axis 1, columns for axis 0.
    const std::size_t lines = axis == 1 ? r : c;
    const std::size_t len = axis == 1 ? c : r;
    auto at = [axis, c](std::size_t line, std::size_t k) { return axis == 1 ? line * c + k : k * c + line; };
    Tensor out(av.shape());
    std::vector<double> terms(len);
    for (std::size_t l = 0; l < lines; ++l) {
        double mx = -INFINITY;
        for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, av[at(l, k)]);
        for (std::size_t k = 0; k < len; ++k) terms[k] = std::exp(av[at(l, k)] - mx);
        std::vector<double> sorted = terms;
        const double z = kernels::canonical_sum(sorted);
        for (std::size_t k = 0; k < len; ++k) out[at(l, k)] = terms[k] / z;
    }
    Tensor yv = out;
    const Var inputs[] = {a};
    return a.tape().record(std::move(out), inputs, [a, yv = std::move(yv), lines, len, at](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t l = 0; l < lines; ++l) {
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k) dot += g[at(l, k)] * yv[at(l, k)];
            for (std::size_t k = 0; k < len; ++k) (*ga)[at(l, k)] += yv[at(l, k)] * (g[at(l, k)] - dot);
        }
    });
}

Var logsumexp_rows(Var a) {
    const Tensor& av = a.value();
    require_rank2(av, "logsumexp_rows");
    const auto r = av.rows(), c = av.cols();
    if (c == 0) throw ArgumentError("logsumexp over an empty row");
    Tensor out({r, 1});
    Tensor weights(av.shape());
    for (std::size_t i = 0; i < r; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, av(i, j));
        if (std::isnan(mx) || std::isinf(mx)) throw NumericDomainError("logsumexp of a non-finite row");
        std::vector<double> terms(c);
        for (std::size_t j = 0; j < c; ++j) terms[j] = weights(i, j) = std::exp(av(i, j) - mx);
        const double z = kernels::canonical_sum(terms);
        for (std::size_t j = 0; j < c; ++j) weights(i, j) /= z;
        out(i, 0) = mx + std::log(z);
    }
    const Var inputs[] = {a};
    return a.tape().record(std::move(out), inputs, [a, weights = std::move(weights), r, c](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g(i, 0) * weights(i, j);
    });
}

Var layernorm(Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = x.value();
    require_rank2(xv, "layernorm");
    const auto r = xv.rows(), c = xv.cols();
    if (gain.value().size() != c || bias.value().size() != c)
        throw ShapeError(fmt::format("layernorm: gain/bias must have {} values", c));
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xv(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) xhat(i, j) = (xv(i, j) - mu) * inv_std[i];
    }
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(i, j) = xhat(i, j) * gv[j] + bv[j];
    const Var inputs[] = {x, gain, bias};
    return x.tape().record(
        std::move(out), inputs,
        [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](Tape& t, const Tensor& g) {
            const Tensor& gv = t.value(gain);
            if (Tensor* gx = t.grad_target(x)) {
                std::vector<double> dxhat(c);
                for (std::size_t i = 0; i < r; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        dxhat[j] = g(i, j) * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat(i, j);
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) (*gx)(i, j) += inv_std[i] * (dxhat[j] - m1 - xhat(i, j) * m2);
                }
            }
            if (Tensor* gg = t.grad_target(gain)) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g(i, j) * xhat(i, j);
            }
            if (Tensor* gb = t.grad_target(bias)) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g(i, j);
            }
        });
}

Var row_normalize(Var a) {
    const Tensor& av = a.value();
    require_rank2(av, "row_normalize");
    const auto r = av.rows(), c = av.cols();
    Tensor out(av.shape());
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += av(i, j) * av(i, j);
        norms[i] = std::sqrt(s);
        if (norms[i] > 0.0)
            for (std::size_t j = 0; j < c; ++j) out(i, j) = av(i, j) / norms[i];
    }
    Tensor yv = out;
    const Var inputs[] = {a};
    return a.tape().record(std::move(out), inputs,
                           [a, yv = std::move(yv), norms = std::move(norms), r, c](Tape& t, const Tensor& g) {
                               Tensor* ga = t.grad_target(a);
                               if (!ga) return;
                               for (std::size_t i = 0; i < r; ++i) {
                                   if (norms[i] == 0.0) continue;
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < c; ++j) dot += yv(i, j) * g(i, j);
                                   for (std::size_t j = 0; j < c; ++j)
                                       (*ga)(i, j) += (g(i, j) - yv(i, j) * dot) / norms[i];
                               }
                           });
}

Var dropout(Var a, double rate, std::uint64_t layer_id) {
    if (rate < 0.0 || rate >= 1.0) throw ArgumentError(fmt::format("dropout rate {} outside [0, 1)", rate));
    Tape& tape = a.tape();
    if (tape.mode() == Mode::eval || rate == 0.0) return a;
    const auto& key = tape.dropout_key();
    const Tensor& av = a.value();
    Tensor keep(av.shape());
    const double inv = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < av.size(); ++i)
        keep[i] = counter_uniform({key.seed, layer_id, key.step, key.stream, i}) >= rate ? inv : 0.0;
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * keep[i];
    const Var inputs[] = {a};
    return tape.record(std::move(out), inputs, [a, keep = std::move(keep)](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * keep[i];
    });
}

} // namespace stgr::tensor
