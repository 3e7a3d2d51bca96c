// SPDX-License-Identifier: Apache-2.0
#include "stgr/tensorcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "stgr/error.hpp"

namespace stgr::tensor {

namespace {

double evaluate(const Objective& f) {
    Tape tape(Mode::eval);
    return f(tape).value().item();
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

} // namespace

double gradient_rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const Objective& f, std::span<Parameter* const> params, double step, double tol) {
    if (!(step > 0.0)) throw ArgumentError("grad_check step must be positive");
    const double base = evaluate(f);
    if (!same_bits(base, evaluate(f))) throw ContractError("grad_check: objective is not deterministic");

    std::vector<Tensor> analytic;
    {
        Tape tape(Mode::eval);
        const Var loss = f(tape);
        const auto grads = tape.gradients(loss);
        for (Parameter* p : params) {
            Tensor g(p->value.shape());
            for (const auto& pg : grads) {
                if (pg.param != p) continue;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += pg.grad[i];
            }
            analytic.push_back(std::move(g));
        }
    }

    GradCheckReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        GradCheckEntry entry{p.name};
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + step;
            const double up = evaluate(f);
            p.value[i] = orig - step;
            const double down = evaluate(f);
            p.value[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double err = gradient_rel_error(analytic[k][i], numeric);
            if (err > entry.max_rel_error) {
                entry.max_rel_error = err;
                entry.worst_index = i;
            }
            if (err > tol) ++entry.flagged;
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        if (entry.flagged > 0) report.passed = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

} // namespace stgr::tensor
