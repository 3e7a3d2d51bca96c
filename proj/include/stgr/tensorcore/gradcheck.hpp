// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stgr/tensorcore/tape.hpp"

namespace stgr::tensor {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t flagged = 0;  // entries above tolerance
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    bool passed = true;
};

/// Builds a scalar objective on the given (eval-mode) tape.
using Objective = std::function<Var(Tape&)>;

/// Relative error used by grad_check: |a - n| / max(|a|, |n|, 1e-6).
double gradient_rel_error(double analytic, double numeric);

/// Compares reverse-mode gradients of `f` against central differences, element by
/// element, for every listed parameter. Throws ContractError if two evaluations at
/// the same point disagree (the objective must be deterministic).
GradCheckReport grad_check(const Objective& f, std::span<Parameter* const> params, double step = 1e-5,
                           double tol = 1e-4);

} // namespace stgr::tensor
