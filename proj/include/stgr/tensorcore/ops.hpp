// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "stgr/tensorcore/tape.hpp"

namespace stgr::tensor {

/// How a matmul reduces over its inner dimension.
///   ordered:   left-to-right accumulation.
///   canonical: terms are sorted before summing, so the result does not depend on
///              the order of the inner dimension. Used where that dimension indexes
///              graph nodes, making node permutations commute with the op bit-exactly.
enum class Summation { ordered, canonical };

// Elementwise binary ops need equal shapes, or one operand with a single element.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

Var matmul(Var a, Var b, Summation summation = Summation::ordered);
Var transpose(Var a);

/// m [r x c] + row broadcast over rows; `row` holds c values.
Var add_row(Var m, Var row);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);

Var sum(Var a);
Var mean(Var a);
/// Column means: [r x c] -> [1 x c].
Var mean_rows(Var a);

Var relu(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var clamp(Var a, double lo, double hi);
/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
Var smooth_l1(Var a);

/// Softmax of a rank-2 tensor. axis 1 normalises each row, axis 0 each column.
/// Sums are canonical (order independent).
Var softmax(Var a, int axis = 1);

/// Row-wise log-sum-exp: [r x c] -> [r x 1].
Var logsumexp_rows(Var a);

/// Per-row standardisation followed by gain * x + bias.
Var layernorm(Var x, Var gain, Var bias, double eps);

/// Scales each row to unit L2 norm; zero rows map to zero rows.
Var row_normalize(Var a);

/// Inverted dropout. Identity when the tape is in eval mode or rate == 0.
Var dropout(Var a, double rate, std::uint64_t layer_id);

namespace kernels {

// Raw tensor routines shared by ops and tests.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false,
              Summation summation = Summation::ordered);
Tensor transpose(const Tensor& a);
double gelu(double x);
double gelu_derivative(double x);
double sigmoid(double x);
double canonical_sum(std::span<double> terms);

} // namespace kernels

} // namespace stgr::tensor
