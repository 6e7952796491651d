#pragma once

// Unfused double-precision reference implementations.
//
// Each operator is written as the plain textbook composition: intermediates
// are materialized, nothing is cached between forward and backward, inputs are
// never mutated, and backward passes follow the step-by-step chain rule rather
// than the closed forms used by the fused kernels. This is the ground truth the
// fused kernels are checked against.

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "fk/fused_ops.hpp"
#include "fk/ledger.hpp"
#include "fk/tensor.hpp"

namespace fk {

enum class OpKind { RMSNorm, LayerNorm, RoPE, SwiGLU, GeGLU, CrossEntropy, LinearCrossEntropy };

std::string_view to_string(OpKind kind);
OpKind parse_op_kind(std::string_view name);

// |a - b| <= atol + rtol * |b|, with b the reference side.
struct Tolerance {
  double atol;
  double rtol;

  Tolerance(double a, double r);

  static Tolerance strict() { return {1e-7, 1e-5}; }
  static Tolerance relaxed() { return {1e-3, 1e-2}; }
  static Tolerance gradient() { return {1e-6, 1e-4}; }
};

struct DiffStats {
  double max_abs = 0.0;
  double max_rel = 0.0;  // |a-b| / |b| over entries with b != 0
  // Smallest t >= 0 such that the comparison passes with (t*atol, t*rtol); <= 1 means pass.
  double worst_ratio = 0.0;
};

DiffStats compare(std::span<const double> a, std::span<const double> b, const Tolerance& tol);
bool allclose(std::span<const double> a, std::span<const double> b, const Tolerance& tol);
bool allclose(const Matrix<double>& a, const Matrix<double>& b, const Tolerance& tol);

inline constexpr double kDefaultFdStep = 1e-5;

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for each coordinate.
std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> at, double h = kDefaultFdStep);

namespace ref {

// Functions taking a ledger record every buffer they materialize: intermediates
// as scoped Alloc/Free pairs, returned buffers as Alloc only.

Matrix<double> rmsnorm(const Matrix<double>& x, std::span<const double> gamma, double eps,
                       AllocationLedger* ledger = nullptr);
RmsNormGrads<double> rmsnorm_backward(const Matrix<double>& dy, const Matrix<double>& x,
                                      std::span<const double> gamma, double eps,
                                      AllocationLedger* ledger = nullptr);

Matrix<double> layernorm(const Matrix<double>& x, std::span<const double> gamma, std::span<const double> beta,
                         double eps, AllocationLedger* ledger = nullptr);
LayerNormGrads<double> layernorm_backward(const Matrix<double>& dy, const Matrix<double>& x,
                                          std::span<const double> gamma, double eps,
                                          AllocationLedger* ledger = nullptr);

// Builds the dense head_dim x head_dim rotation for each row and multiplies.
std::vector<double> rotation_matrix(std::size_t head_dim, std::span<const double> thetas, std::int64_t position);
RopePair<double> rope(const Matrix<double>& q, const Matrix<double>& k, const RotationSpec& spec,
                      AllocationLedger* ledger = nullptr);
RopePair<double> rope_backward(const Matrix<double>& dq, const Matrix<double>& dk, const RotationSpec& spec,
                               AllocationLedger* ledger = nullptr);

Matrix<double> swiglu(const Matrix<double>& x1, const Matrix<double>& x2, AllocationLedger* ledger = nullptr);
GluGrads<double> swiglu_backward(const Matrix<double>& dy, const Matrix<double>& x1, const Matrix<double>& x2,
                                 AllocationLedger* ledger = nullptr);

Matrix<double> geglu(const Matrix<double>& x1, const Matrix<double>& x2, AllocationLedger* ledger = nullptr);
GluGrads<double> geglu_backward(const Matrix<double>& dy, const Matrix<double>& x1, const Matrix<double>& x2,
                                AllocationLedger* ledger = nullptr);

struct CrossEntropyOut {
  double loss = 0.0;
  Matrix<double> grad;  // dL/dlogits, separate from the input
};

// Separate probability and gradient buffers; the input is left untouched.
CrossEntropyOut cross_entropy(const Matrix<double>& logits, std::span<const std::int64_t> targets,
                              Reduction reduction, AllocationLedger* ledger = nullptr);

struct LinearCrossEntropyOut {
  double loss = 0.0;
  Matrix<double> dhidden;
  Matrix<double> dweight;
};

// Materializes the full rows x V logits matrix.
LinearCrossEntropyOut linear_cross_entropy(const Matrix<double>& hidden, const Matrix<double>& weight,
                                           std::span<const std::int64_t> targets, Reduction reduction,
                                           AllocationLedger* ledger = nullptr);

// Plain triple loop, (m x k) * (k x n).
Matrix<double> matmul(const Matrix<double>& a, const Matrix<double>& b);
Matrix<double> matmul_transposed_b(const Matrix<double>& a, const Matrix<double>& b);  // a * b^T
Matrix<double> matmul_transposed_a(const Matrix<double>& a, const Matrix<double>& b);  // a^T * b

}  // namespace ref
}  // namespace fk
