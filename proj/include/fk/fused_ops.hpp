#pragma once

// Fused row-wise training kernels with analytic backward passes.
//
// Every entry point validates contiguity first, then processes rows
// independently. Parameter gradients (gamma/beta) are formed from per-row
// partials combined by a fixed-order pairwise tree, so results are bitwise
// reproducible regardless of the worker count.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fk/context.hpp"
#include "fk/tensor.hpp"

namespace fk {

inline constexpr double kDefaultNormEps = 1e-6;

// Per-row cached statistics. x_hat / x_tilde are recomputed from x and these.
template <Real T>
struct NormResiduals {
  std::vector<T> inv_rms;  // 1/RMS(x) or 1/RMS(x - mean)
  std::vector<T> mean;     // LayerNorm only; empty for RMSNorm
};

template <Real T>
struct NormForward {
  Matrix<T> y;
  NormResiduals<T> res;
};

template <Real T>
struct RmsNormGrads {
  Matrix<T> dx;
  std::vector<T> dgamma;
};

template <Real T>
struct LayerNormGrads {
  Matrix<T> dx;
  std::vector<T> dgamma;
  std::vector<T> dbeta;
};

template <Real T>
NormForward<T> rmsnorm_forward(const Matrix<T>& x, std::span<const T> gamma, T eps = T(kDefaultNormEps),
                               const OpContext& ctx = {});

// `x` is the forward input; x_hat is rebuilt from it and res.inv_rms.
template <Real T>
RmsNormGrads<T> rmsnorm_backward(const Matrix<T>& dy, const Matrix<T>& x, const NormResiduals<T>& res,
                                 std::span<const T> gamma, const OpContext& ctx = {});

template <Real T>
NormForward<T> layernorm_forward(const Matrix<T>& x, std::span<const T> gamma, std::span<const T> beta,
                                 T eps = T(kDefaultNormEps), const OpContext& ctx = {});

template <Real T>
LayerNormGrads<T> layernorm_backward(const Matrix<T>& dy, const Matrix<T>& x, const NormResiduals<T>& res,
                                     std::span<const T> gamma, const OpContext& ctx = {});

// Rotation parameters for the half-split (first half / second half) layout.
// A row may hold several heads back to back: cols must be a multiple of head_dim.
struct RotationSpec {
  std::size_t head_dim = 0;
  std::vector<double> thetas;           // head_dim / 2 frequencies
  std::vector<std::int64_t> positions;  // one per row

  void validate(std::size_t rows, std::size_t cols) const;
};

// theta_i = base^(-2i/d), i = 0 .. d/2-1. Convenience for the common schedule.
std::vector<double> default_rope_thetas(std::size_t head_dim, double base = 10000.0);

template <Real T>
struct RopePair {
  Matrix<T> q;
  Matrix<T> k;
};

template <Real T>
RopePair<T> rope_forward(const Matrix<T>& q, const Matrix<T>& k, const RotationSpec& spec,
                         const OpContext& ctx = {});

// Applies the transposed rotation (angle -m*theta) to both gradients.
template <Real T>
RopePair<T> rope_backward(const Matrix<T>& dq_rot, const Matrix<T>& dk_rot, const RotationSpec& spec,
                          const OpContext& ctx = {});

template <Real T>
struct GluGrads {
  Matrix<T> dx1;
  Matrix<T> dx2;
};

// y = SiLU(x1) * x2. x1 = W x + b and x2 = V x + c are produced by the caller.
template <Real T>
Matrix<T> swiglu_forward(const Matrix<T>& x1, const Matrix<T>& x2, const OpContext& ctx = {});

template <Real T>
GluGrads<T> swiglu_backward(const Matrix<T>& dy, const Matrix<T>& x1, const Matrix<T>& x2,
                            const OpContext& ctx = {});

// y = GELU_tanh(x1) * x2.
template <Real T>
Matrix<T> geglu_forward(const Matrix<T>& x1, const Matrix<T>& x2, const OpContext& ctx = {});

template <Real T>
GluGrads<T> geglu_backward(const Matrix<T>& dy, const Matrix<T>& x1, const Matrix<T>& x2,
                           const OpContext& ctx = {});

enum class Reduction { Mean, Sum };

struct CEResult {
  double loss = 0.0;
  // Always true on return: the logits buffer now holds dL/dlogits.
  bool grad_in_logits = false;
};

// Loss and gradient in one call. The logits are overwritten with the gradient;
// no second rows x V buffer is created.
template <Real T>
CEResult cross_entropy(Matrix<T>& logits, std::span<const std::int64_t> targets, Reduction reduction,
                       const OpContext& ctx = {});

// Scalar activations shared with tests and the harness.
template <Real T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

template <Real T>
T gelu_tanh(T z);

template <Real T>
T gelu_tanh_grad(T z);

}  // namespace fk
