#pragma once

// Two copies of a tiny decoder block trained side by side from the same
// initialization on the same token stream. Path A normally runs the fused
// kernels, path B the double-precision reference operators; any kernel bug
// shows up as diverging losses, weights or logits.
//
//   embedding -> RMSNorm -> GLU MLP (+ residual) -> rotary stub -> LayerNorm -> linear CE head
//
// The rotary stub rotates the MLP output (as q) and the embedding (as k) and
// sums them; it stands in for attention while routing gradients through RoPE.

#include <cstdint>
#include <string>
#include <vector>

#include "fk/reference.hpp"

namespace fk::harness {

enum class PathKind { Fused, Reference };
enum class MlpActivation { SwiGLU, GeGLU };

struct ConvergeOptions {
  std::size_t steps = 100;
  std::uint64_t seed = 0;
  double lr = 0.2;
  std::size_t vocab = 64;
  std::size_t hidden = 32;
  std::size_t mlp = 64;
  std::size_t heads = 2;
  std::size_t batch = 2;
  std::size_t seq = 16;
  DType dtype = DType::f32();  // precision of a fused path; reference paths are always F64
  PathKind path_a = PathKind::Fused;
  PathKind path_b = PathKind::Reference;
  MlpActivation activation = MlpActivation::SwiGLU;
  // Replays a non-contiguous upstream gradient arriving at the RoPE backward.
  bool strided_rope_grad = false;
  bool enforce_contiguity = true;
  double atol = 1e-5;
  double rtol = 1e-4;
};

struct ConvergenceReport {
  std::vector<double> step_losses_a;
  std::vector<double> step_losses_b;
  double loss_maxdiff = 0.0;
  double final_weight_maxdiff = 0.0;
  double final_logits_maxdiff = 0.0;
  bool passed = false;
};

// Throws NonFiniteLoss if either path produces a NaN/Inf loss.
ConvergenceReport run_convergence(const ConvergeOptions& opts);

}  // namespace fk::harness
