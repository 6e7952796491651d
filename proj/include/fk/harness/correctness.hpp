#pragma once

// Fused-vs-reference correctness sweep used by `fkbench correctness` and the
// acceptance suite.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fk/reference.hpp"

namespace fk::harness {

struct CorrectnessOptions {
  std::vector<OpKind> ops = {OpKind::RMSNorm,      OpKind::LayerNorm, OpKind::RoPE,
                             OpKind::SwiGLU,       OpKind::GeGLU,     OpKind::CrossEntropy,
                             OpKind::LinearCrossEntropy};
  std::vector<DType> dtypes = {DType::f32(), DType::f64()};
  std::uint64_t seed = 0;
  // Finite-difference instances per op, spread over the gradient sizes below.
  std::size_t gradient_instances = 100;
  std::vector<std::size_t> gradient_sizes = {3, 8, 17, 64};
  bool forward_checks = true;
  unsigned threads = 1;
};

struct CheckRow {
  std::string op;
  std::string shape;
  std::string dtype;
  std::string check;  // forward, backward, fd
  double max_abs = 0.0;
  double max_rel = 0.0;
  double worst_ratio = 0.0;
  bool passed = false;
};

struct CorrectnessReport {
  std::vector<CheckRow> rows;

  bool all_passed() const;
  std::size_t failures() const;
  void write_csv(std::ostream& os) const;
};

CorrectnessReport run_correctness(const CorrectnessOptions& opts);

// Pieces of run_correctness, exposed for targeted tests.
std::vector<CheckRow> check_forward_backward(OpKind op, DType dtype, std::size_t rows, std::size_t cols,
                                             std::uint64_t seed, unsigned threads = 1);
CheckRow check_gradient_fd(OpKind op, std::size_t n, std::uint64_t seed);

}  // namespace fk::harness
