#pragma once

// Linear projection + cross entropy computed chunk by chunk over rows.
//
// Only one (chunk_rows x V) logits buffer is ever live. Each chunk's logits
// are turned into their gradient in place by cross_entropy(), which then feeds
// the hidden-state gradient for that chunk and the accumulated weight gradient.

#include <cstdint>
#include <span>

#include "fk/context.hpp"
#include "fk/fused_ops.hpp"
#include "fk/tensor.hpp"

namespace fk {

struct ChunkPlan {
  std::size_t chunk_rows = 1;  // power of two
  std::size_t num_chunks = 1;
  std::size_t total_rows = 1;

  // Mean-reduction factor for the chunk starting at `chunk_index`: actual rows / total rows.
  double scale_ratio(std::size_t chunk_index) const;
  std::size_t rows_in_chunk(std::size_t chunk_index) const;

  // Plan with an explicit chunk size (must be a power of two).
  static ChunkPlan with_chunk_rows(std::size_t total_rows, std::size_t chunk_rows);
};

// chunk_rows = 2^ceil(log2(ceil(BT / ceil(V / H)))).
ChunkPlan plan_chunks(std::size_t total_rows, std::size_t vocab, std::size_t hidden);

std::size_t next_power_of_two(std::size_t n);

template <Real T>
struct ProjectionHead {
  Matrix<T> weight;      // H x V
  Matrix<T> grad_accum;  // H x V, zeroed at the start of every forward-backward

  explicit ProjectionHead(Matrix<T> w) : weight(std::move(w)), grad_accum(weight.rows(), weight.cols()) {}
};

template <Real T>
struct LinearCrossEntropyResult {
  double loss = 0.0;
  Matrix<T> dhidden;  // BT x H
};

// dweight is left in head.grad_accum. Hidden rows must already be aligned
// with their next-token targets.
template <Real T>
LinearCrossEntropyResult<T> flce_forward_backward(const Matrix<T>& hidden, ProjectionHead<T>& head,
                                                  std::span<const std::int64_t> targets, Reduction reduction,
                                                  const ChunkPlan& plan, const OpContext& ctx = {});

// Same arithmetic with a single chunk covering every row; materializes BT x V logits.
template <Real T>
LinearCrossEntropyResult<T> linear_cross_entropy_unchunked(const Matrix<T>& hidden, ProjectionHead<T>& head,
                                                           std::span<const std::int64_t> targets,
                                                           Reduction reduction, const OpContext& ctx = {});

// Dense products used by the chunked head and the convergence model. Backed by Eigen.
template <Real T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);  // c (+)= a*b
template <Real T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);  // c = a * b^T, b is n x k
template <Real T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);  // c += a^T * b, a is k x m

}  // namespace fk
