#include "fk/flce.hpp"

#include <Eigen/Core>
#include <bit>
#include <string>

#include "ce_rows.hpp"

namespace fk {

std::size_t next_power_of_two(std::size_t n) { return n <= 1 ? 1 : std::bit_ceil(n); }

ChunkPlan ChunkPlan::with_chunk_rows(std::size_t total_rows, std::size_t chunk_rows) {
  FK_CHECK(total_rows >= 1, ErrorCode::InvalidArgument, "total_rows must be >= 1");
  FK_CHECK(chunk_rows >= 1 && std::has_single_bit(chunk_rows), ErrorCode::InvalidArgument,
           "chunk_rows must be a power of two, got " + std::to_string(chunk_rows));
  FK_CHECK(chunk_rows <= next_power_of_two(total_rows), ErrorCode::InvalidArgument,
           "chunk_rows " + std::to_string(chunk_rows) + " exceeds next power of two of " +
               std::to_string(total_rows));
  return {chunk_rows, (total_rows + chunk_rows - 1) / chunk_rows, total_rows};
}

std::size_t ChunkPlan::rows_in_chunk(std::size_t chunk_index) const {
  const std::size_t begin = chunk_index * chunk_rows;
  return std::min(chunk_rows, total_rows - begin);
}

double ChunkPlan::scale_ratio(std::size_t chunk_index) const {
  return static_cast<double>(rows_in_chunk(chunk_index)) / static_cast<double>(total_rows);
}

ChunkPlan plan_chunks(std::size_t total_rows, std::size_t vocab, std::size_t hidden) {
  FK_CHECK(total_rows >= 1 && vocab >= 1 && hidden >= 1, ErrorCode::InvalidArgument,
           "plan_chunks needs positive counts");
  const std::size_t vocab_per_hidden = (vocab + hidden - 1) / hidden;
  const std::size_t rows_per = (total_rows + vocab_per_hidden - 1) / vocab_per_hidden;
  return ChunkPlan::with_chunk_rows(total_rows, next_power_of_two(rows_per));
}

// ---------------------------------------------------------------- gemm

namespace {
template <Real T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Real T>
using MapC = Eigen::Map<const RowMat<T>>;
template <Real T>
using Map = Eigen::Map<RowMat<T>>;
}  // namespace

template <Real T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto ni = static_cast<Eigen::Index>(n);
  Map<T> cm(c, mi, ni);
  if (accumulate) {
    cm.noalias() += MapC<T>(a, mi, ki) * MapC<T>(b, ki, ni);
  } else {
    cm.noalias() = MapC<T>(a, mi, ki) * MapC<T>(b, ki, ni);
  }
}

template <Real T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto ni = static_cast<Eigen::Index>(n);
  Map<T>(c, mi, ni).noalias() = MapC<T>(a, mi, ki) * MapC<T>(b, ni, ki).transpose();
}

template <Real T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto ni = static_cast<Eigen::Index>(n);
  Map<T>(c, mi, ni).noalias() += MapC<T>(a, ki, mi).transpose() * MapC<T>(b, ki, ni);
}

// ---------------------------------------------------------------- FLCE

namespace {

template <Real T>
void check_inputs(const Matrix<T>& hidden, const ProjectionHead<T>& head, std::span<const std::int64_t> targets,
                  const OpContext& ctx) {
  if (ctx.enforce_contiguity) {
    assert_contiguous(hidden, "flce hidden");
    assert_contiguous(head.weight, "flce weight");
  }
  FK_CHECK(hidden.cols() == head.weight.rows(), ErrorCode::ShapeMismatch,
           "hidden has " + std::to_string(hidden.cols()) + " cols, weight has " +
               std::to_string(head.weight.rows()) + " rows");
  FK_CHECK(head.grad_accum.rows() == head.weight.rows() && head.grad_accum.cols() == head.weight.cols(),
           ErrorCode::ShapeMismatch, "grad_accum shape differs from weight");
  FK_CHECK(targets.size() == hidden.rows(), ErrorCode::ShapeMismatch, "need one target per hidden row");
  detail::check_targets(targets, head.weight.cols());
}

}  // namespace

template <Real T>
LinearCrossEntropyResult<T> flce_forward_backward(const Matrix<T>& hidden, ProjectionHead<T>& head,
                                                  std::span<const std::int64_t> targets, Reduction reduction,
                                                  const ChunkPlan& plan, const OpContext& ctx) {
  check_inputs(hidden, head, targets, ctx);
  const std::size_t bt = hidden.rows();
  const std::size_t h = hidden.cols();
  const std::size_t vocab = head.weight.cols();
  FK_CHECK(plan.total_rows == bt, ErrorCode::ShapeMismatch,
           "plan covers " + std::to_string(plan.total_rows) + " rows, hidden has " + std::to_string(bt));

  head.grad_accum.fill(T(0));
  LinearCrossEntropyResult<T> out{0.0, Matrix<T>(bt, h)};
  if (ctx.ledger) ctx.ledger->record(tags::kGrad, out.dhidden.bytes(), AllocKind::Alloc);

  // One scratch buffer reused by every chunk; a chunk never holds more than bt rows.
  const std::size_t cap = std::min(plan.chunk_rows, bt);
  std::vector<T> scratch(cap * vocab);
  LedgerScope scratch_scope(ctx.ledger, tags::kLogits, scratch.size() * sizeof(T));

  for (std::size_t c = 0; c < plan.num_chunks; ++c) {
    const std::size_t r0 = c * plan.chunk_rows;
    const std::size_t rows = plan.rows_in_chunk(c);
    const T* h_chunk = hidden.data() + flat_offset(r0, 0, h);

    gemm(h_chunk, head.weight.data(), scratch.data(), rows, h, vocab, false);

    const auto chunk_targets = targets.subspan(r0, rows);
    if (reduction == Reduction::Mean) {
      const double chunk_mean =
          detail::ce_rows(scratch.data(), rows, vocab, chunk_targets, T(1) / static_cast<T>(rows), ctx.threads) /
          static_cast<double>(rows);
      // Rescale from a per-chunk mean to a mean over all bt rows.
      const double ratio = plan.scale_ratio(c);
      out.loss += chunk_mean * ratio;
      const T r = static_cast<T>(ratio);
      for (std::size_t k = 0; k < rows * vocab; ++k) scratch[k] *= r;
    } else {
      out.loss += detail::ce_rows(scratch.data(), rows, vocab, chunk_targets, T(1), ctx.threads);
    }

    gemm_nt(scratch.data(), head.weight.data(), out.dhidden.data() + flat_offset(r0, 0, h), rows, vocab, h);
    gemm_tn_acc(h_chunk, scratch.data(), head.grad_accum.data(), h, rows, vocab);
  }
  return out;
}

template <Real T>
LinearCrossEntropyResult<T> linear_cross_entropy_unchunked(const Matrix<T>& hidden, ProjectionHead<T>& head,
                                                           std::span<const std::int64_t> targets,
                                                           Reduction reduction, const OpContext& ctx) {
  check_inputs(hidden, head, targets, ctx);
  const std::size_t bt = hidden.rows();
  const std::size_t h = hidden.cols();
  const std::size_t vocab = head.weight.cols();

  head.grad_accum.fill(T(0));
  LinearCrossEntropyResult<T> out{0.0, Matrix<T>(bt, h)};
  if (ctx.ledger) ctx.ledger->record(tags::kGrad, out.dhidden.bytes(), AllocKind::Alloc);

  Matrix<T> logits(bt, vocab);
  LedgerScope logits_scope(ctx.ledger, tags::kLogits, logits.bytes());
  gemm(hidden.data(), head.weight.data(), logits.data(), bt, h, vocab, false);
  out.loss = cross_entropy(logits, targets, reduction, ctx).loss;
  gemm_nt(logits.data(), head.weight.data(), out.dhidden.data(), bt, vocab, h);
  gemm_tn_acc(hidden.data(), logits.data(), head.grad_accum.data(), h, bt, vocab);
  return out;
}

#define FK_INSTANTIATE(T)                                                                                      \
  template void gemm<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);                  \
  template void gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);                     \
  template void gemm_tn_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);                 \
  template LinearCrossEntropyResult<T> flce_forward_backward<T>(const Matrix<T>&, ProjectionHead<T>&,          \
                                                                std::span<const std::int64_t>, Reduction,      \
                                                                const ChunkPlan&, const OpContext&);           \
  template LinearCrossEntropyResult<T> linear_cross_entropy_unchunked<T>(                                      \
      const Matrix<T>&, ProjectionHead<T>&, std::span<const std::int64_t>, Reduction, const OpContext&);

FK_INSTANTIATE(float)
FK_INSTANTIATE(double)

#undef FK_INSTANTIATE

}  // namespace fk
