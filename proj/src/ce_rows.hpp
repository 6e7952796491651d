#pragma once

// Row kernel shared by cross_entropy() and the chunked linear head.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fk/context.hpp"
#include "fk/tensor.hpp"

namespace fk::detail {

inline void check_targets(std::span<const std::int64_t> targets, std::size_t vocab) {
  for (std::size_t i = 0; i < targets.size(); ++i) {
    FK_CHECK(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < vocab, ErrorCode::TargetOutOfRange,
             "target " + std::to_string(targets[i]) + " at row " + std::to_string(i) + " outside [0, " +
                 std::to_string(vocab) + ")");
  }
}

// Overwrites each row of `logits` with (softmax - onehot) * grad_scale and
// returns the summed per-row loss -log(max(p_target, smallest normal)).
//
// The normalizer is accumulated online over fixed-size blocks: each block
// contributes its own max and exp-sum, and the running sum is rescaled
// whenever the max moves. Block width only affects speed.
template <Real T>
double ce_rows(T* logits, std::size_t rows, std::size_t vocab, std::span<const std::int64_t> targets, T grad_scale,
               unsigned threads) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  constexpr std::size_t kBlock = 4096;
  const T min_prob = std::numeric_limits<T>::min();
  std::vector<double> row_loss(rows);
  for_each_row_block(rows, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      T* x = logits + flat_offset(i, 0, vocab);
      T run_max = -std::numeric_limits<T>::infinity();
      T norm = 0;
      for (std::size_t s = 0; s < vocab; s += kBlock) {
        const auto len = static_cast<Eigen::Index>(std::min(kBlock, vocab - s));
        const Eigen::Map<const Arr> blk(x + s, len);
        const T bmax = blk.maxCoeff();
        if (bmax > run_max) {
          norm *= std::exp(run_max - bmax);
          run_max = bmax;
        }
        norm += (blk - run_max).exp().sum();
      }
      const std::size_t t = static_cast<std::size_t>(targets[i]);
      const T p_target = std::exp(x[t] - run_max) / norm;
      row_loss[i] = -static_cast<double>(std::log(std::max(p_target, min_prob)));
      Eigen::Map<Arr> row(x, static_cast<Eigen::Index>(vocab));
      row = (row - run_max).exp() * (grad_scale / norm);
      x[t] -= grad_scale;
    }
  });
  double loss = 0.0;
  for (double l : row_loss) loss += l;
  return loss;
}

}  // namespace fk::detail
