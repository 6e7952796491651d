#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

#include "fk/ledger.hpp"

namespace fk {

// Per-call execution settings shared by every operator.
struct OpContext {
  AllocationLedger* ledger = nullptr;
  // Row workers. 1 keeps everything on the calling thread.
  unsigned threads = 1;
  // Only the contiguity-incident replay turns this off.
  bool enforce_contiguity = true;
};

// Runs fn(begin, end) over disjoint row ranges. Rows never communicate, so the
// split does not affect results.
template <typename Fn>
void for_each_row_block(std::size_t rows, unsigned threads, Fn&& fn) {
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, rows);
  if (workers <= 1) {
    fn(std::size_t{0}, rows);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t per = (rows + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * per;
    const std::size_t e = std::min(rows, b + per);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(rows, per));
}

}  // namespace fk
