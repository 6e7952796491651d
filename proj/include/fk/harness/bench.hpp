#pragma once

// Speed and memory benchmark sweep. Every (op, shape, variant) cell is timed
// `repeats` times after `warmup` untimed runs and summarized by its median and
// [0.2, 0.8] quantiles. Peak bytes come from the allocation ledger.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fk/tensor.hpp"

namespace fk::harness {

inline const std::vector<std::string> kBenchKernels = {"rmsnorm", "layernorm", "rope", "swiglu", "geglu", "ce"};

struct BenchOptions {
  std::vector<std::string> ops = kBenchKernels;
  // Hidden sizes (rmsnorm, layernorm, rope) and sequence lengths (swiglu, geglu).
  std::vector<std::size_t> shapes = {4096, 8192, 12288, 16384};
  std::vector<std::size_t> vocab = {40960, 81920, 122880, 163840};
  std::vector<std::string> variants = {"fused", "reference"};
  std::size_t repeats = 10;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
  DType dtype = DType::f32();
  bool parallel = false;
  std::uint64_t budget_bytes = 16'000'000'000ULL;
  // Desk-scale row counts.
  std::size_t rows = 128;      // rmsnorm, layernorm, rope
  std::size_t ce_rows = 512;   // ce, flce
  std::size_t glu_cols = 256;  // swiglu/geglu width
  std::size_t rope_head_dim = 128;
  std::size_t flce_hidden = 64;
};

struct BenchRecord {
  std::string op;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string variant;
  std::string dtype;
  std::string mode;  // serial | parallel
  std::size_t repeats = 0;
  double median_ns = 0.0;
  double q20_ns = 0.0;
  double q80_ns = 0.0;
  std::uint64_t peak_bytes = 0;
  std::uint64_t logits_peak_bytes = 0;
};

inline constexpr const char* kBenchCsvHeader =
    "op,rows,cols,variant,dtype,mode,repeats,median_ns,q20_ns,q80_ns,peak_bytes,logits_peak_bytes";

struct Quantiles {
  double q20 = 0.0;
  double median = 0.0;
  double q80 = 0.0;
};

// Linear interpolation between order statistics.
Quantiles summarize(std::vector<double> samples);

struct BenchCell {
  std::string op;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string variant;
};

// Bytes of every buffer a cell creates (inputs, outputs, intermediates).
std::uint64_t declared_bytes(const BenchCell& cell, const BenchOptions& opts);

// The full sweep in the order it will run.
std::vector<BenchCell> plan_cells(const BenchOptions& opts);

// Throws ShapeTooLarge before running anything if a cell exceeds the budget.
void preflight(const std::vector<BenchCell>& cells, const BenchOptions& opts);

BenchRecord run_cell(const BenchCell& cell, const BenchOptions& opts);
std::vector<BenchRecord> run_bench(const BenchOptions& opts, std::ostream* progress = nullptr);

void write_bench_csv(std::ostream& os, const std::vector<BenchRecord>& records);
std::vector<BenchRecord> read_bench_csv(std::istream& is);

}  // namespace fk::harness
