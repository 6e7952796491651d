// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <algorithm>
#include <functional>
#include <limits>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "fk/error.hpp"
#include "fk/flce.hpp"
#include "fk/fused_ops.hpp"
#include "fk/harness/bench.hpp"
#include "fk/harness/converge.hpp"
#include "fk/harness/correctness.hpp"
#include "fk/ledger.hpp"
#include "fk/reference.hpp"
#include "harness/inputs.hpp"

using namespace fk;
using namespace fk::harness;
using fk::harness::detail::random_targets;
using fk::harness::detail::uniform_matrix;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------- 1
Outcome exactness() {
  const auto t0 = Clock::now();
  CorrectnessOptions o;
  o.dtypes = {DType::f64()};
  o.gradient_instances = 0;
  const auto r = run_correctness(o);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  for (const auto& row : r.rows) worst = std::max(worst, row.worst_ratio);
  const bool ok = r.all_passed() && !r.rows.empty() && secs < 120.0;
  return {ok, fmt("%zu F64 forward/backward checks, %zu failed, worst tolerance ratio %.3g, %.1fs", r.rows.size(),
                  r.failures(), worst, secs)};
}

// ---------------------------------------------------------------- 2
Outcome gradients() {
  CorrectnessOptions o;
  o.forward_checks = false;
  o.gradient_instances = 100;
  const auto r = run_correctness(o);
  std::map<std::string, std::size_t> per_op;
  std::size_t failed = 0;
  double worst = 0.0;
  for (const auto& row : r.rows) {
    if (row.check != "fd") continue;
    ++per_op[row.op];
    if (!row.passed) ++failed;
    worst = std::max(worst, row.worst_ratio);
  }
  std::size_t fewest = per_op.empty() ? 0 : SIZE_MAX;
  for (const auto& [op, n] : per_op) fewest = std::min(fewest, n);
  const bool ok = failed == 0 && per_op.size() == o.ops.size() && fewest >= 100;
  return {ok, fmt("%zu ops, >= %zu finite-difference instances each, %zu failed, worst ratio %.3g", per_op.size(),
                  fewest, failed, worst)};
}

// ---------------------------------------------------------------- 3
Outcome chunk_invariance() {
  const std::size_t h = 16, v = 50;
  std::size_t compared = 0;
  double worst = 0.0;
  bool bitwise = true;
  std::mt19937_64 rng(2024);
  for (const std::size_t bt : {1, 17, 64, 100, 128}) {
    const auto hidden = uniform_matrix(rng, bt, h);
    const auto w = uniform_matrix(rng, h, v);
    const auto t = random_targets(rng, bt, v);
    for (const auto red : {Reduction::Mean, Reduction::Sum}) {
      ProjectionHead<double> base_head(w);
      const auto base = linear_cross_entropy_unchunked<double>(hidden, base_head, t, red);
      // next_power_of_two(bt) is the >= BT case; larger overrides are invalid plans.
      for (const std::size_t chunk : {std::size_t{1}, std::size_t{2}, std::size_t{8}, std::size_t{64},
                                      next_power_of_two(bt)}) {
        if (chunk > next_power_of_two(bt)) continue;
        ProjectionHead<double> head(w);
        const auto plan = ChunkPlan::with_chunk_rows(bt, chunk);
        const auto r = flce_forward_backward<double>(hidden, head, t, red, plan);
        double d = std::abs(r.loss - base.loss);
        for (std::size_t i = 0; i < r.dhidden.size(); ++i)
          d = std::max(d, std::abs(r.dhidden.data()[i] - base.dhidden.data()[i]));
        for (std::size_t i = 0; i < head.grad_accum.size(); ++i)
          d = std::max(d, std::abs(head.grad_accum.data()[i] - base_head.grad_accum.data()[i]));
        worst = std::max(worst, d);
        ++compared;
        if (plan.num_chunks == 1) {
          bitwise = bitwise && r.loss == base.loss &&
                    std::equal(r.dhidden.data(), r.dhidden.data() + r.dhidden.size(), base.dhidden.data()) &&
                    std::equal(head.grad_accum.data(), head.grad_accum.data() + head.grad_accum.size(),
                               base_head.grad_accum.data());
        }
      }
    }
  }
  return {worst <= 1e-6 && bitwise,
          fmt("%zu chunked runs vs unchunked, max |diff| %.3g, single-chunk bitwise %s", compared, worst,
              bitwise ? "yes" : "no")};
}

// ---------------------------------------------------------------- 4
Outcome memory_arithmetic() {
  const std::uint64_t large_head = logits_bytes(8, 4096, 256000, 2);
  const double gb = std::round(static_cast<double>(large_head) / 1e8) / 10.0;
  bool ok = large_head == 16'777'216'000ULL && gb == 16.8;

  // Full-size plan (BT 4096, V 40960, H 512 -> 64-row chunks) executed with a
  // narrow hidden width; the logits scratch depends only on chunk rows and V.
  const std::size_t bt = 4096, v = 40960;
  const auto plan = plan_chunks(bt, v, 512);
  std::mt19937_64 rng(7);
  const auto hidden = uniform_matrix(rng, bt, 4).cast<float>();
  ProjectionHead<float> head(uniform_matrix(rng, 4, v).cast<float>());
  const auto t = random_targets(rng, bt, v);
  AllocationLedger ledger;
  flce_forward_backward<float>(hidden, head, t, Reduction::Mean, plan, OpContext{&ledger});
  const std::uint64_t fused_peak = ledger.peak_bytes(tags::kLogits);
  const std::uint64_t ref_bytes = logits_bytes(1, bt, v, 4);
  ok = ok && plan.chunk_rows == 64 && fused_peak == 64 * v * 4 && ref_bytes == fused_peak * plan.num_chunks;

  // Measured reference ledger on an irregular size, every chunk size.
  const std::size_t sbt = 200, sv = 96, sh = 8;
  const auto shidden = uniform_matrix(rng, sbt, sh);
  const auto sw = uniform_matrix(rng, sh, sv);
  const auto st = random_targets(rng, sbt, sv);
  AllocationLedger ref_ledger;
  ref::linear_cross_entropy(shidden, sw, st, Reduction::Mean, &ref_ledger);
  const std::uint64_t ref_peak = ref_ledger.peak_bytes(tags::kLogits);
  ok = ok && ref_peak == logits_bytes(1, sbt, sv, 8);
  for (const std::size_t chunk : {1, 2, 8, 64, 256}) {
    AllocationLedger l;
    ProjectionHead<double> sh_head(sw);
    const auto p = ChunkPlan::with_chunk_rows(sbt, chunk);
    flce_forward_backward<double>(shidden, sh_head, st, Reduction::Mean, p, OpContext{&l});
    const std::uint64_t peak = l.peak_bytes(tags::kLogits);
    const std::uint64_t live_rows = std::min(chunk, sbt);
    // ref / fused = BT / chunk, which is num_chunks except for a short final chunk.
    ok = ok && peak == live_rows * sv * 8 && ref_peak * live_rows == peak * sbt &&
         p.num_chunks == (sbt + chunk - 1) / chunk;
  }
  return {ok, fmt("logits_bytes(8,4096,256000,2)=%llu (%.1f GB); FLCE BT4096 V40960 chunk %zu: scratch %llu vs "
                  "reference %llu bytes (ratio %llu = %zu chunks)",
                  static_cast<unsigned long long>(large_head), gb, plan.chunk_rows,
                  static_cast<unsigned long long>(fused_peak), static_cast<unsigned long long>(ref_bytes),
                  static_cast<unsigned long long>(fused_peak ? ref_bytes / fused_peak : 0), plan.num_chunks)};
}

// ---------------------------------------------------------------- 5
Outcome ce_in_place() {
  std::mt19937_64 rng(5);
  std::size_t logits_sized = 0;
  double worst_row_sum = 0.0;
  for (const std::size_t v : {2, 7, 1000, 32768}) {
    for (const auto red : {Reduction::Mean, Reduction::Sum}) {
      auto logits = uniform_matrix(rng, 9, v, -5.0, 5.0);
      const auto t = random_targets(rng, 9, v);
      AllocationLedger ledger;
      cross_entropy<double>(logits, t, red, OpContext{&ledger});
      for (const auto& e : ledger.events())
        if (e.kind == AllocKind::Alloc && e.bytes >= logits.bytes()) ++logits_sized;
      for (std::size_t i = 0; i < logits.rows(); ++i) {
        double s = 0.0;
        for (const double g : logits.row(i)) s += g;
        worst_row_sum = std::max(worst_row_sum, std::abs(s));
      }
      auto f32 = uniform_matrix(rng, 9, v, -5.0, 5.0).cast<float>();
      AllocationLedger ledger32;
      cross_entropy<float>(f32, t, red, OpContext{&ledger32});
      for (const auto& e : ledger32.events())
        if (e.kind == AllocKind::Alloc && e.bytes >= f32.bytes()) ++logits_sized;
    }
  }
  double worst_uniform = 0.0;
  for (const std::size_t v : {1, 2, 10, 1000, 163840}) {
    Matrix<double> logits(3, v);
    for (std::size_t i = 0; i < logits.size(); ++i) logits.data()[i] = 0.25;
    const auto r = cross_entropy<double>(logits, std::vector<std::int64_t>{0, 0, static_cast<std::int64_t>(v - 1)},
                                         Reduction::Mean);
    worst_uniform = std::max(worst_uniform, std::abs(r.loss - std::log(static_cast<double>(v))));
  }
  const bool ok = logits_sized == 0 && worst_row_sum <= 1e-6 && worst_uniform <= 1e-7;
  return {ok, fmt("%zu logits-sized allocations, max |row grad sum| %.3g, uniform loss vs ln V max diff %.3g",
                  logits_sized, worst_row_sum, worst_uniform)};
}

// ---------------------------------------------------------------- 6
// Independent integer evaluation of 2^ceil(log2(ceil(BT / ceil(V / H)))).
std::size_t expected_chunk(std::size_t bt, std::size_t v, std::size_t h) {
  const std::size_t inc = (v + h - 1) / h;
  const std::size_t q = (bt + inc - 1) / inc;
  std::size_t p = 1;
  while (p < q) p *= 2;
  return p;
}

Outcome chunk_formula() {
  struct Triple {
    std::size_t bt, v, h;
  };
  const std::vector<Triple> table = {
      {4096, 131072, 4096}, {4096, 40960, 512},  {4096, 256000, 4096}, {8192, 128256, 4096},
      {2048, 32000, 4096},  {1, 50257, 768},     {1000, 1000, 1000},   {1000, 999, 1000},
      {12345, 6789, 321},   {65536, 151936, 3584}, {3, 5, 7},          {129, 64, 2},
      {16384, 256000, 2304}, {777, 1, 1}};
  std::size_t agree = 0;
  std::string first_bad;
  for (const auto& t : table) {
    const auto plan = plan_chunks(t.bt, t.v, t.h);
    if (plan.chunk_rows == expected_chunk(t.bt, t.v, t.h)) {
      ++agree;
    } else if (first_bad.empty()) {
      first_bad = fmt(" first mismatch (%zu,%zu,%zu) -> %zu", t.bt, t.v, t.h, plan.chunk_rows);
    }
  }
  const bool anchor = plan_chunks(4096, 131072, 4096).chunk_rows == 128;
  return {agree == table.size() && anchor && table.size() >= 10,
          fmt("%zu/%zu triples agree, (4096,131072,4096) -> %zu%s", agree, table.size(),
              plan_chunks(4096, 131072, 4096).chunk_rows, first_bad.c_str())};
}

// ---------------------------------------------------------------- 7
Outcome convergence() {
  const auto t0 = Clock::now();
  ConvergeOptions o;  // 100 steps, seed 0, F32
  const auto r = run_convergence(o);
  const double secs = seconds_since(t0);
  return {r.passed && secs < 300.0,
          fmt("loss %.4f -> %.4f; max diff loss %.3g, weights %.3g, logits %.3g; %.1fs", r.step_losses_a.front(),
              r.step_losses_a.back(), r.loss_maxdiff, r.final_weight_maxdiff, r.final_logits_maxdiff, secs)};
}

// ---------------------------------------------------------------- 8
Outcome guards() {
  ConvergeOptions o;
  o.steps = 3;
  o.strided_rope_grad = true;
  std::string raised = "nothing";
  try {
    run_convergence(o);
  } catch (const Error& e) {
    raised = to_string(e.code());
  }
  const bool strided_ok = raised == to_string(ErrorCode::NonContiguousInput);
  const auto width = check_index_width(46341, 46341);
  const std::uint64_t last = flat_offset(46340, 46340, 46341);
  const bool wide_ok = width == IndexWidth::Wide64 && last == 2'147'488'280ULL &&
                       last > static_cast<std::uint64_t>(std::numeric_limits<std::int32_t>::max()) &&
                       check_index_width(46340, 46340) == IndexWidth::Narrow32;
  return {strided_ok && wide_ok, fmt("strided RoPE gradient raised %s; 46341x46341 -> %s, last offset %llu",
                                     raised.c_str(), width == IndexWidth::Wide64 ? "Wide64" : "Narrow32",
                                     static_cast<unsigned long long>(last))};
}

// ---------------------------------------------------------------- 9
Outcome bench_protocol() {
  const auto t0 = Clock::now();
  BenchOptions o;
  o.repeats = 10;
  o.warmup = 1;
  // Desk-scale rows; hidden sizes, sequence lengths and vocabularies stay at full size.
  o.rows = 32;
  o.ce_rows = 64;
  o.glu_cols = 64;
  preflight(plan_cells(o), o);
  const auto records = run_bench(o);
  std::map<std::string, std::size_t> per_op;
  bool ok = true;
  for (const auto& r : records) {
    ++per_op[r.op];
    ok = ok && r.repeats == 10 && r.q20_ns <= r.median_ns && r.median_ns <= r.q80_ns && r.median_ns > 0 &&
         r.peak_bytes <= o.budget_bytes;
  }
  for (const auto& op : kBenchKernels) ok = ok && per_op[op] == 2 * 4;
  std::ostringstream csv;
  write_bench_csv(csv, records);
  ok = ok && csv.str().rfind(kBenchCsvHeader, 0) == 0;
  return {ok, fmt("%zu records over %zu kernels x 4 shapes x {fused, reference}, repeats 10, %.0fs", records.size(),
                  per_op.size(), seconds_since(t0))};
}

}  // namespace

int main() {
  criterion("exactness suite (F64 vs oracle)", exactness);
  criterion("gradient suite (finite differences)", gradients);
  criterion("FLCE chunk invariance", chunk_invariance);
  criterion("memory arithmetic", memory_arithmetic);
  criterion("CE in-place contract", ce_in_place);
  criterion("chunk formula", chunk_formula);
  criterion("convergence", convergence);
  criterion("guard regressions", guards);
  criterion("benchmark protocol", bench_protocol);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
