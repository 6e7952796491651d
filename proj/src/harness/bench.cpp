#include "fk/harness/bench.hpp"

#include <algorithm>
#include <chrono>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "fk/flce.hpp"
#include "fk/fused_ops.hpp"
#include "fk/reference.hpp"
#include "harness/inputs.hpp"

namespace fk::harness {

Quantiles summarize(std::vector<double> samples) {
  FK_CHECK(!samples.empty(), ErrorCode::InvalidArgument, "summarize needs at least one sample");
  std::sort(samples.begin(), samples.end());
  auto at = [&](double p) {
    const double pos = p * static_cast<double>(samples.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, samples.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return samples[lo] + (samples[hi] - samples[lo]) * frac;
  };
  return {at(0.2), at(0.5), at(0.8)};
}

namespace {

bool is_known_op(const std::string& op) {
  return op == "flce" || std::find(kBenchKernels.begin(), kBenchKernels.end(), op) != kBenchKernels.end();
}

std::size_t width_of(const BenchCell& cell, const BenchOptions& opts) {
  return cell.variant == "reference" ? 8 : opts.dtype.byte_width;
}

}  // namespace

// Rotary head width for a RoPE cell: the configured width, or the whole row when narrower.
static std::size_t rope_head_dim_for(std::size_t cols, const BenchOptions& opts) {
  return std::min(opts.rope_head_dim, cols);
}

std::vector<BenchCell> plan_cells(const BenchOptions& opts) {
  std::vector<BenchCell> cells;
  for (const auto& op : opts.ops) {
    FK_CHECK(is_known_op(op), ErrorCode::InvalidArgument, "unknown bench op '" + op + "'");
    for (const auto& variant : opts.variants) {
      FK_CHECK(variant == "fused" || variant == "reference", ErrorCode::InvalidArgument,
               "unknown variant '" + variant + "'");
    }
    const bool vocab_swept = op == "ce" || op == "flce";
    for (const std::size_t s : vocab_swept ? opts.vocab : opts.shapes) {
      for (const auto& variant : opts.variants) {
        BenchCell c{op, 0, s, variant};
        if (vocab_swept) {
          c.rows = opts.ce_rows;
        } else if (op == "swiglu" || op == "geglu") {
          c.rows = s;
          c.cols = opts.glu_cols;
        } else {
          c.rows = opts.rows;
        }
        if (op == "rope") {
          const std::size_t d = rope_head_dim_for(s, opts);
          FK_CHECK(d % 2 == 0 && s % d == 0, ErrorCode::InvalidArgument,
                   "rope width " + std::to_string(s) + " is not a multiple of an even head_dim " + std::to_string(d));
        }
        cells.push_back(c);
      }
    }
  }
  return cells;
}

// Upper bound on the ledger peak of one repetition, inputs included.
std::uint64_t declared_bytes(const BenchCell& cell, const BenchOptions& opts) {
  const std::uint64_t w = width_of(cell, opts);
  const std::uint64_t r = cell.rows;
  const std::uint64_t c = cell.cols;
  const bool ref = cell.variant == "reference";
  if (cell.op == "ce") {
    // Fused: the logits alone. Reference: logits, probabilities, gradient.
    return (ref ? 3 : 1) * logits_bytes(1, r, c, w);
  }
  if (cell.op == "flce") {
    const std::uint64_t h = opts.flce_hidden;
    const std::uint64_t chunk = std::min<std::uint64_t>(plan_chunks(r, c, h).chunk_rows, r);
    const std::uint64_t rv = ref ? 3 * logits_bytes(1, r, c, w) : logits_bytes(1, chunk, c, w);
    return rv + (2 * r * h + 2 * h * c) * w;
  }
  std::uint64_t mats = 0;
  if (cell.op == "rmsnorm" || cell.op == "layernorm") {
    mats = ref ? 8 : 6;
  } else if (cell.op == "rope") {
    mats = ref ? 9 : 8;
  } else {
    mats = ref ? 9 : 6;
  }
  const std::uint64_t d = rope_head_dim_for(cell.cols, opts);
  return (mats * r * c + 8 * c + 4 * r + (ref ? d * d : 0)) * w;
}

void preflight(const std::vector<BenchCell>& cells, const BenchOptions& opts) {
  for (const auto& cell : cells) {
    const std::uint64_t need = declared_bytes(cell, opts);
    FK_CHECK(need <= opts.budget_bytes, ErrorCode::ShapeTooLarge,
             cell.op + " " + cell.variant + " " + std::to_string(cell.rows) + "x" + std::to_string(cell.cols) +
                 " needs " + std::to_string(need) + " bytes, budget is " + std::to_string(opts.budget_bytes));
  }
}

namespace {

using Clock = std::chrono::steady_clock;

// Inputs for one cell, generated once and reused across repetitions.
struct CellData {
  Matrix<double> a, b, dy, dy2;
  std::vector<double> gamma, beta;
  std::vector<std::int64_t> targets;
  RotationSpec rot;
};

CellData make_data(const BenchCell& cell, const BenchOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  CellData d;
  const std::size_t r = cell.rows, c = cell.cols;
  if (cell.op == "ce") {
    d.a = detail::uniform_matrix(rng, r, c, -3.0, 3.0);
    d.targets = detail::random_targets(rng, r, c);
  } else if (cell.op == "flce") {
    d.a = detail::uniform_matrix(rng, r, opts.flce_hidden);
    d.b = detail::uniform_matrix(rng, opts.flce_hidden, c, -0.1, 0.1);
    d.targets = detail::random_targets(rng, r, c);
  } else {
    d.a = detail::uniform_matrix(rng, r, c);
    d.dy = detail::uniform_matrix(rng, r, c);
    d.gamma = detail::uniform(rng, c);
    d.beta = detail::uniform(rng, c);
    if (cell.op != "rmsnorm" && cell.op != "layernorm") d.b = detail::uniform_matrix(rng, r, c);
    if (cell.op == "rope") {
      d.dy2 = detail::uniform_matrix(rng, r, c);
      d.rot.head_dim = rope_head_dim_for(cell.cols, opts);
      d.rot.thetas = default_rope_thetas(d.rot.head_dim);
      for (std::size_t i = 0; i < r; ++i) d.rot.positions.push_back(static_cast<std::int64_t>(i));
    }
  }
  return d;
}

template <Real T>
struct TypedData {
  Matrix<T> a, b, dy, dy2;
  std::vector<T> gamma, beta;

  explicit TypedData(const CellData& d) {
    auto conv = [](const Matrix<double>& m) { return m.empty() ? Matrix<T>() : m.cast<T>(); };
    a = conv(d.a);
    b = conv(d.b);
    dy = conv(d.dy);
    dy2 = conv(d.dy2);
    gamma = cast_vector<T>(d.gamma);
    beta = cast_vector<T>(d.beta);
  }
};

template <Real T>
void note_input(AllocationLedger& ledger, std::string_view tag, const Matrix<T>& m) {
  if (!m.empty()) ledger.record(tag, m.bytes(), AllocKind::Alloc);
}

template <Real T>
void note_input(AllocationLedger& ledger, const std::vector<T>& v) {
  if (!v.empty()) ledger.record(tags::kInput, v.size() * sizeof(T), AllocKind::Alloc);
}

// One forward + backward of the fused kernel.
template <Real T>
void fused_rep(const BenchCell& cell, const CellData& d, const TypedData<T>& t, const OpContext& ctx) {
  AllocationLedger& ledger = *ctx.ledger;
  const std::string& op = cell.op;
  note_input(ledger, tags::kInput, t.a);
  note_input(ledger, tags::kInput, t.b);
  note_input(ledger, tags::kInput, t.dy);
  note_input(ledger, tags::kInput, t.dy2);
  if (op == "rmsnorm") {
    note_input(ledger, t.gamma);
    const auto f = rmsnorm_forward<T>(t.a, t.gamma, T(kDefaultNormEps), ctx);
    const auto g = rmsnorm_backward<T>(t.dy, t.a, f.res, t.gamma, ctx);
  } else if (op == "layernorm") {
    note_input(ledger, t.gamma);
    note_input(ledger, t.beta);
    const auto f = layernorm_forward<T>(t.a, t.gamma, t.beta, T(kDefaultNormEps), ctx);
    const auto g = layernorm_backward<T>(t.dy, t.a, f.res, t.gamma, ctx);
  } else if (op == "rope") {
    const auto f = rope_forward<T>(t.a, t.b, d.rot, ctx);
    const auto g = rope_backward<T>(t.dy, t.dy2, d.rot, ctx);
  } else if (op == "swiglu") {
    const auto y = swiglu_forward<T>(t.a, t.b, ctx);
    const auto g = swiglu_backward<T>(t.dy, t.a, t.b, ctx);
  } else if (op == "geglu") {
    const auto y = geglu_forward<T>(t.a, t.b, ctx);
    const auto g = geglu_backward<T>(t.dy, t.a, t.b, ctx);
  }
}

void reference_rep(const BenchCell& cell, const CellData& d, AllocationLedger& ledger) {
  const std::string& op = cell.op;
  if (op == "ce") {
    note_input(ledger, tags::kLogits, d.a);
    const auto r = ref::cross_entropy(d.a, d.targets, Reduction::Mean, &ledger);
    return;
  }
  if (op == "flce") {
    note_input(ledger, tags::kInput, d.a);
    note_input(ledger, tags::kInput, d.b);
    const auto r = ref::linear_cross_entropy(d.a, d.b, d.targets, Reduction::Mean, &ledger);
    return;
  }
  note_input(ledger, tags::kInput, d.a);
  note_input(ledger, tags::kInput, d.b);
  note_input(ledger, tags::kInput, d.dy);
  note_input(ledger, tags::kInput, d.dy2);
  if (op == "rmsnorm") {
    note_input(ledger, d.gamma);
    const auto y = ref::rmsnorm(d.a, d.gamma, kDefaultNormEps, &ledger);
    const auto g = ref::rmsnorm_backward(d.dy, d.a, d.gamma, kDefaultNormEps, &ledger);
  } else if (op == "layernorm") {
    note_input(ledger, d.gamma);
    note_input(ledger, d.beta);
    const auto y = ref::layernorm(d.a, d.gamma, d.beta, kDefaultNormEps, &ledger);
    const auto g = ref::layernorm_backward(d.dy, d.a, d.gamma, kDefaultNormEps, &ledger);
  } else if (op == "rope") {
    const auto f = ref::rope(d.a, d.b, d.rot, &ledger);
    const auto g = ref::rope_backward(d.dy, d.dy2, d.rot, &ledger);
  } else if (op == "swiglu") {
    const auto y = ref::swiglu(d.a, d.b, &ledger);
    const auto g = ref::swiglu_backward(d.dy, d.a, d.b, &ledger);
  } else if (op == "geglu") {
    const auto y = ref::geglu(d.a, d.b, &ledger);
    const auto g = ref::geglu_backward(d.dy, d.a, d.b, &ledger);
  }
}

struct RepResult {
  double ns = 0.0;
  std::uint64_t peak = 0;
  std::uint64_t logits_peak = 0;
};

template <Real T>
RepResult timed_fused(const BenchCell& cell, const CellData& d, const TypedData<T>& t, unsigned threads) {
  AllocationLedger ledger;
  const OpContext ctx{&ledger, threads, true};
  RepResult out;
  if (cell.op == "ce") {
    // Fresh copy each rep since the kernel overwrites its input; the copy is outside the clock.
    auto logits = t.a;
    note_input(ledger, tags::kLogits, logits);
    const auto t0 = Clock::now();
    cross_entropy<T>(logits, d.targets, Reduction::Mean, ctx);
    out.ns = std::chrono::duration<double, std::nano>(Clock::now() - t0).count();
  } else if (cell.op == "flce") {
    ProjectionHead<T> head(t.b);
    note_input(ledger, tags::kInput, t.a);
    note_input(ledger, tags::kInput, head.weight);
    note_input(ledger, tags::kGrad, head.grad_accum);
    const auto plan = plan_chunks(t.a.rows(), head.weight.cols(), head.weight.rows());
    const auto t0 = Clock::now();
    flce_forward_backward<T>(t.a, head, d.targets, Reduction::Mean, plan, ctx);
    out.ns = std::chrono::duration<double, std::nano>(Clock::now() - t0).count();
  } else {
    const auto t0 = Clock::now();
    fused_rep<T>(cell, d, t, ctx);
    out.ns = std::chrono::duration<double, std::nano>(Clock::now() - t0).count();
  }
  ledger.release_all();
  out.peak = ledger.peak_bytes();
  out.logits_peak = ledger.peak_bytes(tags::kLogits);
  return out;
}

RepResult timed_reference(const BenchCell& cell, const CellData& d) {
  AllocationLedger ledger;
  RepResult out;
  const auto t0 = Clock::now();
  reference_rep(cell, d, ledger);
  out.ns = std::chrono::duration<double, std::nano>(Clock::now() - t0).count();
  ledger.release_all();
  out.peak = ledger.peak_bytes();
  out.logits_peak = ledger.peak_bytes(tags::kLogits);
  return out;
}

template <Real T>
BenchRecord run_cell_typed(const BenchCell& cell, const BenchOptions& opts, const CellData& d) {
  const unsigned threads = opts.parallel ? std::max(1u, std::thread::hardware_concurrency()) : 1u;
  const bool fused = cell.variant == "fused";
  std::optional<TypedData<T>> typed;
  if (fused) typed.emplace(d);

  auto rep = [&] { return fused ? timed_fused<T>(cell, d, *typed, threads) : timed_reference(cell, d); };
  for (std::size_t i = 0; i < opts.warmup; ++i) rep();
  std::vector<double> samples;
  RepResult last;
  for (std::size_t i = 0; i < opts.repeats; ++i) {
    last = rep();
    samples.push_back(last.ns);
  }
  const Quantiles q = summarize(samples);
  BenchRecord rec;
  rec.op = cell.op;
  rec.rows = cell.rows;
  rec.cols = cell.cols;
  rec.variant = cell.variant;
  rec.dtype = std::string(to_string(fused ? opts.dtype : DType::f64()));
  rec.mode = opts.parallel ? "parallel" : "serial";
  rec.repeats = opts.repeats;
  rec.median_ns = q.median;
  rec.q20_ns = q.q20;
  rec.q80_ns = q.q80;
  rec.peak_bytes = last.peak;
  rec.logits_peak_bytes = last.logits_peak;
  return rec;
}

}  // namespace

BenchRecord run_cell(const BenchCell& cell, const BenchOptions& opts) {
  FK_CHECK(opts.repeats >= 1, ErrorCode::InvalidArgument, "repeats must be >= 1");
  const CellData d = make_data(cell, opts);
  if (opts.dtype == DType::f32()) return run_cell_typed<float>(cell, opts, d);
  return run_cell_typed<double>(cell, opts, d);
}

std::vector<BenchRecord> run_bench(const BenchOptions& opts, std::ostream* progress) {
  const auto cells = plan_cells(opts);
  preflight(cells, opts);
  std::vector<BenchRecord> out;
  out.reserve(cells.size());
  for (const auto& cell : cells) {
    out.push_back(run_cell(cell, opts));
    if (progress) {
      const auto& r = out.back();
      *progress << r.op << ' ' << r.rows << 'x' << r.cols << ' ' << r.variant << " median " << r.median_ns / 1e6
                << " ms\n";
    }
  }
  return out;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRecord>& records) {
  os << kBenchCsvHeader << '\n';
  for (const auto& r : records)
    os << r.op << ',' << r.rows << ',' << r.cols << ',' << r.variant << ',' << r.dtype << ',' << r.mode << ','
       << r.repeats << ',' << r.median_ns << ',' << r.q20_ns << ',' << r.q80_ns << ',' << r.peak_bytes << ','
       << r.logits_peak_bytes << '\n';
}

std::vector<BenchRecord> read_bench_csv(std::istream& is) {
  std::string line;
  FK_CHECK(static_cast<bool>(std::getline(is, line)), ErrorCode::SchemaMismatch, "empty bench CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  FK_CHECK(line == kBenchCsvHeader, ErrorCode::SchemaMismatch, "unexpected bench CSV header: " + line);
  std::vector<BenchRecord> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    FK_CHECK(f.size() == 12, ErrorCode::SchemaMismatch,
             "line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields, expected 12");
    try {
      BenchRecord r;
      r.op = f[0];
      r.rows = std::stoull(f[1]);
      r.cols = std::stoull(f[2]);
      r.variant = f[3];
      r.dtype = f[4];
      r.mode = f[5];
      r.repeats = std::stoull(f[6]);
      r.median_ns = std::stod(f[7]);
      r.q20_ns = std::stod(f[8]);
      r.q80_ns = std::stod(f[9]);
      r.peak_bytes = std::stoull(f[10]);
      r.logits_peak_bytes = std::stoull(f[11]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::SchemaMismatch, "line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

}  // namespace fk::harness
