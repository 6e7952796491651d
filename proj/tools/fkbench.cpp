// fkbench: correctness suite, kernel benchmarks, convergence run and report merge.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "fk/harness/bench.hpp"
#include "fk/harness/converge.hpp"
#include "fk/harness/correctness.hpp"
#include "fk/harness/report.hpp"

namespace {

struct Common {
  std::vector<std::string> ops;
  std::vector<std::size_t> shapes;
  std::vector<std::size_t> vocab;
  std::size_t repeats = 10;
  std::uint64_t seed = 0;
  std::string dtype;
  std::string csv;
  bool parallel = false;
  std::uint64_t budget_bytes = 16'000'000'000ULL;
};

// Writes to --csv if given, stdout otherwise.
template <typename Fn>
void emit(const std::string& path, Fn&& write) {
  if (path.empty()) {
    write(std::cout);
    return;
  }
  std::ofstream os(path);
  if (!os) throw fk::Error(fk::ErrorCode::InvalidArgument, "cannot open " + path + " for writing");
  write(os);
}

int cmd_correctness(const Common& c) {
  fk::harness::CorrectnessOptions opts;
  if (!c.ops.empty()) {
    opts.ops.clear();
    for (const auto& op : c.ops) opts.ops.push_back(fk::parse_op_kind(op));
  }
  if (!c.dtype.empty()) opts.dtypes = {fk::parse_dtype(c.dtype)};
  opts.seed = c.seed;
  if (c.parallel) opts.threads = std::max(1u, std::thread::hardware_concurrency());
  const auto report = fk::harness::run_correctness(opts);
  emit(c.csv, [&](std::ostream& os) { report.write_csv(os); });
  std::cerr << report.rows.size() << " checks, " << report.failures() << " failed\n";
  return report.all_passed() ? 0 : 1;
}

int cmd_bench(const Common& c, std::size_t warmup, std::size_t rows, std::size_t ce_rows) {
  fk::harness::BenchOptions opts;
  if (!c.ops.empty()) opts.ops = c.ops;
  if (!c.shapes.empty()) opts.shapes = c.shapes;
  if (!c.vocab.empty()) opts.vocab = c.vocab;
  opts.repeats = c.repeats;
  opts.warmup = warmup;
  opts.seed = c.seed;
  if (!c.dtype.empty()) opts.dtype = fk::parse_dtype(c.dtype);
  opts.parallel = c.parallel;
  opts.budget_bytes = c.budget_bytes;
  opts.rows = rows;
  opts.ce_rows = ce_rows;
  const auto records = fk::harness::run_bench(opts, &std::cerr);
  emit(c.csv, [&](std::ostream& os) { fk::harness::write_bench_csv(os, records); });
  return 0;
}

fk::harness::PathKind parse_path(const std::string& s) {
  if (s == "fused") return fk::harness::PathKind::Fused;
  if (s == "reference") return fk::harness::PathKind::Reference;
  throw fk::Error(fk::ErrorCode::InvalidArgument, "path must be fused or reference, got '" + s + "'");
}

int cmd_converge(const Common& c, fk::harness::ConvergeOptions opts, const std::string& path_a,
                 const std::string& path_b, const std::string& activation) {
  opts.seed = c.seed;
  if (!c.dtype.empty()) opts.dtype = fk::parse_dtype(c.dtype);
  opts.path_a = parse_path(path_a);
  opts.path_b = parse_path(path_b);
  if (activation == "swiglu") {
    opts.activation = fk::harness::MlpActivation::SwiGLU;
  } else if (activation == "geglu") {
    opts.activation = fk::harness::MlpActivation::GeGLU;
  } else {
    throw fk::Error(fk::ErrorCode::InvalidArgument, "activation must be swiglu or geglu");
  }
  const auto rep = fk::harness::run_convergence(opts);
  emit(c.csv, [&](std::ostream& os) {
    os.precision(17);
    os << "step,loss_a,loss_b\n";
    for (std::size_t s = 0; s < rep.step_losses_a.size(); ++s)
      os << s << ',' << rep.step_losses_a[s] << ',' << rep.step_losses_b[s] << '\n';
  });
  std::cerr << "loss maxdiff " << rep.loss_maxdiff << ", weight maxdiff " << rep.final_weight_maxdiff
            << ", logits maxdiff " << rep.final_logits_maxdiff << " -> " << (rep.passed ? "PASS" : "FAIL") << '\n';
  return rep.passed ? 0 : 1;
}

int cmd_report(const Common& c, const std::vector<std::string>& inputs) {
  std::vector<fk::harness::BenchRecord> all;
  for (const auto& path : inputs) {
    std::ifstream is(path);
    if (!is) throw fk::Error(fk::ErrorCode::InvalidArgument, "cannot open " + path);
    auto recs = fk::harness::read_bench_csv(is);
    all.insert(all.end(), recs.begin(), recs.end());
  }
  const auto rows = fk::harness::aggregate(all);
  emit(c.csv, [&](std::ostream& os) { fk::harness::write_report_csv(os, rows); });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fused kernel correctness, benchmark and convergence harness"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value file; flags given on the command line win");
  app.fallthrough();

  Common c;
  app.add_option("--ops", c.ops, "operators (rmsnorm, layernorm, rope, swiglu, geglu, ce, flce)")->delimiter(',');
  app.add_option("--shapes", c.shapes, "hidden sizes / sequence lengths")->delimiter(',');
  app.add_option("--vocab", c.vocab, "vocabulary sizes for ce/flce")->delimiter(',');
  app.add_option("--repeats", c.repeats, "timed repetitions")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--seed", c.seed, "RNG seed")->capture_default_str();
  app.add_option("--dtype", c.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64", "F32", "F64"}));
  app.add_option("--csv", c.csv, "output CSV path (stdout when omitted)");
  app.add_flag("--parallel", c.parallel, "row-parallel kernels");
  app.add_option("--budget-bytes", c.budget_bytes, "preflight memory budget")->capture_default_str();

  auto* correctness = app.add_subcommand("correctness", "fused vs reference sweep plus finite differences");

  std::size_t warmup = 3, rows = 128, ce_rows = 512;
  auto* bench = app.add_subcommand("bench", "speed and peak-memory sweep");
  bench->add_option("--warmup", warmup, "untimed repetitions")->capture_default_str();
  bench->add_option("--rows", rows, "rows for rmsnorm/layernorm/rope")->capture_default_str();
  bench->add_option("--ce-rows", ce_rows, "rows for ce/flce")->capture_default_str();

  fk::harness::ConvergeOptions conv;
  std::string path_a = "fused", path_b = "reference", activation = "swiglu";
  bool no_guards = false;
  auto* converge = app.add_subcommand("converge", "train fused and reference copies side by side");
  converge->add_option("--steps", conv.steps)->capture_default_str();
  converge->add_option("--lr", conv.lr)->capture_default_str();
  converge->add_option("--vocab-size", conv.vocab)->capture_default_str();
  converge->add_option("--hidden", conv.hidden)->capture_default_str();
  converge->add_option("--mlp", conv.mlp)->capture_default_str();
  converge->add_option("--heads", conv.heads)->capture_default_str();
  converge->add_option("--batch", conv.batch)->capture_default_str();
  converge->add_option("--seq", conv.seq)->capture_default_str();
  converge->add_option("--path-a", path_a)->capture_default_str();
  converge->add_option("--path-b", path_b)->capture_default_str();
  converge->add_option("--activation", activation)->capture_default_str();
  converge->add_flag("--strided-rope-grad", conv.strided_rope_grad, "replay a column-major RoPE gradient");
  converge->add_flag("--no-guards", no_guards, "disable contiguity checks");

  std::vector<std::string> inputs;
  auto* report = app.add_subcommand("report", "merge bench CSVs into speedup / memory ratios");
  report->add_option("inputs", inputs, "bench CSV files")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*correctness) return cmd_correctness(c);
    if (*bench) return cmd_bench(c, warmup, rows, ce_rows);
    if (*converge) {
      conv.enforce_contiguity = !no_guards;
      return cmd_converge(c, conv, path_a, path_b, activation);
    }
    if (*report) return cmd_report(c, inputs);
  } catch (const fk::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
