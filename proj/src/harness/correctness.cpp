#include "fk/harness/correctness.hpp"

#include <algorithm>
#include <ostream>
#include <random>
#include <string>

#include "fk/flce.hpp"
#include "fk/fused_ops.hpp"
#include "harness/inputs.hpp"

namespace fk::harness {
namespace {

using detail::uniform;
using detail::uniform_matrix;

// Everything one operator call needs, held in double. Unused fields stay empty.
struct Case {
  OpKind op;
  Matrix<double> a;   // x | q | x1 | logits | hidden
  Matrix<double> b;   // k | x2 | weight
  Matrix<double> dy;  // upstream gradient of the (first) output
  Matrix<double> dy2; // upstream gradient of rotated k
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<std::int64_t> targets;
  RotationSpec rot;
  double eps = kDefaultNormEps;
};

struct Outputs {
  std::vector<double> fwd;
  std::vector<double> bwd;
};

template <Real T>
void append(std::vector<double>& out, const Matrix<T>& m) {
  for (auto x : m.flat()) out.push_back(static_cast<double>(x));
}

template <Real T>
void append(std::vector<double>& out, const std::vector<T>& v) {
  for (auto x : v) out.push_back(static_cast<double>(x));
}

std::size_t rope_head_dim(std::size_t cols) {
  if (cols <= 128) return cols;
  for (std::size_t d = 128; d >= 2; d -= 2)
    if (cols % d == 0) return d;
  return 2;
}

// RoPE rows need an even width; odd sizes are bumped by one.
std::size_t effective_cols(OpKind op, std::size_t cols) {
  if (op == OpKind::RoPE && cols % 2 == 1) return cols + 1;
  return cols;
}

std::size_t flce_hidden(std::size_t vocab) { return std::min<std::size_t>(vocab, 16); }

Case make_case(OpKind op, std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  cols = effective_cols(op, cols);
  Case c{op, uniform_matrix(rng, rows, cols), {}, {}, {}, {}, {}, {}, {}, kDefaultNormEps};
  switch (op) {
    case OpKind::RMSNorm:
      c.gamma = uniform(rng, cols);
      c.dy = uniform_matrix(rng, rows, cols);
      break;
    case OpKind::LayerNorm:
      c.gamma = uniform(rng, cols);
      c.beta = uniform(rng, cols);
      c.dy = uniform_matrix(rng, rows, cols);
      break;
    case OpKind::RoPE: {
      c.b = uniform_matrix(rng, rows, cols);
      c.dy = uniform_matrix(rng, rows, cols);
      c.dy2 = uniform_matrix(rng, rows, cols);
      c.rot.head_dim = rope_head_dim(cols);
      c.rot.thetas = default_rope_thetas(c.rot.head_dim);
      std::uniform_int_distribution<std::int64_t> pos(0, 4095);
      for (std::size_t i = 0; i < rows; ++i) c.rot.positions.push_back(pos(rng));
      break;
    }
    case OpKind::SwiGLU:
    case OpKind::GeGLU:
      c.b = uniform_matrix(rng, rows, cols);
      c.dy = uniform_matrix(rng, rows, cols);
      break;
    case OpKind::CrossEntropy:
      c.a = uniform_matrix(rng, rows, cols, -3.0, 3.0);
      c.targets = detail::random_targets(rng, rows, cols);
      break;
    case OpKind::LinearCrossEntropy: {
      const std::size_t h = flce_hidden(cols);
      c.a = uniform_matrix(rng, rows, h);
      c.b = uniform_matrix(rng, h, cols);
      c.targets = detail::random_targets(rng, rows, cols);
      break;
    }
  }
  return c;
}

template <Real T>
Case rounded_case(Case c) {
  auto round_m = [](Matrix<double>& m) {
    if (!m.empty()) m = detail::rounded<T>(m);
  };
  round_m(c.a);
  round_m(c.b);
  round_m(c.dy);
  round_m(c.dy2);
  c.gamma = detail::rounded<T>(std::move(c.gamma));
  c.beta = detail::rounded<T>(std::move(c.beta));
  return c;
}

template <Real T>
Outputs run_fused(const Case& c, unsigned threads) {
  const OpContext ctx{nullptr, threads, true};
  Outputs o;
  const auto a = c.a.cast<T>();
  switch (c.op) {
    case OpKind::RMSNorm: {
      const auto gamma = cast_vector<T>(c.gamma);
      const auto f = rmsnorm_forward<T>(a, gamma, static_cast<T>(c.eps), ctx);
      const auto g = rmsnorm_backward<T>(c.dy.cast<T>(), a, f.res, gamma, ctx);
      append(o.fwd, f.y);
      append(o.bwd, g.dx);
      append(o.bwd, g.dgamma);
      break;
    }
    case OpKind::LayerNorm: {
      const auto gamma = cast_vector<T>(c.gamma);
      const auto beta = cast_vector<T>(c.beta);
      const auto f = layernorm_forward<T>(a, gamma, beta, static_cast<T>(c.eps), ctx);
      const auto g = layernorm_backward<T>(c.dy.cast<T>(), a, f.res, gamma, ctx);
      append(o.fwd, f.y);
      append(o.bwd, g.dx);
      append(o.bwd, g.dgamma);
      append(o.bwd, g.dbeta);
      break;
    }
    case OpKind::RoPE: {
      const auto f = rope_forward<T>(a, c.b.cast<T>(), c.rot, ctx);
      const auto g = rope_backward<T>(c.dy.cast<T>(), c.dy2.cast<T>(), c.rot, ctx);
      append(o.fwd, f.q);
      append(o.fwd, f.k);
      append(o.bwd, g.q);
      append(o.bwd, g.k);
      break;
    }
    case OpKind::SwiGLU:
    case OpKind::GeGLU: {
      const auto b = c.b.cast<T>();
      const bool swi = c.op == OpKind::SwiGLU;
      const auto y = swi ? swiglu_forward<T>(a, b, ctx) : geglu_forward<T>(a, b, ctx);
      const auto g = swi ? swiglu_backward<T>(c.dy.cast<T>(), a, b, ctx) : geglu_backward<T>(c.dy.cast<T>(), a, b, ctx);
      append(o.fwd, y);
      append(o.bwd, g.dx1);
      append(o.bwd, g.dx2);
      break;
    }
    case OpKind::CrossEntropy: {
      auto logits = a;
      const auto r = cross_entropy<T>(logits, c.targets, Reduction::Mean, ctx);
      o.fwd.push_back(r.loss);
      append(o.bwd, logits);
      break;
    }
    case OpKind::LinearCrossEntropy: {
      ProjectionHead<T> head(c.b.cast<T>());
      const auto plan = plan_chunks(a.rows(), head.weight.cols(), head.weight.rows());
      const auto r = flce_forward_backward<T>(a, head, c.targets, Reduction::Mean, plan, ctx);
      o.fwd.push_back(r.loss);
      append(o.bwd, r.dhidden);
      append(o.bwd, head.grad_accum);
      break;
    }
  }
  return o;
}

Outputs run_reference(const Case& c, bool with_backward = true) {
  Outputs o;
  switch (c.op) {
    case OpKind::RMSNorm:
      append(o.fwd, ref::rmsnorm(c.a, c.gamma, c.eps));
      if (with_backward) {
        const auto g = ref::rmsnorm_backward(c.dy, c.a, c.gamma, c.eps);
        append(o.bwd, g.dx);
        append(o.bwd, g.dgamma);
      }
      break;
    case OpKind::LayerNorm:
      append(o.fwd, ref::layernorm(c.a, c.gamma, c.beta, c.eps));
      if (with_backward) {
        const auto g = ref::layernorm_backward(c.dy, c.a, c.gamma, c.eps);
        append(o.bwd, g.dx);
        append(o.bwd, g.dgamma);
        append(o.bwd, g.dbeta);
      }
      break;
    case OpKind::RoPE: {
      const auto f = ref::rope(c.a, c.b, c.rot);
      append(o.fwd, f.q);
      append(o.fwd, f.k);
      if (with_backward) {
        const auto g = ref::rope_backward(c.dy, c.dy2, c.rot);
        append(o.bwd, g.q);
        append(o.bwd, g.k);
      }
      break;
    }
    case OpKind::SwiGLU:
    case OpKind::GeGLU: {
      const bool swi = c.op == OpKind::SwiGLU;
      append(o.fwd, swi ? ref::swiglu(c.a, c.b) : ref::geglu(c.a, c.b));
      if (with_backward) {
        const auto g = swi ? ref::swiglu_backward(c.dy, c.a, c.b) : ref::geglu_backward(c.dy, c.a, c.b);
        append(o.bwd, g.dx1);
        append(o.bwd, g.dx2);
      }
      break;
    }
    case OpKind::CrossEntropy: {
      const auto r = ref::cross_entropy(c.a, c.targets, Reduction::Mean);
      o.fwd.push_back(r.loss);
      if (with_backward) append(o.bwd, r.grad);
      break;
    }
    case OpKind::LinearCrossEntropy: {
      const auto r = ref::linear_cross_entropy(c.a, c.b, c.targets, Reduction::Mean);
      o.fwd.push_back(r.loss);
      if (with_backward) {
        append(o.bwd, r.dhidden);
        append(o.bwd, r.dweight);
      }
      break;
    }
  }
  return o;
}

// Differentiable inputs in the same order as the backward outputs.
std::vector<Matrix<double>*> matrix_params(Case& c) {
  switch (c.op) {
    case OpKind::RMSNorm:
    case OpKind::LayerNorm:
    case OpKind::CrossEntropy:
      return {&c.a};
    default:
      return {&c.a, &c.b};
  }
}

std::vector<std::vector<double>*> vector_params(Case& c) {
  if (c.op == OpKind::RMSNorm) return {&c.gamma};
  if (c.op == OpKind::LayerNorm) return {&c.gamma, &c.beta};
  return {};
}

std::vector<double> pack(Case& c) {
  std::vector<double> p;
  for (auto* m : matrix_params(c)) append(p, *m);
  for (auto* v : vector_params(c)) append(p, *v);
  return p;
}

void unpack(Case& c, std::span<const double> p) {
  std::size_t k = 0;
  for (auto* m : matrix_params(c))
    for (auto& x : m->flat()) x = p[k++];
  for (auto* v : vector_params(c))
    for (auto& x : *v) x = p[k++];
}

// Scalar whose gradient is exactly what each backward returns: the loss for
// CE heads, <dy, y> (+ <dy2, k_rot>) otherwise.
double scalar_objective(const Case& c) {
  const auto out = run_reference(c, false);
  if (c.op == OpKind::CrossEntropy || c.op == OpKind::LinearCrossEntropy) return out.fwd[0];
  double s = 0.0;
  const auto dy = c.dy.flat();
  for (std::size_t k = 0; k < dy.size(); ++k) s += dy[k] * out.fwd[k];
  if (c.op == OpKind::RoPE) {
    const auto dy2 = c.dy2.flat();
    for (std::size_t k = 0; k < dy2.size(); ++k) s += dy2[k] * out.fwd[dy.size() + k];
  }
  return s;
}

CheckRow make_row(OpKind op, std::string shape, DType dtype, std::string check, const std::vector<double>& got,
                  const std::vector<double>& want, const Tolerance& tol) {
  CheckRow r{std::string(to_string(op)), std::move(shape), std::string(to_string(dtype)), std::move(check)};
  if (got.size() != want.size()) {
    r.max_abs = r.max_rel = r.worst_ratio = std::numeric_limits<double>::infinity();
    return r;
  }
  const auto d = compare(got, want, tol);
  r.max_abs = d.max_abs;
  r.max_rel = d.max_rel;
  r.worst_ratio = d.worst_ratio;
  r.passed = d.worst_ratio <= 1.0;
  return r;
}

std::string shape_label(const Case& c) {
  std::string s = std::to_string(c.a.rows()) + "x" + std::to_string(c.a.cols());
  if (c.op == OpKind::LinearCrossEntropy) s += "x" + std::to_string(c.b.cols());
  return s;
}

// Regular (powers of two) and irregular shapes, including a single-element row.
const std::vector<std::pair<std::size_t, std::size_t>> kForwardShapes = {
    {4, 64}, {8, 256}, {16, 1024}, {2, 4096}, {3, 1000}, {5, 41}, {7, 17}, {2, 3}, {1, 1}, {9, 1},
};

}  // namespace

std::vector<CheckRow> check_forward_backward(OpKind op, DType dtype, std::size_t rows, std::size_t cols,
                                             std::uint64_t seed, unsigned threads) {
  std::mt19937_64 rng(seed);
  Case c = make_case(op, rows, cols, rng);
  Outputs got;
  Tolerance tol = Tolerance::strict();
  if (dtype == DType::f32()) {
    c = rounded_case<float>(std::move(c));
    got = run_fused<float>(c, threads);
    tol = Tolerance::relaxed();
  } else {
    got = run_fused<double>(c, threads);
  }
  const Outputs want = run_reference(c);
  const std::string shape = shape_label(c);
  return {make_row(op, shape, dtype, "forward", got.fwd, want.fwd, tol),
          make_row(op, shape, dtype, "backward", got.bwd, want.bwd, tol)};
}

CheckRow check_gradient_fd(OpKind op, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t rows = op == OpKind::LinearCrossEntropy ? 4 : 2;
  Case c = make_case(op, rows, n, rng);
  const auto analytic = run_fused<double>(c, 1).bwd;

  const auto at = pack(c);
  Case probe = c;
  const auto numeric = fd_gradient(
      [&probe](std::span<const double> p) {
        unpack(probe, p);
        return scalar_objective(probe);
      },
      at);
  return make_row(op, shape_label(c), DType::f64(), "fd", analytic, numeric, Tolerance::gradient());
}

bool CorrectnessReport::all_passed() const { return failures() == 0; }

std::size_t CorrectnessReport::failures() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const CheckRow& r) { return !r.passed; }));
}

void CorrectnessReport::write_csv(std::ostream& os) const {
  os << "op,shape,dtype,check,max_abs,max_rel,pass\n";
  for (const auto& r : rows)
    os << r.op << ',' << r.shape << ',' << r.dtype << ',' << r.check << ',' << r.max_abs << ',' << r.max_rel << ','
       << (r.passed ? 1 : 0) << '\n';
}

CorrectnessReport run_correctness(const CorrectnessOptions& opts) {
  CorrectnessReport report;
  std::uint64_t stream = 0;
  for (const OpKind op : opts.ops) {
    if (opts.forward_checks) {
      for (const DType dt : opts.dtypes)
        for (const auto& [rows, cols] : kForwardShapes) {
          auto rs = check_forward_backward(op, dt, rows, cols, opts.seed * 7919 + stream++, opts.threads);
          report.rows.insert(report.rows.end(), rs.begin(), rs.end());
        }
    }
    if (opts.gradient_sizes.empty()) continue;
    for (std::size_t i = 0; i < opts.gradient_instances; ++i) {
      const std::size_t n = opts.gradient_sizes[i % opts.gradient_sizes.size()];
      report.rows.push_back(check_gradient_fd(op, n, opts.seed * 7919 + stream++));
    }
  }
  return report;
}

}  // namespace fk::harness
