#include "fk/harness/converge.hpp"

#include <cmath>
#include <random>

#include "fk/flce.hpp"
#include "fk/fused_ops.hpp"

namespace fk::harness {
namespace {

template <Real T>
struct Params {
  Matrix<T> emb;   // V x H
  Matrix<T> w1;    // H x M
  Matrix<T> w2;    // H x M
  Matrix<T> w3;    // M x H
  Matrix<T> wout;  // H x V
  std::vector<T> g1, g2, b2;

  template <Real U>
  Params<U> cast() const {
    return {emb.template cast<U>(), w1.template cast<U>(), w2.template cast<U>(), w3.template cast<U>(),
            wout.template cast<U>(), cast_vector<U>(g1), cast_vector<U>(g2), cast_vector<U>(b2)};
  }

  std::vector<double> flat() const {
    std::vector<double> out;
    for (const auto* m : {&emb, &w1, &w2, &w3, &wout})
      for (auto x : m->flat()) out.push_back(static_cast<double>(x));
    for (const auto* v : {&g1, &g2, &b2})
      for (auto x : *v) out.push_back(static_cast<double>(x));
    return out;
  }
};

template <Real T>
void sgd(Params<T>& p, const Params<T>& g, T lr) {
  auto step = [lr](std::span<T> w, std::span<const T> d) {
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * d[k];
  };
  step(p.emb.flat(), g.emb.flat());
  step(p.w1.flat(), g.w1.flat());
  step(p.w2.flat(), g.w2.flat());
  step(p.w3.flat(), g.w3.flat());
  step(p.wout.flat(), g.wout.flat());
  step(p.g1, g.g1);
  step(p.g2, g.g2);
  step(p.b2, g.b2);
}

struct Batch {
  std::vector<std::int64_t> tokens;
  std::vector<std::int64_t> targets;
  RotationSpec rot;
};

// A noisy affine recurrence over the vocabulary: learnable but not trivial.
Batch make_batch(const ConvergeOptions& o, std::mt19937_64& rng) {
  Batch b;
  std::uniform_int_distribution<std::int64_t> tok(0, static_cast<std::int64_t>(o.vocab) - 1);
  std::bernoulli_distribution noise(0.1);
  const auto v = static_cast<std::int64_t>(o.vocab);
  for (std::size_t s = 0; s < o.batch; ++s) {
    std::int64_t cur = tok(rng);
    for (std::size_t t = 0; t < o.seq; ++t) {
      const std::int64_t next = noise(rng) ? tok(rng) : (3 * cur + 1) % v;
      b.tokens.push_back(cur);
      b.targets.push_back(next);
      cur = next;
    }
  }
  b.rot.head_dim = o.hidden / o.heads;
  b.rot.thetas = default_rope_thetas(b.rot.head_dim);
  for (std::size_t s = 0; s < o.batch; ++s)
    for (std::size_t t = 0; t < o.seq; ++t) b.rot.positions.push_back(static_cast<std::int64_t>(t));
  return b;
}

Params<double> make_init(const ConvergeOptions& o, std::mt19937_64& rng) {
  auto mat = [&rng](std::size_t r, std::size_t c, double scale) {
    std::uniform_real_distribution<double> d(-scale, scale);
    std::vector<double> v(r * c);
    // Rounded to float so every path starts from bit-identical values.
    for (auto& x : v) x = static_cast<double>(static_cast<float>(d(rng)));
    return Matrix<double>(r, c, std::move(v));
  };
  auto vec = [&rng](std::size_t n, double center, double spread) {
    std::uniform_real_distribution<double> d(center - spread, center + spread);
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(static_cast<float>(d(rng)));
    return v;
  };
  const double h = static_cast<double>(o.hidden);
  const double m = static_cast<double>(o.mlp);
  Params<double> p{mat(o.vocab, o.hidden, 1.0),
                   mat(o.hidden, o.mlp, 1.0 / std::sqrt(h)),
                   mat(o.hidden, o.mlp, 1.0 / std::sqrt(h)),
                   mat(o.mlp, o.hidden, 1.0 / std::sqrt(m)),
                   mat(o.hidden, o.vocab, 1.0 / std::sqrt(h)),
                   vec(o.hidden, 1.0, 0.1),
                   vec(o.hidden, 1.0, 0.1),
                   vec(o.hidden, 0.0, 0.1)};
  return p;
}

template <Real T>
Matrix<T> gather_rows(const Matrix<T>& emb, std::span<const std::int64_t> tokens) {
  Matrix<T> out(tokens.size(), emb.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto src = emb.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <Real T>
Matrix<T> scatter_rows(const Matrix<T>& d, std::span<const std::int64_t> tokens, std::size_t vocab) {
  Matrix<T> out(vocab, d.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto dst = out.row(static_cast<std::size_t>(tokens[i]));
    const auto src = d.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  return out;
}

template <Real T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> out = a;
  for (std::size_t k = 0; k < out.size(); ++k) out.data()[k] += b.data()[k];
  return out;
}

struct StepOut {
  double loss = 0.0;
  Matrix<double> logits;  // only filled when asked
};

// ---------------------------------------------------------------- fused path

template <Real T>
Matrix<T> mm(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> c(a.rows(), b.cols());
  gemm(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols(), false);
  return c;
}

template <Real T>
Matrix<T> mm_nt(const Matrix<T>& a, const Matrix<T>& b) {  // a * b^T
  Matrix<T> c(a.rows(), b.rows());
  gemm_nt(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.rows());
  return c;
}

template <Real T>
Matrix<T> mm_tn(const Matrix<T>& a, const Matrix<T>& b) {  // a^T * b
  Matrix<T> c(a.cols(), b.cols());
  gemm_tn_acc(a.data(), b.data(), c.data(), a.cols(), a.rows(), b.cols());
  return c;
}

template <Real T>
StepOut fused_step(Params<T>& p, const Batch& b, const ConvergeOptions& o, T lr, bool want_logits) {
  const OpContext ctx{nullptr, 1, o.enforce_contiguity};
  const bool swi = o.activation == MlpActivation::SwiGLU;

  const Matrix<T> h0 = gather_rows(p.emb, b.tokens);
  const auto n1 = rmsnorm_forward<T>(h0, p.g1, T(kDefaultNormEps), ctx);
  const Matrix<T> x1 = mm(n1.y, p.w1);
  const Matrix<T> x2 = mm(n1.y, p.w2);
  const Matrix<T> g = swi ? swiglu_forward<T>(x1, x2, ctx) : geglu_forward<T>(x1, x2, ctx);
  const Matrix<T> h1 = add(h0, mm(g, p.w3));
  const auto rot = rope_forward<T>(h1, h0, b.rot, ctx);
  const Matrix<T> h2 = add(rot.q, rot.k);
  const auto n2 = layernorm_forward<T>(h2, p.g2, p.b2, T(kDefaultNormEps), ctx);

  StepOut out;
  if (want_logits) out.logits = mm(n2.y, p.wout).template cast<double>();

  ProjectionHead<T> head(p.wout);
  const auto plan = plan_chunks(n2.y.rows(), o.vocab, o.hidden);
  const auto ce = flce_forward_backward<T>(n2.y, head, b.targets, Reduction::Mean, plan, ctx);
  out.loss = ce.loss;
  FK_CHECK(std::isfinite(out.loss), ErrorCode::NonFiniteLoss, "fused path loss is not finite");

  Params<T> d;
  d.wout = std::move(head.grad_accum);
  auto ln = layernorm_backward<T>(ce.dhidden, h2, n2.res, p.g2, ctx);
  d.g2 = std::move(ln.dgamma);
  d.b2 = std::move(ln.dbeta);

  // The replay hands RoPE a column-major view of the gradient, as a transposed
  // upstream op would.
  const Matrix<T> dq = o.strided_rope_grad ? Matrix<T>::column_major_view(ln.dx) : ln.dx;
  const auto drot = rope_backward<T>(dq, ln.dx, b.rot, ctx);
  const Matrix<T>& dh1 = drot.q;

  d.w3 = mm_tn(g, dh1);
  const Matrix<T> dg = mm_nt(dh1, p.w3);
  const auto dglu = swi ? swiglu_backward<T>(dg, x1, x2, ctx) : geglu_backward<T>(dg, x1, x2, ctx);
  d.w1 = mm_tn(n1.y, dglu.dx1);
  d.w2 = mm_tn(n1.y, dglu.dx2);
  const Matrix<T> dn1 = add(mm_nt(dglu.dx1, p.w1), mm_nt(dglu.dx2, p.w2));
  auto rms = rmsnorm_backward<T>(dn1, h0, n1.res, p.g1, ctx);
  d.g1 = std::move(rms.dgamma);

  const Matrix<T> dh0 = add(add(dh1, drot.k), rms.dx);
  d.emb = scatter_rows(dh0, b.tokens, o.vocab);

  sgd(p, d, lr);
  return out;
}

// ---------------------------------------------------------------- reference path

StepOut reference_step(Params<double>& p, const Batch& b, const ConvergeOptions& o, double lr, bool want_logits) {
  const bool swi = o.activation == MlpActivation::SwiGLU;

  const Matrix<double> h0 = gather_rows(p.emb, b.tokens);
  const Matrix<double> n1 = ref::rmsnorm(h0, p.g1, kDefaultNormEps);
  const Matrix<double> x1 = ref::matmul(n1, p.w1);
  const Matrix<double> x2 = ref::matmul(n1, p.w2);
  const Matrix<double> g = swi ? ref::swiglu(x1, x2) : ref::geglu(x1, x2);
  const Matrix<double> h1 = add(h0, ref::matmul(g, p.w3));
  const auto rot = ref::rope(h1, h0, b.rot);
  const Matrix<double> h2 = add(rot.q, rot.k);
  const Matrix<double> n2 = ref::layernorm(h2, p.g2, p.b2, kDefaultNormEps);

  StepOut out;
  if (want_logits) out.logits = ref::matmul(n2, p.wout);

  auto ce = ref::linear_cross_entropy(n2, p.wout, b.targets, Reduction::Mean);
  out.loss = ce.loss;
  FK_CHECK(std::isfinite(out.loss), ErrorCode::NonFiniteLoss, "reference path loss is not finite");

  Params<double> d;
  d.wout = std::move(ce.dweight);
  auto ln = ref::layernorm_backward(ce.dhidden, h2, p.g2, kDefaultNormEps);
  d.g2 = std::move(ln.dgamma);
  d.b2 = std::move(ln.dbeta);

  const auto drot = ref::rope_backward(ln.dx, ln.dx, b.rot);
  const Matrix<double>& dh1 = drot.q;

  d.w3 = ref::matmul_transposed_a(g, dh1);
  const Matrix<double> dg = ref::matmul_transposed_b(dh1, p.w3);
  const auto dglu = swi ? ref::swiglu_backward(dg, x1, x2) : ref::geglu_backward(dg, x1, x2);
  d.w1 = ref::matmul_transposed_a(n1, dglu.dx1);
  d.w2 = ref::matmul_transposed_a(n1, dglu.dx2);
  const Matrix<double> dn1 = add(ref::matmul_transposed_b(dglu.dx1, p.w1), ref::matmul_transposed_b(dglu.dx2, p.w2));
  auto rms = ref::rmsnorm_backward(dn1, h0, p.g1, kDefaultNormEps);
  d.g1 = std::move(rms.dgamma);

  const Matrix<double> dh0 = add(add(dh1, drot.k), rms.dx);
  d.emb = scatter_rows(dh0, b.tokens, o.vocab);

  sgd(p, d, lr);
  return out;
}

struct PathResult {
  std::vector<double> losses;
  std::vector<double> weights;
  std::vector<double> logits;
};

template <Real T, typename Step>
PathResult train(Params<T> p, const Batch& b, const ConvergeOptions& o, Step step) {
  PathResult r;
  for (std::size_t s = 0; s < o.steps; ++s) r.losses.push_back(step(p, b, o, T(o.lr), false).loss);
  r.weights = p.flat();
  // Final logits from the trained weights; the trailing update is not kept.
  Params<T> probe = p;
  const auto last = step(probe, b, o, T(0), true).logits.flat();
  r.logits.assign(last.begin(), last.end());
  return r;
}

PathResult run_path(PathKind kind, const Params<double>& init, const Batch& b, const ConvergeOptions& o) {
  if (kind == PathKind::Reference) return train(init, b, o, reference_step);
  if (o.dtype == DType::f32()) return train(init.cast<float>(), b, o, fused_step<float>);
  return train(init, b, o, fused_step<double>);
}

}  // namespace

ConvergenceReport run_convergence(const ConvergeOptions& opts) {
  FK_CHECK(opts.steps >= 1, ErrorCode::InvalidArgument, "steps must be >= 1");
  FK_CHECK(opts.heads >= 1 && opts.hidden % opts.heads == 0 && (opts.hidden / opts.heads) % 2 == 0,
           ErrorCode::InvalidArgument, "hidden / heads must be an even integer");
  FK_CHECK(opts.vocab >= 2 && opts.mlp >= 1 && opts.batch >= 1 && opts.seq >= 1, ErrorCode::InvalidArgument,
           "model dimensions must be positive");

  std::mt19937_64 rng(opts.seed);
  const Params<double> init = make_init(opts, rng);
  const Batch batch = make_batch(opts, rng);

  // Only a fused path sees the strided replay.
  ConvergeOptions oa = opts;
  ConvergeOptions ob = opts;
  ob.strided_rope_grad = false;
  const PathResult a = run_path(opts.path_a, init, batch, oa);
  const PathResult b = run_path(opts.path_b, init, batch, ob);

  const Tolerance tol(opts.atol, opts.rtol);
  const auto dl = compare(a.losses, b.losses, tol);
  const auto dw = compare(a.weights, b.weights, tol);
  const auto dz = compare(a.logits, b.logits, tol);

  ConvergenceReport rep;
  rep.step_losses_a = a.losses;
  rep.step_losses_b = b.losses;
  rep.loss_maxdiff = dl.max_abs;
  rep.final_weight_maxdiff = dw.max_abs;
  rep.final_logits_maxdiff = dz.max_abs;
  rep.passed = dl.worst_ratio <= 1.0 && dw.worst_ratio <= 1.0 && dz.worst_ratio <= 1.0;
  return rep;
}

}  // namespace fk::harness
