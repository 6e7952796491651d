#include "fk/reference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace fk {

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::RMSNorm: return "rmsnorm";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::RoPE: return "rope";
    case OpKind::SwiGLU: return "swiglu";
    case OpKind::GeGLU: return "geglu";
    case OpKind::CrossEntropy: return "ce";
    case OpKind::LinearCrossEntropy: return "flce";
  }
  return "unknown";
}

OpKind parse_op_kind(std::string_view name) {
  for (OpKind k : {OpKind::RMSNorm, OpKind::LayerNorm, OpKind::RoPE, OpKind::SwiGLU, OpKind::GeGLU,
                   OpKind::CrossEntropy, OpKind::LinearCrossEntropy}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorCode::ParseError, "unknown op '" + std::string(name) + "'");
}

Tolerance::Tolerance(double a, double r) : atol(a), rtol(r) {
  FK_CHECK(atol > 0.0 && rtol > 0.0, ErrorCode::InvalidArgument, "tolerances must be positive");
}

DiffStats compare(std::span<const double> a, std::span<const double> b, const Tolerance& tol) {
  FK_CHECK(a.size() == b.size(), ErrorCode::ShapeMismatch,
           "compare: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " elements");
  DiffStats s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(a[i] - b[i]);
    if (std::isnan(diff)) {
      s.max_abs = s.max_rel = s.worst_ratio = std::numeric_limits<double>::infinity();
      return s;
    }
    s.max_abs = std::max(s.max_abs, diff);
    if (b[i] != 0.0) s.max_rel = std::max(s.max_rel, diff / std::abs(b[i]));
    s.worst_ratio = std::max(s.worst_ratio, diff / (tol.atol + tol.rtol * std::abs(b[i])));
  }
  return s;
}

bool allclose(std::span<const double> a, std::span<const double> b, const Tolerance& tol) {
  return compare(a, b, tol).worst_ratio <= 1.0;
}

bool allclose(const Matrix<double>& a, const Matrix<double>& b, const Tolerance& tol) {
  FK_CHECK(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::ShapeMismatch, "allclose shape mismatch");
  const auto ac = a.contiguous_copy();
  const auto bc = b.contiguous_copy();
  return allclose(ac.flat(), bc.flat(), tol);
}

std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> at, double h) {
  FK_CHECK(h > 0.0, ErrorCode::InvalidArgument, "step size must be positive");
  std::vector<double> probe(at.begin(), at.end());
  std::vector<double> grad(at.size());
  auto eval = [&](std::size_t i) {
    const double v = f(probe);
    FK_CHECK(std::isfinite(v), ErrorCode::NonFiniteProbe, "non-finite value probing coordinate " + std::to_string(i));
    return v;
  };
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + h;
    const double up = eval(i);
    probe[i] = x0 - h;
    const double down = eval(i);
    probe[i] = x0;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

namespace ref {
namespace {

void require(bool cond, const std::string& msg) { FK_CHECK(cond, ErrorCode::ShapeMismatch, msg); }

void require_same(const Matrix<double>& a, const Matrix<double>& b, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), std::string(what) + ": shape mismatch");
}

const Matrix<double>& contiguous_ref(const Matrix<double>& m, Matrix<double>& storage) {
  if (m.contiguous()) return m;
  storage = m.contiguous_copy();
  return storage;
}

void record_output(AllocationLedger* ledger, const Matrix<double>& m) {
  if (ledger) ledger->record(tags::kOutput, m.bytes(), AllocKind::Alloc);
}

void record_output(AllocationLedger* ledger, const std::vector<double>& v) {
  if (ledger) ledger->record(tags::kOutput, v.size() * sizeof(double), AllocKind::Alloc);
}

}  // namespace

Matrix<double> rmsnorm(const Matrix<double>& x_in, std::span<const double> gamma, double eps,
                       AllocationLedger* ledger) {
  Matrix<double> x_store;
  const auto& x = contiguous_ref(x_in, x_store);
  const std::size_t n = x.cols();
  require(gamma.size() == n, "rmsnorm: gamma length");
  Matrix<double> xhat(x.rows(), n);
  LedgerScope xhat_scope(ledger, tags::kScratch, xhat.bytes());
  Matrix<double> y(x.rows(), n);
  record_output(ledger, y);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean_sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean_sq += x(i, j) * x(i, j);
    mean_sq /= static_cast<double>(n);
    const double rms = std::sqrt(mean_sq + eps);
    for (std::size_t j = 0; j < n; ++j) xhat(i, j) = x(i, j) / rms;
  }
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) y(i, j) = xhat(i, j) * gamma[j];
  return y;
}

RmsNormGrads<double> rmsnorm_backward(const Matrix<double>& dy, const Matrix<double>& x_in,
                                      std::span<const double> gamma, double eps, AllocationLedger* ledger) {
  Matrix<double> x_store;
  const auto& x = contiguous_ref(x_in, x_store);
  require_same(dy, x, "rmsnorm_backward");
  const std::size_t n = x.cols();
  require(gamma.size() == n, "rmsnorm_backward: gamma length");
  RmsNormGrads<double> g{Matrix<double>(x.rows(), n), std::vector<double>(n, 0.0)};
  record_output(ledger, g.dx);
  record_output(ledger, g.dgamma);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    // forward recomputed stage by stage
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x(i, j) * x(i, j);
    s /= static_cast<double>(n);
    const double r = std::sqrt(s + eps);
    const double inv = 1.0 / r;
    // reverse
    double d_inv = 0.0;
    for (std::size_t j = 0; j < n; ++j) d_inv += dy(i, j) * gamma[j] * x(i, j);
    const double d_r = -d_inv / (r * r);
    const double d_s = d_r / (2.0 * r);
    for (std::size_t j = 0; j < n; ++j) {
      g.dx(i, j) = dy(i, j) * gamma[j] * inv + d_s * 2.0 * x(i, j) / static_cast<double>(n);
      g.dgamma[j] += dy(i, j) * x(i, j) * inv;
    }
  }
  return g;
}

Matrix<double> layernorm(const Matrix<double>& x_in, std::span<const double> gamma, std::span<const double> beta,
                         double eps, AllocationLedger* ledger) {
  Matrix<double> x_store;
  const auto& x = contiguous_ref(x_in, x_store);
  const std::size_t n = x.cols();
  require(gamma.size() == n && beta.size() == n, "layernorm: gamma/beta length");
  Matrix<double> centered(x.rows(), n);
  LedgerScope centered_scope(ledger, tags::kScratch, centered.bytes());
  Matrix<double> y(x.rows(), n);
  record_output(ledger, y);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) centered(i, j) = x(i, j) - mean;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += centered(i, j) * centered(i, j);
    var /= static_cast<double>(n);
    const double rms = std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y(i, j) = centered(i, j) / rms * gamma[j] + beta[j];
  }
  return y;
}

LayerNormGrads<double> layernorm_backward(const Matrix<double>& dy, const Matrix<double>& x_in,
                                          std::span<const double> gamma, double eps,
                                          AllocationLedger* ledger) {
  Matrix<double> x_store;
  const auto& x = contiguous_ref(x_in, x_store);
  require_same(dy, x, "layernorm_backward");
  const std::size_t n = x.cols();
  const double nd = static_cast<double>(n);
  require(gamma.size() == n, "layernorm_backward: gamma length");
  LayerNormGrads<double> g{Matrix<double>(x.rows(), n), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  record_output(ledger, g.dx);
  record_output(ledger, g.dgamma);
  record_output(ledger, g.dbeta);
  std::vector<double> c(n);
  std::vector<double> d_c(n);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x(i, j);
    mean /= nd;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      c[j] = x(i, j) - mean;
      s += c[j] * c[j];
    }
    s /= nd;
    const double r = std::sqrt(s + eps);
    const double inv = 1.0 / r;

    double d_inv = 0.0;
    for (std::size_t j = 0; j < n; ++j) d_inv += dy(i, j) * gamma[j] * c[j];
    const double d_r = -d_inv / (r * r);
    const double d_s = d_r / (2.0 * r);
    double d_mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      d_c[j] = dy(i, j) * gamma[j] * inv + d_s * 2.0 * c[j] / nd;
      d_mean -= d_c[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      g.dx(i, j) = d_c[j] + d_mean / nd;
      g.dgamma[j] += dy(i, j) * c[j] * inv;
      g.dbeta[j] += dy(i, j);
    }
  }
  return g;
}

std::vector<double> rotation_matrix(std::size_t d, std::span<const double> thetas, std::int64_t position) {
  const std::size_t half = d / 2;
  std::vector<double> rot(d * d, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(position) * thetas[i];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    rot[i * d + i] = c;
    rot[i * d + i + half] = -s;
    rot[(i + half) * d + i] = s;
    rot[(i + half) * d + i + half] = c;
  }
  return rot;
}

namespace {

Matrix<double> rotate_dense(const Matrix<double>& x_in, const RotationSpec& spec, bool transpose,
                            AllocationLedger* ledger) {
  Matrix<double> x_store;
  const auto& x = contiguous_ref(x_in, x_store);
  spec.validate(x.rows(), x.cols());
  const std::size_t d = spec.head_dim;
  Matrix<double> y(x.rows(), x.cols());
  record_output(ledger, y);
  LedgerScope rot_scope(ledger, tags::kScratch, d * d * sizeof(double));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto rot = rotation_matrix(d, spec.thetas, spec.positions[r]);
    for (std::size_t h = 0; h < x.cols(); h += d) {
      for (std::size_t a = 0; a < d; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < d; ++b) acc += (transpose ? rot[b * d + a] : rot[a * d + b]) * x(r, h + b);
        y(r, h + a) = acc;
      }
    }
  }
  return y;
}

}  // namespace

RopePair<double> rope(const Matrix<double>& q, const Matrix<double>& k, const RotationSpec& spec,
                      AllocationLedger* ledger) {
  require(q.rows() == k.rows(), "rope: q/k rows");
  return {rotate_dense(q, spec, false, ledger), rotate_dense(k, spec, false, ledger)};
}

RopePair<double> rope_backward(const Matrix<double>& dq, const Matrix<double>& dk, const RotationSpec& spec,
                               AllocationLedger* ledger) {
  require(dq.rows() == dk.rows(), "rope_backward: q/k rows");
  return {rotate_dense(dq, spec, true, ledger), rotate_dense(dk, spec, true, ledger)};
}

namespace {

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

constexpr double kGeluCubic = 0.044715;

double gelu_inner(double z) { return std::sqrt(2.0 / std::numbers::pi) * (z + kGeluCubic * z * z * z); }

}  // namespace

Matrix<double> swiglu(const Matrix<double>& x1_in, const Matrix<double>& x2_in, AllocationLedger* ledger) {
  Matrix<double> x1_store;
  const auto& x1 = contiguous_ref(x1_in, x1_store);
  Matrix<double> x2_store;
  const auto& x2 = contiguous_ref(x2_in, x2_store);
  require_same(x1, x2, "swiglu");
  Matrix<double> sig(x1.rows(), x1.cols());
  Matrix<double> silu(x1.rows(), x1.cols());
  LedgerScope sig_scope(ledger, tags::kScratch, sig.bytes());
  LedgerScope silu_scope(ledger, tags::kScratch, silu.bytes());
  Matrix<double> y(x1.rows(), x1.cols());
  record_output(ledger, y);
  for (std::size_t k = 0; k < x1.size(); ++k) sig.data()[k] = logistic(x1.data()[k]);
  for (std::size_t k = 0; k < x1.size(); ++k) silu.data()[k] = x1.data()[k] * sig.data()[k];
  for (std::size_t k = 0; k < x1.size(); ++k) y.data()[k] = silu.data()[k] * x2.data()[k];
  return y;
}

GluGrads<double> swiglu_backward(const Matrix<double>& dy_in, const Matrix<double>& x1_in,
                                 const Matrix<double>& x2_in, AllocationLedger* ledger) {
  Matrix<double> dy_store;
  const auto& dy = contiguous_ref(dy_in, dy_store);
  Matrix<double> x1_store;
  const auto& x1 = contiguous_ref(x1_in, x1_store);
  Matrix<double> x2_store;
  const auto& x2 = contiguous_ref(x2_in, x2_store);
  require_same(x1, x2, "swiglu_backward");
  require_same(dy, x1, "swiglu_backward");
  GluGrads<double> g{Matrix<double>(x1.rows(), x1.cols()), Matrix<double>(x1.rows(), x1.cols())};
  record_output(ledger, g.dx1);
  record_output(ledger, g.dx2);
  for (std::size_t k = 0; k < x1.size(); ++k) {
    const double z = x1.data()[k];
    const double s = logistic(z);
    const double d_silu = dy.data()[k] * x2.data()[k];
    // d(z * s(z))/dz by the product rule, with s' = s (1 - s)
    g.dx1.data()[k] = d_silu * (s + z * (s * (1.0 - s)));
    g.dx2.data()[k] = dy.data()[k] * (z * s);
  }
  return g;
}

Matrix<double> geglu(const Matrix<double>& x1_in, const Matrix<double>& x2_in, AllocationLedger* ledger) {
  Matrix<double> x1_store;
  const auto& x1 = contiguous_ref(x1_in, x1_store);
  Matrix<double> x2_store;
  const auto& x2 = contiguous_ref(x2_in, x2_store);
  require_same(x1, x2, "geglu");
  Matrix<double> act(x1.rows(), x1.cols());
  LedgerScope act_scope(ledger, tags::kScratch, act.bytes());
  Matrix<double> y(x1.rows(), x1.cols());
  record_output(ledger, y);
  for (std::size_t k = 0; k < x1.size(); ++k) {
    const double z = x1.data()[k];
    act.data()[k] = 0.5 * z * (1.0 + std::tanh(gelu_inner(z)));
  }
  for (std::size_t k = 0; k < x1.size(); ++k) y.data()[k] = act.data()[k] * x2.data()[k];
  return y;
}

GluGrads<double> geglu_backward(const Matrix<double>& dy_in, const Matrix<double>& x1_in,
                                const Matrix<double>& x2_in, AllocationLedger* ledger) {
  Matrix<double> dy_store;
  const auto& dy = contiguous_ref(dy_in, dy_store);
  Matrix<double> x1_store;
  const auto& x1 = contiguous_ref(x1_in, x1_store);
  Matrix<double> x2_store;
  const auto& x2 = contiguous_ref(x2_in, x2_store);
  require_same(x1, x2, "geglu_backward");
  require_same(dy, x1, "geglu_backward");
  GluGrads<double> g{Matrix<double>(x1.rows(), x1.cols()), Matrix<double>(x1.rows(), x1.cols())};
  record_output(ledger, g.dx1);
  record_output(ledger, g.dx2);
  for (std::size_t k = 0; k < x1.size(); ++k) {
    const double z = x1.data()[k];
    const double t = std::tanh(gelu_inner(z));
    const double du = std::sqrt(2.0 / std::numbers::pi) * (1.0 + 3.0 * kGeluCubic * z * z);
    // d/dz [0.5 z (1 + tanh u(z))]
    const double dact = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du;
    g.dx1.data()[k] = dy.data()[k] * x2.data()[k] * dact;
    g.dx2.data()[k] = dy.data()[k] * 0.5 * z * (1.0 + t);
  }
  return g;
}

CrossEntropyOut cross_entropy(const Matrix<double>& logits_in, std::span<const std::int64_t> targets,
                              Reduction reduction, AllocationLedger* ledger) {
  Matrix<double> logits_store;
  const auto& logits = contiguous_ref(logits_in, logits_store);
  const std::size_t rows = logits.rows();
  const std::size_t vocab = logits.cols();
  require(targets.size() == rows, "cross_entropy: one target per row");
  for (std::size_t i = 0; i < rows; ++i)
    FK_CHECK(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < vocab, ErrorCode::TargetOutOfRange,
             "target out of range at row " + std::to_string(i));

  Matrix<double> probs(rows, vocab);
  LedgerScope probs_scope(ledger, tags::kProbs, probs.bytes());
  CrossEntropyOut out{0.0, Matrix<double>(rows, vocab)};
  if (ledger) ledger->record(tags::kLogitsGrad, out.grad.bytes(), AllocKind::Alloc);

  const double scale = reduction == Reduction::Mean ? 1.0 / static_cast<double>(rows) : 1.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs(i, j) = std::exp(logits(i, j) - mx);
      sum += probs(i, j);
    }
    for (std::size_t j = 0; j < vocab; ++j) probs(i, j) /= sum;
    const std::size_t t = static_cast<std::size_t>(targets[i]);
    out.loss += (mx + std::log(sum)) - logits(i, t);
    for (std::size_t j = 0; j < vocab; ++j) out.grad(i, j) = (probs(i, j) - (j == t ? 1.0 : 0.0)) * scale;
  }
  if (reduction == Reduction::Mean) out.loss /= static_cast<double>(rows);
  return out;
}

Matrix<double> matmul(const Matrix<double>& a_in, const Matrix<double>& b_in) {
  require(a_in.cols() == b_in.rows(), "matmul: inner dimensions");
  Matrix<double> a_store;
  const auto& a = contiguous_ref(a_in, a_store);
  Matrix<double> b_store;
  const auto& b = contiguous_ref(b_in, b_store);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix<double> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.data()[i * k + p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Matrix<double> matmul_transposed_b(const Matrix<double>& a_in, const Matrix<double>& b_in) {
  require(a_in.cols() == b_in.cols(), "matmul_transposed_b: inner dimensions");
  Matrix<double> a_store;
  const auto& a = contiguous_ref(a_in, a_store);
  Matrix<double> b_store;
  const auto& b = contiguous_ref(b_in, b_store);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Matrix<double> c(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double* arow = a.data() + i * k;
      const double* brow = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c.data()[i * n + j] = acc;
    }
  return c;
}

Matrix<double> matmul_transposed_a(const Matrix<double>& a_in, const Matrix<double>& b_in) {
  require(a_in.rows() == b_in.rows(), "matmul_transposed_a: inner dimensions");
  Matrix<double> a_store;
  const auto& a = contiguous_ref(a_in, a_store);
  Matrix<double> b_store;
  const auto& b = contiguous_ref(b_in, b_store);
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Matrix<double> c(m, n);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a.data()[p * m + i];
      const double* brow = b.data() + p * n;
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return c;
}

LinearCrossEntropyOut linear_cross_entropy(const Matrix<double>& hidden, const Matrix<double>& weight,
                                           std::span<const std::int64_t> targets, Reduction reduction,
                                           AllocationLedger* ledger) {
  require(hidden.cols() == weight.rows(), "linear_cross_entropy: hidden cols != weight rows");
  const Matrix<double> logits = matmul(hidden, weight);
  LedgerScope logits_scope(ledger, tags::kLogits, logits.bytes());
  auto ce = cross_entropy(logits, targets, reduction, ledger);
  LinearCrossEntropyOut out{ce.loss, matmul_transposed_b(ce.grad, weight), matmul_transposed_a(hidden, ce.grad)};
  record_output(ledger, out.dhidden);
  record_output(ledger, out.dweight);
  if (ledger) ledger->record(tags::kLogitsGrad, ce.grad.bytes(), AllocKind::Free);
  return out;
}

}  // namespace ref
}  // namespace fk
