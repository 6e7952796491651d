#include "fk/fused_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ce_rows.hpp"

namespace fk {
namespace {

void check_same_shape(std::size_t r0, std::size_t c0, std::size_t r1, std::size_t c1, const char* what) {
  FK_CHECK(r0 == r1 && c0 == c1, ErrorCode::ShapeMismatch,
           std::string(what) + ": " + std::to_string(r0) + "x" + std::to_string(c0) + " vs " +
               std::to_string(r1) + "x" + std::to_string(c1));
}

template <Real T>
void guard(const OpContext& ctx, const Matrix<T>& m, const char* what) {
  if (ctx.enforce_contiguity) assert_contiguous(m, what);
}

template <Real T>
void note_alloc(const OpContext& ctx, std::string_view tag, const Matrix<T>& m) {
  if (ctx.ledger) ctx.ledger->record(tag, m.bytes(), AllocKind::Alloc);
}

template <Real T>
void note_alloc(const OpContext& ctx, std::string_view tag, const std::vector<T>& v) {
  if (ctx.ledger) ctx.ledger->record(tag, v.size() * sizeof(T), AllocKind::Alloc);
}

// Sums rows [lo, hi) of `partials` into row lo by recursive halving. The
// combine order depends only on the row count, so a batch made of two equal
// halves sums to exactly twice one half.
template <Real T>
void pairwise_row_reduce(Matrix<T>& partials, std::size_t lo, std::size_t hi) {
  if (hi - lo <= 1) return;
  const std::size_t mid = lo + (hi - lo) / 2;
  pairwise_row_reduce(partials, lo, mid);
  pairwise_row_reduce(partials, mid, hi);
  auto dst = partials.row(lo);
  const auto src = partials.row(mid);
  for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
}

template <Real T>
std::vector<T> reduce_partials(Matrix<T>& partials) {
  pairwise_row_reduce(partials, 0, partials.rows());
  const auto first = partials.row(0);
  return {first.begin(), first.end()};
}

}  // namespace

// ---------------------------------------------------------------- RMSNorm

template <Real T>
NormForward<T> rmsnorm_forward(const Matrix<T>& x, std::span<const T> gamma, T eps, const OpContext& ctx) {
  guard(ctx, x, "rmsnorm x");
  const std::size_t n = x.cols();
  FK_CHECK(gamma.size() == n, ErrorCode::ShapeMismatch, "rmsnorm gamma length != cols");
  FK_CHECK(eps >= T(0), ErrorCode::InvalidArgument, "eps must be >= 0");

  NormForward<T> out{Matrix<T>(x.rows(), n), {std::vector<T>(x.rows()), {}}};
  note_alloc(ctx, tags::kOutput, out.y);
  note_alloc(ctx, tags::kResidual, out.res.inv_rms);

  for_each_row_block(x.rows(), ctx.threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto xr = x.row(i);
      T sum_sq = 0;
      for (T v : xr) sum_sq += v * v;
      const T inv = T(1) / std::sqrt(sum_sq / T(n) + eps);
      out.res.inv_rms[i] = inv;
      auto yr = out.y.row(i);
      for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] * inv * gamma[j];
    }
  });
  return out;
}

template <Real T>
RmsNormGrads<T> rmsnorm_backward(const Matrix<T>& dy, const Matrix<T>& x, const NormResiduals<T>& res,
                                 std::span<const T> gamma, const OpContext& ctx) {
  guard(ctx, dy, "rmsnorm dy");
  guard(ctx, x, "rmsnorm x");
  check_same_shape(dy.rows(), dy.cols(), x.rows(), x.cols(), "rmsnorm_backward dy/x");
  const std::size_t n = x.cols();
  FK_CHECK(gamma.size() == n, ErrorCode::ShapeMismatch, "rmsnorm gamma length != cols");
  FK_CHECK(res.inv_rms.size() == x.rows(), ErrorCode::ShapeMismatch, "residuals do not match rows");

  RmsNormGrads<T> g{Matrix<T>(x.rows(), n), {}};
  Matrix<T> partials(x.rows(), n);
  note_alloc(ctx, tags::kGrad, g.dx);
  LedgerScope partial_scope(ctx.ledger, tags::kPartials, partials.bytes());

  for_each_row_block(x.rows(), ctx.threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto xr = x.row(i);
      const auto dyr = dy.row(i);
      const T inv = res.inv_rms[i];
      // x_hat^T (dy * gamma) / n: one scalar per row
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += (xr[j] * inv) * (dyr[j] * gamma[j]);
      dot /= T(n);
      auto dxr = g.dx.row(i);
      auto pr = partials.row(i);
      for (std::size_t j = 0; j < n; ++j) {
        const T xhat = xr[j] * inv;
        dxr[j] = inv * (dyr[j] * gamma[j] - dot * xhat);
        pr[j] = dyr[j] * xhat;
      }
    }
  });
  g.dgamma = reduce_partials(partials);
  note_alloc(ctx, tags::kGrad, g.dgamma);
  return g;
}

// ---------------------------------------------------------------- LayerNorm

template <Real T>
NormForward<T> layernorm_forward(const Matrix<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps,
                                 const OpContext& ctx) {
  guard(ctx, x, "layernorm x");
  const std::size_t n = x.cols();
  FK_CHECK(gamma.size() == n && beta.size() == n, ErrorCode::ShapeMismatch,
           "layernorm gamma/beta length != cols");
  FK_CHECK(eps >= T(0), ErrorCode::InvalidArgument, "eps must be >= 0");

  NormForward<T> out{Matrix<T>(x.rows(), n), {std::vector<T>(x.rows()), std::vector<T>(x.rows())}};
  note_alloc(ctx, tags::kOutput, out.y);
  note_alloc(ctx, tags::kResidual, out.res.inv_rms);
  note_alloc(ctx, tags::kResidual, out.res.mean);

  for_each_row_block(x.rows(), ctx.threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto xr = x.row(i);
      T sum = 0;
      for (T v : xr) sum += v;
      const T mean = sum / T(n);
      T sum_sq = 0;
      for (T v : xr) sum_sq += (v - mean) * (v - mean);
      const T inv = T(1) / std::sqrt(sum_sq / T(n) + eps);
      out.res.mean[i] = mean;
      out.res.inv_rms[i] = inv;
      auto yr = out.y.row(i);
      for (std::size_t j = 0; j < n; ++j) yr[j] = (xr[j] - mean) * inv * gamma[j] + beta[j];
    }
  });
  return out;
}

template <Real T>
LayerNormGrads<T> layernorm_backward(const Matrix<T>& dy, const Matrix<T>& x, const NormResiduals<T>& res,
                                     std::span<const T> gamma, const OpContext& ctx) {
  guard(ctx, dy, "layernorm dy");
  guard(ctx, x, "layernorm x");
  check_same_shape(dy.rows(), dy.cols(), x.rows(), x.cols(), "layernorm_backward dy/x");
  const std::size_t n = x.cols();
  FK_CHECK(gamma.size() == n, ErrorCode::ShapeMismatch, "layernorm gamma length != cols");
  FK_CHECK(res.inv_rms.size() == x.rows() && res.mean.size() == x.rows(), ErrorCode::ShapeMismatch,
           "residuals do not match rows");

  LayerNormGrads<T> g{Matrix<T>(x.rows(), n), {}, {}};
  Matrix<T> gamma_partials(x.rows(), n);
  Matrix<T> beta_partials(x.rows(), n);
  note_alloc(ctx, tags::kGrad, g.dx);
  LedgerScope gp_scope(ctx.ledger, tags::kPartials, gamma_partials.bytes());
  LedgerScope bp_scope(ctx.ledger, tags::kPartials, beta_partials.bytes());

  for_each_row_block(x.rows(), ctx.threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto xr = x.row(i);
      const auto dyr = dy.row(i);
      const T mean = res.mean[i];
      const T inv = res.inv_rms[i];
      T xg = 0;  // x_tilde^T (dy * gamma)
      T g1 = 0;  // dy^T gamma
      for (std::size_t j = 0; j < n; ++j) {
        const T g_j = dyr[j] * gamma[j];
        xg += (xr[j] - mean) * inv * g_j;
        g1 += g_j;
      }
      xg /= T(n);
      g1 /= T(n);
      auto dxr = g.dx.row(i);
      auto gpr = gamma_partials.row(i);
      auto bpr = beta_partials.row(i);
      for (std::size_t j = 0; j < n; ++j) {
        const T xt = (xr[j] - mean) * inv;
        dxr[j] = inv * (dyr[j] * gamma[j] - xg * xt - g1);
        gpr[j] = dyr[j] * xt;
        bpr[j] = dyr[j];
      }
    }
  });
  g.dgamma = reduce_partials(gamma_partials);
  g.dbeta = reduce_partials(beta_partials);
  note_alloc(ctx, tags::kGrad, g.dgamma);
  note_alloc(ctx, tags::kGrad, g.dbeta);
  return g;
}

// ---------------------------------------------------------------- RoPE

void RotationSpec::validate(std::size_t rows, std::size_t cols) const {
  FK_CHECK(head_dim >= 2 && head_dim % 2 == 0, ErrorCode::OddHeadDim,
           "head_dim must be even, got " + std::to_string(head_dim));
  FK_CHECK(cols % head_dim == 0, ErrorCode::ShapeMismatch,
           "cols " + std::to_string(cols) + " is not a multiple of head_dim " + std::to_string(head_dim));
  FK_CHECK(thetas.size() == head_dim / 2, ErrorCode::ShapeMismatch, "need head_dim/2 thetas");
  FK_CHECK(positions.size() == rows, ErrorCode::ShapeMismatch, "need one position per row");
  for (double t : thetas) FK_CHECK(t > 0.0, ErrorCode::InvalidArgument, "thetas must be positive");
}

std::vector<double> default_rope_thetas(std::size_t head_dim, double base) {
  FK_CHECK(head_dim >= 2 && head_dim % 2 == 0, ErrorCode::OddHeadDim,
           "head_dim must be even, got " + std::to_string(head_dim));
  std::vector<double> th(head_dim / 2);
  for (std::size_t i = 0; i < th.size(); ++i)
    th[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  return th;
}

namespace {

// direction = +1 applies R, -1 applies R^T. q and k share one cos/sin table per row.
template <Real T>
RopePair<T> rope_apply(const Matrix<T>& q, const Matrix<T>& k, const RotationSpec& spec, T direction,
                       const OpContext& ctx) {
  FK_CHECK(q.rows() == k.rows(), ErrorCode::ShapeMismatch, "q and k must have the same row count");
  spec.validate(q.rows(), q.cols());
  spec.validate(k.rows(), k.cols());
  const std::size_t d = spec.head_dim;
  const std::size_t half = d / 2;

  RopePair<T> out{Matrix<T>(q.rows(), q.cols()), Matrix<T>(k.rows(), k.cols())};
  note_alloc(ctx, tags::kOutput, out.q);
  note_alloc(ctx, tags::kOutput, out.k);

  for_each_row_block(q.rows(), ctx.threads, [&](std::size_t b, std::size_t e) {
    std::vector<T> cos_t(half);
    std::vector<T> sin_t(half);
    for (std::size_t r = b; r < e; ++r) {
      const double m = static_cast<double>(spec.positions[r]);
      for (std::size_t i = 0; i < half; ++i) {
        const double angle = m * spec.thetas[i];
        cos_t[i] = static_cast<T>(std::cos(angle));
        sin_t[i] = direction * static_cast<T>(std::sin(angle));
      }
      auto rotate = [&](std::span<const T> src, std::span<T> dst) {
        for (std::size_t h = 0; h < src.size(); h += d) {
          for (std::size_t i = 0; i < half; ++i) {
            const T lo = src[h + i];
            const T hi = src[h + i + half];
            dst[h + i] = lo * cos_t[i] - hi * sin_t[i];
            dst[h + i + half] = lo * sin_t[i] + hi * cos_t[i];
          }
        }
      };
      rotate(q.row(r), out.q.row(r));
      rotate(k.row(r), out.k.row(r));
    }
  });
  return out;
}

}  // namespace

template <Real T>
RopePair<T> rope_forward(const Matrix<T>& q, const Matrix<T>& k, const RotationSpec& spec, const OpContext& ctx) {
  guard(ctx, q, "rope q");
  guard(ctx, k, "rope k");
  return rope_apply(q, k, spec, T(1), ctx);
}

template <Real T>
RopePair<T> rope_backward(const Matrix<T>& dq_rot, const Matrix<T>& dk_rot, const RotationSpec& spec,
                          const OpContext& ctx) {
  guard(ctx, dq_rot, "rope dq");
  guard(ctx, dk_rot, "rope dk");
  return rope_apply(dq_rot, dk_rot, spec, T(-1), ctx);
}

// ---------------------------------------------------------------- GLU

template <Real T>
T gelu_tanh(T z) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * z * (T(1) + std::tanh(k * (z + T(0.044715) * z * z * z)));
}

template <Real T>
T gelu_tanh_grad(T z) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T k_half = static_cast<T>(std::sqrt(1.0 / (2.0 * std::numbers::pi)));
  const T t = std::tanh(k * (z + T(0.044715) * z * z * z));
  return T(0.5) * (T(1) + t) + k_half * z * (T(1) - t * t) * (T(1) + T(0.134145) * z * z);
}

namespace {

template <Real T, typename Fn>
Matrix<T> glu_forward(const Matrix<T>& x1, const Matrix<T>& x2, const OpContext& ctx, const char* name,
                      Fn&& act) {
  guard(ctx, x1, name);
  guard(ctx, x2, name);
  check_same_shape(x1.rows(), x1.cols(), x2.rows(), x2.cols(), name);
  Matrix<T> y(x1.rows(), x1.cols());
  note_alloc(ctx, tags::kOutput, y);
  const std::size_t n = x1.cols();
  for_each_row_block(x1.rows(), ctx.threads, [&](std::size_t b, std::size_t e) {
    const T* a = x1.data() + flat_offset(b, 0, n);
    const T* v = x2.data() + flat_offset(b, 0, n);
    T* out = y.data() + flat_offset(b, 0, n);
    for (std::size_t k = 0, len = (e - b) * n; k < len; ++k) out[k] = act(a[k]) * v[k];
  });
  return y;
}

// grad_fn(z) -> {d act/dz, act(z)}
template <Real T, typename Fn>
GluGrads<T> glu_backward(const Matrix<T>& dy, const Matrix<T>& x1, const Matrix<T>& x2, const OpContext& ctx,
                         const char* name, Fn&& grad_fn) {
  guard(ctx, dy, name);
  guard(ctx, x1, name);
  guard(ctx, x2, name);
  check_same_shape(x1.rows(), x1.cols(), x2.rows(), x2.cols(), name);
  check_same_shape(dy.rows(), dy.cols(), x1.rows(), x1.cols(), name);
  GluGrads<T> g{Matrix<T>(x1.rows(), x1.cols()), Matrix<T>(x1.rows(), x1.cols())};
  note_alloc(ctx, tags::kGrad, g.dx1);
  note_alloc(ctx, tags::kGrad, g.dx2);
  const std::size_t n = x1.cols();
  for_each_row_block(x1.rows(), ctx.threads, [&](std::size_t b, std::size_t e) {
    const std::size_t off = flat_offset(b, 0, n);
    const T* a = x1.data() + off;
    const T* v = x2.data() + off;
    const T* d = dy.data() + off;
    T* d1 = g.dx1.data() + off;
    T* d2 = g.dx2.data() + off;
    for (std::size_t k = 0, len = (e - b) * n; k < len; ++k) {
      const auto [slope, act] = grad_fn(a[k]);
      d1[k] = d[k] * slope * v[k];
      d2[k] = d[k] * act;
    }
  });
  return g;
}

}  // namespace

template <Real T>
Matrix<T> swiglu_forward(const Matrix<T>& x1, const Matrix<T>& x2, const OpContext& ctx) {
  return glu_forward(x1, x2, ctx, "swiglu", [](T z) { return z * sigmoid(z); });
}

template <Real T>
GluGrads<T> swiglu_backward(const Matrix<T>& dy, const Matrix<T>& x1, const Matrix<T>& x2, const OpContext& ctx) {
  return glu_backward(dy, x1, x2, ctx, "swiglu", [](T z) {
    const T s = sigmoid(z);
    const T silu = z * s;
#ifdef FK_MUTATE_SWIGLU_BACKWARD
    // Deliberately broken derivative used to prove the correctness suite catches it.
    return std::pair<T, T>{s + silu, silu};
#else
    return std::pair<T, T>{s + silu * (T(1) - s), silu};
#endif
  });
}

template <Real T>
Matrix<T> geglu_forward(const Matrix<T>& x1, const Matrix<T>& x2, const OpContext& ctx) {
  return glu_forward(x1, x2, ctx, "geglu", [](T z) { return gelu_tanh(z); });
}

template <Real T>
GluGrads<T> geglu_backward(const Matrix<T>& dy, const Matrix<T>& x1, const Matrix<T>& x2, const OpContext& ctx) {
  return glu_backward(dy, x1, x2, ctx, "geglu", [](T z) {
    // One tanh shared by the activation and its derivative.
    const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T k_half = static_cast<T>(std::sqrt(1.0 / (2.0 * std::numbers::pi)));
    const T t = std::tanh(k * (z + T(0.044715) * z * z * z));
    const T slope = T(0.5) * (T(1) + t) + k_half * z * (T(1) - t * t) * (T(1) + T(0.134145) * z * z);
    return std::pair<T, T>{slope, T(0.5) * z * (T(1) + t)};
  });
}

// ---------------------------------------------------------------- CrossEntropy

template <Real T>
CEResult cross_entropy(Matrix<T>& logits, std::span<const std::int64_t> targets, Reduction reduction,
                       const OpContext& ctx) {
  guard(ctx, logits, "cross_entropy logits");
  const std::size_t rows = logits.rows();
  FK_CHECK(targets.size() == rows, ErrorCode::ShapeMismatch, "need one target per row");
  detail::check_targets(targets, logits.cols());
  const T scale = reduction == Reduction::Mean ? T(1) / static_cast<T>(rows) : T(1);
  double loss = detail::ce_rows(logits.data(), rows, logits.cols(), targets, scale, ctx.threads);
  if (reduction == Reduction::Mean) loss /= static_cast<double>(rows);
  return {loss, true};
}

// ---------------------------------------------------------------- instantiations

#define FK_INSTANTIATE(T)                                                                                   \
  template NormForward<T> rmsnorm_forward<T>(const Matrix<T>&, std::span<const T>, T, const OpContext&);    \
  template RmsNormGrads<T> rmsnorm_backward<T>(const Matrix<T>&, const Matrix<T>&, const NormResiduals<T>&, \
                                               std::span<const T>, const OpContext&);                       \
  template NormForward<T> layernorm_forward<T>(const Matrix<T>&, std::span<const T>, std::span<const T>, T, \
                                               const OpContext&);                                           \
  template LayerNormGrads<T> layernorm_backward<T>(const Matrix<T>&, const Matrix<T>&,                      \
                                                   const NormResiduals<T>&, std::span<const T>,             \
                                                   const OpContext&);                                       \
  template RopePair<T> rope_forward<T>(const Matrix<T>&, const Matrix<T>&, const RotationSpec&,             \
                                       const OpContext&);                                                   \
  template RopePair<T> rope_backward<T>(const Matrix<T>&, const Matrix<T>&, const RotationSpec&,            \
                                        const OpContext&);                                                  \
  template Matrix<T> swiglu_forward<T>(const Matrix<T>&, const Matrix<T>&, const OpContext&);               \
  template GluGrads<T> swiglu_backward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,             \
                                          const OpContext&);                                                \
  template Matrix<T> geglu_forward<T>(const Matrix<T>&, const Matrix<T>&, const OpContext&);                \
  template GluGrads<T> geglu_backward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,              \
                                         const OpContext&);                                                 \
  template CEResult cross_entropy<T>(Matrix<T>&, std::span<const std::int64_t>, Reduction, const OpContext&); \
  template T gelu_tanh<T>(T);                                                                               \
  template T gelu_tanh_grad<T>(T);

FK_INSTANTIATE(float)
FK_INSTANTIATE(double)

#undef FK_INSTANTIATE

}  // namespace fk
