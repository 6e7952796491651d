#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fk/fused_ops.hpp"
#include "fk/reference.hpp"

using namespace fk;

namespace {

template <Real T = double>
Matrix<T> rand_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  std::vector<T> v(r * c);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Matrix<T>(r, c, std::move(v));
}

template <Real T = double>
std::vector<T> rand_vec(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

template <Real T>
Matrix<T> duplicate_rows(const Matrix<T>& m) {
  std::vector<T> v(m.flat().begin(), m.flat().end());
  v.insert(v.end(), m.flat().begin(), m.flat().end());
  return Matrix<T>(2 * m.rows(), m.cols(), std::move(v));
}

template <Real T>
Matrix<T> permute_rows(const Matrix<T>& m, const std::vector<std::size_t>& perm) {
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(perm[i], j);
  return out;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected fk::Error";
  return ErrorCode::InvalidArgument;
}

const std::vector<double> kOnes2 = {1.0, 1.0};

}  // namespace

// ---------------------------------------------------------------- RMSNorm

TEST(RmsNorm, ThreeFour) {
  const auto f = rmsnorm_forward<double>(Matrix<double>(1, 2, {3, 4}), kOnes2, 0.0);
  EXPECT_NEAR(f.y(0, 0), 0.8485281374238570, 1e-12);
  EXPECT_NEAR(f.y(0, 1), 1.1313708498984760, 1e-12);
  EXPECT_NEAR(f.res.inv_rms[0], 1.0 / std::sqrt(12.5), 1e-15);
}

TEST(RmsNorm, ConstantRowAndZeroRow) {
  const auto f = rmsnorm_forward<double>(Matrix<double>(1, 4, {5, 5, 5, 5}), std::vector<double>(4, 1.0), 0.0);
  for (double v : f.y.flat()) EXPECT_DOUBLE_EQ(v, 1.0);
  const auto z = rmsnorm_forward<double>(Matrix<double>(1, 3), std::vector<double>{2, -1, 7}, 1e-6);
  for (double v : z.y.flat()) EXPECT_EQ(v, 0.0);
}

TEST(RmsNorm, ZeroUpstreamGivesZeroGrads) {
  std::mt19937_64 rng(1);
  const auto x = rand_matrix(rng, 3, 5);
  const auto g = rand_vec(rng, 5);
  const auto f = rmsnorm_forward<double>(x, g);
  const auto b = rmsnorm_backward<double>(Matrix<double>(3, 5), x, f.res, g);
  for (double v : b.dx.flat()) EXPECT_EQ(v, 0.0);
  for (double v : b.dgamma) EXPECT_EQ(v, 0.0);
}

TEST(RmsNorm, SingleRowMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const auto x = rand_matrix(rng, 1, 4);
  const auto gamma = rand_vec(rng, 4);
  const auto c = rand_matrix(rng, 1, 4);
  const auto f = rmsnorm_forward<double>(x, gamma);
  const auto b = rmsnorm_backward<double>(c, x, f.res, gamma);
  const auto numeric = fd_gradient(
      [&](std::span<const double> p) {
        const auto y = ref::rmsnorm(Matrix<double>(1, 4, {p.begin(), p.end()}), gamma, kDefaultNormEps);
        double s = 0.0;
        for (std::size_t j = 0; j < 4; ++j) s += c.flat()[j] * y.flat()[j];
        return s;
      },
      x.flat());
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(b.dx.flat()[j], numeric[j], 1e-6);
}

TEST(RmsNorm, DuplicatedBatchDoublesDgammaExactly) {
  std::mt19937_64 rng(3);
  for (std::size_t rows : {1, 3, 7, 16}) {
    const auto x = rand_matrix<float>(rng, rows, 33);
    const auto dy = rand_matrix<float>(rng, rows, 33);
    const auto g = rand_vec<float>(rng, 33);
    const auto one = rmsnorm_backward<float>(dy, x, rmsnorm_forward<float>(x, g).res, g);
    const auto x2 = duplicate_rows(x);
    const auto two = rmsnorm_backward<float>(duplicate_rows(dy), x2, rmsnorm_forward<float>(x2, g).res, g);
    for (std::size_t j = 0; j < 33; ++j) ASSERT_EQ(two.dgamma[j], 2.0f * one.dgamma[j]);
  }
}

// ---------------------------------------------------------------- LayerNorm

TEST(LayerNorm, Examples) {
  const auto a = layernorm_forward<double>(Matrix<double>(1, 2, {1, -1}), kOnes2, std::vector<double>{0, 0}, 0.0);
  EXPECT_NEAR(a.y(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(a.y(0, 1), -1.0, 1e-15);
  const auto b =
      layernorm_forward<double>(Matrix<double>(1, 2, {0, 2}), std::vector<double>{3, 3}, std::vector<double>{1, 1}, 0.0);
  EXPECT_NEAR(b.y(0, 0), -2.0, 1e-15);
  EXPECT_NEAR(b.y(0, 1), 4.0, 1e-15);
  const std::vector<double> beta = {0.5, -0.25, 2.0};
  const auto c = layernorm_forward<double>(Matrix<double>(1, 3, {4, 4, 4}), std::vector<double>{9, 9, 9}, beta, 1e-6);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(c.y(0, j), beta[j]);
}

TEST(LayerNorm, DbetaIsRowCountForUnitUpstream) {
  std::mt19937_64 rng(4);
  const auto x = rand_matrix(rng, 5, 6);
  const auto g = rand_vec(rng, 6);
  const auto f = layernorm_forward<double>(x, g, rand_vec(rng, 6));
  Matrix<double> dy(5, 6);
  dy.fill(1.0);
  const auto b = layernorm_backward<double>(dy, x, f.res, g);
  for (double v : b.dbeta) EXPECT_EQ(v, 5.0);
  const auto z = layernorm_backward<double>(Matrix<double>(5, 6), x, f.res, g);
  for (double v : z.dx.flat()) EXPECT_EQ(v, 0.0);
  for (double v : z.dgamma) EXPECT_EQ(v, 0.0);
  for (double v : z.dbeta) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, DuplicatedBatchDoublesExactly) {
  std::mt19937_64 rng(5);
  const auto x = rand_matrix<float>(rng, 11, 20);
  const auto dy = rand_matrix<float>(rng, 11, 20);
  const auto g = rand_vec<float>(rng, 20);
  const auto bta = rand_vec<float>(rng, 20);
  const auto one = layernorm_backward<float>(dy, x, layernorm_forward<float>(x, g, bta).res, g);
  const auto x2 = duplicate_rows(x);
  const auto two = layernorm_backward<float>(duplicate_rows(dy), x2, layernorm_forward<float>(x2, g, bta).res, g);
  for (std::size_t j = 0; j < 20; ++j) {
    ASSERT_EQ(two.dgamma[j], 2.0f * one.dgamma[j]);
    ASSERT_EQ(two.dbeta[j], 2.0f * one.dbeta[j]);
  }
}

// ---------------------------------------------------------------- RoPE

TEST(Rope, PositionZeroIsIdentity) {
  std::mt19937_64 rng(6);
  const auto q = rand_matrix(rng, 2, 8);
  const auto k = rand_matrix(rng, 2, 8);
  const RotationSpec spec{8, default_rope_thetas(8), {0, 0}};
  const auto r = rope_forward<double>(q, k, spec);
  const auto b = rope_backward<double>(q, k, spec);
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_EQ(r.q.flat()[i], q.flat()[i]);
    EXPECT_EQ(r.k.flat()[i], k.flat()[i]);
    EXPECT_EQ(b.q.flat()[i], q.flat()[i]);
  }
}

TEST(Rope, UnitAngle) {
  const RotationSpec spec{2, {1.0}, {1}};
  const auto r = rope_forward<double>(Matrix<double>(1, 2, {1, 0}), Matrix<double>(1, 2, {0, 1}), spec);
  EXPECT_NEAR(r.q(0, 0), 0.5403023058681398, 1e-15);
  EXPECT_NEAR(r.q(0, 1), 0.8414709848078965, 1e-15);
  EXPECT_NEAR(r.k(0, 0), -0.8414709848078965, 1e-15);
  EXPECT_NEAR(r.k(0, 1), 0.5403023058681398, 1e-15);
}

TEST(Rope, PreservesNormAndRoundTrips) {
  std::mt19937_64 rng(7);
  const std::size_t d = 16, heads = 3;
  const auto q = rand_matrix(rng, 4, d * heads);
  const auto k = rand_matrix(rng, 4, d * heads);
  const RotationSpec spec{d, default_rope_thetas(d), {3, 100, 2047, 9}};
  const auto r = rope_forward<double>(q, k, spec);
  for (std::size_t i = 0; i < 4; ++i) {
    double nx = 0, ny = 0;
    for (std::size_t j = 0; j < d * heads; ++j) {
      nx += q(i, j) * q(i, j);
      ny += r.q(i, j) * r.q(i, j);
    }
    EXPECT_NEAR(std::sqrt(nx), std::sqrt(ny), 1e-6);
  }
  const auto back = rope_backward<double>(r.q, r.k, spec);
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_NEAR(back.q.flat()[i], q.flat()[i], 1e-6);
    EXPECT_NEAR(back.k.flat()[i], k.flat()[i], 1e-6);
  }
}

TEST(Rope, Errors) {
  const RotationSpec odd{3, {1.0}, {0}};
  EXPECT_EQ(code_of([&] { rope_forward<double>(Matrix<double>(1, 3), Matrix<double>(1, 3), odd); }),
            ErrorCode::OddHeadDim);
  const RotationSpec spec{2, {1.0}, {0, 1, 2}};
  const auto strided = Matrix<double>::column_major_view(Matrix<double>(3, 2, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(code_of([&] { rope_forward<double>(strided, Matrix<double>(3, 2), spec); }),
            ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { rope_backward<double>(strided, Matrix<double>(3, 2), spec); }),
            ErrorCode::NonContiguousInput);
}

// ---------------------------------------------------------------- GLU

TEST(SwiGlu, Examples) {
  EXPECT_NEAR(swiglu_forward<double>(Matrix<double>(1, 1, {1.0}), Matrix<double>(1, 1, {2.0}))(0, 0),
              1.4621171572600098, 1e-15);
  const auto y = swiglu_forward<double>(Matrix<double>(1, 3, {0, 1, -2}), Matrix<double>(1, 3, {5, 0, 0}));
  for (double v : y.flat()) EXPECT_EQ(v, 0.0);
  const auto g = swiglu_backward<double>(Matrix<double>(1, 1, {1.0}), Matrix<double>(1, 1, {0.0}),
                                         Matrix<double>(1, 1, {3.0}));
  EXPECT_EQ(g.dx1(0, 0), 1.5);
  EXPECT_EQ(g.dx2(0, 0), 0.0);
}

TEST(GeGlu, Examples) {
  EXPECT_NEAR(geglu_forward<double>(Matrix<double>(1, 1, {1.0}), Matrix<double>(1, 1, {1.0}))(0, 0),
              0.8411919906082768, 1e-15);
  EXPECT_NEAR(geglu_forward<double>(Matrix<double>(1, 1, {10.0}), Matrix<double>(1, 1, {1.0}))(0, 0), 10.0, 1e-5);
  EXPECT_EQ(geglu_forward<double>(Matrix<double>(1, 1, {0.0}), Matrix<double>(1, 1, {4.0}))(0, 0), 0.0);
  const auto g = geglu_backward<double>(Matrix<double>(1, 1, {1.0}), Matrix<double>(1, 1, {0.0}),
                                        Matrix<double>(1, 1, {3.0}));
  EXPECT_EQ(g.dx1(0, 0), 1.5);
  EXPECT_EQ(g.dx2(0, 0), 0.0);
}

TEST(GeGlu, TanhDerivativeIsExact) {
  // d/dz of the tanh approximation at z = 0.7, evaluated at high precision offline.
  EXPECT_NEAR(gelu_tanh_grad<double>(0.7), 0.9763572186561040, 1e-14);
}

TEST(Glu, ZeroUpstream) {
  std::mt19937_64 rng(8);
  const auto a = rand_matrix(rng, 4, 8);
  const auto b = rand_matrix(rng, 4, 8);
  for (const auto& g : {swiglu_backward<double>(Matrix<double>(4, 8), a, b), geglu_backward<double>(Matrix<double>(4, 8), a, b)}) {
    for (double v : g.dx1.flat()) EXPECT_EQ(v, 0.0);
    for (double v : g.dx2.flat()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Glu, ShapeMismatch) {
  EXPECT_EQ(code_of([] { swiglu_forward<float>(Matrix<float>(2, 3), Matrix<float>(3, 2)); }), ErrorCode::ShapeMismatch);
}

// ---------------------------------------------------------------- CE

TEST(CrossEntropy, UniformLogits) {
  Matrix<double> logits(1, 4);
  const auto r = cross_entropy<double>(logits, std::vector<std::int64_t>{2}, Reduction::Sum);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-7);
  EXPECT_TRUE(r.grad_in_logits);
  const std::vector<double> want = {0.25, 0.25, -0.75, 0.25};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(logits(0, j), want[j], 1e-15);
}

TEST(CrossEntropy, TwoClass) {
  Matrix<double> logits(1, 2, {1.0, 2.0});
  const auto r = cross_entropy<double>(logits, std::vector<std::int64_t>{1}, Reduction::Sum);
  EXPECT_NEAR(r.loss, 0.3132616875182228, 1e-15);
  EXPECT_NEAR(logits(0, 0), 0.2689414213699951, 1e-15);
  EXPECT_NEAR(logits(0, 1), -0.2689414213699951, 1e-15);
}

TEST(CrossEntropy, MeanIsSumOverRows) {
  std::mt19937_64 rng(9);
  const auto base = rand_matrix(rng, 2, 7, 3.0);
  const std::vector<std::int64_t> t = {6, 0};
  auto s = base;
  auto m = base;
  const double ls = cross_entropy<double>(s, t, Reduction::Sum).loss;
  const double lm = cross_entropy<double>(m, t, Reduction::Mean).loss;
  EXPECT_EQ(lm, ls / 2.0);
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_EQ(m.flat()[k], s.flat()[k] / 2.0);
}

TEST(CrossEntropy, GradientRowsSumToZero) {
  std::mt19937_64 rng(10);
  auto logits = rand_matrix<float>(rng, 16, 1000, 5.0);
  std::vector<std::int64_t> t(16);
  for (std::size_t i = 0; i < 16; ++i) t[i] = static_cast<std::int64_t>(i * 61 % 1000);
  cross_entropy<float>(logits, t, Reduction::Sum);
  for (std::size_t i = 0; i < 16; ++i) {
    double s = 0.0;
    for (float v : logits.row(i)) s += v;
    EXPECT_NEAR(s, 0.0, 1e-6);
  }
}

TEST(CrossEntropy, ExtremeLogitsStayFinite) {
  Matrix<float> logits(1, 3, {1000.0f, -1000.0f, 0.0f});
  const auto r = cross_entropy<float>(logits, std::vector<std::int64_t>{1}, Reduction::Sum);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_GT(r.loss, 80.0);  // clamped at -log(FLT_MIN)
  for (float v : logits.flat()) EXPECT_TRUE(std::isfinite(v));
}

TEST(CrossEntropy, NoLogitsSizedAllocation) {
  std::mt19937_64 rng(11);
  auto logits = rand_matrix<float>(rng, 8, 300);
  std::vector<std::int64_t> t(8, 299);
  AllocationLedger ledger;
  cross_entropy<float>(logits, t, Reduction::Mean, OpContext{&ledger});
  for (const auto& e : ledger.events()) EXPECT_NE(e.bytes, logits.bytes()) << e.tag;
  EXPECT_EQ(ledger.alloc_count(tags::kLogits), 0u);
}

TEST(CrossEntropy, Errors) {
  Matrix<double> logits(2, 3);
  EXPECT_EQ(code_of([&] { cross_entropy<double>(logits, std::vector<std::int64_t>{0, 3}, Reduction::Sum); }),
            ErrorCode::TargetOutOfRange);
  EXPECT_EQ(code_of([&] { cross_entropy<double>(logits, std::vector<std::int64_t>{0, -1}, Reduction::Sum); }),
            ErrorCode::TargetOutOfRange);
  auto strided = Matrix<double>::column_major_view(Matrix<double>(2, 3));
  EXPECT_EQ(code_of([&] { cross_entropy<double>(strided, std::vector<std::int64_t>{0, 1}, Reduction::Sum); }),
            ErrorCode::NonContiguousInput);
}

// ---------------------------------------------------------------- cross-cutting properties

TEST(Properties, RowPermutationEquivariance) {
  std::mt19937_64 rng(12);
  const std::size_t rows = 9, n = 12;
  std::vector<std::size_t> perm(rows);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  const auto x = rand_matrix(rng, rows, n);
  const auto dy = rand_matrix(rng, rows, n);
  const auto g = rand_vec(rng, n);
  const auto xp = permute_rows(x, perm);
  const auto dyp = permute_rows(dy, perm);

  const auto f = rmsnorm_forward<double>(x, g);
  const auto fp = rmsnorm_forward<double>(xp, g);
  const auto yp = permute_rows(f.y, perm);
  for (std::size_t k = 0; k < yp.size(); ++k) EXPECT_EQ(fp.y.flat()[k], yp.flat()[k]);
  const auto b = rmsnorm_backward<double>(dy, x, f.res, g);
  const auto bp = rmsnorm_backward<double>(dyp, xp, fp.res, g);
  const auto dxp = permute_rows(b.dx, perm);
  for (std::size_t k = 0; k < dxp.size(); ++k) EXPECT_EQ(bp.dx.flat()[k], dxp.flat()[k]);
  for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(bp.dgamma[j], b.dgamma[j], 1e-13);

  const auto x2 = rand_matrix(rng, rows, n);
  const auto s = swiglu_forward<double>(x, x2);
  const auto sp = swiglu_forward<double>(xp, permute_rows(x2, perm));
  const auto sperm = permute_rows(s, perm);
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_EQ(sp.flat()[k], sperm.flat()[k]);
}

TEST(Properties, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(13);
  const auto x = rand_matrix<float>(rng, 37, 64);
  const auto dy = rand_matrix<float>(rng, 37, 64);
  const auto g = rand_vec<float>(rng, 64);
  const auto bta = rand_vec<float>(rng, 64);
  const OpContext one{nullptr, 1};
  const OpContext four{nullptr, 4};
  const auto f1 = layernorm_forward<float>(x, g, bta, 1e-6f, one);
  const auto f4 = layernorm_forward<float>(x, g, bta, 1e-6f, four);
  const auto b1 = layernorm_backward<float>(dy, x, f1.res, g, one);
  const auto b4 = layernorm_backward<float>(dy, x, f4.res, g, four);
  for (std::size_t k = 0; k < x.size(); ++k) {
    ASSERT_EQ(f1.y.flat()[k], f4.y.flat()[k]);
    ASSERT_EQ(b1.dx.flat()[k], b4.dx.flat()[k]);
  }
  for (std::size_t j = 0; j < 64; ++j) ASSERT_EQ(b1.dgamma[j], b4.dgamma[j]);

  auto l1 = rand_matrix<float>(rng, 21, 50);
  auto l4 = l1;
  std::vector<std::int64_t> t(21, 7);
  EXPECT_EQ(cross_entropy<float>(l1, t, Reduction::Mean, one).loss, cross_entropy<float>(l4, t, Reduction::Mean, four).loss);
  for (std::size_t k = 0; k < l1.size(); ++k) ASSERT_EQ(l1.flat()[k], l4.flat()[k]);
}

TEST(Properties, EveryEntryPointRejectsStridedInput) {
  const auto s = Matrix<float>::column_major_view(Matrix<float>(4, 2));
  const Matrix<float> c(4, 2);
  const std::vector<float> g(2, 1.0f);
  const RotationSpec spec{2, {1.0}, {0, 1, 2, 3}};
  NormResiduals<float> res{std::vector<float>(4, 1.0f), std::vector<float>(4, 0.0f)};
  EXPECT_EQ(code_of([&] { rmsnorm_forward<float>(s, g); }), ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { rmsnorm_backward<float>(s, c, res, g); }), ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { layernorm_forward<float>(s, g, g); }), ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { layernorm_backward<float>(c, s, res, g); }), ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { rope_forward<float>(c, s, spec); }), ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { swiglu_forward<float>(s, c); }), ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { swiglu_backward<float>(c, c, s); }), ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { geglu_forward<float>(c, s); }), ErrorCode::NonContiguousInput);
  EXPECT_EQ(code_of([&] { geglu_backward<float>(s, c, c); }), ErrorCode::NonContiguousInput);
}
