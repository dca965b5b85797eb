#include <gtest/gtest.h>

#include <random>

#include "beamxray/bundle.hpp"

using namespace beamxray;

namespace {

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

std::shared_ptr<const ConformalModel> disk() { return std::make_shared<EuclideanDisk>(1.0, 2); }
std::shared_ptr<const ConformalModel> conformal() { return std::make_shared<ConformalDisk>(ConformalDisk::default_coeffs()); }

ConnectionPtr abelian_dx1(double alpha) {
  std::vector<CMat> A(2, CMat::Zero(1, 1));
  A[0](0, 0) = cd(0, alpha);
  return std::make_shared<ConstantConnection>(A);
}

double skew_defect(const std::vector<CMat>& A) {
  double d = 0;
  for (const auto& a : A) d = std::max(d, (a + a.adjoint()).norm());
  return d;
}

GeodesicPath chord(const ModelPtr& M, const Vec& x, double angle, GeodesicOptions opt = {}) {
  return integrate_geodesic(M, x, unit_vector(*M, x, vec2(std::cos(angle), std::sin(angle))), opt);
}

}  // namespace

TEST(Connection, FamiliesAreSkewHermitian) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(-0.7, 0.7);
  std::vector<ConnectionPtr> fields{ConstantConnection::random(3, 2, 1, 0.5), std::make_shared<PolyConnection>(3, 2, 3, 2, 0.5),
                                    std::make_shared<FourierConnection>(3, 2, 2, 3, 0.5),
                                    std::make_shared<PerturbedConnection>(std::make_shared<PolyConnection>(3, 2, 2, 4, 0.5), vec2(0.1, 0.1), 0.4, 0.1, 1)};
  for (const auto& A : fields)
    for (int i = 0; i < 20; ++i) EXPECT_LE(skew_defect(A->eval(vec2(U(rng), U(rng)))), 1e-12);
}

TEST(Connection, ComponentJetsMatchFiniteDifferences) {
  auto A = std::make_shared<FourierConnection>(2, 2, 2, 9, 0.5);
  const Vec x = vec2(0.2, -0.3);
  auto jet = A->components_jet(x, 2);
  const double h = 1e-5;
  for (int i = 0; i < 2; ++i) {
    EXPECT_LT((jet[i].coeff(0) - A->eval(x)[i]).norm(), 1e-13);
    for (int l = 0; l < 2; ++l) {
      Vec e = Vec::Zero(2);
      e[l] = h;
      CMat fd = (A->eval(x + e)[i] - A->eval(x - e)[i]) / (2 * h);
      EXPECT_LT((jet[i].coeff(1 + l) - fd).norm(), 1e-8);
    }
  }
}

TEST(Gauge, BumpGaugeUnitaryAndTrivialAtBoundary) {
  auto M = conformal();
  BumpGauge phi(M, 3, 4, 1.0);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int i = 0; i < 50; ++i) {
    Vec x = vec2(U(rng), U(rng));
    if (M->boundary(x) >= 0) continue;
    EXPECT_LE(unitarity_defect(phi.eval(x)), 1e-12);
  }
  for (double a = 0; a < 6.28; a += 0.5) {
    const Vec x = (1 - 1e-7) * vec2(std::cos(a), std::sin(a));
    ASSERT_GE(M->boundary(x), -1e-6);
    EXPECT_LE((phi.eval(x) - CMat::Identity(3, 3)).norm(), 1e-8);
  }
  EXPECT_GT((phi.eval(Vec::Zero(2)) - CMat::Identity(3, 3)).norm(), 0.1);
}

TEST(Gauge, IdentityGaugeLeavesConnectionUnchanged) {
  auto A = std::make_shared<PolyConnection>(2, 2, 2, 5, 0.5);
  auto I = std::make_shared<CallbackGauge>(2, 2, [](const Vec&) { return CMat(CMat::Identity(2, 2)); }, true);
  auto B = gauge_apply(A, I);
  const Vec x = vec2(0.3, 0.1);
  for (int i = 0; i < 2; ++i) EXPECT_LT((B->eval(x)[i] - A->eval(x)[i]).norm(), 1e-12);
}

TEST(Gauge, PureGaugeIsSkewHermitian) {
  auto M = disk();
  auto A = gauge_apply(ConstantConnection::zero(2, 2), std::make_shared<BumpGauge>(M, 2, 6, 1.5));
  for (double t = -0.7; t < 0.7; t += 0.1) EXPECT_LE(skew_defect(A->eval(vec2(t, 0.5 * t))), 1e-10);
}

TEST(Gauge, AbelianFormula) {
  // A = i alpha dx1, phi = e^{i theta}, theta = 0.3 x1^2 + 0.5 x2:
  // A <| phi = i(alpha + d1 theta) dx1 + i d2 theta dx2.
  const double alpha = 0.4;
  auto phi = std::make_shared<CallbackGauge>(
      1, 2, [](const Vec& x) { return CMat(CMat::Constant(1, 1, std::exp(cd(0, 0.3 * x[0] * x[0] + 0.5 * x[1])))); }, false);
  auto B = gauge_apply(abelian_dx1(alpha), phi);
  const Vec x = vec2(0.2, -0.6);
  auto c = B->eval(x);
  EXPECT_NEAR(std::abs(c[0](0, 0) - cd(0, alpha + 0.6 * x[0])), 0, 1e-9);
  EXPECT_NEAR(std::abs(c[1](0, 0) - cd(0, 0.5)), 0, 1e-9);
}

TEST(Gauge, CompositionLaw) {
  auto M = conformal();
  ConnectionPtr A = std::make_shared<PolyConnection>(2, 2, 2, 7, 0.5);
  GaugePtr phi = std::make_shared<BumpGauge>(M, 2, 8, 1.0), psi = std::make_shared<BumpGauge>(M, 2, 9, 0.7);
  auto lhs = gauge_apply(gauge_apply(A, phi), psi);
  auto rhs = gauge_apply(A, std::make_shared<ProductGauge>(phi, psi));
  for (const Vec& x : {vec2(0.1, 0.2), vec2(-0.5, 0.4), vec2(0.7, -0.3)})
    for (int i = 0; i < 2; ++i) EXPECT_LT((lhs->eval(x)[i] - rhs->eval(x)[i]).norm(), 1e-8);
}

TEST(Gauge, NonUnitaryRejected) {
  auto bad = std::make_shared<CallbackGauge>(1, 2, [](const Vec&) { return CMat(CMat::Constant(1, 1, cd(2.0))); }, false);
  try {
    gauge_apply(ConstantConnection::zero(1, 2), bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidGauge);
  }
}

TEST(Transport, ZeroConnectionIsIdentity) {
  auto M = conformal();
  auto p = chord(M, vec2(0.1, 0.1), 0.7);
  auto r = parallel_transport(*ConstantConnection::zero(2, 2), p, 0, p.tau);
  EXPECT_LT((r.matrix - CMat::Identity(2, 2)).norm(), 1e-15);
}

TEST(Transport, AbelianConstantAlongAxis) {
  const double alpha = 0.8;
  auto M = disk();
  auto p = chord(M, vec2(0, 0.3), 0.0);
  auto r = parallel_transport(*abelian_dx1(alpha), p, 0, p.tau);
  EXPECT_NEAR(std::abs(r.matrix(0, 0) - std::exp(cd(0, -alpha * p.tau))), 0, 1e-12);
}

TEST(Transport, AbelianHolonomyMatchesLineIntegral) {
  auto M = conformal();
  auto A = std::make_shared<PolyConnection>(1, 2, 3, 10, 0.8);
  auto p = chord(M, vec2(-0.2, 0.1), 2.2);
  auto q = gauss_legendre(40, 0, p.tau);
  cd integral = 0;
  for (int i = 0; i < 40; ++i) integral += q.weights[i] * A->eval_directional(p.point_at(q.nodes[i]), p.velocity_at(q.nodes[i]))(0, 0);
  auto r = parallel_transport(*A, p, 0, p.tau);
  EXPECT_NEAR(std::abs(r.matrix(0, 0) - std::exp(-integral)), 0, 1e-8);
}

TEST(Transport, StepRefinement) {
  auto M = conformal();
  auto A = std::make_shared<PolyConnection>(2, 2, 2, 11, 0.5);
  const Vec x = vec2(0.3, -0.2);
  auto coarse = chord(M, x, 1.0), fine = chord(M, x, 1.0, GeodesicOptions{.step = 1e-4});
  auto a = parallel_transport(*A, coarse, 0, coarse.tau), b = parallel_transport(*A, fine, 0, fine.tau);
  EXPECT_LT((a.matrix - b.matrix).norm(), 1e-8);
}

TEST(Transport, AlgebraicProperties) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> U(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    auto M = trial % 2 ? conformal() : disk();
    auto A = std::make_shared<PolyConnection>(2, 2, 2, 100 + trial, 0.5);
    auto phi = std::make_shared<BumpGauge>(M, 2, 200 + trial, 1.0);
    auto p = chord(M, vec2(0.8 * U(rng) - 0.4, 0.8 * U(rng) - 0.4), 6.28 * U(rng));
    auto fw = parallel_transport(*A, p, 0, p.tau);
    auto bw = parallel_transport(*A, p, p.tau, 0);
    const double t = p.tau * (0.2 + 0.6 * U(rng));
    auto p1 = parallel_transport(*A, p, 0, t), p2 = parallel_transport(*A, p, t, p.tau);
    auto pg = parallel_transport(*gauge_apply(A, phi), p, 0, p.tau);
    EXPECT_LE(fw.unitarity_defect, 1e-8);
    EXPECT_LT((bw.matrix * fw.matrix - CMat::Identity(2, 2)).norm(), 1e-8);
    EXPECT_LT((p2.matrix * p1.matrix - fw.matrix).norm(), 1e-8);
    CMat expect = phi->eval(p.points.back()).inverse() * fw.matrix * phi->eval(p.points.front());
    EXPECT_LT((pg.matrix - expect).norm(), 1e-6);
  }
}

TEST(Transport, IntervalOutsidePath) {
  auto M = disk();
  auto p = chord(M, Vec::Zero(2), 0);
  try {
    parallel_transport(*ConstantConnection::zero(1, 2), p, 0, p.tau + 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DomainError);
  }
}

TEST(Laplacian, FlatQuadratic) {
  auto M = disk();
  Section u = [](const Vec& x) { return CVec(CVec::Constant(1, x[0] * x[0])); };
  auto r = connection_laplacian_apply(*M, *ConstantConnection::zero(1, 2), u, vec2(0.1, 0.2), 1e-3);
  EXPECT_NEAR(std::abs(r[0] - cd(-2.0)), 0, 1e-6);
}

TEST(Laplacian, PlaneWave) {
  auto M = disk();
  const double lam = 5;
  Section u = [&](const Vec& x) { return CVec(CVec::Constant(1, std::exp(cd(0, lam * x[0])))); };
  const Vec x = vec2(0.1, 0.2);
  auto r = connection_laplacian_apply(*M, *ConstantConnection::zero(1, 2), u, x, 1e-3);
  EXPECT_NEAR(std::abs(r[0] - lam * lam * u(x)[0]), 0, 1e-4);
}

TEST(Laplacian, AbelianConstantConnection) {
  auto M = disk();
  const double lam = 5, alpha = 0.7;
  Section u = [&](const Vec& x) { return CVec(CVec::Constant(1, std::exp(cd(0, lam * x[0])))); };
  const Vec x = vec2(-0.3, 0.2);
  auto r = connection_laplacian_apply(*M, *abelian_dx1(alpha), u, x, 1e-3, 4);
  EXPECT_NEAR(std::abs(r[0] - (lam + alpha) * (lam + alpha) * u(x)[0]), 0, 1e-7);
}

TEST(Laplacian, ConformalScalar) {
  // In two dimensions Delta_g = -e^{-2f} (d1^2 + d2^2).
  auto M = conformal();
  Section u = [](const Vec& x) { return CVec(CVec::Constant(1, x[0] * x[0] + x[0] * x[1])); };
  const Vec x = vec2(0.25, -0.4);
  auto r = connection_laplacian_apply(*M, *ConstantConnection::zero(1, 2), u, x, 1e-3, 4);
  EXPECT_NEAR(std::abs(r[0] + 2 * std::exp(-2 * M->f(x))), 0, 1e-8);
}

TEST(Laplacian, GaugeCovariance) {
  // Delta_{A <| phi}(phi^{-1} u) = phi^{-1} Delta_A u.
  auto M = conformal();
  ConnectionPtr A = std::make_shared<PolyConnection>(2, 2, 2, 13, 0.5);
  auto phi = std::make_shared<BumpGauge>(M, 2, 14, 1.0);
  auto B = gauge_apply(A, phi);
  Section u = [](const Vec& x) {
    CVec v(2);
    v << std::exp(cd(0.3 * x[1], 2 * x[0])), cd(x[0] * x[1], 1 - x[1]);
    return v;
  };
  Section w = [&](const Vec& x) { return CVec(phi->eval(x).inverse() * u(x)); };
  const Vec x = vec2(0.2, 0.1);
  CVec lhs = connection_laplacian_apply(*M, *B, w, x, 1e-3, 4);
  CVec rhs = phi->eval(x).inverse() * connection_laplacian_apply(*M, *A, u, x, 1e-3, 4);
  EXPECT_LT((lhs - rhs).norm(), 1e-6);
}

TEST(Laplacian, StencilOutOfDomain) {
  auto M = disk();
  Section u = [](const Vec&) { return CVec(CVec::Ones(1)); };
  try {
    connection_laplacian_apply(*M, *ConstantConnection::zero(1, 2), u, vec2(0.9995, 0), 1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::StencilOutOfDomain);
  }
}
