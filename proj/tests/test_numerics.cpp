#include <gtest/gtest.h>

#include <random>

#include "beamxray/numerics.hpp"

using namespace beamxray;

TEST(Fornberg, ThreePointSecondDerivative) {
  auto w = fornberg_weights(0.0, {-1.0, 0.0, 1.0}, 2);
  EXPECT_NEAR(w[2][0], 1.0, 1e-14);
  EXPECT_NEAR(w[2][1], -2.0, 1e-14);
  EXPECT_NEAR(w[2][2], 1.0, 1e-14);
  EXPECT_NEAR(w[1][0], -0.5, 1e-14);
  EXPECT_NEAR(w[1][2], 0.5, 1e-14);
}

TEST(Fornberg, ExactOnCubicsAtOffCentrePoint) {
  std::vector<double> xs{0.0, 0.3, 0.7, 1.1, 1.6};
  auto w = fornberg_weights(0.45, xs, 2);
  auto f = [](double x) { return 2 - x + 3 * x * x - 0.5 * x * x * x; };
  double d1 = 0, d2 = 0;
  for (std::size_t j = 0; j < xs.size(); ++j) d1 += w[1][j] * f(xs[j]), d2 += w[2][j] * f(xs[j]);
  EXPECT_NEAR(d1, -1 + 6 * 0.45 - 1.5 * 0.45 * 0.45, 1e-12);
  EXPECT_NEAR(d2, 6 - 3 * 0.45, 1e-12);
}

TEST(GaussLegendre, ExactForDegreeTwoNMinusOne) {
  auto q = gauss_legendre(5, 0.0, 2.0);
  double s = 0;
  for (int i = 0; i < 5; ++i) s += q.weights[i] * std::pow(q.nodes[i], 9);
  EXPECT_NEAR(s, std::pow(2.0, 10) / 10, 1e-11);
  double w = 0;
  for (double x : q.weights) w += x;
  EXPECT_NEAR(w, 2.0, 1e-14);
}

TEST(Halton, FirstBaseTwoPoints) {
  EXPECT_DOUBLE_EQ(halton(0, 2)[0], 0.5);
  EXPECT_DOUBLE_EQ(halton(1, 2)[0], 0.25);
  EXPECT_DOUBLE_EQ(halton(2, 2)[0], 0.75);
  EXPECT_NEAR(halton(0, 2)[1], 1.0 / 3, 1e-15);
}

TEST(FitSlope, RecoversLineAndZeroStderr) {
  std::vector<double> x{1, 2, 3, 4}, y;
  for (double v : x) y.push_back(1.5 * v - 2);
  auto f = fit_slope(x, y);
  EXPECT_NEAR(f.slope, 1.5, 1e-14);
  EXPECT_NEAR(f.intercept, -2, 1e-13);
  EXPECT_NEAR(f.stderr_slope, 0, 1e-12);
  EXPECT_THROW(fit_slope({1.0}, {2.0}), Error);
}

TEST(FitSlope, StandardErrorMatchesHandComputation) {
  // Residuals of y = (0, 1, 1, 3) against the fit have sum of squares 0.7 and
  // Sxx = 5, so stderr = sqrt(0.7 / 2 / 5).
  auto f = fit_slope({0, 1, 2, 3}, {0, 1, 1, 3});
  EXPECT_NEAR(f.slope, 0.9, 1e-14);
  EXPECT_NEAR(f.stderr_slope, std::sqrt(0.07), 1e-14);
}

TEST(Matrix, ExpmOfSkewHermitianIsUnitary) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N;
  CMat X(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) X(i, j) = cd(N(rng), N(rng));
  CMat S = 2.0 * (X - X.adjoint());
  EXPECT_LT(unitarity_defect(expm(S)), 1e-12);
  // exp(i a sigma_z) in closed form.
  CMat Z = CMat::Zero(2, 2);
  Z(0, 0) = cd(0, 0.7);
  Z(1, 1) = cd(0, -0.7);
  CMat E = expm(Z);
  EXPECT_NEAR(std::abs(E(0, 0) - std::exp(cd(0, 0.7))), 0, 1e-14);
  EXPECT_NEAR(std::abs(E(1, 1) - std::exp(cd(0, -0.7))), 0, 1e-14);
}

TEST(Matrix, PolarUnitaryFixesUnitariesAndProjectsOthers) {
  CMat U(2, 2);
  U << cd(0, 1), 0, 0, cd(1, 0);
  EXPECT_LT((polar_unitary(U) - U).norm(), 1e-14);
  CMat M = 1.3 * U;
  EXPECT_LT((polar_unitary(M) - U).norm(), 1e-14);
}

TEST(Bump, PlateauSupportAndSmoothness) {
  EXPECT_EQ(bump(0.3).v, 1.0);
  EXPECT_EQ(bump(1.2).v, 0.0);
  const double h = 1e-5;
  for (double s : {0.6, 0.75, 0.9}) {
    EXPECT_NEAR(bump(s).d1, (bump(s + h).v - bump(s - h).v) / (2 * h), 1e-6);
    EXPECT_NEAR(bump(s).d2, (bump(s + h).d1 - bump(s - h).d1) / (2 * h), 1e-5);
  }
}

TEST(Simpson, IntegratesCubicExactly) {
  std::vector<double> f;
  const double h = 0.1;
  for (int i = 0; i <= 10; ++i) f.push_back(std::pow(i * h, 3));
  EXPECT_NEAR(simpson(f, h), 0.25, 1e-14);
}
