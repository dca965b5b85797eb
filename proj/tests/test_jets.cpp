#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "beamxray/jets.hpp"

using namespace beamxray;

namespace {

RPoly random_poly(const IndexSetPtr& set, int max_degree, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-1, 1);
  RPoly p(set);
  for (int k = 0; k < set->size(); ++k)
    if (set->degree(k) <= max_degree) p[k] = U(rng);
  return p;
}

CPoly random_cpoly(const IndexSetPtr& set, int max_degree, std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  CPoly p(set);
  for (int k = 0; k < set->size(); ++k)
    if (set->degree(k) <= max_degree) p[k] = cd(N(rng), N(rng));
  return p;
}

Eigen::MatrixXd random_spd(int m, std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  Eigen::MatrixXd G(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) G(i, j) = N(rng);
  return G * G.transpose() + 0.2 * Eigen::MatrixXd::Identity(m, m);
}

HomogeneousPoly random_homogeneous(int m, int k, std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  HomogeneousPoly p(m, k);
  for (auto& c : p.coeffs) c = cd(N(rng), N(rng));
  return p;
}

}  // namespace

TEST(MultiIndex, GradedLexicographicOrder) {
  auto s = MultiIndexSet::get(2, 2);
  ASSERT_EQ(s->size(), 6);
  std::vector<std::vector<int>> expected{{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}};
  for (int k = 0; k < 6; ++k) {
    auto e = s->exponents(k);
    EXPECT_EQ(std::vector<int>(e.begin(), e.end()), expected[k]) << "index " << k;
  }
  EXPECT_EQ(s->index({1, 1}), 4);
  EXPECT_EQ(MultiIndexSet::get(2, 2), s) << "tables are shared per (n_vars, order)";
}

TEST(PolyMul, OnePlusTimesOneMinus) {
  auto s = MultiIndexSet::get(2, 2);
  RPoly y1 = RPoly::variable(s, 0);
  RPoly one(s, 1.0);
  RPoly p = poly_mul(one + y1, one - y1);
  EXPECT_DOUBLE_EQ(p.coeff({0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(p.coeff({1, 0}), 0.0);
  EXPECT_DOUBLE_EQ(p.coeff({2, 0}), -1.0);
  EXPECT_DOUBLE_EQ(p.max_abs(), 1.0);
}

TEST(PolyMul, TruncationDropsEverythingAboveOrderOne) {
  auto s = MultiIndexSet::get(2, 1);
  RPoly q = RPoly::variable(s, 0) + RPoly::variable(s, 1);
  RPoly p = poly_mul(q, q);
  EXPECT_EQ(p.max_abs(), 0.0);
}

TEST(PolyMul, MixedOrdersTruncateToTheSmaller) {
  auto lo = MultiIndexSet::get(1, 1), hi = MultiIndexSet::get(1, 3);
  RPoly a = RPoly(lo, 1.0) + RPoly::variable(lo, 0);
  RPoly b = RPoly(hi, 1.0) + RPoly::variable(hi, 0);
  RPoly p = a * b;
  EXPECT_EQ(p.max_order(), 1);
  EXPECT_DOUBLE_EQ(p.coeff({1}), 2.0);
}

TEST(PolyMul, ShapeMismatchThrows) {
  RPoly a(2, 2), b(3, 2);
  try {
    auto p = a * b;
    (void)p;
    FAIL() << "expected ShapeError";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeError);
  }
}

TEST(PolyMul, PointwiseOracleForDegreeThree) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(-1, 1);
  auto s = MultiIndexSet::get(3, 6);
  RPoly a = random_poly(s, 3, rng), b = random_poly(s, 3, rng);
  RPoly p = poly_mul(a, b);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> y{U(rng), U(rng), U(rng)};
    EXPECT_NEAR(p.eval(y), a.eval(y) * b.eval(y), 1e-12);
  }
}

TEST(PolyMul, RingAxiomsExact) {
  std::mt19937_64 rng(2);
  auto s = MultiIndexSet::get(2, 4);
  for (int trial = 0; trial < 10; ++trial) {
    // Dyadic coefficients keep every product and sum exact in floating point.
    auto dyadic = [&] {
      RPoly p = random_poly(s, 4, rng);
      for (auto& c : p.coeffs()) c = std::round(c * 16) / 16;
      return p;
    };
    RPoly a = dyadic(), b = dyadic(), c = dyadic();
    EXPECT_EQ(((a * b) * c).coeffs(), (a * (b * c)).coeffs());
    EXPECT_EQ((a * (b + c)).coeffs(), (a * b + a * c).coeffs());
    EXPECT_EQ((a * b).coeffs(), (b * a).coeffs());
  }
}

TEST(PolyMul, LeibnizRuleForPartialDerivatives) {
  std::mt19937_64 rng(3);
  auto s = MultiIndexSet::get(2, 5);
  RPoly a = random_poly(s, 5, rng), b = random_poly(s, 5, rng);
  for (int v = 0; v < 2; ++v) {
    RPoly lhs = derivative(a * b, v);
    RPoly rhs = derivative(a, v) * b + a * derivative(b, v);
    // Agreement holds up to total degree order - 1.
    for (int k = 0; k < s->size(); ++k)
      if (s->degree(k) <= 4) EXPECT_NEAR(lhs[k], rhs[k], 1e-13);
  }
}

TEST(Series, ExpLogAndSqrtRoundTrips) {
  std::mt19937_64 rng(4);
  auto s = MultiIndexSet::get(2, 5);
  RPoly x = random_poly(s, 5, rng);
  x[0] = 0.3;
  EXPECT_LT((log(exp(x)) - x).max_abs(), 1e-13);
  x[0] = 1.7;
  RPoly r = sqrt(x);
  EXPECT_LT((r * r - x).max_abs(), 1e-13);
  EXPECT_LT((reciprocal(x) * x - RPoly(s, 1.0)).max_abs(), 1e-13);
  RPoly sn = sin(x), cs = cos(x);
  EXPECT_LT((sn * sn + cs * cs - RPoly(s, 1.0)).max_abs(), 1e-13);
}

TEST(Prolongation, SineFieldPassesAndPerturbationFails) {
  JetSection psi;
  auto s = MultiIndexSet::get(1, 2);
  const std::vector<double> c{1.0, -0.5, 0.25};
  for (int i = 0; i <= 40; ++i) {
    const double t = 0.05 * i;
    psi.t.push_back(t);
    std::vector<CPoly> levels;
    for (int l = 0; l < 3; ++l) {
      // sin(t) and its first two derivatives times fixed coefficients c_I.
      const double f = l == 0 ? std::sin(t) : l == 1 ? std::cos(t) : -std::sin(t);
      CPoly p(s);
      for (int k = 0; k < 3; ++k) p[k] = c[k] * f;
      levels.push_back(p);
    }
    psi.samples.push_back(levels);
  }
  auto ok = check_prolongable(psi);
  EXPECT_TRUE(ok.ok);
  EXPECT_LT(ok.max_defect, 1e-6);

  psi.samples[17][1][0] += 0.1;
  auto bad = check_prolongable(psi);
  EXPECT_FALSE(bad.ok);
  EXPECT_GT(bad.max_defect, 0.09);
}

TEST(Prolongation, TooFewSamples) {
  JetSection psi;
  psi.t = {0, 1, 2};
  psi.samples.assign(3, std::vector<CPoly>{CPoly(1, 1)});
  try {
    check_prolongable(psi);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotEnoughSamples);
  }
}

TEST(QkPairing, IdentityDegreeOne) {
  HomogeneousPoly p(2, 1);
  p.coeffs = {1.0, 0.0};  // y1
  EXPECT_NEAR(std::abs(qk_pairing(Eigen::MatrixXd::Identity(2, 2), p, p) - cd(2.0)), 0, 1e-15);
}

TEST(QkPairing, IdentityDegreeTwoMonomial) {
  // Q = Laplacian; Q^2 (y1^2 y1^2) = d^4 y1^4 = 24.
  HomogeneousPoly p(2, 2);
  p.coeffs = {1.0, 0.0, 0.0};
  EXPECT_NEAR(std::abs(qk_pairing(Eigen::MatrixXd::Identity(2, 2), p, p) - cd(24.0)), 0, 1e-12);
}

TEST(QkPairing, Sesquilinear) {
  std::mt19937_64 rng(5);
  for (int k = 1; k <= 3; ++k) {
    auto B = random_spd(3, rng);
    auto p = random_homogeneous(3, k, rng), q = random_homogeneous(3, k, rng);
    const cd alpha(0.75, -1.25);
    HomogeneousPoly ap = p;
    for (auto& c : ap.coeffs) c *= alpha;
    const cd base = qk_pairing(B, p, q);
    EXPECT_NEAR(std::abs(qk_pairing(B, ap, q) - std::conj(alpha) * base), 0, 1e-10 * std::abs(base));
    HomogeneousPoly aq = q;
    for (auto& c : aq.coeffs) c *= alpha;
    EXPECT_NEAR(std::abs(qk_pairing(B, p, aq) - alpha * base), 0, 1e-10 * std::abs(base));
    // Hermitian symmetry.
    EXPECT_NEAR(std::abs(qk_pairing(B, q, p) - std::conj(base)), 0, 1e-10 * std::abs(base));
  }
}

TEST(QkPairing, PositiveWithEigenLowerBound) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 60; ++trial) {
    const int m = 2 + trial % 2, k = 1 + trial % 3;
    auto B = random_spd(m, rng);
    auto p = random_homogeneous(m, k, rng);
    const cd val = qk_pairing(B, p, p);
    EXPECT_LT(std::abs(val.imag()), 1e-10 * std::abs(val));
    // With B >= w1^2 I, Q^k(|p|^2) >= w1^{2k} Delta^k(|p|^2), and the
    // Laplacian pairing dominates the sum of squared coefficients.
    const double w1sq = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(B).eigenvalues().minCoeff();
    double coeff_sq = 0;
    for (auto c : p.coeffs) coeff_sq += std::norm(c);
    EXPECT_GE(val.real(), std::pow(w1sq, k) * coeff_sq * (1 - 1e-12));
  }
}

TEST(QkPairing, RejectsIndefiniteOrMismatched) {
  HomogeneousPoly p(2, 1), q(2, 2);
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(2, 2);
  B(1, 1) = -1;
  try {
    qk_pairing(B, p, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotPositiveDefinite);
  }
  try {
    qk_pairing(Eigen::MatrixXd::Identity(2, 2), p, q);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeError);
  }
}

// The Leibniz expansion of Q^k(uv) in the eigenbasis of B, Q = sum_j (w_j d_{v_j})^2:
//   Q^k(uv) = sum_{j + l + |a| = k} 2^{|a|} k! / (j! l! a!) (D^a Q^j u)(D^a Q^l v).
TEST(QkPairing, LeibnizOracle) {
  std::mt19937_64 rng(7);
  auto fact = [](int n) {
    double f = 1;
    for (int i = 2; i <= n; ++i) f *= i;
    return f;
  };
  for (int trial = 0; trial < 12; ++trial) {
    const int m = 2 + trial % 2, k = 1 + trial % 3;
    auto B = random_spd(m, rng);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B);
    auto set = MultiIndexSet::get(m, 6);
    CPoly u = random_cpoly(set, 3, rng), v = random_cpoly(set, 3, rng);
    auto D = [&](const CPoly& f, int j) {
      CPoly r(f.set());
      for (int i = 0; i < m; ++i) {
        CPoly di = derivative(f, i);
        di *= cd(std::sqrt(es.eigenvalues()[j]) * es.eigenvectors()(i, j));
        r += di;
      }
      return r;
    };
    auto Qpow = [&](CPoly f, int p) {
      for (int i = 0; i < p; ++i) f = apply_Q(B, f);
      return f;
    };
    CPoly rhs(set);
    std::vector<int> alpha(m, 0);
    std::function<void(int, int)> rec = [&](int pos, int left) {
      if (pos == m) {
        double afact = 1;
        for (int a : alpha) afact *= fact(a);
        for (int j = 0; j <= left; ++j) {
          CPoly a = Qpow(u, j), b = Qpow(v, left - j);
          for (int i = 0; i < m; ++i)
            for (int c = 0; c < alpha[i]; ++c) a = D(a, i), b = D(b, i);
          CPoly term = a * b;
          term *= cd(std::pow(2.0, k - left) * fact(k) / (fact(j) * fact(left - j) * afact));
          rhs += term;
        }
        return;
      }
      for (int a = 0; a <= left; ++a) {
        alpha[pos] = a;
        rec(pos + 1, left - a);
      }
      alpha[pos] = 0;
    };
    rec(0, k);
    CPoly lhs = Qpow(u * v, k);
    EXPECT_LE((lhs - rhs).max_abs(), 1e-12 * std::max(1.0, lhs.max_abs())) << "m=" << m << " k=" << k;
  }
}

TEST(PolyMat, ExpOfNilpotentJet) {
  // exp(y E12) = I + y E12 for the nilpotent 2x2 matrix jet.
  auto s = MultiIndexSet::get(1, 4);
  PolyMat M(s, 2, 2);
  M(0, 1) = CPoly::variable(s, 0);
  PolyMat E = exp(M);
  EXPECT_EQ(E(0, 0).coeff({0}), cd(1.0));
  EXPECT_EQ(E(0, 1).coeff({1}), cd(1.0));
  EXPECT_EQ(E(0, 1).coeff({2}), cd(0.0));
  EXPECT_EQ(E(1, 0).max_abs(), 0.0);
}
