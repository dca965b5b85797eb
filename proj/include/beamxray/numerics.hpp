#pragma once

// Small numerical helpers shared across modules: finite-difference weights,
// quadrature nodes, low-discrepancy points, regression, smooth cutoffs and a
// few dense-matrix utilities.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "beamxray/errors.hpp"

namespace beamxray {

using cd = std::complex<double>;
using CMat = Eigen::MatrixXcd;
using RMat = Eigen::MatrixXd;
using RVec = Eigen::VectorXd;

// Fornberg's recursion: weights w[d][j] so that sum_j w[d][j] f(x_j) approximates
// the d-th derivative at z, for d = 0..max_deriv.
inline std::vector<std::vector<double>> fornberg_weights(double z, const std::vector<double>& x, int max_deriv) {
  const int n = static_cast<int>(x.size());
  std::vector<std::vector<double>> c(max_deriv + 1, std::vector<double>(n, 0.0));
  double c1 = 1.0, c4 = x[0] - z;
  c[0][0] = 1.0;
  for (int i = 1; i < n; ++i) {
    const int mn = std::min(i, max_deriv);
    double c2 = 1.0;
    const double c5 = c4;
    c4 = x[i] - z;
    for (int j = 0; j < i; ++j) {
      const double c3 = x[i] - x[j];
      c2 *= c3;
      if (j == i - 1) {
        for (int k = mn; k >= 1; --k) c[k][i] = c1 * (k * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
        c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
      }
      for (int k = mn; k >= 1; --k) c[k][j] = (c4 * c[k][j] - k * c[k - 1][j]) / c3;
      c[0][j] = c4 * c[0][j] / c3;
    }
    c1 = c2;
  }
  return c;
}

struct Quadrature {
  std::vector<double> nodes, weights;
};

// Gauss-Legendre rule on [a, b] via Newton on the Legendre recurrence.
inline Quadrature gauss_legendre(int n, double a = -1.0, double b = 1.0) {
  Quadrature q;
  q.nodes.resize(n);
  q.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1, p1 = x;
      for (int k = 2; k <= n; ++k) {
        double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1);
      double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    q.nodes[i] = 0.5 * (b - a) * x + 0.5 * (a + b);
    q.weights[i] = (b - a) / ((1 - x * x) * dp * dp);
  }
  return q;
}

inline double radical_inverse(unsigned long i, unsigned base) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= base;
    r += f * (i % base);
    i /= base;
  }
  return r;
}

// Point i (1-based index skips the origin) of the Halton sequence in [0,1)^dim.
inline std::vector<double> halton(unsigned long i, int dim) {
  static const unsigned primes[] = {2, 3, 5, 7, 11, 13};
  std::vector<double> p(dim);
  for (int d = 0; d < dim; ++d) p[d] = radical_inverse(i + 1, primes[d]);
  return p;
}

struct SlopeFit {
  double slope = 0, intercept = 0, stderr_slope = 0;
};

// Ordinary least squares y = a + b x with the standard error of b.
inline SlopeFit fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const int n = static_cast<int>(x.size());
  if (n < 2) throw Error(ErrorKind::ShapeError, "fit_slope needs at least two points");
  double mx = 0, my = 0;
  for (int i = 0; i < n; ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) sxx += (x[i] - mx) * (x[i] - mx), sxy += (x[i] - mx) * (y[i] - my);
  SlopeFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  if (n > 2) {
    double rss = 0;
    for (int i = 0; i < n; ++i) {
      double r = y[i] - f.intercept - f.slope * x[i];
      rss += r * r;
    }
    f.stderr_slope = std::sqrt(rss / (n - 2) / sxx);
  }
  return f;
}

// psi(x) = exp(-1/x) for x > 0, with derivatives up to order 2.
struct Smooth3 {
  double v = 0, d1 = 0, d2 = 0;
};

inline Smooth3 psi_exp(double x) {
  if (x <= 0) return {};
  double e = std::exp(-1.0 / x);
  double x2 = x * x;
  return {e, e / x2, e * (1 - 2 * x) / (x2 * x2)};
}

// Smooth step: 1 on s <= 1/2, 0 on s >= 1, with first and second derivatives.
inline Smooth3 bump(double s) {
  if (s <= 0.5) return {1, 0, 0};
  if (s >= 1.0) return {0, 0, 0};
  Smooth3 a = psi_exp(1 - s);  // d/ds flips sign
  Smooth3 b = psi_exp(s - 0.5);
  a.d1 = -a.d1;
  double den = a.v + b.v;
  double dden = a.d1 + b.d1, d2den = a.d2 + b.d2;
  double v = a.v / den;
  double d1 = (a.d1 - v * dden) / den;
  double d2 = (a.d2 - 2 * d1 * dden - v * d2den) / den;
  return {v, d1, d2};
}

// Exponential of a small dense matrix by scaling and squaring with a Taylor core.
inline CMat expm(const CMat& m) {
  const double nrm = m.cwiseAbs().rowwise().sum().maxCoeff();
  int s = 0;
  if (nrm > 0.25) s = static_cast<int>(std::ceil(std::log2(nrm / 0.25)));
  CMat a = m / std::ldexp(1.0, s);
  CMat r = CMat::Identity(m.rows(), m.cols());
  CMat term = r;
  for (int k = 1; k <= 18; ++k) {
    term = term * a / double(k);
    r += term;
    if (term.cwiseAbs().maxCoeff() < 1e-18) break;
  }
  for (int i = 0; i < s; ++i) r = r * r;
  return r;
}

// Unitary factor of the polar decomposition.
inline CMat polar_unitary(const CMat& m) {
  Eigen::JacobiSVD<CMat> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().adjoint();
}

inline double unitarity_defect(const CMat& u) {
  return (u.adjoint() * u - CMat::Identity(u.cols(), u.cols())).norm();
}

// Quintic Hermite interpolation on [0, h] from value, first and second
// derivative at both ends; s in [0, 1].  Works for any vector-like type.
template <class V>
V hermite5(const V& p0, const V& d0, const V& a0, const V& p1, const V& d1, const V& a1, double h, double s) {
  const double s2 = s * s, s3 = s2 * s, s4 = s3 * s, s5 = s4 * s;
  const double h00 = 1 - 10 * s3 + 15 * s4 - 6 * s5;
  const double h10 = s - 6 * s3 + 8 * s4 - 3 * s5;
  const double h20 = 0.5 * (s2 - 3 * s3 + 3 * s4 - s5);
  const double h01 = 10 * s3 - 15 * s4 + 6 * s5;
  const double h11 = -4 * s3 + 7 * s4 - 3 * s5;
  const double h21 = 0.5 * (s3 - 2 * s4 + s5);
  return h00 * p0 + (h * h10) * d0 + (h * h * h20) * a0 + h01 * p1 + (h * h11) * d1 + (h * h * h21) * a1;
}

// Derivative in the physical variable of the quintic Hermite interpolant.
template <class V>
V hermite5_deriv(const V& p0, const V& d0, const V& a0, const V& p1, const V& d1, const V& a1, double h, double s) {
  const double s2 = s * s, s3 = s2 * s, s4 = s3 * s;
  const double h00 = -30 * s2 + 60 * s3 - 30 * s4;
  const double h10 = 1 - 18 * s2 + 32 * s3 - 15 * s4;
  const double h20 = 0.5 * (2 * s - 9 * s2 + 12 * s3 - 5 * s4);
  const double h01 = 30 * s2 - 60 * s3 + 30 * s4;
  const double h11 = -12 * s2 + 28 * s3 - 15 * s4;
  const double h21 = 0.5 * (3 * s2 - 8 * s3 + 5 * s4);
  return (h00 / h) * p0 + h10 * d0 + (h * h20) * a0 + (h01 / h) * p1 + h11 * d1 + (h * h21) * a1;
}

// Composite Simpson on uniformly spaced samples (odd count preferred; the
// last interval falls back to the trapezoid rule otherwise).
template <class T>
T simpson(const std::vector<T>& f, double h) {
  const int n = static_cast<int>(f.size());
  if (n < 2) return T{};
  T acc{};
  int last = (n - 1) % 2 == 0 ? n - 1 : n - 2;
  for (int i = 0; i + 2 <= last; i += 2) acc += (h / 3.0) * (f[i] + 4.0 * f[i + 1] + f[i + 2]);
  if (last != n - 1) acc += (h / 2.0) * (f[n - 2] + f[n - 1]);
  return acc;
}

}  // namespace beamxray
