#pragma once

// Riemannian models on a single chart, geodesics with boundary exits and a
// parallel normal frame, Fermi charts along geodesics, and the transverse
// curvature matrix that drives the beam Riccati equation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "beamxray/errors.hpp"
#include "beamxray/jets.hpp"
#include "beamxray/numerics.hpp"

namespace beamxray {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline IndexSetPtr jet_space(int nvars, int order) { return MultiIndexSet::get(nvars, order); }

// Inverse and determinant of a symmetric matrix of jets by Gauss-Jordan
// elimination without pivoting (the constant term is positive definite).
struct JetInverse {
  std::vector<RPoly> inv;  // row-major m*m
  RPoly det;
};

inline JetInverse invert_jet_matrix(const std::vector<RPoly>& a, int m) {
  auto set = a[0].set();
  std::vector<RPoly> w = a;
  std::vector<RPoly> inv(m * m, RPoly(set));
  for (int i = 0; i < m; ++i) inv[i * m + i][0] = 1.0;
  RPoly det(set, 1.0);
  for (int c = 0; c < m; ++c) {
    const RPoly piv = w[c * m + c];
    if (!(std::abs(piv[0]) > 1e-300)) throw Error(ErrorKind::DegenerateMetric, "singular metric jet");
    det = det * piv;
    const RPoly rp = reciprocal(piv);
    for (int j = 0; j < m; ++j) {
      w[c * m + j] = w[c * m + j] * rp;
      inv[c * m + j] = inv[c * m + j] * rp;
    }
    for (int r = 0; r < m; ++r) {
      if (r == c) continue;
      const RPoly f = w[r * m + c];
      for (int j = 0; j < m; ++j) {
        w[r * m + j] -= f * w[c * m + j];
        inv[r * m + j] -= f * inv[c * m + j];
      }
    }
  }
  return {std::move(inv), std::move(det)};
}

class ManifoldModel {
 public:
  virtual ~ManifoldModel() = default;
  virtual int dim() const = 0;
  virtual std::string name() const = 0;
  virtual Mat metric(const Vec& x) const = 0;
  virtual double boundary(const Vec& x) const = 0;
  virtual Vec boundary_grad(const Vec& x) const = 0;

  // Taylor coefficients of g_ij around x (row-major m*m jets in m variables).
  // Analytic models support any order; generic models stop at 2.
  virtual std::vector<RPoly> metric_jet(const Vec& x, int order) const = 0;
  virtual int max_derivative_order() const = 0;

  // Gamma^k_ij a^i b^j.
  virtual Vec christoffel_contract(const Vec& x, const Vec& a, const Vec& b) const;

  // Upper bound on sectional curvature over the model (for chart width checks).
  virtual double curvature_bound() const = 0;

  // Riemannian distance to the boundary (exact for the rotationally symmetric
  // built-ins, a radial-path upper bound otherwise).
  virtual double boundary_distance(const Vec& x) const = 0;
};

using ModelPtr = std::shared_ptr<const ManifoldModel>;

// Gamma^k_ij at x, returned as Gamma[k](i, j).
inline std::vector<Mat> christoffel(const ManifoldModel& model, const Vec& x) {
  const int m = model.dim();
  Mat g = model.metric(x);
  Eigen::LLT<Mat> llt(g);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::DegenerateMetric, "metric is not positive definite");
  Mat ginv = llt.solve(Mat::Identity(m, m));
  auto jet = model.metric_jet(x, 1);
  auto dg = [&](int i, int j, int l) {
    std::vector<int> e(m, 0);
    e[l] = 1;
    return jet[i * m + j][jet[0].set()->index(e.data())];
  };
  std::vector<Mat> gam(m, Mat::Zero(m, m));
  for (int k = 0; k < m; ++k)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        double s = 0;
        for (int l = 0; l < m; ++l) s += ginv(k, l) * (dg(j, l, i) + dg(i, l, j) - dg(i, j, l));
        gam[k](i, j) = 0.5 * s;
      }
  return gam;
}

inline Vec ManifoldModel::christoffel_contract(const Vec& x, const Vec& a, const Vec& b) const {
  auto gam = christoffel(*this, x);
  Vec r(dim());
  for (int k = 0; k < dim(); ++k) r[k] = a.dot(gam[k] * b);
  return r;
}

// Christoffel symbols as jets of the given order around x: Gamma[k*m*m + i*m + j].
inline std::vector<RPoly> christoffel_jet(const ManifoldModel& model, const Vec& x, int order) {
  const int m = model.dim();
  if (order + 1 > model.max_derivative_order())
    throw Error(ErrorKind::InsufficientDerivatives, "model does not provide enough metric derivatives");
  auto g = model.metric_jet(x, order + 1);
  auto inv = invert_jet_matrix(g, m).inv;
  auto target = jet_space(m, order);
  std::vector<std::vector<RPoly>> dg(m);  // dg[l][i*m+j]
  for (int l = 0; l < m; ++l)
    for (int ij = 0; ij < m * m; ++ij) dg[l].push_back(truncate(derivative(g[ij], l), target));
  std::vector<RPoly> gam(m * m * m, RPoly(target));
  for (int k = 0; k < m; ++k)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        RPoly s(target);
        for (int l = 0; l < m; ++l) {
          RPoly t = dg[i][j * m + l] + dg[j][i * m + l] - dg[l][i * m + j];
          s.add_product(truncate(inv[k * m + l], target), t);
        }
        s *= 0.5;
        gam[k * m * m + i * m + j] = std::move(s);
      }
  return gam;
}

// Riemann tensor R^l_{kij} at x, flattened as R[((l*m + k)*m + i)*m + j], with
// R(d_i, d_j) d_k = R^l_{kij} d_l.
inline std::vector<double> riemann(const ManifoldModel& model, const Vec& x) {
  const int m = model.dim();
  auto gam = christoffel_jet(model, x, 1);
  const auto& set = *gam[0].set();
  std::vector<int> e(m, 0);
  auto G = [&](int k, int i, int j) { return gam[k * m * m + i * m + j][0]; };
  auto dG = [&](int d, int k, int i, int j) {
    std::fill(e.begin(), e.end(), 0);
    e[d] = 1;
    return gam[k * m * m + i * m + j][set.index(e.data())];
  };
  std::vector<double> R(m * m * m * m, 0.0);
  for (int l = 0; l < m; ++l)
    for (int k = 0; k < m; ++k)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
          double v = dG(i, l, j, k) - dG(j, l, i, k);
          for (int p = 0; p < m; ++p) v += G(l, i, p) * G(p, j, k) - G(l, j, p) * G(p, i, k);
          R[((l * m + k) * m + i) * m + j] = v;
        }
  return R;
}

// Metrics of the form e^{2f} times the Euclidean metric.  The conformal
// factor can be composed with jets, which is what the Fermi-chart recursion
// needs.
class ConformalModel : public ManifoldModel {
 public:
  ConformalModel(int dim, double radius) : dim_(dim), radius_(radius) {
    if (dim < 2) throw Error(ErrorKind::ShapeError, "dimension must be at least 2");
    if (!(radius > 0)) throw Error(ErrorKind::DomainError, "radius must be positive");
  }
  int dim() const override { return dim_; }
  double radius() const { return radius_; }

  virtual double f(const Vec& x) const = 0;
  virtual Vec grad_f(const Vec& x) const = 0;
  virtual RPoly f_of(const std::vector<RPoly>& X) const = 0;
  virtual std::vector<RPoly> grad_f_of(const std::vector<RPoly>& X) const = 0;

  Mat metric(const Vec& x) const override { return std::exp(2 * f(x)) * Mat::Identity(dim_, dim_); }
  double boundary(const Vec& x) const override { return x.squaredNorm() - radius_ * radius_; }
  Vec boundary_grad(const Vec& x) const override { return 2 * x; }
  int max_derivative_order() const override { return 64; }

  std::vector<RPoly> metric_jet(const Vec& x, int order) const override {
    auto set = jet_space(dim_, order);
    std::vector<RPoly> X;
    for (int k = 0; k < dim_; ++k) X.push_back(RPoly::variable(set, k, x[k]));
    RPoly e = exp(f_of(X) * 2.0);
    std::vector<RPoly> g(dim_ * dim_, RPoly(set));
    for (int k = 0; k < dim_; ++k) g[k * dim_ + k] = e;
    return g;
  }

  Vec christoffel_contract(const Vec& x, const Vec& a, const Vec& b) const override {
    Vec df = grad_f(x);
    return a * df.dot(b) + b * df.dot(a) - df * a.dot(b);
  }

  // Same contraction with jet-valued arguments; df = grad_f_of(X).
  static void christoffel_contract_jet(const std::vector<RPoly>& df, const std::vector<RPoly>& a,
                                       const std::vector<RPoly>& b, std::vector<RPoly>& out) {
    const int m = static_cast<int>(df.size());
    auto set = a[0].set();
    RPoly dfb(set), dfa(set), ab(set);
    for (int k = 0; k < m; ++k) {
      dfb.add_product(df[k], b[k]);
      dfa.add_product(df[k], a[k]);
      ab.add_product(a[k], b[k]);
    }
    out.assign(m, RPoly(set));
    for (int k = 0; k < m; ++k) {
      out[k].add_product(a[k], dfb);
      out[k].add_product(b[k], dfa);
      out[k] -= df[k] * ab;
    }
  }

 protected:
  int dim_;
  double radius_;
};

class EuclideanDisk : public ConformalModel {
 public:
  explicit EuclideanDisk(double radius = 1.0, int dim = 2) : ConformalModel(dim, radius) {}
  std::string name() const override { return "disk"; }
  double f(const Vec&) const override { return 0; }
  Vec grad_f(const Vec& x) const override { return Vec::Zero(x.size()); }
  RPoly f_of(const std::vector<RPoly>& X) const override { return RPoly(X[0].set()); }
  std::vector<RPoly> grad_f_of(const std::vector<RPoly>& X) const override {
    return std::vector<RPoly>(dim_, RPoly(X[0].set()));
  }
  Vec christoffel_contract(const Vec& x, const Vec&, const Vec&) const override { return Vec::Zero(x.size()); }
  double curvature_bound() const override { return 0; }
  double boundary_distance(const Vec& x) const override { return radius_ - x.norm(); }
};

// Conformal disk with f a polynomial of degree <= 4.  Coefficients follow the
// graded-lexicographic monomial order 1, x1, x2, x1^2, x1 x2, x2^2, x1^3, ...
class ConformalDisk : public ConformalModel {
 public:
  ConformalDisk(std::vector<double> coeffs, double radius = 1.0, int dim = 2)
      : ConformalModel(dim, radius), set_(MultiIndexSet::get(dim, 4)) {
    if (static_cast<int>(coeffs.size()) > set_->size())
      throw Error(ErrorKind::ShapeError, "conformal polynomial has degree above 4");
    coeffs.resize(set_->size(), 0.0);
    coeffs_ = std::move(coeffs);
    for (int v = 0; v < dim; ++v) {
      std::vector<double> d(set_->size(), 0.0);
      for (int k = 0; k < set_->size(); ++k) {
        int t = set_->deriv_target(v, k);
        if (t >= 0) d[t] += coeffs_[k] * set_->exponent(k, v);
      }
      grad_coeffs_.push_back(std::move(d));
    }
    // The documented family keeps |f| <= 0.2 on the closed disk.
    double fmax = 0;
    for (int i = 0; i <= 40; ++i)
      for (int j = 0; j <= 40; ++j) {
        Vec x(dim);
        x.setZero();
        x[0] = radius * (2.0 * i / 40 - 1);
        x[1] = radius * (2.0 * j / 40 - 1);
        if (x.norm() <= radius) fmax = std::max(fmax, std::abs(f(x)));
      }
    if (fmax > 0.2 + 1e-12) throw Error(ErrorKind::DomainError, "conformal factor exceeds 0.2 on the disk");
  }
  static std::vector<double> default_coeffs() {
    // 0.05 (1 - |x|^2)^2
    return {0.05, 0, 0, -0.1, 0, -0.1, 0, 0, 0, 0, 0.05, 0, 0.1, 0, 0.05};
  }
  std::string name() const override { return "conformal_disk"; }
  const std::vector<double>& coeffs() const { return coeffs_; }

  double f(const Vec& x) const override { return eval(coeffs_, x); }
  Vec grad_f(const Vec& x) const override {
    Vec g(dim_);
    for (int v = 0; v < dim_; ++v) g[v] = eval(grad_coeffs_[v], x);
    return g;
  }
  RPoly f_of(const std::vector<RPoly>& X) const override { return compose(coeffs_, X); }
  std::vector<RPoly> grad_f_of(const std::vector<RPoly>& X) const override {
    std::vector<RPoly> r;
    for (int v = 0; v < dim_; ++v) r.push_back(compose(grad_coeffs_[v], X));
    return r;
  }
  double curvature_bound() const override {
    // Gaussian curvature -e^{-2f} Laplacian(f), sampled on a grid (m = 2 family).
    double kmax = 0;
    for (int i = 0; i <= 60; ++i)
      for (int j = 0; j <= 60; ++j) {
        Vec x = Vec::Zero(dim_);
        x[0] = radius_ * (2.0 * i / 60 - 1);
        x[1] = radius_ * (2.0 * j / 60 - 1);
        if (x.norm() > radius_ * 1.1) continue;
        double lap = 0;
        for (int v = 0; v < dim_; ++v) {
          std::vector<double> d2(set_->size(), 0.0);
          for (int k = 0; k < set_->size(); ++k) {
            int t = set_->deriv_target(v, k);
            if (t >= 0) d2[t] += grad_coeffs_[v][k] * set_->exponent(k, v);
          }
          lap += eval(d2, x);
        }
        kmax = std::max(kmax, -std::exp(-2 * f(x)) * lap);
      }
    return kmax;
  }
  double boundary_distance(const Vec& x) const override {
    const double r0 = x.norm();
    Vec dir = r0 > 0 ? Vec(x / r0) : Vec(Vec::Unit(dim_, 0));
    static const Quadrature q = gauss_legendre(24);
    const double mid = 0.5 * (radius_ + r0), half = 0.5 * (radius_ - r0);
    double s = 0;
    for (int i = 0; i < 24; ++i) s += q.weights[i] * std::exp(f(Vec((mid + half * q.nodes[i]) * dir)));
    return half * s;
  }

 private:
  double eval(const std::vector<double>& c, const Vec& x) const {
    // Power table x_v^a for a <= 4 (at most 3 variables in practice).
    double pw[8][5];
    for (int v = 0; v < dim_; ++v) {
      pw[v][0] = 1;
      for (int a = 1; a <= 4; ++a) pw[v][a] = pw[v][a - 1] * x[v];
    }
    double s = 0;
    for (int k = 0; k < set_->size(); ++k) {
      if (c[k] == 0) continue;
      double mono = c[k];
      for (int v = 0; v < dim_; ++v) mono *= pw[v][set_->exponent(k, v)];
      s += mono;
    }
    return s;
  }
  RPoly compose(const std::vector<double>& c, const std::vector<RPoly>& X) const {
    auto set = X[0].set();
    std::vector<std::vector<RPoly>> pw(dim_);
    for (int v = 0; v < dim_; ++v) {
      pw[v].push_back(RPoly(set, 1.0));
      for (int a = 1; a <= 4; ++a) pw[v].push_back(pw[v].back() * X[v]);
    }
    RPoly r(set);
    for (int k = 0; k < set_->size(); ++k) {
      if (c[k] == 0) continue;
      RPoly mono(set, c[k]);
      for (int v = 0; v < dim_; ++v)
        if (set_->exponent(k, v) > 0) mono = mono * pw[v][set_->exponent(k, v)];
      r += mono;
    }
    return r;
  }

  IndexSetPtr set_;
  std::vector<double> coeffs_;
  std::vector<std::vector<double>> grad_coeffs_;
};

// Unit round sphere in stereographic coordinates, restricted to the cap
// |x| < radius (radius 1 is the hemisphere).  Sectional curvature is +1.
class SphereCap : public ConformalModel {
 public:
  explicit SphereCap(double radius = 0.8, int dim = 2) : ConformalModel(dim, radius) {}
  std::string name() const override { return "sphere_cap"; }
  double f(const Vec& x) const override { return std::log(2.0) - std::log1p(x.squaredNorm()); }
  Vec grad_f(const Vec& x) const override { return -2.0 * x / (1.0 + x.squaredNorm()); }
  RPoly f_of(const std::vector<RPoly>& X) const override {
    RPoly q(X[0].set(), 1.0);
    for (const auto& xk : X) q.add_product(xk, xk);
    return log(q) * -1.0 + std::log(2.0);
  }
  std::vector<RPoly> grad_f_of(const std::vector<RPoly>& X) const override {
    RPoly q(X[0].set(), 1.0);
    for (const auto& xk : X) q.add_product(xk, xk);
    RPoly r = reciprocal(q) * -2.0;
    std::vector<RPoly> g;
    for (const auto& xk : X) g.push_back(r * xk);
    return g;
  }
  double curvature_bound() const override { return 1.0; }
  double boundary_distance(const Vec& x) const override { return 2.0 * (std::atan(radius_) - std::atan(x.norm())); }
};

// A model given by plain callables.  Metric derivatives come from nested
// central differences (step 1e-4, one Richardson step) and stop at order 2.
class CallbackModel : public ManifoldModel {
 public:
  using MetricFn = std::function<Mat(const Vec&)>;
  using BoundaryFn = std::function<double(const Vec&)>;
  using GradFn = std::function<Vec(const Vec&)>;

  CallbackModel(int dim, std::string name, MetricFn g, BoundaryFn b, GradFn db, double curvature_bound = 0)
      : dim_(dim), name_(std::move(name)), g_(std::move(g)), b_(std::move(b)), db_(std::move(db)), kmax_(curvature_bound) {}

  int dim() const override { return dim_; }
  std::string name() const override { return name_; }
  Mat metric(const Vec& x) const override { return g_(x); }
  double boundary(const Vec& x) const override { return b_(x); }
  Vec boundary_grad(const Vec& x) const override { return db_(x); }
  int max_derivative_order() const override { return 2; }
  double curvature_bound() const override { return kmax_; }
  double boundary_distance(const Vec& x) const override {
    // First-order estimate -b / |grad b|_g.
    Vec db = db_(x);
    Mat g = g_(x);
    return -b_(x) / std::sqrt(db.dot(g.ldlt().solve(db)));
  }

  std::vector<RPoly> metric_jet(const Vec& x, int order) const override {
    if (order > 2) throw Error(ErrorKind::InsufficientDerivatives, "callback models provide metric derivatives up to order 2");
    auto set = jet_space(dim_, order);
    const int m = dim_;
    std::vector<RPoly> jet(m * m, RPoly(set));
    Mat g0 = g_(x);
    for (int ij = 0; ij < m * m; ++ij) jet[ij][0] = g0(ij / m, ij % m);
    if (order == 0) return jet;
    const double h = 1e-4;
    auto shifted = [&](int i, double si, int j, double sj) {
      Vec y = x;
      y[i] += si;
      if (j >= 0) y[j] += sj;
      return g_(y);
    };
    std::vector<int> e(m, 0);
    for (int i = 0; i < m; ++i) {
      auto d1 = [&](double s) { return Mat((shifted(i, s, -1, 0) - shifted(i, -s, -1, 0)) / (2 * s)); };
      Mat D = (4 * d1(h / 2) - d1(h)) / 3;
      std::fill(e.begin(), e.end(), 0);
      e[i] = 1;
      int k1 = set->index(e.data());
      for (int ij = 0; ij < m * m; ++ij) jet[ij][k1] = D(ij / m, ij % m);
      if (order < 2) continue;
      for (int j = i; j < m; ++j) {
        auto d2 = [&](double s) {
          if (i == j) return Mat((shifted(i, s, -1, 0) - 2 * g0 + shifted(i, -s, -1, 0)) / (s * s));
          return Mat((shifted(i, s, j, s) - shifted(i, s, j, -s) - shifted(i, -s, j, s) + shifted(i, -s, j, -s)) / (4 * s * s));
        };
        // A larger base step keeps round-off below the truncation error here.
        Mat D2 = (4 * d2(5 * h) - d2(10 * h)) / 3;
        std::fill(e.begin(), e.end(), 0);
        e[i] += 1;
        e[j] += 1;
        int k2 = set->index(e.data());
        const double factor = (i == j) ? 0.5 : 1.0;
        for (int ij = 0; ij < m * m; ++ij) jet[ij][k2] = factor * D2(ij / m, ij % m);
      }
    }
    return jet;
  }

 private:
  int dim_;
  std::string name_;
  MetricFn g_;
  BoundaryFn b_;
  GradFn db_;
  double kmax_;
};

// Angle between a unit tangent and the boundary hypersurface at x.
inline double exit_angle(const ManifoldModel& model, const Vec& x, const Vec& v) {
  Vec db = model.boundary_grad(x);
  Mat g = model.metric(x);
  double nrm = std::sqrt(db.dot(g.ldlt().solve(db)));
  double s = std::min(1.0, std::abs(db.dot(v)) / nrm);
  return std::asin(s);
}

inline double g_norm(const ManifoldModel& model, const Vec& x, const Vec& v) { return std::sqrt(v.dot(model.metric(x) * v)); }

struct GeodesicOptions {
  double step = 1e-3;
  double T_max = 50.0;
  double theta_tangent = 1e-3;
  double tube_radius = 0.0;  // > 0 enables the self-intersection check
};

// Unit-speed geodesic between two boundary points, t in [0, tau].  Nodes are
// uniformly spaced except for the two partial intervals at the ends.
class GeodesicPath {
 public:
  ModelPtr model;
  std::vector<double> times;
  std::vector<Vec> points, velocities, accelerations;
  std::vector<Mat> frames, frame_rates;  // m x (m-1) columns E_i and dE_i/dt
  double tau = 0;
  double t_seed = 0;  // parameter of the point the path was launched from
  double exit_angle_start = 0, exit_angle_end = 0;

  int dim() const { return model->dim(); }
  int size() const { return static_cast<int>(times.size()); }

  int interval(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    int i = static_cast<int>(it - times.begin()) - 1;
    return std::clamp(i, 0, size() - 2);
  }
  Vec point_at(double t) const {
    int i = interval(t);
    double h = times[i + 1] - times[i];
    double s = (t - times[i]) / h;
    return hermite5(points[i], velocities[i], accelerations[i], points[i + 1], velocities[i + 1], accelerations[i + 1], h, s);
  }
  Vec velocity_at(double t) const {
    int i = interval(t);
    double h = times[i + 1] - times[i];
    double s = (t - times[i]) / h;
    return hermite5_deriv(points[i], velocities[i], accelerations[i], points[i + 1], velocities[i + 1], accelerations[i + 1], h, s);
  }
  Mat frame_at(double t) const {
    int i = interval(t);
    double h = times[i + 1] - times[i];
    double s = (t - times[i]) / h;
    const double h00 = 2 * s * s * s - 3 * s * s + 1, h10 = s * s * s - 2 * s * s + s;
    const double h01 = -2 * s * s * s + 3 * s * s, h11 = s * s * s - s * s;
    return h00 * frames[i] + (h * h10) * frame_rates[i] + h01 * frames[i + 1] + (h * h11) * frame_rates[i + 1];
  }

  // The same geodesic run backwards: t -> tau - t, same frame vectors.
  GeodesicPath reversed() const {
    GeodesicPath r;
    r.model = model;
    r.tau = tau;
    r.t_seed = tau - t_seed;
    r.exit_angle_start = exit_angle_end;
    r.exit_angle_end = exit_angle_start;
    for (int i = size() - 1; i >= 0; --i) {
      r.times.push_back(tau - times[i]);
      r.points.push_back(points[i]);
      r.velocities.push_back(-velocities[i]);
      r.accelerations.push_back(accelerations[i]);
      r.frames.push_back(frames[i]);
      r.frame_rates.push_back(-frame_rates[i]);
    }
    r.times.front() = 0.0;
    r.times.back() = tau;
    return r;
  }
};

using PathPtr = std::shared_ptr<const GeodesicPath>;

namespace detail {

// State layout: x (m), v (m), frame columns (m each).
inline Vec geodesic_rhs(const ManifoldModel& model, const Vec& s) {
  const int m = model.dim();
  const int nf = static_cast<int>(s.size()) / m - 2;
  Vec x = s.head(m), v = s.segment(m, m);
  Vec d(s.size());
  d.head(m) = v;
  d.segment(m, m) = -model.christoffel_contract(x, v, v);
  for (int a = 0; a < nf; ++a) d.segment((2 + a) * m, m) = -model.christoffel_contract(x, v, s.segment((2 + a) * m, m));
  return d;
}

inline Vec rk4_step(const ManifoldModel& model, const Vec& s, double h) {
  Vec k1 = geodesic_rhs(model, s);
  Vec k2 = geodesic_rhs(model, s + 0.5 * h * k1);
  Vec k3 = geodesic_rhs(model, s + 0.5 * h * k2);
  Vec k4 = geodesic_rhs(model, s + h * k3);
  return s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4);
}

// g-orthonormal basis of the g-orthogonal complement of v.
inline Mat normal_frame(const ManifoldModel& model, const Vec& x, const Vec& v) {
  const int m = model.dim();
  Mat g = model.metric(x);
  std::vector<Vec> basis{v};
  if (m == 2) {
    Vec jv(2);
    jv << -v[1], v[0];
    basis.push_back(jv);
  } else {
    for (int k = 0; k < m; ++k) basis.push_back(Vec::Unit(m, k));
  }
  std::vector<Vec> ortho;
  for (auto& w : basis) {
    Vec u = w;
    for (auto& o : ortho) u -= o.dot(g * u) * o;
    double n = std::sqrt(u.dot(g * u));
    if (n > 1e-8) ortho.push_back(u / n);
    if (static_cast<int>(ortho.size()) == m) break;
  }
  Mat E(m, m - 1);
  for (int a = 0; a < m - 1; ++a) E.col(a) = ortho[a + 1];
  return E;
}

}  // namespace detail

inline GeodesicPath integrate_geodesic(ModelPtr model, const Vec& x, const Vec& v, const GeodesicOptions& opt = {}) {
  const ManifoldModel& M = *model;
  const int m = M.dim();
  if (x.size() != m || v.size() != m) throw Error(ErrorKind::ShapeError, "point/vector dimension mismatch");
  if (!(opt.step > 0)) throw Error(ErrorKind::DomainError, "step must be positive");
  if (M.boundary(x) >= 0) throw Error(ErrorKind::DomainError, "start point is not interior");
  if (std::abs(g_norm(M, x, v) - 1) > 1e-10) throw Error(ErrorKind::DomainError, "initial vector is not unit length");

  Mat E0 = detail::normal_frame(M, x, v);
  auto pack = [&](const Vec& dir) {
    Vec s(m * (m + 1));
    s.head(m) = x;
    s.segment(m, m) = dir;
    for (int a = 0; a < m - 1; ++a) s.segment((2 + a) * m, m) = E0.col(a);
    return s;
  };

  // Integrate from x along dir until the boundary; returns states and arclengths.
  auto leg = [&](const Vec& dir, std::vector<Vec>& states, std::vector<double>& arcs) {
    states = {pack(dir)};
    arcs = {0.0};
    const double h = opt.step;
    while (true) {
      const Vec& cur = states.back();
      Vec next = detail::rk4_step(M, cur, h);
      if (M.boundary(next.head(m)) >= 0) {
        double lo = 0, hi = h;
        Vec best = next;
        double best_s = h;
        for (int it = 0; it < 200; ++it) {
          double mid = 0.5 * (lo + hi);
          Vec trial = detail::rk4_step(M, cur, mid);
          double b = M.boundary(trial.head(m));
          best = trial;
          best_s = mid;
          if (std::abs(b) <= 1e-13) break;
          (b < 0 ? lo : hi) = mid;
          if (hi - lo < 1e-17) break;
        }
        if (best_s > 1e-12) {
          states.push_back(best);
          arcs.push_back(arcs.back() + best_s);
        } else {
          states.back() = best;
        }
        return;
      }
      states.push_back(std::move(next));
      arcs.push_back(arcs.back() + h);
      if (arcs.back() > opt.T_max) throw Error(ErrorKind::TrappedGeodesic, "no boundary exit within T_max");
    }
  };

  std::vector<Vec> fwd, bwd;
  std::vector<double> sf, sb;
  leg(v, fwd, sf);
  leg(-v, bwd, sb);
  if (sf.back() + sb.back() > opt.T_max) throw Error(ErrorKind::TrappedGeodesic, "geodesic longer than T_max");

  GeodesicPath p;
  p.model = model;
  const double tb = sb.back();
  auto push = [&](double t, const Vec& s, double vsign) {
    Vec xx = s.head(m), vv = vsign * s.segment(m, m);
    Mat E(m, m - 1);
    for (int a = 0; a < m - 1; ++a) E.col(a) = s.segment((2 + a) * m, m);
    p.times.push_back(t);
    p.points.push_back(xx);
    p.velocities.push_back(vv);
    p.accelerations.push_back(-M.christoffel_contract(xx, vv, vv));
    Mat dE(m, m - 1);
    for (int a = 0; a < m - 1; ++a) dE.col(a) = -M.christoffel_contract(xx, vv, Vec(E.col(a)));
    p.frames.push_back(E);
    p.frame_rates.push_back(dE);
  };
  for (int i = static_cast<int>(bwd.size()) - 1; i >= 1; --i) push(tb - sb[i], bwd[i], -1.0);
  for (std::size_t i = 0; i < fwd.size(); ++i) push(tb + sf[i], fwd[i], 1.0);
  p.times.front() = 0.0;
  p.tau = tb + sf.back();
  p.t_seed = tb;

  p.exit_angle_start = exit_angle(M, p.points.front(), p.velocities.front());
  p.exit_angle_end = exit_angle(M, p.points.back(), p.velocities.back());
  if (std::min(p.exit_angle_start, p.exit_angle_end) < opt.theta_tangent)
    throw Error(ErrorKind::TangentialExit, "geodesic meets the boundary tangentially");

  if (opt.tube_radius > 0) {
    const double d = opt.tube_radius;
    const int stride = std::max(1, static_cast<int>(d / (4 * opt.step)));
    for (int i = 0; i < p.size(); i += stride)
      for (int j = i + stride; j < p.size(); j += stride)
        if (p.times[j] - p.times[i] > 4 * d && (p.points[i] - p.points[j]).norm() < d)
          throw Error(ErrorKind::SelfIntersecting, "geodesic returns within the tube radius");
  }
  return p;
}

// v rescaled to unit length in the metric at x.
inline Vec unit_vector(const ManifoldModel& model, const Vec& x, const Vec& v) { return v / g_norm(model, x, v); }

inline PathPtr make_path(ModelPtr model, const Vec& x, const Vec& v, const GeodesicOptions& opt = {}) {
  return std::make_shared<const GeodesicPath>(integrate_geodesic(std::move(model), x, v, opt));
}

// Transverse curvature F_ij(t) = -<R(E_i, gamma') gamma', E_j> in the parallel frame.
inline Mat curvature_F(const ManifoldModel& model, const GeodesicPath& path, double t) {
  if (model.max_derivative_order() < 2) throw Error(ErrorKind::InsufficientDerivatives, "curvature needs second metric derivatives");
  const int m = model.dim();
  Vec x = path.point_at(t), v = path.velocity_at(t);
  Mat E = path.frame_at(t);
  auto R = riemann(model, x);
  Mat g = model.metric(x);
  Mat F(m - 1, m - 1);
  for (int a = 0; a < m - 1; ++a) {
    // W = R(E_a, v) v
    Vec W = Vec::Zero(m);
    for (int l = 0; l < m; ++l)
      for (int k = 0; k < m; ++k)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < m; ++j) W[l] += R[((l * m + k) * m + i) * m + j] * E(i, a) * v[j] * v[k];
    for (int b = 0; b < m - 1; ++b) F(a, b) = -W.dot(g * E.col(b));
  }
  return 0.5 * (F + F.transpose());
}

// ---------------------------------------------------------------------------
// Fermi charts.  Each slice carries Taylor jets in the local variables
// (s, y) = (t - t_slice, y) of the chart map, the pulled-back metric, its
// inverse, the volume density and the first-order part of the Laplacian.

struct ChartSlice {
  double t = 0;
  Vec x, v;  // backbone point and velocity
  Mat E;     // parallel frame
  std::vector<RPoly> X;     // chart map, order L+1
  std::vector<RPoly> dX;    // dX[k*m + a] = d X^k / d(variable a)
  std::vector<RPoly> G;     // metric g_ab, order L
  std::vector<RPoly> Ginv;  // inverse metric g^ab, order L
  RPoly sqrt_det;           // sqrt(det g_ab), order L
  std::vector<RPoly> V;     // V^b = d_a g^ab + g^ab d_a log sqrt(det), order L-1
};

struct ChartOptions {
  int order = 10;          // L
  double spacing = 2.5e-3; // slice spacing
  double extension = 0.5;  // slices cover [-extension, tau + extension]
};

class FermiChart {
 public:
  FermiChart(PathPtr path, double radius, ChartOptions opt = {})
      : path_(std::move(path)), radius_(radius), opt_(opt) {
    const auto* conf = dynamic_cast<const ConformalModel*>(path_->model.get());
    if (!conf) throw Error(ErrorKind::InsufficientDerivatives, "Fermi jets need a model with composable metric (conformal family)");
    model_ = conf;
    if (!(radius > 0)) throw Error(ErrorKind::DomainError, "chart radius must be positive");
    const double kmax = model_->curvature_bound();
    if (kmax > 0 && radius > std::numbers::pi / (2 * std::sqrt(kmax)))
      throw Error(ErrorKind::ChartTooWide, "chart radius exceeds half the injectivity radius estimate");
    m_ = model_->dim();
    set_x_ = jet_space(m_, opt_.order + 1);
    set_g_ = jet_space(m_, opt_.order);
    set_v_ = jet_space(m_, std::max(0, opt_.order - 1));

    const double h = opt_.spacing;
    const int kmin = -static_cast<int>(std::ceil(opt_.extension / h - 1e-9));
    const int kmax_i = static_cast<int>(std::ceil((path_->tau + opt_.extension) / h - 1e-9));
    k0_ = kmin;
    slices_.resize(kmax_i - kmin + 1);
    // Seed at t = 0 and step outwards in both directions along the backbone series.
    Vec x = path_->points.front(), v = path_->velocities.front();
    Mat E = path_->frames.front();
    for (int k = 0; k <= kmax_i; ++k) {
      build_slice(slices_[k - kmin], k * h, x, v, E);
      advance(slices_[k - kmin], h, x, v, E);
    }
    x = path_->points.front(), v = path_->velocities.front(), E = path_->frames.front();
    advance(slices_[-kmin], -h, x, v, E);
    for (int k = -1; k >= kmin; --k) {
      build_slice(slices_[k - kmin], k * h, x, v, E);
      advance(slices_[k - kmin], -h, x, v, E);
    }
  }

  const GeodesicPath& path() const { return *path_; }
  const PathPtr& path_ptr() const { return path_; }
  const ManifoldModel& model() const { return *model_; }
  double radius() const { return radius_; }
  int order() const { return opt_.order; }
  double spacing() const { return opt_.spacing; }
  int dim() const { return m_; }
  double t_min() const { return slices_.front().t; }
  double t_max() const { return slices_.back().t; }
  int num_slices() const { return static_cast<int>(slices_.size()); }
  const ChartSlice& slice(int i) const { return slices_[i]; }
  // Step number k of the first slice (slice i sits at t = (first_step() + i) * spacing).
  int first_step() const { return k0_; }
  // Index of the slice at parameter k * spacing.
  int slice_for_step(int k) const { return k - k0_; }
  int nearest_slice(double t) const {
    int k = static_cast<int>(std::lround(t / opt_.spacing));
    return std::clamp(k - k0_, 0, num_slices() - 1);
  }
  const IndexSetPtr& map_space() const { return set_x_; }
  const IndexSetPtr& metric_space() const { return set_g_; }

  // Chart map from the Taylor jets.
  Vec map(double t, const Vec& y) const {
    const ChartSlice& sl = slices_[nearest_slice(t)];
    auto mono = local_monomials(*set_x_, t - sl.t, y);
    Vec r(m_);
    for (int k = 0; k < m_; ++k) r[k] = dot(sl.X[k], mono);
    return r;
  }
  // d map / d(t, y) as an m x m matrix (column a = derivative in variable a).
  Mat jacobian(double t, const Vec& y) const {
    const ChartSlice& sl = slices_[nearest_slice(t)];
    auto mono = local_monomials(*set_x_, t - sl.t, y);
    Mat J(m_, m_);
    for (int k = 0; k < m_; ++k)
      for (int a = 0; a < m_; ++a) J(k, a) = dot(sl.dX[k * m_ + a], mono);
    return J;
  }
  // Pulled-back metric from the jets.
  Mat pulled_back_metric(double t, const Vec& y) const {
    const ChartSlice& sl = slices_[nearest_slice(t)];
    auto mono = local_monomials(*set_g_, t - sl.t, y);
    Mat G(m_, m_);
    for (int ab = 0; ab < m_ * m_; ++ab) G(ab / m_, ab % m_) = dot(sl.G[ab], mono);
    return G;
  }

  // The exponential map integrated directly: exp_{gamma(t)}(sum y_i E_i(t)).
  Vec map_shoot(double t, const Vec& y, int steps = 400) const {
    const ChartSlice& sl = slices_[nearest_slice(t)];
    const double s = t - sl.t;
    Vec x0(m_), w = Vec::Zero(m_);
    std::vector<double> yy(m_, 0.0);
    yy[0] = s;
    auto mono = monomials(*set_x_, std::span<const double>(yy));
    for (int k = 0; k < m_; ++k) x0[k] = dot(sl.X[k], mono);
    Mat E = frame_series_at(sl, s);
    for (int a = 0; a < m_ - 1; ++a) w += y[a] * E.col(a);
    Vec state(2 * m_);
    state << x0, w;
    const double h = 1.0 / steps;
    for (int i = 0; i < steps; ++i) state = detail::rk4_step(*model_, state, h);
    return state.head(m_);
  }

  // Pulled-back metric of map_shoot by central differences with one Richardson step.
  Mat pulled_back_metric_fd(double t, const Vec& y, double h = 1e-4) const {
    auto shoot = [&](int a, double d) {
      double tt = t;
      Vec yy = y;
      if (a == 0)
        tt += d;
      else
        yy[a - 1] += d;
      return map_shoot(tt, yy);
    };
    Mat J(m_, m_);
    for (int a = 0; a < m_; ++a) {
      Vec d1 = (shoot(a, h) - shoot(a, -h)) / (2 * h);
      Vec d2 = (shoot(a, h / 2) - shoot(a, -h / 2)) / h;
      J.col(a) = (4 * d2 - d1) / 3;
    }
    Vec x = map_shoot(t, y);
    return J.transpose() * model_->metric(x) * J;
  }

  // The chart of the reversed geodesic t -> tau - t with the same frame
  // vectors, obtained by reflecting every slice (no recomputation).  The
  // slice grid must be commensurate with tau.
  FermiChart reversed() const {
    const double tau = path_->tau;
    const double nc = tau / opt_.spacing;
    const int n_tau = static_cast<int>(std::lround(nc));
    const int kmin = k0_, kmax = k0_ + num_slices() - 1;
    if (std::abs(nc - n_tau) > 1e-6 || kmin != n_tau - kmax)
      throw Error(ErrorKind::DomainError, "reversal needs a slice grid symmetric about the path");
    FermiChart r(*this);
    r.path_ = std::make_shared<const GeodesicPath>(path_->reversed());
    const int N = num_slices();
    // Multiply coefficient i by (-1)^(s-exponent + extra).
    auto flip = [](RPoly p, int extra) {
      const auto& set = *p.set();
      for (int i = 0; i < p.size(); ++i)
        if ((set.exponent(i, 0) + extra) % 2 != 0) p[i] = -p[i];
      return p;
    };
    for (int i = 0; i < N; ++i) {
      const ChartSlice& a = slices_[N - 1 - i];
      ChartSlice& b = r.slices_[i];
      b.t = tau - a.t;
      b.x = a.x;
      b.v = -a.v;
      b.E = a.E;
      for (int k = 0; k < m_; ++k) {
        b.X[k] = flip(a.X[k], 0);
        for (int c = 0; c < m_; ++c) b.dX[k * m_ + c] = flip(a.dX[k * m_ + c], c == 0 ? 1 : 0);
      }
      for (int p = 0; p < m_; ++p)
        for (int q = 0; q < m_; ++q) {
          const int extra = (p == 0) + (q == 0);
          b.G[p * m_ + q] = flip(a.G[p * m_ + q], extra);
          b.Ginv[p * m_ + q] = flip(a.Ginv[p * m_ + q], extra);
        }
      b.sqrt_det = flip(a.sqrt_det, 0);
      for (int q = 0; q < m_; ++q) b.V[q] = flip(a.V[q], q == 0 ? 1 : 0);
      for (std::size_t k = 0; k < backbone_[N - 1 - i].size(); ++k) r.backbone_[i][k] = flip(backbone_[N - 1 - i][k], 0);
      for (std::size_t k = 0; k < frame_[N - 1 - i].size(); ++k) r.frame_[i][k] = flip(frame_[N - 1 - i][k], 0);
    }
    r.k0_ = n_tau - kmax;
    return r;
  }

  struct Coordinates {
    double t;
    Vec y;
  };

  // Fermi coordinates of an ambient point by Newton iteration on the jet map.
  // Returns nothing when the iteration leaves the chart (the point is outside
  // the tube); throws ChartInversionFailed when it stalls inside.
  std::optional<Coordinates> invert(const Vec& x, double t_hint = std::numeric_limits<double>::quiet_NaN(),
                                    double tol = 1e-10, int max_iter = 50) const {
    double t = t_hint;
    if (!std::isfinite(t)) t = nearest_path_time(x);
    Vec y = Vec::Zero(m_ - 1);
    {
      // Initial transverse guess from the frame at t.
      const ChartSlice& sl = slices_[nearest_slice(t)];
      Vec d = x - sl.x;
      Mat g = model_->metric(sl.x);
      for (int a = 0; a < m_ - 1; ++a) y[a] = sl.E.col(a).dot(g * d);
    }
    for (int it = 0; it < max_iter; ++it) {
      if (t < t_min() - 0.5 * spacing() || t > t_max() + 0.5 * spacing() || y.norm() > 2.0 * radius_) return std::nullopt;
      Vec r = map(t, y) - x;
      Mat J = jacobian(t, y);
      Vec d = J.partialPivLu().solve(r);
      t -= d[0];
      y -= d.tail(m_ - 1);
      if (d.norm() < tol) return Coordinates{t, y};
    }
    throw Error(ErrorKind::ChartInversionFailed, "Newton iteration for Fermi coordinates did not converge");
  }

  double nearest_path_time(const Vec& x) const {
    const auto& P = *path_;
    const int stride = std::max(1, P.size() / 64);
    int best = 0;
    double bd = 1e300;
    for (int i = 0; i < P.size(); i += stride) {
      double d = (P.points[i] - x).squaredNorm();
      if (d < bd) bd = d, best = i;
    }
    for (int i = std::max(0, best - stride); i < std::min(P.size(), best + stride + 1); ++i) {
      double d = (P.points[i] - x).squaredNorm();
      if (d < bd) bd = d, best = i;
    }
    double t = P.times[best];
    // Points beyond the endpoints: project along the end tangent.
    if (best == 0) t += std::min(0.0, P.velocities.front().dot(x - P.points.front()));
    if (best == P.size() - 1) t += std::max(0.0, P.velocities.back().dot(x - P.points.back()));
    return t;
  }

  std::vector<double> local_monomials(const MultiIndexSet& set, double s, const Vec& y) const {
    std::vector<double> yy(m_);
    yy[0] = s;
    for (int a = 0; a < m_ - 1; ++a) yy[a + 1] = y[a];
    return monomials(set, std::span<const double>(yy));
  }

 private:
  Mat frame_series_at(const ChartSlice& sl, double s) const {
    std::vector<double> yy(m_, 0.0);
    yy[0] = s;
    auto mono = monomials(*set_x_, std::span<const double>(yy));
    Mat E(m_, m_ - 1);
    for (int a = 0; a < m_ - 1; ++a)
      for (int k = 0; k < m_; ++k) E(k, a) = dot(frame_[slice_pos(sl)][a * m_ + k], mono);
    return E;
  }
  int slice_pos(const ChartSlice& sl) const { return static_cast<int>(&sl - slices_.data()); }

  void advance(const ChartSlice& sl, double h, Vec& x, Vec& v, Mat& E) const {
    std::vector<double> yy(m_, 0.0);
    yy[0] = h;
    auto mono = monomials(*set_x_, std::span<const double>(yy));
    const auto& bb = backbone_[slice_pos(sl)];
    for (int k = 0; k < m_; ++k) {
      x[k] = dot(bb[k], mono);
      v[k] = dot(derivative(bb[k], 0), mono);
    }
    E = frame_series_at(sl, h);
  }

  void build_slice(ChartSlice& sl, double t, const Vec& x0, const Vec& v0, const Mat& E0) {
    const int L = opt_.order;
    const auto& S = set_x_;
    if (backbone_.size() != slices_.size()) {
      backbone_.resize(slices_.size());
      frame_.resize(slices_.size());
    }
    sl.t = t;
    sl.x = x0;
    sl.v = v0;
    sl.E = E0;

    // Backbone gamma(t + s) and its parallel frame as series in s.
    std::vector<RPoly> Xb(m_), tmp;
    for (int k = 0; k < m_; ++k) {
      Xb[k] = RPoly(S, x0[k]);
      Xb[k] += RPoly::variable(S, 0) * v0[k];
    }
    for (int it = 0; it < L; ++it) {
      auto df = model_->grad_f_of(Xb);
      std::vector<RPoly> dX(m_);
      for (int k = 0; k < m_; ++k) dX[k] = derivative(Xb[k], 0);
      ConformalModel::christoffel_contract_jet(df, dX, dX, tmp);
      for (int k = 0; k < m_; ++k) {
        RPoly acc = antiderivative(antiderivative(tmp[k], 0), 0);
        Xb[k] = RPoly(S, x0[k]) + RPoly::variable(S, 0) * v0[k] - acc;
      }
    }
    auto df_b = model_->grad_f_of(Xb);
    std::vector<RPoly> dXb(m_);
    for (int k = 0; k < m_; ++k) dXb[k] = derivative(Xb[k], 0);
    std::vector<std::vector<RPoly>> Eb(m_ - 1);
    for (int a = 0; a < m_ - 1; ++a) {
      for (int k = 0; k < m_; ++k) Eb[a].push_back(RPoly(S, E0(k, a)));
      for (int it = 0; it <= L; ++it) {
        ConformalModel::christoffel_contract_jet(df_b, dXb, Eb[a], tmp);
        for (int k = 0; k < m_; ++k) Eb[a][k] = RPoly(S, E0(k, a)) - antiderivative(tmp[k], 0);
      }
    }
    const int pos = slice_pos(sl);
    backbone_[pos] = Xb;
    frame_[pos].clear();
    for (int a = 0; a < m_ - 1; ++a)
      for (int k = 0; k < m_; ++k) frame_[pos].push_back(Eb[a][k]);

    // Radial recursion: with the Euler operator D = sum y_a d/dy_a,
    // D(D - 1) X = -Gamma(X)(DX, DX), solved one y-degree at a time.
    std::vector<RPoly> X = Xb;
    for (int a = 0; a < m_ - 1; ++a)
      for (int k = 0; k < m_; ++k) X[k] += RPoly::variable(S, a + 1) * Eb[a][k];
    std::vector<int> ydeg(S->size());
    for (int i = 0; i < S->size(); ++i) ydeg[i] = S->degree(i) - S->exponent(i, 0);
    for (int d = 2; d <= L + 1; ++d) {
      auto df = model_->grad_f_of(X);
      std::vector<RPoly> DX(m_, RPoly(S));
      for (int k = 0; k < m_; ++k)
        for (int i = 0; i < S->size(); ++i) DX[k][i] = X[k][i] * ydeg[i];
      ConformalModel::christoffel_contract_jet(df, DX, DX, tmp);
      const double f = 1.0 / (d * (d - 1));
      for (int k = 0; k < m_; ++k)
        for (int i = 0; i < S->size(); ++i)
          if (ydeg[i] == d) X[k][i] = -tmp[k][i] * f;
    }
    sl.X = X;
    sl.dX.clear();
    for (int k = 0; k < m_; ++k)
      for (int a = 0; a < m_; ++a) sl.dX.push_back(derivative(X[k], a));

    // Pulled-back metric G_ab = e^{2f(X)} dX_a . dX_b.
    const auto& SG = set_g_;
    RPoly e2f = truncate(exp(model_->f_of(X) * 2.0), SG);
    std::vector<std::vector<RPoly>> J(m_);
    for (int a = 0; a < m_; ++a)
      for (int k = 0; k < m_; ++k) J[a].push_back(truncate(derivative(X[k], a), SG));
    sl.G.assign(m_ * m_, RPoly(SG));
    for (int a = 0; a < m_; ++a)
      for (int b = a; b < m_; ++b) {
        RPoly s(SG);
        for (int k = 0; k < m_; ++k) s.add_product(J[a][k], J[b][k]);
        RPoly gab = e2f * s;
        sl.G[a * m_ + b] = gab;
        sl.G[b * m_ + a] = gab;
      }
    auto inv = invert_jet_matrix(sl.G, m_);
    sl.Ginv = std::move(inv.inv);
    for (int a = 0; a < m_; ++a)
      for (int b = a + 1; b < m_; ++b) {
        RPoly avg = (sl.Ginv[a * m_ + b] + sl.Ginv[b * m_ + a]) * 0.5;
        sl.Ginv[a * m_ + b] = avg;
        sl.Ginv[b * m_ + a] = avg;
      }
    sl.sqrt_det = sqrt(inv.det);
    RPoly logs = log(inv.det) * 0.5;
    const auto& SV = set_v_;
    sl.V.assign(m_, RPoly(SV));
    for (int b = 0; b < m_; ++b) {
      RPoly s(SG);
      for (int a = 0; a < m_; ++a) {
        s += derivative(sl.Ginv[a * m_ + b], a);
        s.add_product(sl.Ginv[a * m_ + b], derivative(logs, a));
      }
      sl.V[b] = truncate(s, SV);
    }
  }

  PathPtr path_;
  const ConformalModel* model_ = nullptr;
  double radius_;
  ChartOptions opt_;
  int m_ = 2;
  int k0_ = 0;
  IndexSetPtr set_x_, set_g_, set_v_;
  std::vector<ChartSlice> slices_;
  std::vector<std::vector<RPoly>> backbone_, frame_;
};

using ChartPtr = std::shared_ptr<const FermiChart>;

inline ChartPtr fermi_chart(PathPtr path, double radius, ChartOptions opt = {}) {
  return std::make_shared<const FermiChart>(std::move(path), radius, opt);
}

}  // namespace beamxray
