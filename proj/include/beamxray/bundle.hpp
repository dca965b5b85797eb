#pragma once

// Unitary connections on the trivial bundle M x C^n, boundary-trivial gauge
// transformations, parallel transport along geodesics, and a pointwise
// finite-difference connection Laplacian.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "beamxray/errors.hpp"
#include "beamxray/geometry.hpp"
#include "beamxray/jets.hpp"
#include "beamxray/numerics.hpp"

namespace beamxray {

using CVec = Eigen::VectorXcd;

inline CMat random_skew_hermitian(int n, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> N(0.0, 1.0);
  CMat g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = cd(N(rng), N(rng));
  return (0.5 * scale) * (g - g.adjoint());
}

// Haar-distributed unitary from the QR factorization of a complex Gaussian matrix.
inline CMat random_unitary(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> N(0.0, 1.0);
  CMat g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = cd(N(rng), N(rng));
  Eigen::HouseholderQR<CMat> qr(g);
  CMat q = qr.householderQ();
  CMat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j) {
    cd d = r(j, j);
    q.col(j) *= d / std::abs(d);
  }
  return q;
}

class ConnectionField {
 public:
  ConnectionField(int rank, int dim) : n_(rank), m_(dim) {}
  virtual ~ConnectionField() = default;
  int rank() const { return n_; }
  int dim() const { return m_; }

  // Components A_1(x), ..., A_m(x).
  virtual std::vector<CMat> eval(const Vec& x) const = 0;
  // A_x(v) = sum_i v^i A_i(x).
  virtual CMat eval_directional(const Vec& x, const Vec& v) const {
    auto A = eval(x);
    CMat r = CMat::Zero(n_, n_);
    for (int i = 0; i < m_; ++i) r += v[i] * A[i];
    return r;
  }
  // Pullback through a jet-valued map X (chart variables a): returns
  // A_a = sum_i A_i(X) dX^i/da, accurate to one order below X.
  virtual std::vector<PolyMat> pullback(const std::vector<RPoly>& X) const = 0;

  // Taylor jets of the components around x.
  std::vector<PolyMat> components_jet(const Vec& x, int order) const {
    auto set = jet_space(m_, order + 1);
    std::vector<RPoly> X;
    for (int k = 0; k < m_; ++k) X.push_back(RPoly::variable(set, k, x[k]));
    auto r = pullback(X);
    auto target = jet_space(m_, order);
    for (auto& p : r) p = truncate(p, target);
    return r;
  }

 protected:
  // Default pullback for families with composable components.
  std::vector<PolyMat> pullback_from_components(const std::vector<PolyMat>& comps, const std::vector<RPoly>& X) const {
    const int nv = X[0].n_vars();
    std::vector<PolyMat> r;
    for (int a = 0; a < nv; ++a) {
      PolyMat s(X[0].set(), n_, n_);
      for (int i = 0; i < m_; ++i) s.add_scaled(derivative(X[i], a), comps[i]);
      r.push_back(std::move(s));
    }
    return r;
  }

  int n_, m_;
};

using ConnectionPtr = std::shared_ptr<const ConnectionField>;

class ConstantConnection : public ConnectionField {
 public:
  explicit ConstantConnection(std::vector<CMat> A) : ConnectionField(int(A.at(0).rows()), int(A.size())), A_(std::move(A)) {}
  static ConnectionPtr zero(int rank, int dim) {
    return std::make_shared<ConstantConnection>(std::vector<CMat>(dim, CMat::Zero(rank, rank)));
  }
  static ConnectionPtr random(int rank, int dim, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::vector<CMat> A;
    for (int i = 0; i < dim; ++i) A.push_back(random_skew_hermitian(rank, rng, scale));
    return std::make_shared<ConstantConnection>(std::move(A));
  }
  std::vector<CMat> eval(const Vec&) const override { return A_; }
  std::vector<PolyMat> pullback(const std::vector<RPoly>& X) const override {
    std::vector<PolyMat> comps;
    for (const auto& a : A_) comps.push_back(PolyMat::constant(X[0].set(), a));
    return pullback_from_components(comps, X);
  }

 private:
  std::vector<CMat> A_;
};

// A_i(x) = sum_{|I| <= d} C_{i,I} x^I with skew-Hermitian C.
class PolyConnection : public ConnectionField {
 public:
  PolyConnection(int rank, int dim, int degree, std::uint64_t seed, double scale)
      : ConnectionField(rank, dim), set_(MultiIndexSet::get(dim, degree)) {
    std::mt19937_64 rng(seed);
    C_.resize(dim);
    for (int i = 0; i < dim; ++i)
      for (int k = 0; k < set_->size(); ++k) C_[i].push_back(random_skew_hermitian(rank, rng, scale));
  }
  std::vector<CMat> eval(const Vec& x) const override {
    std::vector<double> mono = monomials(*set_, std::span<const double>(x.data(), x.size()));
    std::vector<CMat> A(m_, CMat::Zero(n_, n_));
    for (int i = 0; i < m_; ++i)
      for (int k = 0; k < set_->size(); ++k) A[i] += mono[k] * C_[i][k];
    return A;
  }
  CMat eval_directional(const Vec& x, const Vec& v) const override {
    std::vector<double> mono = monomials(*set_, std::span<const double>(x.data(), x.size()));
    CMat r = CMat::Zero(n_, n_);
    for (int i = 0; i < m_; ++i)
      for (int k = 0; k < set_->size(); ++k) r += (v[i] * mono[k]) * C_[i][k];
    return r;
  }
  std::vector<PolyMat> pullback(const std::vector<RPoly>& X) const override {
    auto S = X[0].set();
    // Monomials X^I by the same recursion as `monomials`.
    std::vector<RPoly> mono(set_->size(), RPoly(S));
    mono[0] = RPoly(S, 1.0);
    for (int k = 1; k < set_->size(); ++k)
      for (int v = 0; v < m_; ++v) {
        int t = set_->deriv_target(v, k);
        if (t >= 0) {
          mono[k] = mono[t] * X[v];
          break;
        }
      }
    std::vector<PolyMat> comps;
    for (int i = 0; i < m_; ++i) {
      PolyMat c(S, n_, n_);
      for (int k = 0; k < set_->size(); ++k) c.add_scaled(mono[k], PolyMat::constant(S, C_[i][k]));
      comps.push_back(std::move(c));
    }
    return pullback_from_components(comps, X);
  }

 private:
  IndexSetPtr set_;
  std::vector<std::vector<CMat>> C_;
};

// Low-order trigonometric field: A_i(x) = sum_k C_{i,k} cos(k.x) + D_{i,k} sin(k.x)
// over integer wave vectors with max-norm <= degree.
class FourierConnection : public ConnectionField {
 public:
  FourierConnection(int rank, int dim, int degree, std::uint64_t seed, double scale) : ConnectionField(rank, dim) {
    std::mt19937_64 rng(seed);
    std::vector<int> k(dim, -degree);
    while (true) {
      modes_.push_back(Vec(dim));
      for (int v = 0; v < dim; ++v) modes_.back()[v] = k[v];
      int v = 0;
      while (v < dim && ++k[v] > degree) k[v++] = -degree;
      if (v == dim) break;
    }
    const double w = scale / std::sqrt(double(modes_.size()));
    C_.resize(dim);
    D_.resize(dim);
    for (int i = 0; i < dim; ++i)
      for (std::size_t q = 0; q < modes_.size(); ++q) {
        C_[i].push_back(random_skew_hermitian(rank, rng, w));
        D_[i].push_back(random_skew_hermitian(rank, rng, w));
      }
  }
  std::vector<CMat> eval(const Vec& x) const override {
    std::vector<CMat> A(m_, CMat::Zero(n_, n_));
    for (std::size_t q = 0; q < modes_.size(); ++q) {
      double ph = modes_[q].dot(x), c = std::cos(ph), s = std::sin(ph);
      for (int i = 0; i < m_; ++i) A[i] += c * C_[i][q] + s * D_[i][q];
    }
    return A;
  }
  std::vector<PolyMat> pullback(const std::vector<RPoly>& X) const override {
    auto S = X[0].set();
    std::vector<PolyMat> comps(m_, PolyMat(S, n_, n_));
    for (std::size_t q = 0; q < modes_.size(); ++q) {
      RPoly ph(S);
      for (int v = 0; v < m_; ++v) ph += X[v] * modes_[q][v];
      RPoly c = cos(ph), s = sin(ph);
      for (int i = 0; i < m_; ++i) {
        comps[i].add_scaled(c, PolyMat::constant(S, C_[i][q]));
        comps[i].add_scaled(s, PolyMat::constant(S, D_[i][q]));
      }
    }
    return pullback_from_components(comps, X);
  }

 private:
  std::vector<Vec> modes_;
  std::vector<std::vector<CMat>> C_, D_;
};

// Negative control: base + amplitude * i * bump(|x - c| / width) on entry
// (0, 0) of one component.  Changes the holonomy of chords through the bump.
// The smooth step of `bump` composed with a jet.
inline RPoly bump_jet(const RPoly& s) {
  auto S = s.set();
  const double s0 = s[0];
  if (s0 <= 0.5) return RPoly(S, 1.0);
  if (s0 >= 1.0) return RPoly(S);
  RPoly a = exp(-reciprocal(RPoly(S, 1.0) - s));
  RPoly b = exp(-reciprocal(s - 0.5));
  return a * reciprocal(a + b);
}

class PerturbedConnection : public ConnectionField {
 public:
  PerturbedConnection(ConnectionPtr base, Vec center, double width, double amplitude, int component = 0)
      : ConnectionField(base->rank(), base->dim()), base_(std::move(base)), c_(std::move(center)), w_(width), amp_(amplitude), comp_(component) {}
  std::vector<CMat> eval(const Vec& x) const override {
    auto A = base_->eval(x);
    A[comp_](0, 0) += cd(0, amp_ * bump((x - c_).norm() / w_).v);
    return A;
  }
  std::vector<PolyMat> pullback(const std::vector<RPoly>& X) const override {
    auto r = base_->pullback(X);
    auto S = X[0].set();
    RPoly d2(S);
    for (int k = 0; k < m_; ++k) {
      RPoly dk = X[k] - c_[k];
      d2.add_product(dk, dk);
    }
    RPoly b = bump_jet(d2[0] > 0 ? sqrt(d2) * (1.0 / w_) : RPoly(S)) * amp_;
    for (std::size_t a = 0; a < r.size(); ++a) r[a](0, 0).add_product(to_complex(b) * cd(0, 1), to_complex(derivative(X[comp_], int(a))));
    return r;
  }

 private:
  ConnectionPtr base_;
  Vec c_;
  double w_, amp_;
  int comp_;
};

class GaugeField {
 public:
  GaugeField(int rank, int dim, bool boundary_vanishing) : n_(rank), m_(dim), boundary_vanishing_(boundary_vanishing) {}
  virtual ~GaugeField() = default;
  int rank() const { return n_; }
  int dim() const { return m_; }
  bool boundary_vanishing() const { return boundary_vanishing_; }
  virtual CMat eval(const Vec& x) const = 0;
  // Directional derivative D_v phi(x).
  virtual CMat eval_directional_derivative(const Vec& x, const Vec& v) const = 0;
  // phi composed with a jet-valued map.
  virtual PolyMat compose(const std::vector<RPoly>& X) const = 0;

 protected:
  int n_, m_;
  bool boundary_vanishing_;
};

using GaugePtr = std::shared_ptr<const GaugeField>;

// phi(x) = exp(rho(x) X(x)) with X an affine skew-Hermitian field and rho a
// bump in s = b / b_min that vanishes to infinite order on the boundary and
// equals 1 at the centre, where b attains b_min = -R^2.
class BumpGauge : public GaugeField {
 public:
  BumpGauge(std::shared_ptr<const ConformalModel> model, int rank, std::uint64_t seed, double scale)
      : GaugeField(rank, model->dim(), true), model_(std::move(model)), b_min_(-model_->radius() * model_->radius()) {
    std::mt19937_64 rng(seed);
    for (int k = 0; k <= m_; ++k) C_.push_back(random_skew_hermitian(rank, rng, scale));
  }

  struct Rho {
    double v, d;  // rho and d rho / d s
  };
  Rho rho_of_s(double s) const {
    if (s <= 0) return {0, 0};
    if (s >= 2) return {0, 0};
    double u = 1 - (s - 1) * (s - 1);
    double r = std::exp(1 - 1 / u);
    return {r, r * (-2 * (s - 1) / (u * u))};
  }

  CMat field(const Vec& x) const {
    CMat X = C_[0];
    for (int k = 0; k < m_; ++k) X += x[k] * C_[k + 1];
    return X;
  }
  CMat exponent(const Vec& x) const {
    auto r = rho_of_s(model_->boundary(x) / b_min_);
    return r.v * field(x);
  }

  CMat eval(const Vec& x) const override {
    auto r = rho_of_s(model_->boundary(x) / b_min_);
    if (r.v == 0) return CMat::Identity(n_, n_);
    return expm(r.v * field(x));
  }
  CMat eval_directional_derivative(const Vec& x, const Vec& v) const override {
    auto r = rho_of_s(model_->boundary(x) / b_min_);
    if (r.v == 0 && r.d == 0) return CMat::Zero(n_, n_);
    const double ds = model_->boundary_grad(x).dot(v) / b_min_;
    CMat F = field(x), dF = CMat::Zero(n_, n_);
    for (int k = 0; k < m_; ++k) dF += v[k] * C_[k + 1];
    CMat M = r.v * F, dM = (r.d * ds) * F + r.v * dF;
    // d/de exp(M + e dM) at e = 0 is the upper-right block of exp([[M, dM], [0, M]]).
    CMat big = CMat::Zero(2 * n_, 2 * n_);
    big.topLeftCorner(n_, n_) = M;
    big.topRightCorner(n_, n_) = dM;
    big.bottomRightCorner(n_, n_) = M;
    return expm(big).topRightCorner(n_, n_);
  }
  PolyMat compose(const std::vector<RPoly>& X) const override {
    auto S = X[0].set();
    // Built-in disks: b = |x|^2 - R^2.
    RPoly b(S, -model_->radius() * model_->radius());
    for (int k = 0; k < m_; ++k) b.add_product(X[k], X[k]);
    RPoly s = b * (1.0 / b_min_);
    RPoly rho(S);
    if (s[0] > 0 && s[0] < 2) {
      RPoly sm = s - 1.0;
      RPoly u = RPoly(S, 1.0) - sm * sm;
      rho = exp(RPoly(S, 1.0) - reciprocal(u));
    }
    PolyMat F = PolyMat::constant(S, C_[0]);
    for (int k = 0; k < m_; ++k) F.add_scaled(X[k], PolyMat::constant(S, C_[k + 1]));
    PolyMat M(S, n_, n_);
    M.add_scaled(rho, F);
    return exp(M);
  }

 private:
  std::shared_ptr<const ConformalModel> model_;
  double b_min_;
  std::vector<CMat> C_;
};

// phi(x) psi(x).
class ProductGauge : public GaugeField {
 public:
  ProductGauge(GaugePtr a, GaugePtr b)
      : GaugeField(a->rank(), a->dim(), a->boundary_vanishing() && b->boundary_vanishing()), a_(std::move(a)), b_(std::move(b)) {}
  CMat eval(const Vec& x) const override { return a_->eval(x) * b_->eval(x); }
  CMat eval_directional_derivative(const Vec& x, const Vec& v) const override {
    return a_->eval_directional_derivative(x, v) * b_->eval(x) + a_->eval(x) * b_->eval_directional_derivative(x, v);
  }
  PolyMat compose(const std::vector<RPoly>& X) const override { return a_->compose(X) * b_->compose(X); }

 private:
  GaugePtr a_, b_;
};

// A gauge given by a callable; derivatives by central differences (step 1e-5).
class CallbackGauge : public GaugeField {
 public:
  using Fn = std::function<CMat(const Vec&)>;
  CallbackGauge(int rank, int dim, Fn fn, bool boundary_vanishing) : GaugeField(rank, dim, boundary_vanishing), fn_(std::move(fn)) {}
  CMat eval(const Vec& x) const override { return fn_(x); }
  CMat eval_directional_derivative(const Vec& x, const Vec& v) const override {
    const double h = 1e-5;
    return (fn_(x + h * v) - fn_(x - h * v)) / (2 * h);
  }
  PolyMat compose(const std::vector<RPoly>&) const override {
    throw Error(ErrorKind::InsufficientDerivatives, "callback gauges have no jet representation");
  }

 private:
  Fn fn_;
};

// A ◁ phi = phi^{-1} d phi + phi^{-1} A phi.
class GaugedConnection : public ConnectionField {
 public:
  GaugedConnection(ConnectionPtr base, GaugePtr gauge)
      : ConnectionField(base->rank(), base->dim()), base_(std::move(base)), gauge_(std::move(gauge)) {}
  std::vector<CMat> eval(const Vec& x) const override {
    CMat phi = gauge_->eval(x), pinv = phi.adjoint();
    auto A = base_->eval(x);
    std::vector<CMat> r;
    for (int i = 0; i < m_; ++i) r.push_back(pinv * (gauge_->eval_directional_derivative(x, Vec::Unit(m_, i)) + A[i] * phi));
    return r;
  }
  CMat eval_directional(const Vec& x, const Vec& v) const override {
    CMat phi = gauge_->eval(x);
    return phi.adjoint() * (gauge_->eval_directional_derivative(x, v) + base_->eval_directional(x, v) * phi);
  }
  std::vector<PolyMat> pullback(const std::vector<RPoly>& X) const override {
    PolyMat phi = gauge_->compose(X);
    PolyMat pinv = phi.adjoint();
    auto A = base_->pullback(X);
    std::vector<PolyMat> r;
    for (std::size_t a = 0; a < A.size(); ++a) {
      PolyMat t = derivative(phi, int(a));
      t.add_product(A[a], phi);
      r.push_back(pinv * t);
    }
    return r;
  }
  const ConnectionPtr& base() const { return base_; }
  const GaugePtr& gauge() const { return gauge_; }

 private:
  ConnectionPtr base_;
  GaugePtr gauge_;
};

// Checks unitarity of phi on a few sample points inside the unit ball of the
// chart before building A ◁ phi.
inline ConnectionPtr gauge_apply(ConnectionPtr A, GaugePtr phi) {
  if (A->rank() != phi->rank() || A->dim() != phi->dim()) throw Error(ErrorKind::ShapeError, "gauge/connection shape mismatch");
  for (int i = 0; i < 16; ++i) {
    auto h = halton(i, phi->dim());
    Vec x(phi->dim());
    for (int k = 0; k < phi->dim(); ++k) x[k] = 1.6 * h[k] - 0.8;
    if (unitarity_defect(phi->eval(x)) > 1e-10) throw Error(ErrorKind::InvalidGauge, "gauge sample is not unitary");
  }
  return std::make_shared<GaugedConnection>(std::move(A), std::move(phi));
}

struct TransportResult {
  CMat matrix;
  double unitarity_defect = 0;  // measured before any projection
  bool projected = false;
  double t_start = 0, t_end = 0;
};

// Solves U' + A(gamma') U = 0 from t_start to t_end (either direction) with
// RK4 on the path's own nodes, plus partial steps at the ends.
inline TransportResult parallel_transport(const ConnectionField& A, const GeodesicPath& path, double t_start, double t_end) {
  const double eps = 1e-12;
  if (t_start < -eps || t_start > path.tau + eps || t_end < -eps || t_end > path.tau + eps)
    throw Error(ErrorKind::DomainError, "transport interval outside the path");
  const int n = A.rank();
  auto B = [&](double t) { return A.eval_directional(path.point_at(t), path.velocity_at(t)); };
  auto Bnode = [&](int i) { return A.eval_directional(path.points[i], path.velocities[i]); };

  std::vector<double> ts{t_start};
  std::vector<int> node{-1};
  const double lo = std::min(t_start, t_end), hi = std::max(t_start, t_end);
  std::vector<int> inner;
  for (int i = 0; i < path.size(); ++i)
    if (path.times[i] > lo + 1e-9 && path.times[i] < hi - 1e-9) inner.push_back(i);
  if (t_end < t_start) std::reverse(inner.begin(), inner.end());
  for (int i : inner) ts.push_back(path.times[i]), node.push_back(i);
  ts.push_back(t_end);
  node.push_back(-1);

  CMat U = CMat::Identity(n, n);
  CMat Bl = node[0] >= 0 ? Bnode(node[0]) : B(ts[0]);
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const double h = ts[k + 1] - ts[k];
    if (h == 0) continue;
    CMat Bm = B(ts[k] + 0.5 * h);
    CMat Br = node[k + 1] >= 0 ? Bnode(node[k + 1]) : B(ts[k + 1]);
    CMat k1 = -Bl * U;
    CMat k2 = -Bm * (U + 0.5 * h * k1);
    CMat k3 = -Bm * (U + 0.5 * h * k2);
    CMat k4 = -Br * (U + h * k3);
    U += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4);
    Bl = std::move(Br);
  }
  TransportResult r;
  r.t_start = t_start;
  r.t_end = t_end;
  r.unitarity_defect = unitarity_defect(U);
  if (r.unitarity_defect > 1e-10) {
    U = polar_unitary(U);
    r.projected = true;
  }
  r.matrix = U;
  return r;
}

using Section = std::function<CVec(const Vec&)>;

// Delta_A u = Delta_g u - 2 (A, du) + (d*A) u - (A, A u) with the positive
// Laplace-Beltrami operator and d*A = -g^{ij}(d_i A_j - Gamma^k_ij A_k).
// Derivatives of u use central differences of the given accuracy order (2 or 4).
inline CVec connection_laplacian_apply(const ManifoldModel& model, const ConnectionField& A, const Section& u, const Vec& x,
                                      double fd_step, int fd_order = 2) {
  const int m = model.dim();
  const double h = fd_step;
  const int reach = fd_order >= 4 ? 2 : 1;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      for (int si : {-1, 1})
        for (int sj : {-1, 1}) {
          Vec y = x;
          y[i] += si * reach * h;
          y[j] += sj * reach * h;
          if (model.boundary(y) >= 0) throw Error(ErrorKind::StencilOutOfDomain, "finite-difference stencil leaves the domain");
        }
  // 1D stencils: offsets and weights for first and second derivatives.
  std::vector<int> off;
  std::vector<double> w1, w2;
  if (fd_order >= 4) {
    off = {-2, -1, 0, 1, 2};
    w1 = {1.0 / 12, -8.0 / 12, 0, 8.0 / 12, -1.0 / 12};
    w2 = {-1.0 / 12, 16.0 / 12, -30.0 / 12, 16.0 / 12, -1.0 / 12};
  } else {
    off = {-1, 0, 1};
    w1 = {-0.5, 0, 0.5};
    w2 = {1, -2, 1};
  }
  const int ns = static_cast<int>(off.size());
  CVec u0 = u(x);
  const int n = static_cast<int>(u0.size());
  std::vector<CVec> du(m, CVec::Zero(n));
  std::vector<std::vector<CVec>> ddu(m, std::vector<CVec>(m, CVec::Zero(n)));
  for (int i = 0; i < m; ++i) {
    std::vector<CVec> line(ns);
    for (int a = 0; a < ns; ++a) {
      Vec y = x;
      y[i] += off[a] * h;
      line[a] = off[a] == 0 ? u0 : u(y);
    }
    for (int a = 0; a < ns; ++a) {
      du[i] += (w1[a] / h) * line[a];
      ddu[i][i] += (w2[a] / (h * h)) * line[a];
    }
    for (int j = i + 1; j < m; ++j) {
      CVec s = CVec::Zero(n);
      for (int a = 0; a < ns; ++a)
        for (int b = 0; b < ns; ++b) {
          if (w1[a] == 0 || w1[b] == 0) continue;
          Vec y = x;
          y[i] += off[a] * h;
          y[j] += off[b] * h;
          s += (w1[a] * w1[b] / (h * h)) * u(y);
        }
      ddu[i][j] = ddu[j][i] = s;
    }
  }
  Mat ginv = model.metric(x).inverse();
  auto gam = christoffel(model, x);
  auto Aj = A.components_jet(x, 1);
  auto Av = A.eval(x);
  const auto& set = *Aj[0].set();
  std::vector<CMat> dA(m * m);  // dA[i*m + j] = d_i A_j
  for (int i = 0; i < m; ++i) {
    std::vector<int> e(m, 0);
    e[i] = 1;
    int k = set.index(e.data());
    for (int j = 0; j < m; ++j) dA[i * m + j] = Aj[j].coeff(k);
  }
  CVec r = CVec::Zero(n);
  CMat dstar = CMat::Zero(n, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const double gij = ginv(i, j);
      if (gij == 0) continue;
      CVec lap = ddu[i][j];
      CMat gA = dA[i * m + j];
      for (int k = 0; k < m; ++k) {
        lap -= gam[k](i, j) * du[k];
        gA -= gam[k](i, j) * Av[k];
      }
      r -= gij * lap;
      r -= 2.0 * gij * (Av[i] * du[j]);
      dstar -= gij * gA;
      r -= gij * (Av[i] * (Av[j] * u0));
    }
  r += dstar * u0;
  return r;
}

}  // namespace beamxray
