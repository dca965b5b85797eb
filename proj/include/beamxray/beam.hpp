#pragma once

// Gaussian beam quasimodes along a geodesic.
//
// Everything lives in the Fermi chart of the geodesic.  At each node t_k of a
// uniform grid the beam keeps a local Taylor jet in (s, y) = (t - t_k, y) of
// the phase and of every amplitude a_j.  The y-jets at s = 0 are the state of
// an ODE in t; its right-hand side comes from solving the eikonal and
// transport equations locally in s by Picard iteration, which also supplies
// the s-derivatives needed for evaluation between nodes.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "beamxray/bundle.hpp"
#include "beamxray/errors.hpp"
#include "beamxray/geometry.hpp"
#include "beamxray/jets.hpp"
#include "beamxray/numerics.hpp"

namespace beamxray {

inline int phase_order(int K) { return std::min(3 * K + 2, 8); }
inline int amplitude_order(int K, int j) { return std::min(3 * K - 2 * j, 8 - 2 * j); }
inline int beam_chart_order(int K) { return phase_order(K) + 2; }

namespace detail {

// Keep only the terms free of the first variable and of degree <= order.
template <class T>
TruncatedPoly<T> pure_y(const TruncatedPoly<T>& p, const IndexSetPtr& target) {
  TruncatedPoly<T> r(target);
  const auto& set = *p.set();
  const int n = std::min(p.size(), r.size());
  for (int k = 0; k < n; ++k)
    if (set.exponent(k, 0) == 0) r[k] = p[k];
  return r;
}
inline PolyMat pure_y(const PolyMat& m, const IndexSetPtr& target) {
  PolyMat r(target, m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) r(i, j) = pure_y(m(i, j), target);
  return r;
}

// Restriction to s = 0 as a jet in the remaining m - 1 variables.
template <class T>
TruncatedPoly<T> restrict_s0(const TruncatedPoly<T>& p) {
  const auto& set = *p.set();
  const int nv = set.nvars();
  auto target = MultiIndexSet::get(nv - 1, set.order());
  TruncatedPoly<T> r(target);
  std::vector<int> e(nv - 1);
  for (int k = 0; k < p.size(); ++k) {
    if (set.exponent(k, 0) != 0) continue;
    for (int v = 1; v < nv; ++v) e[v - 1] = set.exponent(k, v);
    r[target->index(e.data())] = p[k];
  }
  return r;
}
inline PolyMat restrict_s0(const PolyMat& m) {
  auto target = MultiIndexSet::get(m.set()->nvars() - 1, m.set()->order());
  PolyMat r(target, m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) r(i, j) = restrict_s0(m(i, j));
  return r;
}

inline PolyMat antiderivative(const PolyMat& m, int v) {
  PolyMat r(m.set(), m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) r(i, j) = beamxray::antiderivative(m(i, j), v);
  return r;
}

inline PolyMat embed(const PolyMat& m, const IndexSetPtr& target) { return truncate(m, target); }

}  // namespace detail

// Longitudinal extent kept at full strength beyond the endpoints: enough for
// the tube to stay inside the plateau wherever it meets M.
inline double beam_lead(const GeodesicPath& path, double delta, double max_lead) {
  const double th = std::min(path.exit_angle_start, path.exit_angle_end);
  const double lead = th >= std::numbers::pi / 2 - 1e-12 ? 0.0 : delta / std::tan(th);
  return std::min(lead, max_lead) + 0.02;
}

struct BeamChartOptions {
  double target_step = 5e-3;  // node spacing upper bound
  double taper = 0.1;         // length of the longitudinal cutoff ramp
  double max_lead = 0.4;
};

// A Fermi chart whose slice grid suits beams of order K: node spacing divides
// tau, slices sit at half-nodes, the grid is symmetric so the chart can be
// reversed, and it covers the longitudinal cutoff.
inline ChartPtr make_beam_chart(PathPtr path, double delta, int K, BeamChartOptions o = {}) {
  const double tau = path->tau;
  const int n = std::max(4, static_cast<int>(std::ceil(tau / o.target_step)));
  const double hc = tau / (2.0 * n);
  const double ext_raw = beam_lead(*path, delta, o.max_lead) + o.taper;
  const double ext = hc * (std::ceil(ext_raw / hc) + 4);
  ChartOptions co;
  co.order = beam_chart_order(K);
  co.spacing = hc;
  co.extension = ext;
  return fermi_chart(std::move(path), delta, co);
}

enum class BeamDirection { Forward, Backward };

struct BeamOptions {
  int K = 2;
  CMat init;  // n x r values of a_0 on the geodesic at t = 0; empty means identity
  int norm_p = 2;
  double taper = 0.1;
  double max_lead = 0.4;
  BeamDirection direction = BeamDirection::Forward;
};

struct BeamNode {
  double t = 0;
  int slice = 0;
  CPoly phi;               // local jet in (s, y)
  std::vector<PolyMat> a;  // a_j, local jets in (s, y)
  CMat H;                  // transverse Hessian of the phase at (t, 0)
};

// Jets of the pulled-back metric and connection on one slice, in the
// amplitude jet space.
struct SliceGeometry {
  std::vector<RPoly> Ginv;  // row-major m*m
  std::vector<RPoly> V;     // Laplacian drift: Delta f = -G^ab f_ab - V^b f_b
  std::vector<PolyMat> A;   // connection components A_a
  std::vector<PolyMat> GA;  // sum_a G^ab A_a
  PolyMat Q;                // d*A - G^ab A_a A_b
};

struct RiccatiSamples {
  std::vector<double> t;
  std::vector<CMat> H;
};

class BeamJet {
 public:
  BeamJet(ChartPtr chart, ConnectionPtr A, double delta, BeamOptions opt = {})
      : A_(std::move(A)), delta_(delta), opt_(opt) {
    if (opt_.direction == BeamDirection::Backward)
      chart_ = std::make_shared<const FermiChart>(chart->reversed());
    else
      chart_ = std::move(chart);
    const FermiChart& C = *chart_;
    m_ = C.dim();
    K_ = opt_.K;
    if (K_ < 0) throw Error(ErrorKind::DomainError, "beam order must be non-negative");
    if (amplitude_order(K_, K_) < 0) throw Error(ErrorKind::OrderCapExceeded, "beam order too high for the jet order caps");
    if (opt_.norm_p != 2 && opt_.norm_p != 4) throw Error(ErrorKind::DomainError, "normalization exponent must be 2 or 4");
    if (!(delta > 0) || delta > C.radius() + 1e-12) throw Error(ErrorKind::DomainError, "cutoff radius must lie within the chart");
    if (A_->dim() != m_) throw Error(ErrorKind::ShapeError, "connection dimension differs from the manifold");
    n_ = A_->rank();
    if (opt_.init.size() == 0) opt_.init = CMat::Identity(n_, n_);
    if (opt_.init.rows() != n_) throw Error(ErrorKind::ShapeError, "initial amplitude has the wrong fibre dimension");
    r_ = static_cast<int>(opt_.init.cols());
    nphi_ = phase_order(K_);
    if (C.order() < nphi_ + 2) throw Error(ErrorKind::InsufficientDerivatives, "chart order too low for this beam order");
    for (int j = 0; j <= K_; ++j) caps_.push_back(amplitude_order(K_, j));

    set_phi_ = jet_space(m_, nphi_ + 2);
    set_phi_state_ = jet_space(m_, nphi_);
    for (int j = 0; j <= K_; ++j) {
      set_a_.push_back(jet_space(m_, caps_[j] + 2));
      set_a_state_.push_back(jet_space(m_, caps_[j]));
    }
    lead_ = beam_lead(C.path(), delta_, opt_.max_lead);
    const double tau = C.path().tau;
    if (C.t_min() > -lead_ - opt_.taper + 1e-9 || C.t_max() < tau + lead_ + opt_.taper - 1e-9)
      throw Error(ErrorKind::DomainError, "chart does not cover the longitudinal cutoff");

    hb_ = 2 * C.spacing();
    const int s0 = C.first_step(), s1 = C.first_step() + C.num_slices() - 1;
    klo_ = static_cast<int>(std::ceil(s0 / 2.0));
    khi_ = static_cast<int>(std::floor(s1 / 2.0));
    geom_.resize(C.num_slices());
    build();
  }

  const FermiChart& chart() const { return *chart_; }
  const ChartPtr& chart_ptr() const { return chart_; }
  const GeodesicPath& path() const { return chart_->path(); }
  const ConnectionField& connection() const { return *A_; }
  const ConnectionPtr& connection_ptr() const { return A_; }
  int K() const { return K_; }
  int rank() const { return n_; }
  int columns() const { return r_; }
  int phase_cap() const { return nphi_; }
  int amplitude_cap(int j) const { return caps_[j]; }
  double delta() const { return delta_; }
  int norm_p() const { return opt_.norm_p; }
  BeamDirection direction() const { return opt_.direction; }
  double node_spacing() const { return hb_; }
  const std::vector<BeamNode>& nodes() const { return nodes_; }
  const CMat& init() const { return opt_.init; }

  // Node covering parameter t (its local jet is expanded about t_k).
  int node_index(double t) const {
    int k = static_cast<int>(std::lround(t / hb_));
    return std::clamp(k, klo_, khi_) - klo_;
  }
  const BeamNode& node_at(double t) const { return nodes_[node_index(t)]; }

  // Values of the y-independent H(t) at the nodes.
  RiccatiSamples riccati() const {
    RiccatiSamples r;
    for (const auto& n : nodes_) {
      r.t.push_back(n.t);
      r.H.push_back(n.H);
    }
    return r;
  }

  // Transverse Hessian of the phase on the geodesic at arbitrary t.
  CMat hessian(double t) const {
    const BeamNode& nd = node_at(t);
    std::vector<double> yy(m_, 0.0);
    yy[0] = t - nd.t;
    auto mono = monomials(*set_phi_, std::span<const double>(yy));
    CMat H(m_ - 1, m_ - 1);
    for (int i = 0; i < m_ - 1; ++i)
      for (int j = 0; j < m_ - 1; ++j) H(i, j) = dot(derivative(derivative(nd.phi, i + 1), j + 1), mono);
    return H;
  }

  // exp(-1/2 int_0^t tr H): the scalar factor in a_0 along the geodesic.
  cd spreading_factor(double t) const {
    auto gl = gauss_legendre(4);
    const double sgn = t >= 0 ? 1.0 : -1.0;
    // Break [0, t] at the half-node points so each piece uses one local jet.
    std::vector<double> pts{0.0};
    for (int j = 0;; ++j) {
      const double b = sgn * (j + 0.5) * hb_;
      if (sgn * (t - b) <= 0) break;
      pts.push_back(b);
    }
    pts.push_back(t);
    cd acc = 0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      const double a = pts[i], b = pts[i + 1];
      for (std::size_t q = 0; q < gl.nodes.size(); ++q) {
        const double x = 0.5 * (a + b) + 0.5 * (b - a) * gl.nodes[q];
        acc += 0.5 * (b - a) * gl.weights[q] * hessian(x).trace();
      }
    }
    return std::exp(-0.5 * acc);
  }

  // Phase and amplitudes from the local jets at chart coordinates (t, y).
  cd phase(double t, const Vec& y) const {
    const BeamNode& nd = node_at(t);
    auto mono = chart_->local_monomials(*set_phi_, t - nd.t, y);
    return dot(nd.phi, mono);
  }
  CMat amplitude(int j, double t, const Vec& y) const {
    const BeamNode& nd = node_at(t);
    auto mono = chart_->local_monomials(*set_a_[j], t - nd.t, y);
    return nd.a[j].eval_mono(mono);
  }

  // Cutoff chi(t, y) = chi_1(|y| / delta') chi_2(t).
  double cutoff_t(double t) const { return taper(t).v; }
  double cutoff(double t, const Vec& y) const { return bump(y.norm() / delta_).v * taper(t).v; }

  // u at Fermi coordinates (t, y): one column per initial vector.
  CMat value_local(double lambda, double t, const Vec& y) const {
    CMat u = CMat::Zero(n_, r_);
    const double chi = cutoff(t, y);
    if (chi == 0.0) return u;
    const BeamNode& nd = node_at(t);
    auto mono = chart_->local_monomials(*set_phi_, t - nd.t, y);
    const cd ph = dot(nd.phi, mono);
    double lp = 1.0;
    for (int j = 0; j <= K_; ++j) {
      u += nd.a[j].eval_mono(mono) * lp;
      lp /= lambda;
    }
    return u * (normalization(lambda) * chi * std::exp(cd(0, lambda) * ph));
  }

  // u at an ambient point.
  CMat value(double lambda, const Vec& x, double t_hint = std::numeric_limits<double>::quiet_NaN()) const {
    auto c = chart_->invert(x, t_hint);
    if (!c) return CMat::Zero(n_, r_);
    return value_local(lambda, c->t, c->y);
  }

  double normalization(double lambda) const { return std::pow(lambda, (m_ - 1) / (2.0 * opt_.norm_p)); }

  // Components l = 0, 1, 2 of the phase jet (t-derivatives of the y-jet)
  // sampled at the nodes, for check_prolongable.
  JetSection phase_section(int levels = 3) const {
    JetSection js;
    for (const auto& nd : nodes_) {
      js.t.push_back(nd.t);
      std::vector<CPoly> comps;
      CPoly p = nd.phi;
      for (int l = 0; l < levels; ++l) {
        comps.push_back(detail::pure_y(p, set_phi_state_));
        p = derivative(p, 0);
      }
      js.samples.push_back(std::move(comps));
    }
    return js;
  }

  // Geometry jets at a slice (computed once during construction for every
  // slice the stepper touched).
  const SliceGeometry& geometry(int slice) const { return geom_.at(slice); }
  const IndexSetPtr& phase_space() const { return set_phi_; }
  const IndexSetPtr& amplitude_space(int j) const { return set_a_[j]; }

  struct Taper {
    double v, d1, d2;
  };
  Taper taper(double t) const {
    const double tau = chart_->path().tau;
    double d = 0, sgn = 0;
    if (t < -lead_) d = -lead_ - t, sgn = -1;
    if (t > tau + lead_) d = t - tau - lead_, sgn = 1;
    if (d == 0) return {1, 0, 0};
    auto b = bump(0.5 + 0.5 * d / opt_.taper);
    const double c = 0.5 / opt_.taper;
    return {b.v, b.d1 * c * sgn, b.d2 * c * c};
  }
  double lead() const { return lead_; }
  double taper_length() const { return opt_.taper; }

 private:
  struct State {
    CPoly phi;
    std::vector<PolyMat> a;
  };
  struct Local {
    CPoly phi;
    std::vector<PolyMat> a;
  };

  static void axpy(State& y, double c, const State& x) {
    for (int k = 0; k < y.phi.size(); ++k) y.phi[k] += c * x.phi[k];
    for (std::size_t j = 0; j < y.a.size(); ++j) {
      PolyMat t = x.a[j];
      t *= cd(c);
      y.a[j] += t;
    }
  }

  const SliceGeometry& ensure_geometry(int idx) {
    if (!geom_[idx].Ginv.empty()) return geom_[idx];
    const ChartSlice& sl = chart_->slice(idx);
    const auto& S = set_a_[0];
    SliceGeometry g;
    for (const auto& p : sl.Ginv) g.Ginv.push_back(truncate(p, S));
    for (const auto& p : sl.V) g.V.push_back(truncate(p, S));
    auto SX = jet_space(m_, caps_[0] + 3);
    std::vector<RPoly> X;
    for (const auto& p : sl.X) X.push_back(truncate(p, SX));
    for (auto& Aa : A_->pullback(X)) g.A.push_back(truncate(Aa, S));
    PolyMat dA(S, n_, n_), GAA(S, n_, n_);
    for (int b = 0; b < m_; ++b) {
      PolyMat ga(S, n_, n_);
      for (int a = 0; a < m_; ++a) {
        ga.add_scaled(g.Ginv[a * m_ + b], g.A[a]);
        dA.add_scaled(g.Ginv[a * m_ + b], derivative(g.A[b], a));
      }
      dA.add_scaled(g.V[b], g.A[b]);
      GAA.add_product(ga, g.A[b]);
      g.GA.push_back(std::move(ga));
    }
    dA *= cd(-1.0);
    g.Q = dA - GAA;
    geom_[idx] = std::move(g);
    return geom_[idx];
  }

  // Right-hand side of the node ODE at a slice, with the local jets.
  State rhs(int idx, const State& st, Local* out) {
    const ChartSlice& sl = chart_->slice(idx);
    const auto& SP = set_phi_;
    std::vector<RPoly> Gi;
    for (const auto& p : sl.Ginv) Gi.push_back(truncate(p, SP));
    const CPoly phi0 = truncate(st.phi, SP);
    CPoly Phi = phi0 + to_complex(RPoly::variable(SP, 0));
    CPoly P(SP);
    const RPoly g00inv = reciprocal(Gi[0]);
    for (int it = 0; it < K_ + 3; ++it) {
      std::vector<CPoly> d;
      for (int a = 0; a < m_; ++a) d.push_back(derivative(Phi, a));
      CPoly B(SP), Cc(SP);
      for (int i = 1; i < m_; ++i) {
        B.add_product(Gi[i], d[i]);
        for (int j = 1; j < m_; ++j) {
          CPoly w(SP);
          w.add_product(Gi[i * m_ + j], d[j]);
          Cc.add_product(d[i], w);
        }
      }
      CPoly disc = B * B;
      Cc -= cd(1.0);
      CPoly gc(SP);
      gc.add_product(Gi[0], Cc);
      disc -= gc;
      CPoly root = sqrt(disc) - B;
      P = CPoly(SP);
      P.add_product(g00inv, root);
      Phi = phi0 + antiderivative(P, 0);
    }
    State ds;
    ds.phi = detail::pure_y(P, set_phi_state_);

    // Amplitudes.
    const SliceGeometry& g = ensure_geometry(idx);
    const auto& S0 = set_a_[0];
    std::vector<CPoly> dPhi;
    for (int a = 0; a < m_; ++a) dPhi.push_back(truncate(derivative(Phi, a), S0));
    std::vector<CPoly> W(m_, CPoly(S0));
    CPoly lap(S0);
    for (int a = 0; a < m_; ++a)
      for (int b = 0; b < m_; ++b) {
        W[b].add_product(g.Ginv[a * m_ + b], dPhi[a]);
        lap.add_product(g.Ginv[a * m_ + b], derivative(dPhi[a], b));
      }
    for (int b = 0; b < m_; ++b) lap.add_product(g.V[b], dPhi[b]);
    lap *= cd(-1.0);
    PolyMat WA(S0, n_, n_);
    for (int b = 0; b < m_; ++b) WA.add_scaled(W[b], g.A[b]);
    const CPoly half_inv_w0 = reciprocal(W[0]) * cd(0.5);

    std::vector<PolyMat> loc(K_ + 1);
    ds.a.resize(K_ + 1);
    for (int j = 0; j <= K_; ++j) {
      const auto& Sj = set_a_[j];
      auto tr = [&](const CPoly& p) { return truncate(p, Sj); };
      const CPoly lapj = tr(lap), hw = tr(half_inv_w0);
      std::vector<CPoly> Wj;
      for (int b = 0; b < m_; ++b) Wj.push_back(tr(W[b]) * cd(-2.0));
      const PolyMat WAj = truncate(WA, Sj) * cd(-2.0);
      PolyMat src(Sj, n_, r_);
      if (j > 0) src = truncate(laplacian(loc[j - 1], g), Sj) * cd(0, -1);
      const PolyMat a0 = detail::embed(st.a[j], Sj);
      PolyMat a = a0, R(Sj, n_, r_);
      for (int it = 0; it < K_ + 2 - j; ++it) {
        PolyMat T = src;
        T.add_scaled(lapj, a);
        for (int b = 1; b < m_; ++b) T.add_scaled(Wj[b], derivative(a, b));
        T.add_product(WAj, a);
        R = PolyMat(Sj, n_, r_);
        R.add_scaled(hw, T);
        a = a0 + detail::antiderivative(R, 0);
      }
      ds.a[j] = detail::pure_y(R, set_a_state_[j]);
      loc[j] = std::move(a);
    }
    if (out) {
      out->phi = std::move(Phi);
      out->a = std::move(loc);
    }
    return ds;
  }

  // Delta_A w computed in w's jet space with the slice geometry truncated to it.
  PolyMat laplacian(const PolyMat& w, const SliceGeometry& g) const {
    const auto& S = w.set();
    PolyMat r(S, w.rows(), w.cols());
    std::vector<PolyMat> dw;
    for (int a = 0; a < m_; ++a) dw.push_back(derivative(w, a));
    for (int a = 0; a < m_; ++a)
      for (int b = 0; b < m_; ++b) r.add_scaled(truncate(g.Ginv[a * m_ + b], S), derivative(dw[a], b));
    for (int b = 0; b < m_; ++b) {
      r.add_scaled(truncate(g.V[b], S), dw[b]);
      PolyMat ga = truncate(g.GA[b], S) * cd(2.0);
      r.add_product(ga, dw[b]);
    }
    r *= cd(-1.0);
    r.add_product(truncate(g.Q, S), w);
    return r;
  }

  void record(int k, Local&& loc) {
    BeamNode nd;
    nd.t = k * hb_;
    nd.slice = chart_->slice_for_step(2 * k);
    nd.H.resize(m_ - 1, m_ - 1);
    for (int i = 0; i < m_ - 1; ++i)
      for (int j = 0; j < m_ - 1; ++j) {
        std::vector<int> e(m_, 0);
        e[i + 1] += 1;
        e[j + 1] += 1;
        nd.H(i, j) = loc.phi[set_phi_->index(e.data())] * (i == j ? 2.0 : 1.0);
      }
    nd.phi = std::move(loc.phi);
    nd.a = std::move(loc.a);
    nodes_[k - klo_] = std::move(nd);
  }

  void build() {
    nodes_.resize(khi_ - klo_ + 1);
    State init;
    init.phi = CPoly(set_phi_state_);
    for (int i = 1; i < m_; ++i) {
      std::vector<int> e(m_, 0);
      e[i] = 2;
      init.phi[set_phi_state_->index(e.data())] = cd(0, 0.5);
    }
    for (int j = 0; j <= K_; ++j) {
      PolyMat a(set_a_state_[j], n_, r_);
      if (j == 0) a.set_coeff(0, opt_.init);
      init.a.push_back(std::move(a));
    }
    for (int dir : {1, -1}) {
      State y = init;
      y.phi[0] = 0.0;
      const double h = dir * hb_;
      int k = 0;
      const int kend = dir > 0 ? khi_ : klo_;
      while (true) {
        const int sl = chart_->slice_for_step(2 * k);
        Local loc;
        State k1 = rhs(sl, y, &loc);
        if (dir > 0 || k != 0) record(k, std::move(loc));
        if (k == kend) break;
        const int smid = chart_->slice_for_step(2 * k + dir), send = chart_->slice_for_step(2 * k + 2 * dir);
        State y2 = y;
        axpy(y2, h / 2, k1);
        State k2 = rhs(smid, y2, nullptr);
        State y3 = y;
        axpy(y3, h / 2, k2);
        State k3 = rhs(smid, y3, nullptr);
        State y4 = y;
        axpy(y4, h, k3);
        State k4 = rhs(send, y4, nullptr);
        axpy(y, h / 6, k1);
        axpy(y, h / 3, k2);
        axpy(y, h / 3, k3);
        axpy(y, h / 6, k4);
        k += dir;
      }
    }
    for (const auto& nd : nodes_) {
      Eigen::SelfAdjointEigenSolver<Mat> es(nd.H.imag().eval() * 0.5 + nd.H.imag().transpose().eval() * 0.5);
      if (es.eigenvalues().minCoeff() < 1e-6)
        throw Error(ErrorKind::RiccatiDegenerate, "imaginary part of the phase Hessian lost positivity");
    }
  }

  ChartPtr chart_;
  ConnectionPtr A_;
  double delta_;
  BeamOptions opt_;
  int m_ = 2, n_ = 1, r_ = 1, K_ = 0, nphi_ = 2;
  std::vector<int> caps_;
  IndexSetPtr set_phi_, set_phi_state_;
  std::vector<IndexSetPtr> set_a_, set_a_state_;
  double lead_ = 0, hb_ = 0;
  int klo_ = 0, khi_ = 0;
  std::vector<BeamNode> nodes_;
  std::vector<SliceGeometry> geom_;
};

using BeamPtr = std::shared_ptr<const BeamJet>;

// H(t) along the chart's geodesic (phase-only beam, trivial line bundle).
inline RiccatiSamples solve_riccati(const ChartPtr& chart) {
  auto A = ConstantConnection::zero(1, chart->dim());
  BeamOptions o;
  o.K = 0;
  BeamJet b(chart, A, chart->radius(), o);
  return b.riccati();
}

// Amplitude jets a_0..a_K with a_0 = init on the geodesic at t = 0.
inline BeamPtr solve_amplitudes(const ChartPtr& chart, ConnectionPtr A, int K, const CMat& init, double delta) {
  BeamOptions o;
  o.K = K;
  o.init = init;
  return std::make_shared<const BeamJet>(chart, std::move(A), delta, o);
}

inline CMat evaluate_quasimode(const BeamJet& beam, double lambda, const Vec& x) {
  if (!(lambda >= 1)) throw Error(ErrorKind::DomainError, "frequency must be at least 1");
  return beam.value(lambda, x);
}

namespace detail {

// Tensor grid over the tube inside M: nodes in t, midpoint cells in y.  The
// callback receives the node, y, the slice, the y-monomials (order of the
// chart map) and the cell weight including sqrt(det G).
template <class F>
void tube_quadrature(const BeamJet& beam, double ystep, F&& f) {
  const FermiChart& C = beam.chart();
  const int m = C.dim();
  const int ny = static_cast<int>(std::ceil(2 * beam.delta() / ystep));
  const double hy = 2 * beam.delta() / ny;
  double cells = std::pow(double(ny), m - 1) * beam.nodes().size();
  if (cells > 4e8) throw Error(ErrorKind::GridTooFine, "tube quadrature grid exceeds the point budget");
  const auto& model = C.model();
  const double hb = beam.node_spacing();
  std::vector<int> idx(m - 1, 0);
  Vec y(m - 1);
  std::vector<double> yy(m - 1);
  for (std::size_t k = 0; k < beam.nodes().size(); ++k) {
    const BeamNode& nd = beam.nodes()[k];
    if (beam.cutoff_t(nd.t) == 0.0) continue;
    const ChartSlice& sl = C.slice(nd.slice);
    std::vector<RPoly> X0;
    for (const auto& p : sl.X) X0.push_back(restrict_s0(p));
    const RPoly sd = restrict_s0(sl.sqrt_det);
    const auto& SY = X0[0].set();
    std::fill(idx.begin(), idx.end(), 0);
    while (true) {
      for (int a = 0; a < m - 1; ++a) yy[a] = y[a] = -beam.delta() + (idx[a] + 0.5) * hy;
      if (y.norm() < beam.delta()) {
        auto mono = monomials(*SY, std::span<const double>(yy));
        Vec x(m);
        for (int i = 0; i < m; ++i) x[i] = dot(X0[i], mono);
        if (model.boundary(x) < 0) {
          const double w = hb * std::pow(hy, m - 1) * dot(sd, mono);
          f(nd, y, mono, w);
        }
      }
      int a = 0;
      while (a < m - 1 && ++idx[a] == ny) idx[a++] = 0;
      if (a == m - 1) break;
    }
  }
}

}  // namespace detail

// L^p(M) norm of the quasimode (all columns, Frobenius in the fibre).
inline double lp_norm(const BeamJet& beam, double lambda, double p, double ystep) {
  double acc = 0;
  detail::tube_quadrature(beam, ystep, [&](const BeamNode& nd, const Vec& y, const std::vector<double>&, double w) {
    acc += w * std::pow(beam.value_local(lambda, nd.t, y).norm(), p);
  });
  return std::pow(acc, 1.0 / p);
}

// Residual (Delta_A - lambda^2) u at the node times, evaluated from the jets:
//   e^{i lambda Phi} [ lambda^2 (|dPhi|^2 - 1) w + i lambda ((Delta Phi) w - 2 (dPhi, d_A w)) + Delta_A w ],
// w = chi * sum_j lambda^{-j} a_j, including the cutoff derivatives.
struct ResidualPoint {
  double t;
  Vec y;
  CMat value;
};

inline double residual_norm(const BeamJet& beam, double lambda, double quad_step,
                            std::vector<ResidualPoint>* samples = nullptr) {
  const FermiChart& C = beam.chart();
  const int m = C.dim(), n = beam.rank(), r = beam.columns();
  const double nrm = beam.normalization(lambda);
  double acc = 0;
  const BeamNode* cur = nullptr;
  // Per-node jets restricted to s = 0.
  CPoly Phi;
  std::vector<CPoly> dPhi, ddPhi;
  PolyMat a;
  std::vector<PolyMat> da, dda, Aa, GA;
  PolyMat Q;
  std::vector<RPoly> Gi, V;
  auto prepare = [&](const BeamNode& nd) {
    const SliceGeometry& g = beam.geometry(nd.slice);
    Phi = detail::restrict_s0(nd.phi);
    dPhi.clear();
    ddPhi.clear();
    for (int p = 0; p < m; ++p) {
      CPoly d = derivative(nd.phi, p);
      dPhi.push_back(detail::restrict_s0(d));
      for (int q = 0; q < m; ++q) ddPhi.push_back(detail::restrict_s0(derivative(d, q)));
    }
    const auto& S0 = beam.amplitude_space(0);
    PolyMat at(S0, n, r);
    double lp = 1.0;
    for (int j = 0; j <= beam.K(); ++j) {
      PolyMat t = truncate(nd.a[j], S0);
      t *= cd(lp);
      at += t;
      lp /= lambda;
    }
    a = detail::restrict_s0(at);
    da.clear();
    dda.clear();
    for (int p = 0; p < m; ++p) {
      PolyMat d = derivative(at, p);
      da.push_back(detail::restrict_s0(d));
      for (int q = 0; q < m; ++q) dda.push_back(detail::restrict_s0(derivative(d, q)));
    }
    Gi.clear();
    V.clear();
    Aa.clear();
    GA.clear();
    const ChartSlice& sl = C.slice(nd.slice);
    for (const auto& p : sl.Ginv) Gi.push_back(detail::restrict_s0(p));
    for (const auto& p : g.V) V.push_back(detail::restrict_s0(p));
    for (const auto& p : g.A) Aa.push_back(detail::restrict_s0(p));
    for (const auto& p : g.GA) GA.push_back(detail::restrict_s0(p));
    Q = detail::restrict_s0(g.Q);
  };
  const double d = beam.delta();
  detail::tube_quadrature(beam, quad_step, [&](const BeamNode& nd, const Vec& y, const std::vector<double>& mono, double w) {
    if (cur != &nd) {
      prepare(nd);
      cur = &nd;
    }
    const cd ph = dot(Phi, mono);
    const double decay = std::exp(-lambda * ph.imag());
    if (decay < 1e-30) return;
    // Cutoff and its (t, y) derivatives.
    const auto tp = beam.taper(nd.t);
    const double rr = y.norm();
    const auto b1 = bump(rr / d);
    std::vector<double> dchi(m, 0.0), ddchi(m * m, 0.0);
    const double chi = b1.v * tp.v;
    dchi[0] = b1.v * tp.d1;
    ddchi[0] = b1.v * tp.d2;
    if (rr > 0 && b1.d1 != 0) {
      for (int i = 1; i < m; ++i) {
        const double ui = y[i - 1] / rr;
        dchi[i] = b1.d1 / d * ui * tp.v;
        ddchi[i] = ddchi[i * m] = b1.d1 / d * ui * tp.d1;
        for (int j = 1; j < m; ++j) {
          const double uj = y[j - 1] / rr;
          ddchi[i * m + j] = (b1.d2 / (d * d) * ui * uj + b1.d1 / d * ((i == j ? 1.0 : 0.0) - ui * uj) / rr) * tp.v;
        }
      }
    }
    // Pointwise jets.
    std::vector<cd> p1(m), p2(m * m);
    for (int p = 0; p < m; ++p) p1[p] = dot(dPhi[p], mono);
    for (int p = 0; p < m * m; ++p) p2[p] = dot(ddPhi[p], mono);
    std::vector<double> G(m * m), Vv(m);
    for (int p = 0; p < m * m; ++p) G[p] = dot(Gi[p], mono);
    for (int p = 0; p < m; ++p) Vv[p] = dot(V[p], mono);
    const CMat av = a.eval_mono(mono);
    std::vector<CMat> wd(m), Am(m), GAm(m);
    const CMat wv = av * chi;
    std::vector<CMat> dav(m);
    for (int p = 0; p < m; ++p) {
      dav[p] = da[p].eval_mono(mono);
      wd[p] = dav[p] * chi + av * dchi[p];
      Am[p] = Aa[p].eval_mono(mono);
      GAm[p] = GA[p].eval_mono(mono);
    }
    cd eik = -1.0, lapPhi = 0.0;
    std::vector<cd> W(m, 0.0);
    for (int p = 0; p < m; ++p)
      for (int q = 0; q < m; ++q) {
        eik += G[p * m + q] * p1[p] * p1[q];
        lapPhi -= G[p * m + q] * p2[p * m + q];
        W[q] += G[p * m + q] * p1[p];
      }
    for (int q = 0; q < m; ++q) lapPhi -= Vv[q] * p1[q];
    CMat cross = CMat::Zero(n, r), lapw = CMat::Zero(n, r);
    for (int q = 0; q < m; ++q) {
      cross += W[q] * (wd[q] + Am[q] * wv);
      lapw -= Vv[q] * wd[q] + 2.0 * GAm[q] * wd[q];
    }
    for (int p = 0; p < m; ++p)
      for (int q = 0; q < m; ++q) {
        if (G[p * m + q] == 0.0) continue;
        CMat wpq = dda[p * m + q].eval_mono(mono) * chi + dav[p] * dchi[q] + dav[q] * dchi[p] + av * ddchi[p * m + q];
        lapw -= G[p * m + q] * wpq;
      }
    lapw += Q.eval_mono(mono) * wv;
    CMat R = (lambda * lambda) * eik * wv + cd(0, lambda) * (lapPhi * wv - 2.0 * cross) + lapw;
    R *= nrm * decay;
    acc += w * R.squaredNorm();
    if (samples) samples->push_back({nd.t, y, R * std::exp(cd(0, lambda * ph.real()))});
  });
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Interaction of four beams at a crossing.

struct Crossing {
  double t0 = 0, s0 = 0;  // parameters on the first and second geodesic
  Vec x;
  double angle = 0;  // in [0, pi/2]
};

// The unique transversal intersection of two chords.
inline Crossing find_crossing(const GeodesicPath& g, const GeodesicPath& e, double theta1, double radius) {
  // Coarse scan on the path samples, then Newton on g(t) = e(s).
  const int sg = std::max(1, g.size() / 400), se = std::max(1, e.size() / 400);
  struct Cand {
    double d;
    int i, j;
  };
  std::vector<Cand> local;
  std::vector<double> best(g.size(), 1e300);
  std::vector<int> bj(g.size(), 0);
  for (int i = 0; i < g.size(); i += sg)
    for (int j = 0; j < e.size(); j += se) {
      double d = (g.points[i] - e.points[j]).norm();
      if (d < best[i]) best[i] = d, bj[i] = j;
    }
  const double step = std::max(g.times[sg] - g.times[0], e.times[se] - e.times[0]);
  for (int i = 0; i < g.size(); i += sg) {
    const int ip = i - sg, in = i + sg;
    const bool lm = (ip < 0 || best[ip] >= best[i]) && (in >= g.size() || best[in] > best[i]);
    if (lm && best[i] < 2 * step) local.push_back({best[i], i, bj[i]});
  }
  std::vector<Crossing> found;
  for (const auto& c : local) {
    double t = g.times[c.i], s = e.times[c.j];
    const int m = static_cast<int>(g.points[0].size());
    for (int it = 0; it < 40; ++it) {
      Vec F = g.point_at(t) - e.point_at(s);
      Mat J(m, 2);
      J.col(0) = g.velocity_at(t);
      J.col(1) = -e.velocity_at(s);
      Vec d = (J.transpose() * J).ldlt().solve(J.transpose() * F);
      t -= d[0];
      s -= d[1];
      t = std::clamp(t, 0.0, g.tau);
      s = std::clamp(s, 0.0, e.tau);
      if (d.norm() < 1e-14) break;
    }
    if ((g.point_at(t) - e.point_at(s)).norm() > 1e-9) continue;
    bool dup = false;
    for (const auto& f : found)
      if (std::abs(f.t0 - t) < 1e-6) dup = true;
    if (dup) continue;
    Crossing cr;
    cr.t0 = t;
    cr.s0 = s;
    cr.x = g.point_at(t);
    Mat gm = g.model->metric(cr.x);
    const double cosang = std::abs(g.velocity_at(t).dot(gm * e.velocity_at(s)));
    cr.angle = std::acos(std::min(1.0, cosang));
    found.push_back(cr);
  }
  if (found.empty()) throw Error(ErrorKind::NotInH, "geodesics do not intersect");
  for (std::size_t a = 0; a < found.size(); ++a)
    for (std::size_t b = a + 1; b < found.size(); ++b)
      if ((found[a].x - found[b].x).norm() < radius) throw Error(ErrorKind::NotInH, "more than one intersection within the radius");
  if (found.size() > 1) throw Error(ErrorKind::NotInH, "geodesics intersect more than once");
  if (found[0].angle < theta1) throw Error(ErrorKind::AngleTooSmall, "intersection angle below the threshold");
  return found[0];
}

struct InteractionResult {
  double lambda = 0;
  int n = 1;
  // Index q = ((b * n + a) * n + d) * n + c for f_0 = e_b, g_0 = e_a,
  // (P_gamma)^{-1} f_tau = e_d, (P_eta)^{-1} g_sigma = e_c.
  std::vector<cd> integral, prediction;
  std::vector<cd> F_measured, F_exact;  // F-decomposition from the integral and from S directly
  cd integral0, prediction0;            // the query with all vectors e_0
  cd c_geo, c_phase, phase_factor;      // phase_factor = e^{i lambda Phi(x)}
  CMat S;                               // (P_eta[0, s0])^{-1} P_gamma[0, t0]
  Crossing crossing;
  int points = 0;

  double rel_err() const {
    double num = 0, den = 0;
    for (std::size_t q = 0; q < integral.size(); ++q) {
      num += std::norm(integral[q] - prediction[q]);
      den += std::norm(prediction[q]);
    }
    return std::sqrt(num / den);
  }
};

inline int query_index(int n, int b, int a, int d, int c) { return ((b * n + a) * n + d) * n + c; }

// F[Q](z1, z2, z3, z4) = <Q z1, z2><Q z3, z4> + <Q z3, z2><Q z1, z4>.
inline cd F_form(const CMat& Q, const CVec& z1, const CVec& z2, const CVec& z3, const CVec& z4) {
  auto ip = [](const CVec& a, const CVec& b) { return a.dot(b); };  // conjugate-linear in a
  return ip(Q * z1, z2) * ip(Q * z3, z4) + ip(Q * z3, z2) * ip(Q * z1, z4);
}

// Orthonormal (velocity, frame) columns of a beam's chart at parameter t,
// expressed in the orthonormal basis B at x.
inline Mat beam_frame_coords(const BeamJet& b, double t, const Mat& B, const Mat& g) {
  const auto& P = b.path();
  const int m = static_cast<int>(B.rows());
  Mat R(m, m);
  R.col(0) = B.transpose() * g * P.velocity_at(t);
  Mat E = P.frame_at(t);
  for (int a = 0; a < m - 1; ++a) R.col(a + 1) = B.transpose() * g * E.col(a);
  return R;
}

inline InteractionResult interaction_integral(const BeamJet& u, const BeamJet& ut, const BeamJet& v, const BeamJet& vt, double lambda,
                                              double quad_step, double theta1 = 0.1) {
  for (const BeamJet* b : {&u, &ut, &v, &vt})
    if (b->norm_p() != 4) throw Error(ErrorKind::DomainError, "interaction beams must be L^4-normalized");
  if (u.direction() != BeamDirection::Forward || v.direction() != BeamDirection::Forward ||
      ut.direction() != BeamDirection::Backward || vt.direction() != BeamDirection::Backward)
    throw Error(ErrorKind::DomainError, "expected forward beams u, v and backward beams u~, v~");
  const GeodesicPath& gam = u.path();
  const GeodesicPath& eta = v.path();
  const double tau = gam.tau, sigma = eta.tau;
  const int m = u.chart().dim();
  const int n = u.rank();
  const double delta = std::min(u.delta(), v.delta());
  Crossing cr = find_crossing(gam, eta, theta1, delta);
  const Vec& x = cr.x;
  const ManifoldModel& model = u.chart().model();
  const ConnectionField& A = u.connection();

  // Fibre bookkeeping: the backward beams are seeded with P_gamma e_d and P_eta e_c.
  const CMat Pg = parallel_transport(A, gam, 0, tau).matrix;
  const CMat Pe = parallel_transport(A, eta, 0, sigma).matrix;
  const CMat Pg0 = parallel_transport(A, gam, 0, cr.t0).matrix;
  const CMat Pe0 = parallel_transport(A, eta, 0, cr.s0).matrix;

  InteractionResult res;
  res.lambda = lambda;
  res.n = n;
  res.crossing = cr;
  res.S = Pe0.inverse() * Pg0;

  // Stationary-phase data.
  const Mat g = model.metric(x);
  Mat B(m, m);
  {
    B.col(0) = gam.velocity_at(cr.t0);
    Mat E = gam.frame_at(cr.t0);
    for (int a = 0; a < m - 1; ++a) B.col(a + 1) = E.col(a);
  }
  const double tu = cr.t0, tut = tau - cr.t0, sv = cr.s0, svt = sigma - cr.s0;
  auto hess = [&](const BeamJet& b, double t) {
    Mat R = beam_frame_coords(b, t, B, g);
    CMat D = CMat::Zero(m, m);
    D.bottomRightCorner(m - 1, m - 1) = b.hessian(t);
    return CMat(R.cast<cd>() * D * R.transpose().cast<cd>());
  };
  CMat Phi2 = hess(v, sv) + hess(vt, svt) - hess(u, tu).conjugate() - hess(ut, tut).conjugate();
  Eigen::ComplexEigenSolver<CMat> es(Phi2 / cd(0, 2 * std::numbers::pi));
  cd cg = 1.0;
  for (int k = 0; k < m; ++k) cg /= std::sqrt(es.eigenvalues()[k]);
  res.c_geo = cg;
  const Vec y0 = Vec::Zero(m - 1);
  const cd Phix = v.phase(sv, y0) + vt.phase(svt, y0) - std::conj(u.phase(tu, y0)) - std::conj(ut.phase(tut, y0));
  res.phase_factor = std::exp(cd(0, lambda) * Phix);
  res.c_phase = std::conj(u.spreading_factor(tu)) * v.spreading_factor(sv) * std::conj(ut.spreading_factor(tut)) *
                vt.spreading_factor(svt);

  const CMat a0 = u.amplitude(0, tu, y0), b0 = v.amplitude(0, sv, y0);
  const CMat at0 = ut.amplitude(0, tut, y0) * Pg, bt0 = vt.amplitude(0, svt, y0) * Pe;
  const int nq = n * n * n * n;
  res.integral.assign(nq, 0.0);
  res.prediction.assign(nq, 0.0);
  res.F_measured.assign(nq, 0.0);
  res.F_exact.assign(nq, 0.0);
  {
    const CMat ab = a0.adjoint() * b0, atbt = at0.adjoint() * bt0, atb = at0.adjoint() * b0, abt = a0.adjoint() * bt0;
    for (int b = 0; b < n; ++b)
      for (int a = 0; a < n; ++a)
        for (int d = 0; d < n; ++d)
          for (int c = 0; c < n; ++c) {
            const int q = query_index(n, b, a, d, c);
            res.prediction[q] = res.c_geo * res.phase_factor * (ab(b, a) * atbt(d, c) + atb(d, a) * abt(b, c));
            res.F_exact[q] = F_form(res.S, CVec::Unit(n, b), CVec::Unit(n, a), CVec::Unit(n, d), CVec::Unit(n, c));
          }
  }

  // Quadrature box: the intersection ball, clipped where the four-beam
  // Gaussian envelope is below e^{-40}.
  Eigen::SelfAdjointEigenSolver<Mat> ims(Phi2.imag().eval() * 0.5 + Phi2.imag().transpose().eval() * 0.5);
  const double mu = std::max(ims.eigenvalues().minCoeff(), 1e-12);
  const double to_coord = 1.0 / std::sqrt(g.diagonal().minCoeff());
  const double rg = std::sqrt(2 * 40.0 / (lambda * mu)) * to_coord;
  const double rball = 1.5 * delta * to_coord;
  const double half = std::min(rball, 1.2 * rg);
  const int N = static_cast<int>(std::ceil(2 * half / quad_step));
  const double h = 2 * half / N;
  if (std::pow(double(N), m) > 2e8) throw Error(ErrorKind::GridTooFine, "interaction grid exceeds the point budget");
  std::vector<int> idx(m, 0);
  // The beam values already carry their lambda^{(m-1)/8} normalization.
  const double pref = std::sqrt(lambda);
  double hint_u = cr.t0, hint_v = cr.s0;
  const double cell = std::pow(h, m);
  std::vector<cd> acc(nq, 0.0);
  while (true) {
    Vec p(m);
    for (int a = 0; a < m; ++a) p[a] = x[a] - half + (idx[a] + 0.5) * h;
    if (model.boundary(p) < 0) {
      auto cu = u.chart().invert(p, hint_u);
      if (cu && cu->y.norm() < u.delta()) {
        hint_u = cu->t;
        auto cv = v.chart().invert(p, hint_v);
        if (cv && cv->y.norm() < v.delta()) {
          hint_v = cv->t;
          const CMat U = u.value_local(lambda, cu->t, cu->y);
          const CMat Ut = ut.value_local(lambda, tau - cu->t, cu->y) * Pg;
          const CMat V = v.value_local(lambda, cv->t, cv->y);
          const CMat Vt = vt.value_local(lambda, sigma - cv->t, cv->y) * Pe;
          const double wgt = cell * std::sqrt(model.metric(p).determinant());
          const CMat uv = U.adjoint() * V, utvt = Ut.adjoint() * Vt, uut = U.adjoint() * Ut, vvt = V.adjoint() * Vt;
          const CMat vu = uv.adjoint(), vut = V.adjoint() * Ut, uvt = U.adjoint() * Vt, utu = uut.adjoint(), utv = vut.adjoint();
          for (int b = 0; b < n; ++b)
            for (int a = 0; a < n; ++a)
              for (int d = 0; d < n; ++d)
                for (int c = 0; c < n; ++c) {
                  const cd s = uv(b, a) * utvt(d, c) + uut(b, d) * vvt(a, c) + vu(a, b) * utvt(d, c) + vut(a, d) * uvt(b, c) +
                               utu(d, b) * vvt(a, c) + utv(d, a) * uvt(b, c);
                  acc[query_index(n, b, a, d, c)] += wgt * s;
                }
          ++res.points;
        }
      }
    }
    int a = 0;
    while (a < m && ++idx[a] == N) idx[a++] = 0;
    if (a == m) break;
  }
  const cd denom = res.c_geo * res.c_phase * res.phase_factor;
  for (int q = 0; q < nq; ++q) {
    res.integral[q] = pref * acc[q];
    res.F_measured[q] = res.integral[q] / denom;
  }
  res.integral0 = res.integral[0];
  res.prediction0 = res.prediction[0];
  return res;
}

// The four beams of one crossing, built from the forward charts of both chords.
struct BeamQuartet {
  BeamPtr u, ut, v, vt;
};

inline BeamQuartet make_quartet(const ChartPtr& gamma_chart, const ChartPtr& eta_chart, ConnectionPtr A, double delta, int K) {
  BeamOptions o;
  o.K = K;
  o.norm_p = 4;
  BeamQuartet q;
  q.u = std::make_shared<const BeamJet>(gamma_chart, A, delta, o);
  q.v = std::make_shared<const BeamJet>(eta_chart, A, delta, o);
  o.direction = BeamDirection::Backward;
  q.ut = std::make_shared<const BeamJet>(gamma_chart, A, delta, o);
  q.vt = std::make_shared<const BeamJet>(eta_chart, A, delta, o);
  return q;
}

}  // namespace beamxray
