#pragma once

// Gauge recovery from paired transport data over a geodesic graph, its
// up-to-sign variant, and recovery of +-Q from the quartic form F[Q].

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "beam.hpp"
#include "bundle.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "numerics.hpp"
#include "parallel.hpp"
#include "xray.hpp"

namespace beamxray {

struct ReconstructionOptions {
  double eps_edge = 1e-4;
  double step = 1e-3;          // geodesic step for the transports
  double fd_h = 1e-3;          // central-difference step for the flatness check
  int flat_probes = 8;         // fibre points used for the flatness check
  int flat_dirs = 4;           // directions averaged at each displaced point
  int boundary_probes = 8;
  double boundary_b = -5e-3;   // level b(x) of the boundary probes, in [-1e-2, 0)
  bool throw_on_mismatch = true;
  // Sign variant: per (point, direction) random sign flips on the fibre data;
  // 0 disables the injection.
  std::uint64_t flip_seed = 0;
  int knn = 6;
  int threads = 1;
};

struct EdgeWitness {
  Vec x, v, w;
  double defect = 0;  // ||S^{A1}(v, w) - S^{A2}(v, w)||
};

struct GaugeReconstruction {
  std::vector<Vec> points;
  std::vector<CMat> phi;
  std::vector<double> point_edge_defect;  // per point, max over its edges
  double edge_defect = 0;
  double flat_defect = 0;            // max ||d phi + A1 phi - phi A2||
  double gauge_relation_defect = 0;  // max ||A2 - A1 <| phi||
  double boundary_defect = 0;        // max ||phi - I|| (or min over +-I)
  std::vector<Vec> flat_points, boundary_points;
  std::vector<double> flat_values, boundary_values;
  EdgeWitness witness;
  bool up_to_sign = false;
  double eps_edge = 1e-4;
  bool equivalent() const { return edge_defect <= eps_edge; }
};

namespace detail {

// (P^{A1})^{-1} P^{A2} for the transport from x to the forward exit along v.
inline CMat fibre_gauge(const ConnectionField& A1, const ConnectionField& A2, const GeodesicPath& p) {
  CMat P1 = parallel_transport(A1, p, p.t_seed, p.tau).matrix;
  CMat P2 = parallel_transport(A2, p, p.t_seed, p.tau).matrix;
  return P1.inverse() * P2;
}

inline double sign_flip(std::uint64_t seed, std::uint64_t point, std::uint64_t dir) {
  if (seed == 0) return 1.0;
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + point * 1000003ull + dir);
  return (rng() & 1) ? -1.0 : 1.0;
}

// Mean of the samples after aligning each sign to the first, projected to U(n).
inline CMat aligned_mean(const std::vector<CMat>& s, bool align) {
  CMat acc = CMat::Zero(s[0].rows(), s[0].cols());
  for (const auto& m : s) acc += (align && (m - s[0]).norm() > (m + s[0]).norm()) ? CMat(-m) : m;
  return polar_unitary(acc / double(s.size()));
}

inline double sign_distance(const CMat& a, const CMat& b, bool up_to_sign) {
  double d = (a - b).norm();
  return up_to_sign ? std::min(d, (a + b).norm()) : d;
}

inline GeodesicOptions transport_options(double step) {
  GeodesicOptions o;
  o.step = step;
  return o;
}

// phi at an arbitrary point from the given directions.
inline CMat gauge_at(const ConnectionField& A1, const ConnectionField& A2, const ModelPtr& model, const Vec& x,
                     const std::vector<Vec>& dirs, const ReconstructionOptions& o, std::uint64_t tag, bool up_to_sign) {
  std::vector<CMat> s;
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    GeodesicPath p = integrate_geodesic(model, x, unit_vector(*model, x, dirs[k]), transport_options(o.step));
    s.push_back(sign_flip(o.flip_seed, tag, k) * fibre_gauge(A1, A2, p));
  }
  return aligned_mean(s, up_to_sign);
}

inline std::vector<Vec> boundary_probe_points(const ManifoldModel& model, int count, double level) {
  const int m = model.dim();
  std::vector<Vec> out;
  auto conf = dynamic_cast<const ConformalModel*>(&model);
  if (!conf) return out;
  const double R = conf->radius();
  const double rad = std::sqrt(R * R + level);
  for (int k = 0; k < count; ++k) {
    Vec d = Vec::Zero(m);
    if (m == 2) {
      const double a = 2 * std::numbers::pi * (k + 0.5) / count;
      d[0] = std::cos(a);
      d[1] = std::sin(a);
    } else {
      auto h = halton(static_cast<unsigned long>(k + 1), m);
      for (int i = 0; i < m; ++i) d[i] = 2 * h[i] - 1;
      if (d.norm() < 1e-6) d[0] = 1;
      d.normalize();
    }
    out.push_back(rad * d);
  }
  return out;
}

// Directions used at a boundary probe: inward normal, rotated by +-0.3 rad.
inline std::vector<Vec> boundary_probe_dirs(const ManifoldModel& model, const Vec& x) {
  const int m = model.dim();
  Vec nrm = -model.boundary_grad(x);
  nrm.normalize();
  std::vector<Vec> dirs{nrm};
  Vec t = Vec::Zero(m);
  t[0] = -nrm[1];
  t[1] = nrm[0];
  if (t.norm() < 1e-9) t[2] = 1;
  t.normalize();
  for (double a : {-0.3, 0.3}) dirs.push_back(std::cos(a) * nrm + std::sin(a) * t);
  return dirs;
}

}  // namespace detail

namespace detail {

inline GaugeReconstruction reconstruct_impl(const ConnectionPtr& A1, const ConnectionPtr& A2, const GraphStructure& graph,
                                            const ReconstructionOptions& o, bool up_to_sign) {
  if (A1->rank() != A2->rank() || A1->dim() != A2->dim()) throw Error(ErrorKind::ShapeError, "connections differ in rank or dimension");
  const ModelPtr& model = graph.model;
  const int np = graph.n_points();
  const int n = A1->rank(), m = model->dim();
  GaugeReconstruction R;
  R.up_to_sign = up_to_sign;
  R.eps_edge = o.eps_edge;
  R.points = graph.points();
  R.phi.resize(np);
  R.point_edge_defect.assign(np, 0.0);
  std::vector<EdgeWitness> wit(np);

  parallel_for(np, o.threads, [&](int i) {
    const Fiber& f = graph.fibers[i];
    if (f.dirs.empty()) throw Error(ErrorKind::IncompleteStructure, "empty fibre in the graph");
    std::vector<CMat> pt;
    for (std::size_t k = 0; k < f.dirs.size(); ++k) {
      GeodesicPath p = integrate_geodesic(model, f.x, f.dirs[k].v, transport_options(o.step));
      pt.push_back(sign_flip(o.flip_seed, i, k) * fibre_gauge(*A1, *A2, p));
    }
    for (auto [a, b] : f.edges) {
      double d = sign_distance(pt[a], pt[b], up_to_sign);
      if (d > wit[i].defect) wit[i] = {f.x, f.dirs[a].v, f.dirs[b].v, d};
    }
    R.point_edge_defect[i] = wit[i].defect;
    R.phi[i] = aligned_mean(pt, up_to_sign);
  });
  R.witness = wit[0];
  for (int i = 1; i < np; ++i)
    if (wit[i].defect > R.witness.defect) R.witness = wit[i];
  R.edge_defect = R.witness.defect;

  if (R.edge_defect > o.eps_edge && o.throw_on_mismatch) {
    auto tov = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    throw NotGaugeEquivalentError("fibre data disagree on an edge (defect " + std::to_string(R.edge_defect) + ")", tov(R.witness.x),
                                  tov(R.witness.v), tov(R.witness.w), R.edge_defect);
  }

  if (up_to_sign && np > 1) {
    // Prim's minimum spanning tree of the Euclidean point cloud, then the
    // k-nearest-neighbour edges outside the tree as cycle checks.
    std::vector<int> parent(np, -1), order;
    std::vector<double> key(np, std::numeric_limits<double>::infinity());
    std::vector<char> in(np, 0);
    key[0] = 0;
    for (int it = 0; it < np; ++it) {
      int u = -1;
      for (int j = 0; j < np; ++j)
        if (!in[j] && (u < 0 || key[j] < key[u])) u = j;
      in[u] = 1;
      order.push_back(u);
      for (int j = 0; j < np; ++j) {
        double d = (R.points[u] - R.points[j]).norm();
        if (!in[j] && d < key[j]) key[j] = d, parent[j] = u;
      }
    }
    for (int u : order)
      if (parent[u] >= 0) {
        const CMat& P = R.phi[parent[u]];
        if ((P + R.phi[u]).norm() < (P - R.phi[u]).norm()) R.phi[u] = -R.phi[u];
      }
    for (int a = 0; a < np; ++a) {
      std::vector<std::pair<double, int>> nb;
      for (int b = 0; b < np; ++b)
        if (b != a) nb.emplace_back((R.points[a] - R.points[b]).norm(), b);
      std::partial_sort(nb.begin(), nb.begin() + std::min<int>(o.knn, np - 1), nb.end());
      for (int k = 0; k < std::min<int>(o.knn, np - 1); ++k) {
        const int b = nb[k].second;
        if (parent[a] == b || parent[b] == a) continue;
        if ((R.phi[a] + R.phi[b]).norm() < (R.phi[a] - R.phi[b]).norm())
          throw Error(ErrorKind::SignLiftFailed, "inconsistent sign around a cycle of the neighbour graph");
      }
    }
  }

  // Flatness: d phi + A1 phi - phi A2 by central differences at fibre points.
  const int nf = std::min(o.flat_probes, np);
  R.flat_points.resize(nf);
  R.flat_values.assign(nf, 0.0);
  std::vector<double> rel(nf, 0.0);
  parallel_for(nf, o.threads, [&](int j) {
    const int i = (j * np) / nf;
    const Fiber& f = graph.fibers[i];
    std::vector<Vec> dirs;
    for (int k = 0; k < std::min<int>(o.flat_dirs, f.dirs.size()); ++k) dirs.push_back(f.dirs[(k * f.dirs.size()) / o.flat_dirs].v);
    const CMat& phi = R.phi[i];
    auto a1 = A1->eval(f.x), a2 = A2->eval(f.x);
    double worst = 0, worst_rel = 0;
    for (int c = 0; c < m; ++c) {
      Vec e = Vec::Zero(m);
      e[c] = o.fd_h;
      std::uint64_t tag = 1000000ull + 10ull * i + 2ull * c;
      CMat pp = gauge_at(*A1, *A2, model, f.x + e, dirs, o, tag, up_to_sign);
      CMat pm = gauge_at(*A1, *A2, model, f.x - e, dirs, o, tag + 1, up_to_sign);
      if (up_to_sign) {
        if ((pp - phi).norm() > (pp + phi).norm()) pp = -pp;
        if ((pm - phi).norm() > (pm + phi).norm()) pm = -pm;
      }
      CMat dphi = (pp - pm) / (2 * o.fd_h);
      CMat flat = dphi + a1[c] * phi - phi * a2[c];
      CMat rel_c = a2[c] - (phi.adjoint() * dphi + phi.adjoint() * a1[c] * phi);
      worst = std::max(worst, flat.norm());
      worst_rel = std::max(worst_rel, rel_c.norm());
    }
    R.flat_points[j] = f.x;
    R.flat_values[j] = worst;
    rel[j] = worst_rel;
  });
  for (int j = 0; j < nf; ++j) {
    R.flat_defect = std::max(R.flat_defect, R.flat_values[j]);
    R.gauge_relation_defect = std::max(R.gauge_relation_defect, rel[j]);
  }

  // Boundary: phi compared with I (or +-I) close to the boundary.
  R.boundary_points = boundary_probe_points(*model, o.boundary_probes, o.boundary_b);
  R.boundary_values.assign(R.boundary_points.size(), 0.0);
  parallel_for(static_cast<int>(R.boundary_points.size()), o.threads, [&](int k) {
    const Vec& x = R.boundary_points[k];
    CMat phi = gauge_at(*A1, *A2, model, x, boundary_probe_dirs(*model, x), o, 2000000ull + k, up_to_sign);
    R.boundary_values[k] = sign_distance(phi, CMat::Identity(n, n), up_to_sign);
  });
  for (double v : R.boundary_values) R.boundary_defect = std::max(R.boundary_defect, v);
  return R;
}

}  // namespace detail

// phi(x) from phi~(v) = (P^{A1}_v)^{-1} P^{A2}_v, the transports running from x
// to the exit.  Agreement over every fibre edge is required to eps_edge.
inline GaugeReconstruction reconstruct_gauge(const ConnectionPtr& A1, const ConnectionPtr& A2, const GraphStructure& graph,
                                             ReconstructionOptions o = {}) {
  o.flip_seed = 0;
  return detail::reconstruct_impl(A1, A2, graph, o, false);
}

// Same, with fibre agreement only up to sign and a global sign fixed by
// propagation along a spanning tree of the point cloud.
inline GaugeReconstruction reconstruct_gauge_up_to_sign(const ConnectionPtr& A1, const ConnectionPtr& A2, const GraphStructure& graph,
                                                        const ReconstructionOptions& o = {}) {
  return detail::reconstruct_impl(A1, A2, graph, o, true);
}

// ---------------------------------------------------------------------------
// F[Q] and its inversion.

using FSampler = std::function<cd(const CVec&, const CVec&, const CVec&, const CVec&)>;

struct FSample {
  CVec z1, z2, z3, z4;
  cd value;
};

inline FSampler exact_F_sampler(const CMat& Q) {
  return [Q](const CVec& a, const CVec& b, const CVec& c, const CVec& d) { return F_form(Q, a, b, c, d); };
}

// Q up to a global sign from basis-vector queries.  The pivot (a, b) maximises
// |F(e_b, e_a, e_b, e_a)| = 2 |q_ab|^2, so no entry is assumed nonzero.
inline CMat recover_Q_from_F(const FSampler& F, int n) {
  auto e = [n](int k) { return CVec(CVec::Unit(n, k)); };
  int pa = 0, pb = 0;
  double best = -1;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      double v = std::abs(F(e(b), e(a), e(b), e(a)));
      if (v > best) best = v, pa = a, pb = b;
    }
  if (best < 1e-8) throw Error(ErrorKind::ZeroMatrix, "all pivot candidates vanish");
  // qb(i, j) holds conj(q_ij).
  CMat qb = CMat::Zero(n, n);
  const cd piv = std::sqrt(F(e(pb), e(pa), e(pb), e(pa)) / 2.0);
  qb(pa, pb) = piv;
  for (int d = 0; d < n; ++d)
    if (d != pb) qb(pa, d) = F(e(pb), e(pa), e(d), e(pa)) / (2.0 * piv);
  for (int c = 0; c < n; ++c)
    if (c != pa) qb(c, pb) = F(e(pb), e(pa), e(pb), e(c)) / (2.0 * piv);
  for (int c = 0; c < n; ++c)
    for (int d = 0; d < n; ++d)
      if (c != pa && d != pb) qb(c, d) = (F(e(pb), e(pa), e(d), e(c)) - qb(pa, d) * qb(c, pb)) / piv;
  return qb.conjugate();
}

inline double sign_error(const CMat& Qhat, const CMat& Q) { return std::min((Qhat - Q).norm(), (Qhat + Q).norm()); }

struct FRecovery {
  std::vector<cd> F;  // estimated F[S](e_b, e_a, e_d, e_c), indexed by query_index
  CMat S;             // recovered up to sign
  cd prefactor;       // c_geo c_phi e^{i lambda Phi(x)}
  double consistency = 0;  // max |F_est - F[S_hat]| over all queries, relative to max |F_est|
};

// Divides the stationary-phase prefactor out of the four-beam interaction
// and inverts F.  The consistency figure is an a-posteriori error indicator.
inline FRecovery interaction_to_F(const InteractionResult& r) {
  const int n = r.n;
  FRecovery out;
  const cd pre = r.c_geo * r.c_phase;
  if (std::abs(pre) < 1e-6) throw Error(ErrorKind::IllConditionedPrefactor, "stationary-phase prefactor below 1e-6");
  out.prefactor = pre * r.phase_factor;
  out.F.resize(r.integral.size());
  for (std::size_t q = 0; q < r.integral.size(); ++q) out.F[q] = r.integral[q] / out.prefactor;
  auto basis_index = [n](const CVec& z) {
    int k = -1;
    for (int i = 0; i < n; ++i)
      if (std::abs(z[i]) > 0.5) {
        if (k >= 0) k = -2;
        else k = i;
      }
    if (k < 0) throw Error(ErrorKind::DomainError, "interaction data only answer basis-vector queries");
    return k;
  };
  FSampler sampler = [&](const CVec& z1, const CVec& z2, const CVec& z3, const CVec& z4) {
    return out.F[query_index(n, basis_index(z1), basis_index(z2), basis_index(z3), basis_index(z4))];
  };
  out.S = recover_Q_from_F(sampler, n);
  double num = 0, den = 0;
  for (int b = 0; b < n; ++b)
    for (int a = 0; a < n; ++a)
      for (int d = 0; d < n; ++d)
        for (int c = 0; c < n; ++c) {
          const int q = query_index(n, b, a, d, c);
          num = std::max(num, std::abs(out.F[q] - F_form(out.S, CVec::Unit(n, b), CVec::Unit(n, a), CVec::Unit(n, d), CVec::Unit(n, c))));
          den = std::max(den, std::abs(out.F[q]));
        }
  out.consistency = den > 0 ? num / den : 0;
  return out;
}

}  // namespace beamxray
