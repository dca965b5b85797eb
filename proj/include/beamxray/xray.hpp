#pragma once

// Broken non-abelian X-ray transform and geodesic graph structures over a
// point cloud.  Fibres keep a coarse polyline of every admissible geodesic
// rather than the full path; transports are recomputed on demand.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bundle.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "numerics.hpp"
#include "parallel.hpp"

namespace beamxray {

struct GraphParams {
  double T = 10.0;         // maximal geodesic length
  double theta0 = 0.1;     // minimal exit angle
  double eps = 0.05;       // boundary separation
  double theta1 = 0.3;     // minimal crossing angle (between lines)
  double r = 0.2;          // near-intersection radius
  double c0 = 2.0;         // near-intersection constant
  double density_tol = 0.5;
  double margin = 0.05;    // sample points satisfy b <= -margin
  double sample_step = 0.02;
  double probe_step = 1e-3;
  GeodesicOptions geo{.step = 4e-3};  // admissibility only; transports use their own paths
};

struct FiberDirection {
  Vec v;
  double tau = 0, t_seed = 0;
  double angle_start = 0, angle_end = 0;
  Vec exit_start, exit_end;
  bool stable = false;       // small perturbations stay admissible
  std::vector<Vec> samples;  // points at t_seed + (k + k_first) * sample_step
  int k_first = 0;
};

namespace detail {

inline double line_angle(const ManifoldModel& model, const Vec& x, const Vec& v, const Vec& w) {
  Mat g = model.metric(x);
  double c = v.dot(g * w) / std::sqrt(v.dot(g * v) * w.dot(g * w));
  double a = std::acos(std::clamp(c, -1.0, 1.0));
  return std::min(a, std::numbers::pi - a);
}

// Admissibility of a computed path; returns a reason string when rejected.
inline std::optional<std::string> reject_reason(const ManifoldModel& model, const GeodesicPath& p, const GraphParams& prm) {
  if (p.tau > prm.T) return "length";
  if (std::min(p.exit_angle_start, p.exit_angle_end) < prm.theta0) return "exit angle";
  if (p.tau < 2 * prm.eps) return "endpoint separation";
  // epsilon-separation: the set where dist(gamma, dM) < eps must consist of
  // an initial and a final segment only.
  // Checked on samples roughly eps/8 apart in arclength.
  const int stride = std::max(1, static_cast<int>(prm.eps / (8 * std::max(1e-12, p.times[p.size() / 2 + 1] - p.times[p.size() / 2]))));
  int phase = 0;  // 0 initial near segment, 1 far middle, 2 final near segment
  for (int i = 0; i < p.size(); i = (i + stride < p.size() - 1 || i == p.size() - 1) ? i + stride : p.size() - 1) {
    bool near = model.boundary_distance(p.points[i]) < prm.eps;
    if (phase == 0 && !near) phase = 1;
    else if (phase == 1 && near) phase = 2;
    else if (phase == 2 && !near) return "boundary separation";
  }
  if (phase == 0) return "boundary separation";
  return std::nullopt;
}

inline std::vector<Vec> sample_directions(const ManifoldModel& model, const Vec& x, int n_dirs) {
  const int m = model.dim();
  std::vector<Vec> out;
  if (m == 2) {
    for (int k = 0; k < n_dirs; ++k) {
      double a = 2 * std::numbers::pi * k / n_dirs;
      out.push_back(unit_vector(model, x, Vec{{std::cos(a), std::sin(a)}}));
    }
  } else if (m == 3) {
    // Fibonacci sphere.
    const double ga = std::numbers::pi * (3 - std::sqrt(5.0));
    for (int k = 0; k < n_dirs; ++k) {
      double z = 1 - (2 * k + 1.0) / n_dirs, rr = std::sqrt(1 - z * z);
      out.push_back(unit_vector(model, x, Vec{{rr * std::cos(ga * k), rr * std::sin(ga * k), z}}));
    }
  } else {
    throw Error(ErrorKind::ShapeError, "direction sampling supports dimensions 2 and 3");
  }
  return out;
}

inline std::optional<GeodesicPath> admissible_path(const ModelPtr& model, const Vec& x, const Vec& v, const GraphParams& prm) {
  try {
    GeodesicOptions o = prm.geo;
    o.T_max = std::min(o.T_max, prm.T + 1.0);
    GeodesicPath p = integrate_geodesic(model, x, v, o);
    if (reject_reason(*model, p, prm)) return std::nullopt;
    return p;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::TrappedGeodesic || e.kind() == ErrorKind::TangentialExit) return std::nullopt;
    throw;
  }
}

inline FiberDirection make_fiber_direction(const GeodesicPath& p, const Vec& v, double hs) {
  FiberDirection d;
  d.v = v;
  d.tau = p.tau;
  d.t_seed = p.t_seed;
  d.angle_start = p.exit_angle_start;
  d.angle_end = p.exit_angle_end;
  d.exit_start = p.points.front();
  d.exit_end = p.points.back();
  const int klo = -static_cast<int>(std::floor(p.t_seed / hs));
  const int khi = static_cast<int>(std::floor((p.tau - p.t_seed) / hs));
  d.k_first = klo;
  for (int k = klo; k <= khi; ++k) d.samples.push_back(p.point_at(p.t_seed + k * hs));
  return d;
}

// Perturbations of v within the unit sphere at x.
inline std::vector<Vec> probe_directions(const ManifoldModel& model, const Vec& x, const Vec& v, double step) {
  const int m = model.dim();
  Mat g = model.metric(x);
  Mat E = normal_frame(model, x, v);
  std::vector<Vec> out;
  for (int a = 0; a < std::min(m - 1, 2); ++a)
    for (double sgn : {-1.0, 1.0}) {
      Vec w = std::cos(step) * v + std::sin(sgn * step) * Vec(E.col(a));
      out.push_back(w / std::sqrt(w.dot(g * w)));
    }
  if (out.size() < 4) {
    out.push_back(out[0]);
    out.push_back(out[1]);
  }
  return out;
}

}  // namespace detail

// Admissible directions at x among n_dirs uniform samples.  Probe stability
// is evaluated only when `probe` is set (it costs four extra geodesics each).
inline std::vector<FiberDirection> admissible_directions(const ModelPtr& model, const Vec& x, const GraphParams& prm, int n_dirs,
                                                         bool probe = false) {
  if (model->boundary(x) >= 0)
    throw Error(ErrorKind::DomainError, "point is not interior");
  std::vector<FiberDirection> out;
  for (const Vec& v : detail::sample_directions(*model, x, n_dirs)) {
    auto p = detail::admissible_path(model, x, v, prm);
    if (!p) continue;
    FiberDirection d = detail::make_fiber_direction(*p, v, prm.sample_step);
    if (probe) {
      d.stable = true;
      for (const Vec& w : detail::probe_directions(*model, x, v, prm.probe_step))
        if (!detail::admissible_path(model, x, w, prm)) {
          d.stable = false;
          break;
        }
    }
    out.push_back(std::move(d));
  }
  if (out.empty()) throw Error(ErrorKind::NoAdmissibleDirections, "no admissible direction at the point");
  return out;
}

struct HDiagnostics {
  bool admissible = true;
  double angle = 0;  // angle between the lines spanned by v and w
  bool angle_ok = false;
  bool antipodal = false;
  double worst_ratio = 0;  // max over near pairs of max(|t|,|s|) / d
  bool near_ok = true;
  bool ok() const { return admissible && angle_ok && !antipodal && near_ok; }
};

// Condition (H) on two fibre directions at x.  Distances between samples
// use the metric at the sample on the first geodesic.
inline HDiagnostics check_H_predicate(const ManifoldModel& model, const Vec& x, const FiberDirection& a, const FiberDirection& b,
                                      const GraphParams& prm) {
  HDiagnostics d;
  d.admissible = a.tau <= prm.T && b.tau <= prm.T && std::min({a.angle_start, a.angle_end, b.angle_start, b.angle_end}) >= prm.theta0;
  d.angle = detail::line_angle(model, x, a.v, b.v);
  d.angle_ok = d.angle >= prm.theta1;
  {
    Mat g = model.metric(x);
    double c = a.v.dot(g * b.v);
    d.antipodal = std::abs(std::abs(c) - 1) < 1e-12;
  }
  const double hs = prm.sample_step;
  const int m = model.dim();
  const int na = static_cast<int>(a.samples.size()), nb = static_cast<int>(b.samples.size());
  // Largest Euclidean gap between consecutive b samples, used to skip ahead.
  double bstep = 1e-12;
  for (int j = 0; j + 1 < nb; ++j) bstep = std::max(bstep, (b.samples[j + 1] - b.samples[j]).norm());
  const double reach = 4 * prm.r;  // assumes the metric is at least 1/16 of Euclidean
  for (int i = 0; i < na; ++i) {
    const Vec& p = a.samples[i];
    const double t = std::abs((i + a.k_first) * hs);
    std::optional<Mat> g;
    for (int j = 0; j < nb;) {
      const Vec& q = b.samples[j];
      double e2 = 0;
      for (int k = 0; k < m; ++k) e2 += (p[k] - q[k]) * (p[k] - q[k]);
      const double e = std::sqrt(e2);
      if (e > reach) {
        j += std::max(1, static_cast<int>((e - reach) / bstep));
        continue;
      }
      if (!g) g = model.metric(p);
      Vec dx = p - q;
      const double dist = std::sqrt(dx.dot(*g * dx));
      const double s = std::abs((j + b.k_first) * hs);
      ++j;
      if (dist >= prm.r) continue;
      const double tm = std::max(t, s);
      if (tm == 0) continue;
      d.worst_ratio = std::max(d.worst_ratio, dist > 0 ? tm / dist : 1e300);
      if (tm > 1.05 * prm.c0 * dist) d.near_ok = false;
    }
  }
  return d;
}

struct ScatteringRecord {
  Vec x, v, w;
  CMat S;
  Vec exit_v, exit_w;
  TransportResult P_v, P_w;
};

// S = P_w P_v^{-1}, with P_u the transport from x to the forward exit of the
// geodesic through x in direction u.
inline ScatteringRecord broken_transform(const ConnectionField& A, const ModelPtr& model, const Vec& x, const Vec& v, const Vec& w,
                                         double theta1 = 0.1, const GeodesicOptions& geo = {}) {
  const Vec vu = unit_vector(*model, x, v), wu = unit_vector(*model, x, w);
  Mat g = model->metric(x);
  if (std::abs(std::abs(vu.dot(g * wu)) - 1) < 1e-12) throw Error(ErrorKind::AngleTooSmall, "directions are parallel or antipodal");
  if (detail::line_angle(*model, x, vu, wu) < theta1) throw Error(ErrorKind::AngleTooSmall, "crossing angle below theta1");
  GeodesicPath pv = integrate_geodesic(model, x, vu, geo);
  GeodesicPath pw = integrate_geodesic(model, x, wu, geo);
  ScatteringRecord rec;
  rec.x = x;
  rec.v = vu;
  rec.w = wu;
  rec.P_v = parallel_transport(A, pv, pv.t_seed, pv.tau);
  rec.P_w = parallel_transport(A, pw, pw.t_seed, pw.tau);
  rec.exit_v = pv.points.back();
  rec.exit_w = pw.points.back();
  rec.S = rec.P_w.matrix * rec.P_v.matrix.inverse();
  return rec;
}

struct Fiber {
  Vec x;
  std::vector<FiberDirection> dirs;
  std::vector<std::pair<int, int>> edges;
  int components = 0;
  int stable_rank = 0;  // rank of the stable directions
  bool connected() const { return !dirs.empty() && components == 1; }
  bool spanning(int m) const { return stable_rank >= m; }
};

struct GraphStructure {
  ModelPtr model;
  GraphParams params;
  std::vector<Fiber> fibers;
  double boundary_gap = 0;  // largest gap between exit points (radians, m = 2)
  bool complete = false;
  std::string failure;
  int n_points() const { return static_cast<int>(fibers.size()); }
  std::vector<Vec> points() const {
    std::vector<Vec> p;
    for (const auto& f : fibers) p.push_back(f.x);
    return p;
  }
};

namespace detail {

struct UnionFind {
  std::vector<int> p;
  explicit UnionFind(int n) : p(n) { std::iota(p.begin(), p.end(), 0); }
  int find(int a) { return p[a] == a ? a : p[a] = find(p[a]); }
  void unite(int a, int b) { p[find(a)] = find(b); }
  int count() {
    int c = 0;
    for (int i = 0; i < static_cast<int>(p.size()); ++i) c += find(i) == i;
    return c;
  }
};

inline double sampling_box(const ManifoldModel& model) {
  if (auto c = dynamic_cast<const ConformalModel*>(&model)) return c->radius();
  return 1.0;
}

}  // namespace detail

inline std::vector<Vec> interior_points(const ManifoldModel& model, int n_points, double margin) {
  const int m = model.dim();
  const double R = detail::sampling_box(model);
  std::vector<Vec> pts;
  for (unsigned long i = 1; static_cast<int>(pts.size()) < n_points; ++i) {
    if (i > 1000ul * static_cast<unsigned long>(n_points) + 1000) throw Error(ErrorKind::DomainError, "cannot place interior points");
    auto h = halton(i, m);
    Vec x(m);
    for (int k = 0; k < m; ++k) x[k] = R * (2 * h[k] - 1);
    if (model.boundary(x) <= -margin) pts.push_back(x);
  }
  return pts;
}

inline Fiber build_fiber(const ModelPtr& model, const Vec& x, const GraphParams& prm, int n_dirs) {
  Fiber f;
  f.x = x;
  try {
    f.dirs = admissible_directions(model, x, prm, n_dirs, false);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NoAdmissibleDirections) throw;
    return f;
  }
  const int nd = static_cast<int>(f.dirs.size());
  detail::UnionFind uf(nd);
  for (int i = 0; i < nd; ++i)
    for (int j = i + 1; j < nd; ++j)
      if (check_H_predicate(*model, x, f.dirs[i], f.dirs[j], prm).ok()) {
        f.edges.emplace_back(i, j);
        uf.unite(i, j);
      }
  f.components = uf.count();

  // Stability probes, stopping once the stable directions span T_x M.
  const int m = model->dim();
  Mat span(m, 0);
  for (auto& d : f.dirs) {
    if (f.stable_rank >= m) break;
    d.stable = true;
    for (const Vec& w : detail::probe_directions(*model, x, d.v, prm.probe_step))
      if (!detail::admissible_path(model, x, w, prm)) {
        d.stable = false;
        break;
      }
    if (!d.stable) continue;
    span.conservativeResize(m, span.cols() + 1);
    span.col(span.cols() - 1) = d.v;
    f.stable_rank = static_cast<int>(Eigen::FullPivLU<Mat>(span).rank());
  }
  return f;
}

inline GraphStructure build_graph(const ModelPtr& model, const GraphParams& prm, int n_points, int n_dirs, bool require_complete = true,
                                  int threads = 1) {
  GraphStructure G;
  G.model = model;
  G.params = prm;
  auto pts = interior_points(*model, n_points, prm.margin);
  G.fibers.resize(pts.size());
  parallel_for(static_cast<int>(pts.size()), threads, [&](int i) { G.fibers[i] = build_fiber(model, pts[i], prm, n_dirs); });

  if (model->dim() == 2) {
    std::vector<double> ang;
    for (const auto& f : G.fibers)
      for (const auto& d : f.dirs) {
        ang.push_back(std::atan2(d.exit_start[1], d.exit_start[0]));
        ang.push_back(std::atan2(d.exit_end[1], d.exit_end[0]));
      }
    std::sort(ang.begin(), ang.end());
    double gap = ang.empty() ? 2 * std::numbers::pi : ang.front() + 2 * std::numbers::pi - ang.back();
    for (std::size_t i = 1; i < ang.size(); ++i) gap = std::max(gap, ang[i] - ang[i - 1]);
    G.boundary_gap = gap;
  }

  G.complete = true;
  for (const auto& f : G.fibers) {
    std::string why;
    if (f.dirs.empty()) why = "empty fibre";
    else if (!f.connected()) why = "disconnected fibre (" + std::to_string(f.components) + " components)";
    else if (!f.spanning(model->dim())) why = "stable directions do not span";
    if (!why.empty()) {
      G.complete = false;
      G.failure = why + " at x = (" + std::to_string(f.x[0]) + ", " + std::to_string(f.x[1]) + ")";
      break;
    }
  }
  if (G.complete && model->dim() == 2 && G.boundary_gap > prm.density_tol) {
    G.complete = false;
    G.failure = "exit points leave a boundary gap of " + std::to_string(G.boundary_gap);
  }
  if (require_complete && !G.complete) throw Error(ErrorKind::IncompleteStructure, G.failure);
  return G;
}

}  // namespace beamxray
