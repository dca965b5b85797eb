// Acceptance run: one PASS/FAIL line per criterion.  Tolerances are the
// constants below; the exit status is the number of failed criteria.

#include <chrono>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>

#include <fmt/core.h>

#include "beamxray/inversion.hpp"

using namespace beamxray;

namespace tol {
constexpr double unitarity = 1e-8;
constexpr double reversal = 1e-8;
constexpr double equivariance = 1e-6;
constexpr double transport_seconds = 10;

constexpr double riccati_golden = 1e-8;
constexpr double curvature_fd = 1e-4;

constexpr double slope_bound = 1.3;  // 2 - K/2 + 0.3 for K = 2
constexpr double residual_seconds = 300;

constexpr double interaction_rel = 0.2;

constexpr double broken_invariance = 1e-6;

constexpr double phi_match = 1e-5;
constexpr double flat = 1e-3;
constexpr double boundary = 1e-4;
constexpr double witness_min = 1e-2;
constexpr double reconstruction_seconds = 120;

constexpr double f_recovery = 1e-10;
constexpr double f_recovery_seconds = 5;

constexpr double pipeline_factor = 3;
constexpr double pipeline_cross = 1e-6;

constexpr double leibniz = 1e-12;
}  // namespace tol

namespace {

double now() { return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

std::shared_ptr<const ConformalModel> disk() { return std::make_shared<EuclideanDisk>(1.0, 2); }
std::shared_ptr<const ConformalModel> conformal() {
  return std::make_shared<ConformalDisk>(ConformalDisk::default_coeffs(), 1.0, 2);
}

// ---------------------------------------------------------------------------

Outcome transport_suite() {
  const double t0 = now();
  double wu = 0, wr = 0, we = 0;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> U(0, 1);
  int count = 0;
  for (auto model : {disk(), conformal()}) {
    for (int trial = 0; trial < 50; ++trial, ++count) {
      auto A = std::make_shared<PolyConnection>(2, 2, 2, 100 + count, 0.5);
      auto phi = std::make_shared<BumpGauge>(model, 2, 500 + count, 1.0);
      auto Ag = gauge_apply(A, phi);
      Vec x(2);
      do x = vec2(2 * U(rng) - 1, 2 * U(rng) - 1);
      while (model->boundary(x) > -0.05);
      const double a = 2 * std::numbers::pi * U(rng);
      GeodesicPath p = integrate_geodesic(model, x, unit_vector(*model, x, vec2(std::cos(a), std::sin(a))));
      auto fw = parallel_transport(*A, p, 0, p.tau);
      auto bw = parallel_transport(*A, p, p.tau, 0);
      const double ts = p.tau * (0.2 + 0.6 * U(rng));
      auto p1 = parallel_transport(*A, p, 0, ts), p2 = parallel_transport(*A, p, ts, p.tau);
      auto pg = parallel_transport(*Ag, p, 0, p.tau);
      wu = std::max({wu, fw.unitarity_defect, bw.unitarity_defect});
      wr = std::max({wr, (bw.matrix * fw.matrix - CMat::Identity(2, 2)).norm(), (p2.matrix * p1.matrix - fw.matrix).norm()});
      we = std::max(we, (pg.matrix - phi->eval(p.points.back()).inverse() * fw.matrix * phi->eval(p.points.front())).norm());
    }
  }
  const double dt = now() - t0;
  Outcome o;
  o.pass = wu <= tol::unitarity && wr <= tol::reversal && we <= tol::equivariance && dt <= tol::transport_seconds;
  o.detail = fmt::format("{} triples, unitarity {:.2e}, reversal/concatenation {:.2e}, equivariance {:.2e}, {:.1f} s", count, wu, wr,
                         we, dt);
  return o;
}

// ---------------------------------------------------------------------------

double min_im_eig(const CMat& H) {
  Mat im = H.imag();
  im = 0.5 * (im + im.transpose());
  return Eigen::SelfAdjointEigenSolver<Mat>(im).eigenvalues().minCoeff();
}

Outcome riccati_golden() {
  // Euclidean golden values on a chord long enough to cover [0, 2].
  double golden = 0;
  {
    ModelPtr big = std::make_shared<EuclideanDisk>(1.2, 2);
    auto path = make_path(big, vec2(-0.9, 0), vec2(1, 0));
    auto R = solve_riccati(make_beam_chart(path, 1.0, 0));
    for (std::size_t i = 0; i < R.t.size(); ++i) {
      if (R.t[i] < 0 || R.t[i] > 2) continue;
      golden = std::max(golden, std::abs(R.H[i](0, 0) - cd(0, 1) / cd(1, R.t[i])));
    }
  }
  // Positivity of Im H on every model and a few chords.
  double min_im = 1e300;
  std::vector<ModelPtr> models{disk(), conformal(), std::make_shared<SphereCap>(0.8)};
  for (const auto& model : models)
    for (double a : {0.0, 1.1, 2.3}) {
      Vec x = vec2(0.1, -0.2);
      auto path = make_path(model, x, unit_vector(*model, x, vec2(std::cos(a), std::sin(a))));
      auto R = solve_riccati(make_beam_chart(path, 1.0, 0));
      for (const auto& H : R.H) min_im = std::min(min_im, min_im_eig(H));
    }
  // Curvature formula against second differences of g^{tt} from the shooting map.
  double curv = 0;
  {
    auto model = conformal();
    auto path = make_path(model, Vec::Zero(2), unit_vector(*model, Vec::Zero(2), vec2(1, 0.3)));
    FermiChart chart(path, 0.5, {});
    const double h = 0.05;
    for (double t : {0.2, 0.5, 0.8}) {
      auto gtt = [&](double y) {
        Vec yy(1);
        yy << y;
        return chart.pulled_back_metric_fd(t, yy).inverse()(0, 0);
      };
      const double d2 = (-gtt(2 * h) + 16 * gtt(h) - 30 * gtt(0) + 16 * gtt(-h) - gtt(-2 * h)) / (12 * h * h);
      curv = std::max(curv, std::abs(-0.5 * d2 - curvature_F(*model, *path, t)(0, 0)));
    }
  }
  Outcome o;
  o.pass = golden <= tol::riccati_golden && min_im > 0 && curv <= tol::curvature_fd;
  o.detail = fmt::format("golden {:.2e}, min eig Im H {:.3e}, curvature vs FD {:.2e}", golden, min_im, curv);
  return o;
}

// ---------------------------------------------------------------------------

Outcome residual_scaling() {
  const double t0 = now();
  const std::vector<double> lambdas{16, 32, 64, 128};
  bool pass = true;
  std::string detail;
  for (auto model : {disk(), conformal()}) {
    auto A = std::make_shared<PolyConnection>(2, 2, 2, 7, 0.5);
    auto path = make_path(model, Vec::Zero(2), unit_vector(*model, Vec::Zero(2), vec2(1, 0)));
    std::map<int, double> at128;
    double slope = 0;
    for (int K : {2, 0}) {
      BeamOptions o;
      o.K = K;
      BeamJet beam(make_beam_chart(path, 2.0, K), A, 2.0, o);
      std::vector<double> ll, lr;
      for (double lam : lambdas) {
        const double r = residual_norm(beam, lam, 0.05 / lam);
        ll.push_back(std::log(lam));
        lr.push_back(std::log(r));
        if (lam == 128) at128[K] = r;
      }
      if (K == 2) slope = fit_slope(ll, lr).slope;
    }
    pass = pass && slope <= tol::slope_bound && at128[2] < at128[0];
    detail += fmt::format("{}: slope {:.3f}, r128 K2 {:.3e} < K0 {:.3e}; ", model->name(), slope, at128[2], at128[0]);
  }
  const double dt = now() - t0;
  Outcome o;
  o.pass = pass && dt <= tol::residual_seconds;
  o.detail = detail + fmt::format("{:.1f} s", dt);
  return o;
}

// ---------------------------------------------------------------------------

// Interactions at the perpendicular crossing at the origin, cached by label
// because criteria 4 and 9 share the constant rank-2 run.
struct InteractionRun {
  ConnectionPtr A;
  std::map<double, InteractionResult> by_lambda;
};

InteractionRun run_interaction(ConnectionPtr A) {
  ModelPtr model = disk();
  auto g = make_path(model, Vec::Zero(2), vec2(1, 0));
  auto e = make_path(model, Vec::Zero(2), vec2(0, 1));
  auto q = make_quartet(make_beam_chart(g, 2.0, 2), make_beam_chart(e, 2.0, 2), A, 2.0, 2);
  InteractionRun run;
  run.A = A;
  for (double lam : {32.0, 64.0, 128.0}) run.by_lambda.emplace(lam, interaction_integral(*q.u, *q.ut, *q.v, *q.vt, lam, 1.0 / lam));
  return run;
}

InteractionRun& constant_rank2() {
  static InteractionRun run = run_interaction(ConstantConnection::random(2, 2, 7, 0.5));
  return run;
}

Outcome interaction_check() {
  bool pass = true;
  std::string detail;
  auto monotone = [&](const InteractionRun& run, const char* label) {
    const double e32 = run.by_lambda.at(32).rel_err(), e64 = run.by_lambda.at(64).rel_err(), e128 = run.by_lambda.at(128).rel_err();
    pass = pass && e32 > e64 && e64 > e128 && e128 <= tol::interaction_rel;
    detail += fmt::format("{}: rel {:.3e} {:.3e} {:.3e}; ", label, e32, e64, e128);
  };
  auto identity_S = [&](const InteractionRun& run, const char* label) {
    const auto& r = run.by_lambda.at(128);
    const double err = sign_error(interaction_to_F(r).S, CMat::Identity(r.n, r.n));
    pass = pass && err <= r.rel_err();
    detail += fmt::format("{} S=I err {:.3e}; ", label, err);
  };
  auto zero1 = run_interaction(ConstantConnection::zero(1, 2));
  monotone(zero1, "n=1 A=0");
  identity_S(zero1, "n=1");
  monotone(constant_rank2(), "n=2 constant A");
  auto zero2 = run_interaction(ConstantConnection::zero(2, 2));
  identity_S(zero2, "n=2");
  return {pass, detail};
}

// ---------------------------------------------------------------------------

Outcome broken_invariance() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> U(0, 1);
  GraphParams prm;
  struct Triple {
    std::shared_ptr<const ConformalModel> model;
    Vec x, v, w;
  };
  std::vector<Triple> triples;
  std::vector<std::shared_ptr<const ConformalModel>> models{disk(), conformal()};
  while (triples.size() < 50) {
    auto model = models[triples.size() % 2];
    Vec x = vec2(2 * U(rng) - 1, 2 * U(rng) - 1);
    if (model->boundary(x) > -0.1) continue;
    auto dirs = admissible_directions(model, x, prm, 12);
    if (dirs.size() < 2) continue;
    std::uniform_int_distribution<std::size_t> pick(0, dirs.size() - 1);
    for (int attempt = 0; attempt < 20; ++attempt) {
      const auto a = pick(rng), b = pick(rng);
      if (a == b || !check_H_predicate(*model, x, dirs[a], dirs[b], prm).ok()) continue;
      triples.push_back({model, x, dirs[a].v, dirs[b].v});
      break;
    }
  }
  double worst = 0;
  for (int pair = 0; pair < 50; ++pair) {
    for (const auto& tr : triples) {
      auto A = std::make_shared<PolyConnection>(2, 2, 2, 1000 + pair, 0.5);
      auto phi = std::make_shared<BumpGauge>(tr.model, 2, 2000 + pair, 1.0);
      auto S1 = broken_transform(*A, tr.model, tr.x, tr.v, tr.w, prm.theta1).S;
      auto S2 = broken_transform(*gauge_apply(A, phi), tr.model, tr.x, tr.v, tr.w, prm.theta1).S;
      worst = std::max(worst, (S1 - S2).norm());
    }
  }
  return {worst <= tol::broken_invariance, fmt::format("50 pairs x 50 triples, max ||S' - S|| {:.2e}", worst)};
}

// ---------------------------------------------------------------------------

struct ReconstructionSetup {
  std::shared_ptr<const ConformalModel> model = disk();
  GraphStructure graph;
  ConnectionPtr A1, A2;
  std::shared_ptr<BumpGauge> phi;
  double graph_seconds = 0;
};

ReconstructionSetup& reconstruction_setup() {
  static ReconstructionSetup s = [] {
    ReconstructionSetup r;
    const double t0 = now();
    r.graph = build_graph(r.model, GraphParams{}, 64, 16);
    r.graph_seconds = now() - t0;
    r.A1 = std::make_shared<PolyConnection>(2, 2, 2, 11, 0.5);
    r.phi = std::make_shared<BumpGauge>(r.model, 2, 5, 1.0);
    r.A2 = gauge_apply(r.A1, r.phi);
    return r;
  }();
  return s;
}

Outcome reconstruction_round_trip() {
  const double t0 = now();
  auto& s = reconstruction_setup();
  auto R = reconstruct_gauge(s.A1, s.A2, s.graph);
  double err = 0;
  for (std::size_t i = 0; i < R.points.size(); ++i) err = std::max(err, (R.phi[i] - s.phi->eval(R.points[i])).norm());
  ConnectionPtr A3 = std::make_shared<PerturbedConnection>(s.A2, vec2(0.2, -0.1), 0.4, 0.1, 0);
  double witness = -1;
  try {
    reconstruct_gauge(s.A1, A3, s.graph);
  } catch (const NotGaugeEquivalentError& e) {
    witness = e.defect;
  }
  const double dt = now() - t0 + s.graph_seconds;
  Outcome o;
  o.pass = err <= tol::phi_match && R.flat_defect <= tol::flat && R.boundary_defect <= tol::boundary && witness >= tol::witness_min &&
           dt <= tol::reconstruction_seconds;
  o.detail = fmt::format("phi {:.2e}, flat {:.2e}, boundary {:.2e}, control witness {}, {:.1f} s", err, R.flat_defect,
                         R.boundary_defect, witness < 0 ? std::string("none") : fmt::format("{:.3e}", witness), dt);
  return o;
}

Outcome sign_variant() {
  auto& s = reconstruction_setup();
  ReconstructionOptions opt;
  opt.flip_seed = 99;
  auto R = reconstruct_gauge_up_to_sign(s.A1, s.A2, s.graph, opt);
  double plus = 0, minus = 0;
  for (std::size_t i = 0; i < R.points.size(); ++i) {
    CMat P = s.phi->eval(R.points[i]);
    plus = std::max(plus, (R.phi[i] - P).norm());
    minus = std::max(minus, (R.phi[i] + P).norm());
  }
  // A single global sign: the error against one of +phi, -phi is small everywhere.
  const double err = std::min(plus, minus);
  return {err <= tol::phi_match, fmt::format("global-sign error {:.2e} (other sign {:.2e})", err, std::max(plus, minus))};
}

// ---------------------------------------------------------------------------

Outcome f_recovery() {
  const double t0 = now();
  std::mt19937_64 rng(8);
  double worst = 0;
  int failures = 0;
  for (int n = 1; n <= 4; ++n)
    for (int k = 0; k < 1000; ++k) {
      CMat Q = random_unitary(n, rng);
      if (k % 10 == 0) {
        std::vector<int> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        if (n > 1 && perm[0] == 0) std::swap(perm[0], perm[1]);
        Q.setZero();
        for (int i = 0; i < n; ++i) Q(i, perm[i]) = std::exp(cd(0, 0.7 * i + 0.1 * k));
      }
      double e = 1e300;
      try {
        e = sign_error(recover_Q_from_F(exact_F_sampler(Q), n), Q);
      } catch (const Error&) {
      }
      worst = std::max(worst, e);
      if (e > tol::f_recovery) ++failures;
    }
  const double dt = now() - t0;
  return {failures == 0 && dt <= tol::f_recovery_seconds, fmt::format("4000 unitaries, worst {:.2e}, failures {}, {:.2f} s", worst, failures, dt)};
}

// ---------------------------------------------------------------------------

Outcome pipeline() {
  auto& run = constant_rank2();
  const auto& r = run.by_lambda.at(128);
  auto rec = interaction_to_F(r);
  ModelPtr model = disk();
  const Vec x = r.crossing.x;
  auto g = make_path(model, Vec::Zero(2), vec2(1, 0));
  auto e = make_path(model, Vec::Zero(2), vec2(0, 1));
  const CMat Sb = broken_transform(*run.A, model, x, -g->velocity_at(r.crossing.t0), -e->velocity_at(r.crossing.s0)).S;
  const double rec_err = sign_error(rec.S, r.S);
  const double rec_vs_broken = sign_error(rec.S, Sb);
  const double cross = (Sb - r.S).norm();
  const double bound = tol::pipeline_factor * r.rel_err();
  return {rec_err <= bound && rec_vs_broken <= bound && cross <= tol::pipeline_cross,
          fmt::format("||S_hat -+ S|| {:.3e} (bound {:.3e}), vs broken transform {:.3e}, broken vs S {:.2e}", rec_err, bound,
                      rec_vs_broken, cross)};
}

// ---------------------------------------------------------------------------

// Q^k(uv) from the eigen-decomposition Q = sum_j (w_j d_{v_j})^2.
CPoly leibniz_rhs(const Eigen::MatrixXd& B, const CPoly& u, const CPoly& v, int k) {
  const int m = u.n_vars();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B);
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
  auto fact = [](int n) {
    double f = 1;
    for (int i = 2; i <= n; ++i) f *= i;
    return f;
  };
  CPoly out(u.set());
  std::vector<int> alpha(m, 0);
  std::function<void(int, int)> rec = [&](int pos, int left) {
    if (pos == m) {
      const int na = k - left;
      double afact = 1;
      for (int a : alpha) afact *= fact(a);
      for (int j = 0; j <= left; ++j) {
        const int l = left - j;
        CPoly a = Qpow(u, j), b = Qpow(v, l);
        for (int i = 0; i < m; ++i)
          for (int c = 0; c < alpha[i]; ++c) a = D(a, i), b = D(b, i);
        CPoly term = a * b;
        term *= cd(std::pow(2.0, na) * fact(k) / (fact(j) * fact(l) * afact));
        out += term;
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
  return out;
}

Outcome qk_pairing_check() {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> N(0, 1);
  double min_ratio = 1e300, leib = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 2 + trial % 2, k = 1 + trial % 3;
    Eigen::MatrixXd G(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) G(i, j) = N(rng);
    Eigen::MatrixXd B = G * G.transpose() + 0.1 * Eigen::MatrixXd::Identity(m, m);
    HomogeneousPoly p(m, k);
    for (auto& c : p.coeffs) c = cd(N(rng), N(rng));
    const cd val = qk_pairing(B, p, p);
    double pn = 0;
    for (auto c : p.coeffs) pn += std::norm(c);
    min_ratio = std::min(min_ratio, std::abs(val.imag()) < 1e-9 * std::abs(val) ? val.real() / pn : -1.0);

    // Leibniz oracle on inhomogeneous u, v of degree <= 3.
    auto set = MultiIndexSet::get(m, 6);
    CPoly u(set), v(set);
    for (int i = 0; i < set->size(); ++i)
      if (set->degree(i) <= 3) u[i] = cd(N(rng), N(rng)), v[i] = cd(N(rng), N(rng));
    CPoly lhs = u * v;
    for (int i = 0; i < k; ++i) lhs = apply_Q(B, lhs);
    CPoly diff = lhs - leibniz_rhs(B, u, v, k);
    leib = std::max(leib, diff.max_abs() / std::max(1.0, lhs.max_abs()));
  }
  return {min_ratio > 0 && leib <= tol::leibniz,
          fmt::format("min Q^k(|p|^2)/|p|^2 {:.3e}, Leibniz relative defect {:.2e}", min_ratio, leib)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"transport algebra", transport_suite},
      {"Riccati golden values and curvature", riccati_golden},
      {"beam residual scaling", residual_scaling},
      {"stationary-phase interaction", interaction_check},
      {"broken-transform gauge invariance", broken_invariance},
      {"gauge reconstruction round trip", reconstruction_round_trip},
      {"sign variant", sign_variant},
      {"F-recovery", f_recovery},
      {"interaction to F pipeline", pipeline},
      {"Q^k pairing", qk_pairing_check},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const double t0 = now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    if (!o.pass) ++failed;
    fmt::print("criterion {:2d} {} [{}] {} ({:.1f} s)\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail, now() - t0);
    std::fflush(stdout);
  }
  fmt::print("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed;
}
