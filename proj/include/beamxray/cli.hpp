#pragma once

// Scenario configs and the experiment runners behind the beamxray binary.
//
// Config format: UTF-8 text, one `key = value` per line under `[section]`
// headers, `#` starts a comment.  Unknown sections or keys are rejected.

#include <fmt/format.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "beam.hpp"
#include "bundle.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "inversion.hpp"
#include "numerics.hpp"
#include "parallel.hpp"
#include "xray.hpp"

namespace beamxray::cli {

class ConfigError : public Error {
 public:
  ConfigError(int line, const std::string& what)
      : Error(ErrorKind::ConfigError, line > 0 ? "line " + std::to_string(line) + ": " + what : what), line(line) {}
  int line;
};

struct KeySpec {
  const char* section;
  const char* key;
  const char* def;
  const char* help;
};

// Every accepted key with its default; `--help` prints this table.
inline const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> s = {
      {"run", "experiment", "transport-check",
       "transport-check | beam-residual | interaction | broken | graph-check | reconstruct | f-recovery"},
      {"run", "output_dir", "out", "directory for CSV tables and summary.txt"},
      {"run", "seed", "1", "seed for randomized trials"},
      {"run", "trials", "0", "number of random trials (0: 100 for transport-check, 1000 for f-recovery)"},
      {"run", "n_max", "4", "f-recovery sweeps n = 1..n_max"},
      {"manifold", "kind", "disk", "disk | conformal_disk | sphere_cap"},
      {"manifold", "conformal_poly", "0.05 0 0 -0.1 0 -0.1 0 0 0 0 0.05 0 0.1 0 0.05",
       "coefficients of f (metric e^{2f}) in graded-lex order 1, x1, x2, x1^2, x1x2, x2^2, ... up to degree 4"},
      {"manifold", "radius", "1.0", "chart radius of the domain |x| < radius"},
      {"connection", "rank", "2", "fibre dimension n"},
      {"connection", "family", "poly", "constant | poly | fourier | zero"},
      {"connection", "degree", "2", "polynomial degree or Fourier cutoff"},
      {"connection", "seed", "7", "coefficient seed"},
      {"connection", "scale", "0.5", "coefficient scale"},
      {"gauge", "seed", "5", "seed of the boundary-trivial gauge"},
      {"gauge", "scale", "1.0", "size of the gauge exponent"},
      {"gauge", "up_to_sign", "false", "reconstruct: use the sign variant"},
      {"gauge", "flip_seed", "0", "reconstruct: inject per-direction sign flips (0 = none, sign variant only)"},
      {"gauge", "perturb_amplitude", "0", "reconstruct: add i*amplitude*bump to A2 (negative control)"},
      {"gauge", "perturb_center", "0.2 -0.1", "centre of the perturbation bump"},
      {"gauge", "perturb_width", "0.4", "radius of the perturbation bump"},
      {"gauge", "eps_edge", "1e-4", "reconstruct: fibre agreement tolerance"},
      {"beam", "K", "2", "amplitude order"},
      {"beam", "lambdas", "16 32 64 128", "frequencies"},
      {"beam", "norm_p", "2", "L^p normalization (2 | 4); interaction always uses 4"},
      {"beam", "delta_prime", "2.0", "tube radius of the beams"},
      {"beam", "quad_step_factor", "0.05", "residual grid step = factor / lambda"},
      {"beam", "interaction_step_factor", "1.0", "interaction grid step = factor / lambda"},
      {"beam", "point", "0 0", "point the chords pass through"},
      {"beam", "direction", "1 0", "direction of the first chord"},
      {"beam", "direction2", "0 1", "direction of the second chord (interaction)"},
      {"beam", "theta1", "0.1", "minimal crossing angle for the interaction"},
      {"graph", "n_points", "64", "interior sample points"},
      {"graph", "n_dirs", "16", "directions per point"},
      {"graph", "T", "10", "maximal geodesic length"},
      {"graph", "theta0", "0.1", "minimal exit angle"},
      {"graph", "theta1", "0.3", "minimal angle between crossing lines"},
      {"graph", "eps", "0.05", "boundary separation"},
      {"graph", "r", "0.2", "near-intersection radius"},
      {"graph", "c0", "2", "near-intersection constant"},
      {"graph", "density_tol", "0.5", "largest allowed gap between exit points (radians)"},
  };
  return s;
}

inline const KeySpec* find_key(const std::string& section, const std::string& key) {
  for (const auto& k : schema())
    if (section == k.section && key == k.key) return &k;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

class Scenario {
 public:
  Scenario() {
    for (const auto& k : schema()) values_[k.section][k.key] = {k.def, 0};
  }

  static Scenario parse(std::istream& in) {
    Scenario s;
    std::string line, section;
    int no = 0;
    while (std::getline(in, line)) {
      ++no;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(no, "unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        bool known = false;
        for (const auto& k : schema()) known = known || section == k.section;
        if (!known) throw ConfigError(no, "unknown section [" + section + "]");
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(no, "expected key = value");
      if (section.empty()) throw ConfigError(no, "key outside of a section");
      s.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), no);
    }
    s.validate();
    return s;
  }
  static Scenario parse_string(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }
  static Scenario load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(0, "cannot read config file " + path);
    return parse(f);
  }

  void set(const std::string& section, const std::string& key, const std::string& value, int line = 0) {
    if (!find_key(section, key)) throw ConfigError(line, "unknown key " + section + "." + key);
    values_[section][key] = {value, line};
  }
  // `section.key=value`, as given to --set.
  void apply_override(const std::string& kv) {
    auto eq = kv.find('=');
    auto dot = kv.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) throw ConfigError(0, "--set expects section.key=value, got " + kv);
    set(trim(kv.substr(0, dot)), trim(kv.substr(dot + 1, eq - dot - 1)), trim(kv.substr(eq + 1)));
    validate();
  }

  const std::string& str(const std::string& section, const std::string& key) const { return values_.at(section).at(key).value; }
  int line(const std::string& section, const std::string& key) const { return values_.at(section).at(key).line; }

  double num(const std::string& section, const std::string& key) const {
    const std::string& v = str(section, key);
    try {
      std::size_t pos = 0;
      double d = std::stod(v, &pos);
      if (trim(v.substr(pos)).empty()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(line(section, key), section + "." + key + " is not a number: '" + v + "'");
  }
  long long integer(const std::string& section, const std::string& key) const {
    double d = num(section, key);
    if (d != std::floor(d)) throw ConfigError(line(section, key), section + "." + key + " must be an integer");
    return static_cast<long long>(d);
  }
  bool flag(const std::string& section, const std::string& key) const {
    const std::string& v = str(section, key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(line(section, key), section + "." + key + " must be true or false");
  }
  std::vector<double> list(const std::string& section, const std::string& key) const {
    std::istringstream is(str(section, key));
    std::vector<double> out;
    std::string tok;
    while (is >> tok) {
      try {
        std::size_t pos = 0;
        out.push_back(std::stod(tok, &pos));
        if (pos != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ConfigError(line(section, key), section + "." + key + " has a non-numeric entry '" + tok + "'");
      }
    }
    return out;
  }
  Vec vec(const std::string& section, const std::string& key, int dim) const {
    auto l = list(section, key);
    if (static_cast<int>(l.size()) != dim)
      throw ConfigError(line(section, key), section + "." + key + " needs " + std::to_string(dim) + " entries");
    return Eigen::Map<Vec>(l.data(), dim);
  }

  // Canonical text: every key in schema order, effective values.
  std::string dump() const {
    std::string out, cur;
    for (const auto& k : schema()) {
      if (cur != k.section) {
        out += (cur.empty() ? "" : "\n") + fmt::format("[{}]\n", k.section);
        cur = k.section;
      }
      out += fmt::format("{} = {}\n", k.key, str(k.section, k.key));
    }
    return out;
  }
  // FNV-1a of the canonical dump, without run.output_dir so that reruns into
  // different directories produce identical files.
  std::uint64_t hash() const {
    Scenario s = *this;
    s.values_["run"]["output_dir"] = {"", 0};
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s.dump()) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }
  bool operator==(const Scenario& o) const { return dump() == o.dump(); }

  void validate() const {
    static const std::vector<std::string> experiments = {"transport-check", "beam-residual", "interaction", "broken",
                                                         "graph-check",     "reconstruct",   "f-recovery"};
    if (std::find(experiments.begin(), experiments.end(), str("run", "experiment")) == experiments.end())
      throw ConfigError(line("run", "experiment"), "unknown experiment '" + str("run", "experiment") + "'");
    const std::string kind = str("manifold", "kind");
    if (kind != "disk" && kind != "conformal_disk" && kind != "sphere_cap")
      throw ConfigError(line("manifold", "kind"), "unknown manifold kind '" + kind + "'");
    const std::string fam = str("connection", "family");
    if (fam != "constant" && fam != "poly" && fam != "fourier" && fam != "zero")
      throw ConfigError(line("connection", "family"), "unknown connection family '" + fam + "'");
    if (integer("connection", "rank") < 1) throw ConfigError(line("connection", "rank"), "rank must be positive");
    const auto p = integer("beam", "norm_p");
    if (p != 2 && p != 4) throw ConfigError(line("beam", "norm_p"), "norm_p must be 2 or 4");
    if (integer("beam", "K") < 0) throw ConfigError(line("beam", "K"), "K must be non-negative");
    if (!(num("beam", "delta_prime") > 0)) throw ConfigError(line("beam", "delta_prime"), "delta_prime must be positive");
    if (list("beam", "lambdas").empty()) throw ConfigError(line("beam", "lambdas"), "lambdas is empty");
    if (!(num("manifold", "radius") > 0)) throw ConfigError(line("manifold", "radius"), "radius must be positive");
    flag("gauge", "up_to_sign");
    list("manifold", "conformal_poly");
    for (const char* k : {"n_points", "n_dirs"})
      if (integer("graph", k) < 1) throw ConfigError(line("graph", k), std::string("graph.") + k + " must be positive");
  }

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  std::map<std::string, std::map<std::string, Entry>> values_;
};

inline std::string help_text() {
  std::string out = "Config keys (section.key = default):\n";
  for (const auto& k : schema()) out += fmt::format("  {}.{} = {}\n      {}\n", k.section, k.key, k.def, k.help);
  return out;
}

// ---------------------------------------------------------------------------
// Construction of the numerical objects a scenario describes.

inline std::shared_ptr<const ConformalModel> make_model(const Scenario& s) {
  const std::string kind = s.str("manifold", "kind");
  const double R = s.num("manifold", "radius");
  if (kind == "disk") return std::make_shared<EuclideanDisk>(R, 2);
  if (kind == "conformal_disk") {
    try {
      return std::make_shared<ConformalDisk>(s.list("manifold", "conformal_poly"), R, 2);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::ShapeError) throw ConfigError(s.line("manifold", "conformal_poly"), e.what());
      throw;
    }
  }
  return std::make_shared<SphereCap>(R);
}

inline ConnectionPtr make_connection(const Scenario& s, int dim) {
  const int n = static_cast<int>(s.integer("connection", "rank"));
  const int deg = static_cast<int>(s.integer("connection", "degree"));
  const auto seed = static_cast<std::uint64_t>(s.integer("connection", "seed"));
  const double scale = s.num("connection", "scale");
  const std::string fam = s.str("connection", "family");
  if (fam == "zero") return ConstantConnection::zero(n, dim);
  if (fam == "constant") return ConstantConnection::random(n, dim, seed, scale);
  if (fam == "fourier") return std::make_shared<FourierConnection>(n, dim, deg, seed, scale);
  return std::make_shared<PolyConnection>(n, dim, deg, seed, scale);
}

inline GaugePtr make_gauge(const Scenario& s, const std::shared_ptr<const ConformalModel>& model, int rank) {
  return std::make_shared<BumpGauge>(model, rank, static_cast<std::uint64_t>(s.integer("gauge", "seed")), s.num("gauge", "scale"));
}

inline GraphParams make_graph_params(const Scenario& s) {
  GraphParams p;
  p.T = s.num("graph", "T");
  p.theta0 = s.num("graph", "theta0");
  p.theta1 = s.num("graph", "theta1");
  p.eps = s.num("graph", "eps");
  p.r = s.num("graph", "r");
  p.c0 = s.num("graph", "c0");
  p.density_tol = s.num("graph", "density_tol");
  return p;
}

// ---------------------------------------------------------------------------
// Output helpers.

inline std::string num17(double v) { return fmt::format("{:.17g}", v); }

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const Scenario& s, const std::vector<std::string>& header) : f_(path) {
    if (!f_) throw Error(ErrorKind::DomainError, "cannot write " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) f_ << (i ? "," : "") << header[i];
    f_ << "\n# scenario-hash: " << fmt::format("{:016x}", s.hash()) << "\n";
  }
  void row(const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) f_ << (i ? "," : "") << num17(v[i]);
    f_ << "\n";
  }

 private:
  std::ofstream f_;
};

struct RunContext {
  std::filesystem::path out_dir;
  int threads = 1;
  std::ostream* log = &std::cout;
};

class Summary {
 public:
  void line(const std::string& s) { text_ += s + "\n"; }
  template <class... Args>
  void kv(const std::string& key, const Args&... args) {
    std::string v;
    ((v += (v.empty() ? "" : " ") + fmt::format("{}", args)), ...);
    text_ += key + " = " + v + "\n";
  }
  void write(const RunContext& ctx, const Scenario& s) const {
    std::ofstream f(ctx.out_dir / "summary.txt");
    f << "# scenario-hash: " << fmt::format("{:016x}", s.hash()) << "\n" << text_;
    *ctx.log << text_;
  }

 private:
  std::string text_;
};

// ---------------------------------------------------------------------------
// Experiments.  Each returns the process exit code.

inline int run_transport_check(const Scenario& s, const RunContext& ctx) {
  auto model = make_model(s);
  const int m = model->dim();
  auto A = make_connection(s, m);
  auto phi = make_gauge(s, model, A->rank());
  auto Ag = gauge_apply(A, phi);
  int trials = static_cast<int>(s.integer("run", "trials"));
  if (trials <= 0) trials = 100;
  std::mt19937_64 rng(static_cast<std::uint64_t>(s.integer("run", "seed")));
  std::uniform_real_distribution<double> U(0, 1);

  std::vector<std::string> hdr{"trial"};
  for (int k = 0; k < m; ++k) hdr.push_back(fmt::format("x{}", k + 1));
  for (int k = 0; k < m; ++k) hdr.push_back(fmt::format("v{}", k + 1));
  for (const char* c : {"tau", "unitarity", "reversal", "concatenation", "equivariance"}) hdr.push_back(c);
  CsvWriter csv(ctx.out_dir / "transport.csv", s, hdr);
  double wu = 0, wr = 0, wc = 0, we = 0;
  const double R = model->radius();
  for (int t = 0; t < trials; ++t) {
    Vec x(m), v(m);
    do {
      for (int k = 0; k < m; ++k) x[k] = R * (2 * U(rng) - 1);
    } while (model->boundary(x) > -0.05 * R * R);
    const double a = 2 * std::numbers::pi * U(rng);
    v << std::cos(a), std::sin(a);
    v = unit_vector(*model, x, v);
    GeodesicPath p = integrate_geodesic(model, x, v);
    const int n = A->rank();
    auto fw = parallel_transport(*A, p, 0, p.tau);
    auto bw = parallel_transport(*A, p, p.tau, 0);
    const double ts = p.tau * (0.2 + 0.6 * U(rng));
    auto p1 = parallel_transport(*A, p, 0, ts), p2 = parallel_transport(*A, p, ts, p.tau);
    auto pg = parallel_transport(*Ag, p, 0, p.tau);
    const double du = fw.unitarity_defect;
    const double dr = (bw.matrix * fw.matrix - CMat::Identity(n, n)).norm();
    const double dc = (p2.matrix * p1.matrix - fw.matrix).norm();
    const double de = (pg.matrix - phi->eval(p.points.back()).inverse() * fw.matrix * phi->eval(p.points.front())).norm();
    wu = std::max(wu, du), wr = std::max(wr, dr), wc = std::max(wc, dc), we = std::max(we, de);
    std::vector<double> row{double(t)};
    for (int k = 0; k < m; ++k) row.push_back(x[k]);
    for (int k = 0; k < m; ++k) row.push_back(v[k]);
    for (double d : {p.tau, du, dr, dc, de}) row.push_back(d);
    csv.row(row);
  }
  Summary sm;
  sm.kv("experiment", "transport-check");
  sm.kv("trials", trials);
  sm.kv("max_unitarity_defect", num17(wu));
  sm.kv("max_reversal_defect", num17(wr));
  sm.kv("max_concatenation_defect", num17(wc));
  sm.kv("max_equivariance_defect", num17(we));
  sm.write(ctx, s);
  return 0;
}

inline PathPtr scenario_path(const Scenario& s, const ModelPtr& model, const char* dir_key) {
  const int m = model->dim();
  Vec x = s.vec("beam", "point", m);
  if (model->boundary(x) >= 0) throw ConfigError(s.line("beam", "point"), "beam.point is not interior");
  Vec v = s.vec("beam", dir_key, m);
  if (v.norm() == 0) throw ConfigError(s.line("beam", dir_key), std::string("beam.") + dir_key + " is zero");
  return make_path(model, x, unit_vector(*model, x, v));
}

inline int run_beam_residual(const Scenario& s, const RunContext& ctx) {
  auto model = make_model(s);
  auto A = make_connection(s, model->dim());
  const int K = static_cast<int>(s.integer("beam", "K"));
  const double delta = s.num("beam", "delta_prime");
  auto path = scenario_path(s, model, "direction");
  BeamOptions o;
  o.K = K;
  o.norm_p = static_cast<int>(s.integer("beam", "norm_p"));
  BeamJet beam(make_beam_chart(path, delta, K), A, delta, o);
  const double f = s.num("beam", "quad_step_factor");
  CsvWriter csv(ctx.out_dir / "residual.csv", s, {"lambda", "residual_l2"});
  std::vector<double> ll, lr;
  for (double lam : s.list("beam", "lambdas")) {
    const double r = residual_norm(beam, lam, f / lam);
    csv.row({lam, r});
    ll.push_back(std::log(lam));
    lr.push_back(std::log(r));
  }
  Summary sm;
  sm.kv("experiment", "beam-residual");
  sm.kv("K", K);
  if (ll.size() >= 2) {
    auto fit = fit_slope(ll, lr);
    sm.kv("slope", num17(fit.slope));
    if (ll.size() >= 3) sm.kv("slope_stderr", num17(fit.stderr_slope));
    sm.kv("predicted_slope", num17(2.0 - K / 2.0));
  }
  sm.write(ctx, s);
  return 0;
}

inline int run_interaction(const Scenario& s, const RunContext& ctx) {
  auto model = make_model(s);
  auto A = make_connection(s, model->dim());
  const int K = static_cast<int>(s.integer("beam", "K"));
  const double delta = s.num("beam", "delta_prime");
  auto g = scenario_path(s, model, "direction");
  auto e = scenario_path(s, model, "direction2");
  auto q = make_quartet(make_beam_chart(g, delta, K), make_beam_chart(e, delta, K), A, delta, K);
  const double f = s.num("beam", "interaction_step_factor");
  const double th = s.num("beam", "theta1");
  CsvWriter csv(ctx.out_dir / "interaction.csv", s, {"lambda", "re_integral", "im_integral", "re_pred", "im_pred", "rel_err"});
  Summary sm;
  sm.kv("experiment", "interaction");
  std::optional<InteractionResult> last;
  for (double lam : s.list("beam", "lambdas")) {
    auto r = interaction_integral(*q.u, *q.ut, *q.v, *q.vt, lam, f / lam, th);
    csv.row({lam, r.integral0.real(), r.integral0.imag(), r.prediction0.real(), r.prediction0.imag(), r.rel_err()});
    sm.kv(fmt::format("rel_err[{}]", lam), num17(r.rel_err()));
    last = std::move(r);
  }
  if (last) {
    auto rec = interaction_to_F(*last);
    sm.kv("c_geo", num17(last->c_geo.real()), num17(last->c_geo.imag()));
    sm.kv("c_phi", num17(last->c_phase.real()), num17(last->c_phase.imag()));
    sm.kv("recovered_S_error", num17(sign_error(rec.S, last->S)));
    sm.kv("F_consistency", num17(rec.consistency));
  }
  sm.write(ctx, s);
  return 0;
}

inline double direction_angle(const Vec& v) { return std::atan2(v[1], v[0]); }

inline int run_broken(const Scenario& s, const RunContext& ctx) {
  auto model = make_model(s);
  auto A = make_connection(s, model->dim());
  const int n = A->rank();
  auto G = build_graph(model, make_graph_params(s), static_cast<int>(s.integer("graph", "n_points")),
                       static_cast<int>(s.integer("graph", "n_dirs")), false, ctx.threads);
  std::vector<std::string> hdr{"x1", "x2", "v_angle", "w_angle"};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      hdr.push_back(fmt::format("re(S_{}{})", i + 1, j + 1));
      hdr.push_back(fmt::format("im(S_{}{})", i + 1, j + 1));
    }
  CsvWriter csv(ctx.out_dir / "broken.csv", s, hdr);
  std::vector<std::vector<std::vector<double>>> rows(G.n_points());
  std::vector<double> worst_u(G.n_points(), 0.0), worst_sym(G.n_points(), 0.0);
  parallel_for(G.n_points(), ctx.threads, [&](int i) {
    const Fiber& f = G.fibers[i];
    std::vector<CMat> P;
    for (const auto& d : f.dirs) {
      GeodesicPath p = integrate_geodesic(model, f.x, d.v);
      P.push_back(parallel_transport(*A, p, p.t_seed, p.tau).matrix);
    }
    for (auto [a, b] : f.edges) {
      CMat S = P[b] * P[a].inverse();
      CMat Sr = P[a] * P[b].inverse();
      worst_u[i] = std::max(worst_u[i], unitarity_defect(S));
      worst_sym[i] = std::max(worst_sym[i], (Sr - S.inverse()).norm());
      std::vector<double> row{f.x[0], f.x[1], direction_angle(f.dirs[a].v), direction_angle(f.dirs[b].v)};
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
          row.push_back(S(r, c).real());
          row.push_back(S(r, c).imag());
        }
      rows[i].push_back(std::move(row));
    }
  });
  std::size_t count = 0;
  for (const auto& rs : rows)
    for (const auto& r : rs) csv.row(r), ++count;
  Summary sm;
  sm.kv("experiment", "broken");
  sm.kv("records", count);
  sm.kv("max_unitarity_defect", num17(*std::max_element(worst_u.begin(), worst_u.end())));
  sm.kv("max_symmetry_defect", num17(*std::max_element(worst_sym.begin(), worst_sym.end())));
  sm.write(ctx, s);
  return 0;
}

inline int run_graph_check(const Scenario& s, const RunContext& ctx) {
  auto model = make_model(s);
  auto G = build_graph(model, make_graph_params(s), static_cast<int>(s.integer("graph", "n_points")),
                       static_cast<int>(s.integer("graph", "n_dirs")), false, ctx.threads);
  CsvWriter csv(ctx.out_dir / "graph.csv", s, {"x1", "x2", "directions", "edges", "components", "stable_rank"});
  int min_dirs = 1 << 30, min_edges = 1 << 30;
  for (const auto& f : G.fibers) {
    csv.row({f.x[0], f.x[1], double(f.dirs.size()), double(f.edges.size()), double(f.components), double(f.stable_rank)});
    min_dirs = std::min<int>(min_dirs, f.dirs.size());
    min_edges = std::min<int>(min_edges, f.edges.size());
  }
  Summary sm;
  sm.kv("experiment", "graph-check");
  sm.kv("points", G.n_points());
  sm.kv("min_directions", min_dirs);
  sm.kv("min_edges", min_edges);
  sm.kv("boundary_gap", num17(G.boundary_gap));
  sm.kv("complete", G.complete ? "true" : "false");
  if (!G.complete) sm.kv("failure", G.failure);
  sm.write(ctx, s);
  if (!G.complete) {
    std::cerr << "IncompleteStructure: " << G.failure << "\n";
    return 1;
  }
  return 0;
}

inline int run_reconstruct(const Scenario& s, const RunContext& ctx) {
  auto model = make_model(s);
  const int m = model->dim();
  auto A1 = make_connection(s, m);
  const int n = A1->rank();
  auto phi = make_gauge(s, model, n);
  ConnectionPtr A2 = gauge_apply(A1, phi);
  const double amp = s.num("gauge", "perturb_amplitude");
  if (amp != 0)
    A2 = std::make_shared<PerturbedConnection>(A2, s.vec("gauge", "perturb_center", m), s.num("gauge", "perturb_width"), amp, 0);
  auto G = build_graph(model, make_graph_params(s), static_cast<int>(s.integer("graph", "n_points")),
                       static_cast<int>(s.integer("graph", "n_dirs")), true, ctx.threads);
  ReconstructionOptions o;
  o.eps_edge = s.num("gauge", "eps_edge");
  o.throw_on_mismatch = false;
  o.threads = ctx.threads;
  const bool sign = s.flag("gauge", "up_to_sign");
  o.flip_seed = static_cast<std::uint64_t>(s.integer("gauge", "flip_seed"));
  GaugeReconstruction R = sign ? reconstruct_gauge_up_to_sign(A1, A2, G, o) : reconstruct_gauge(A1, A2, G, o);

  std::vector<std::string> hdr{"x1", "x2", "edge_defect", "flat_defect", "boundary_defect"};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      hdr.push_back(fmt::format("re(phi_{}{})", i + 1, j + 1));
      hdr.push_back(fmt::format("im(phi_{}{})", i + 1, j + 1));
    }
  hdr.push_back("phi_error");
  CsvWriter csv(ctx.out_dir / "reconstruction.csv", s, hdr);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  double worst = 0;
  for (int i = 0; i < static_cast<int>(R.points.size()); ++i) {
    double flat = nan;
    for (std::size_t j = 0; j < R.flat_points.size(); ++j)
      if ((R.flat_points[j] - R.points[i]).norm() == 0) flat = R.flat_values[j];
    std::vector<double> row{R.points[i][0], R.points[i][1], R.point_edge_defect[i], flat, nan};
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        row.push_back(R.phi[i](a, b).real());
        row.push_back(R.phi[i](a, b).imag());
      }
    const double err = detail::sign_distance(R.phi[i], phi->eval(R.points[i]), sign);
    worst = std::max(worst, err);
    row.push_back(amp != 0 ? nan : err);
    csv.row(row);
  }
  for (std::size_t k = 0; k < R.boundary_points.size(); ++k) {
    std::vector<double> row{R.boundary_points[k][0], R.boundary_points[k][1], nan, nan, R.boundary_values[k]};
    row.resize(row.size() + 2 * n * n + 1, nan);
    csv.row(row);
  }
  Summary sm;
  sm.kv("experiment", "reconstruct");
  sm.kv("variant", sign ? "up_to_sign" : "exact");
  sm.kv("edge_defect", num17(R.edge_defect));
  sm.kv("flat_defect", num17(R.flat_defect));
  sm.kv("gauge_relation_defect", num17(R.gauge_relation_defect));
  sm.kv("boundary_defect", num17(R.boundary_defect));
  if (amp == 0) sm.kv("max_phi_error", num17(worst));
  sm.kv("gauge_equivalent", R.equivalent() ? "true" : "false");
  if (!R.equivalent()) {
    const auto& w = R.witness;
    sm.kv("witness_x", num17(w.x[0]), num17(w.x[1]));
    sm.kv("witness_v", num17(w.v[0]), num17(w.v[1]));
    sm.kv("witness_w", num17(w.w[0]), num17(w.w[1]));
    sm.kv("witness_defect", num17(w.defect));
  }
  sm.write(ctx, s);
  if (!R.equivalent()) {
    const auto& w = R.witness;
    std::cerr << fmt::format("NotGaugeEquivalent: x = ({:.6g}, {:.6g}), v = ({:.6g}, {:.6g}), w = ({:.6g}, {:.6g}), defect = {:.6g}\n", w.x[0],
                             w.x[1], w.v[0], w.v[1], w.w[0], w.w[1], w.defect);
    return 2;
  }
  return 0;
}

inline int run_f_recovery(const Scenario& s, const RunContext& ctx) {
  int trials = static_cast<int>(s.integer("run", "trials"));
  if (trials <= 0) trials = 1000;
  const int nmax = static_cast<int>(s.integer("run", "n_max"));
  std::mt19937_64 rng(static_cast<std::uint64_t>(s.integer("run", "seed")));
  CsvWriter csv(ctx.out_dir / "f_recovery.csv", s, {"n", "trial", "permutation", "error"});
  Summary sm;
  sm.kv("experiment", "f-recovery");
  int failures = 0;
  for (int n = 1; n <= nmax; ++n) {
    double worst = 0;
    for (int t = 0; t < trials; ++t) {
      // Every fifth trial is a phased permutation matrix, so q_11 is often 0.
      const bool perm = t % 5 == 4;
      CMat Q;
      if (perm) {
        std::vector<int> p(n);
        std::iota(p.begin(), p.end(), 0);
        std::shuffle(p.begin(), p.end(), rng);
        std::uniform_real_distribution<double> ang(0, 2 * std::numbers::pi);
        Q = CMat::Zero(n, n);
        for (int i = 0; i < n; ++i) Q(i, p[i]) = std::polar(1.0, ang(rng));
      } else {
        Q = random_unitary(n, rng);
      }
      const double err = sign_error(recover_Q_from_F(exact_F_sampler(Q), n), Q);
      worst = std::max(worst, err);
      failures += err > 1e-10;
      csv.row({double(n), double(t), perm ? 1.0 : 0.0, err});
    }
    sm.kv(fmt::format("max_error[n={}]", n), num17(worst));
  }
  sm.kv("failures", failures);
  sm.write(ctx, s);
  return failures ? 1 : 0;
}

// Runs the configured experiment; exceptions other than configuration
// errors become exit code 1 with a one-line message.
inline int run(const Scenario& s, const RunContext& ctx) {
  std::filesystem::create_directories(ctx.out_dir);
  const std::string e = s.str("run", "experiment");
  try {
    if (e == "transport-check") return run_transport_check(s, ctx);
    if (e == "beam-residual") return run_beam_residual(s, ctx);
    if (e == "interaction") return run_interaction(s, ctx);
    if (e == "broken") return run_broken(s, ctx);
    if (e == "graph-check") return run_graph_check(s, ctx);
    if (e == "reconstruct") return run_reconstruct(s, ctx);
    return run_f_recovery(s, ctx);
  } catch (const ConfigError&) {
    throw;
  } catch (const NotGaugeEquivalentError& err) {
    std::cerr << err.what() << "\n";
    return 2;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
}

}  // namespace beamxray::cli
