#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "biobred/exact.hpp"
#include "biobred/solvers.hpp"
#include "biobred/testbed/hyperclean.hpp"
#include "biobred/testbed/quadratic.hpp"
#include "biobred/trace.hpp"
#include "biobred/types.hpp"

namespace biobred {

// Raised for anything wrong with a configuration (parse, types, ranges,
// cross-field constraints). The message names the offending field.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/* Which trace columns get reference-oracle metrics and how the reference is
 * obtained.
 *   gen_grad: "none" | "exact" | "high_precision"
 *     exact          closed-form hypergradient (quadratic testbed only)
 *     high_precision solve the inner problem to inner_solve_tol per row,
 *                    then apply the implicit-function formula with CG
 * phi / inner_err toggle the other metric columns; inner_err falls back to
 * the same high-precision solve when no closed form exists. wall_time
 * switches the wall_ms CSV column from empty to measured (non-reproducible). */
struct MetricOptions {
  bool phi = true;
  std::string gen_grad = "none";
  bool inner_err = false;
  bool wall_time = false;
  double inner_solve_tol = 1e-9;
};

struct ProblemSpec {
  std::string kind = "quadratic";  // "quadratic" | "hyperclean"

  // quadratic generation
  int d1 = 5;
  int d2 = 5;
  int n_f = 10;
  int n_g = 10;
  double condition_target = 10.0;
  std::uint64_t problem_seed = 0;

  // hyperclean generation (ignored when CSV paths are given)
  int n_train = 1000;
  int n_val = 1000;
  int dim = 20;
  int classes = 2;
  double rho = 0.0;
  std::uint64_t corruption_seed = 0;
  double separation = 2.0;
  double feature_scale = 2.0;
  double ridge = 1e-3;
  std::string train_csv;
  std::string val_csv;
};

struct ExperimentConfig {
  ProblemSpec problem;
  std::string algorithm = "biobred";  // biobred | sbiobred | asbiobred
  SolverConfig solver;
  MetricOptions metrics;
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir;
};

namespace detail {

inline bool vec_equal(const Vec& a, const Vec& b) {
  return a.size() == b.size() && (a.size() == 0 || (a.array() == b.array()).all());
}

}  // namespace detail

inline bool operator==(const MetricOptions& a, const MetricOptions& b) {
  return a.phi == b.phi && a.gen_grad == b.gen_grad && a.inner_err == b.inner_err &&
         a.wall_time == b.wall_time && a.inner_solve_tol == b.inner_solve_tol;
}

inline bool operator==(const ProblemSpec& a, const ProblemSpec& b) {
  return a.kind == b.kind && a.d1 == b.d1 && a.d2 == b.d2 && a.n_f == b.n_f && a.n_g == b.n_g &&
         a.condition_target == b.condition_target && a.problem_seed == b.problem_seed &&
         a.n_train == b.n_train && a.n_val == b.n_val && a.dim == b.dim &&
         a.classes == b.classes && a.rho == b.rho && a.corruption_seed == b.corruption_seed &&
         a.separation == b.separation && a.feature_scale == b.feature_scale &&
         a.ridge == b.ridge && a.train_csv == b.train_csv && a.val_csv == b.val_csv;
}

inline bool solver_config_equal(const SolverConfig& a, const SolverConfig& b) {
  return a.outer_iters == b.outer_iters && a.inner_steps == b.inner_steps &&
         a.outer_step == b.outer_step && a.inner_step == b.inner_step &&
         a.inner_interp == b.inner_interp && a.curvature == b.curvature &&
         a.large_batch == b.large_batch && a.small_batch == b.small_batch &&
         a.refresh_period == b.refresh_period && a.seed == b.seed &&
         a.mirror.kind == b.mirror.kind && detail::vec_equal(a.mirror.diag, b.mirror.diag) &&
         detail::vec_equal(a.mirror.ema, b.mirror.ema) && a.mirror.beta == b.mirror.beta &&
         a.mirror.rho0 == b.mirror.rho0 && a.reg.kind == b.reg.kind &&
         a.reg.weight == b.reg.weight && a.set.kind == b.set.kind &&
         detail::vec_equal(a.set.lo, b.set.lo) && detail::vec_equal(a.set.hi, b.set.hi) &&
         detail::vec_equal(a.x0, b.x0) && detail::vec_equal(a.y0, b.y0);
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.problem == b.problem && a.algorithm == b.algorithm &&
         solver_config_equal(a.solver, b.solver) && a.metrics == b.metrics &&
         a.seeds == b.seeds && a.out_dir == b.out_dir;
}

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw config_error(where + ": unknown field '" + key + "'");
  }
}

template <typename T>
T fetch(const json& j, const std::string& where, const char* key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw config_error(where + "." + key + ": wrong type");
  }
}

inline Vec fetch_vec(const json& j, const std::string& where, const char* key) {
  if (!j.contains(key)) return Vec();
  const auto vals = fetch<std::vector<double>>(j, where, key, {});
  Vec v(static_cast<int>(vals.size()));
  for (std::size_t i = 0; i < vals.size(); ++i) v[static_cast<int>(i)] = vals[i];
  return v;
}

inline std::vector<double> to_std(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::fetch;
  using detail::fetch_vec;
  if (!j.is_object()) throw config_error("config: top level must be a JSON object");
  detail::reject_unknown(j, "config",
                         {"problem", "algorithm", "solver", "metrics", "seeds", "out_dir"});
  ExperimentConfig cfg;

  if (j.contains("problem")) {
    const auto& pj = j.at("problem");
    if (!pj.is_object()) throw config_error("problem: must be an object");
    detail::reject_unknown(pj, "problem",
                           {"kind", "d1", "d2", "n_f", "n_g", "condition_target", "seed",
                            "n_train", "n_val", "dim", "classes", "rho", "corruption_seed",
                            "separation", "feature_scale", "ridge", "train_csv", "val_csv"});
    ProblemSpec& p = cfg.problem;
    p.kind = fetch<std::string>(pj, "problem", "kind", p.kind);
    if (p.kind != "quadratic" && p.kind != "hyperclean")
      throw config_error("problem.kind: must be 'quadratic' or 'hyperclean'");
    p.d1 = fetch(pj, "problem", "d1", p.d1);
    p.d2 = fetch(pj, "problem", "d2", p.d2);
    p.n_f = fetch(pj, "problem", "n_f", p.n_f);
    p.n_g = fetch(pj, "problem", "n_g", p.n_g);
    p.condition_target = fetch(pj, "problem", "condition_target", p.condition_target);
    p.problem_seed = fetch(pj, "problem", "seed", p.problem_seed);
    p.n_train = fetch(pj, "problem", "n_train", p.n_train);
    p.n_val = fetch(pj, "problem", "n_val", p.n_val);
    p.dim = fetch(pj, "problem", "dim", p.dim);
    p.classes = fetch(pj, "problem", "classes", p.classes);
    p.rho = fetch(pj, "problem", "rho", p.rho);
    p.corruption_seed = fetch(pj, "problem", "corruption_seed", p.corruption_seed);
    p.separation = fetch(pj, "problem", "separation", p.separation);
    p.feature_scale = fetch(pj, "problem", "feature_scale", p.feature_scale);
    p.ridge = fetch(pj, "problem", "ridge", p.ridge);
    p.train_csv = fetch<std::string>(pj, "problem", "train_csv", p.train_csv);
    p.val_csv = fetch<std::string>(pj, "problem", "val_csv", p.val_csv);
    if (p.train_csv.empty() != p.val_csv.empty())
      throw config_error("problem: train_csv and val_csv must be given together");
  }

  cfg.algorithm = fetch<std::string>(j, "config", "algorithm", cfg.algorithm);
  if (cfg.algorithm != "biobred" && cfg.algorithm != "sbiobred" && cfg.algorithm != "asbiobred")
    throw config_error("algorithm: must be one of biobred, sbiobred, asbiobred");

  if (j.contains("solver")) {
    const auto& sj = j.at("solver");
    if (!sj.is_object()) throw config_error("solver: must be an object");
    detail::reject_unknown(sj, "solver",
                           {"outer_iters", "inner_steps", "outer_step", "inner_step",
                            "inner_interp", "curvature", "large_batch", "small_batch",
                            "refresh_period", "mirror", "regularizer", "feasible_set", "x0",
                            "y0"});
    SolverConfig& s = cfg.solver;
    s.outer_iters = fetch(sj, "solver", "outer_iters", s.outer_iters);
    s.inner_steps = fetch(sj, "solver", "inner_steps", s.inner_steps);
    s.outer_step = fetch(sj, "solver", "outer_step", s.outer_step);
    s.inner_step = fetch(sj, "solver", "inner_step", s.inner_step);
    s.inner_interp = fetch(sj, "solver", "inner_interp", s.inner_interp);
    s.curvature = fetch(sj, "solver", "curvature", s.curvature);
    s.large_batch = fetch(sj, "solver", "large_batch", s.large_batch);
    s.small_batch = fetch(sj, "solver", "small_batch", s.small_batch);
    s.refresh_period = fetch(sj, "solver", "refresh_period", s.refresh_period);
    s.x0 = fetch_vec(sj, "solver", "x0");
    s.y0 = fetch_vec(sj, "solver", "y0");

    if (sj.contains("mirror")) {
      const auto& mj = sj.at("mirror");
      detail::reject_unknown(mj, "solver.mirror", {"kind", "diag", "beta", "rho0"});
      const auto kind = fetch<std::string>(mj, "solver.mirror", "kind", "euclidean");
      if (kind == "euclidean") {
        s.mirror = MirrorMap::euclidean();
      } else if (kind == "diagonal") {
        Vec diag = fetch_vec(mj, "solver.mirror", "diag");
        if (diag.size() == 0) throw config_error("solver.mirror.diag: required for diagonal maps");
        s.mirror = MirrorMap::diagonal(std::move(diag));
      } else if (kind == "adaptive") {
        // dimension resolved at build time from the problem
        s.mirror = MirrorMap::adaptive(0, fetch(mj, "solver.mirror", "beta", 0.99),
                                       fetch(mj, "solver.mirror", "rho0", 0.1));
      } else {
        throw config_error("solver.mirror.kind: must be euclidean, diagonal or adaptive");
      }
    }
    if (sj.contains("regularizer")) {
      const auto& rj = sj.at("regularizer");
      detail::reject_unknown(rj, "solver.regularizer", {"kind", "weight"});
      const auto kind = fetch<std::string>(rj, "solver.regularizer", "kind", "none");
      if (kind == "none") {
        s.reg = Regularizer::none();
      } else if (kind == "l1") {
        s.reg = Regularizer::l1(fetch(rj, "solver.regularizer", "weight", 0.0));
      } else {
        throw config_error("solver.regularizer.kind: must be none or l1");
      }
    }
    if (sj.contains("feasible_set")) {
      const auto& fj = sj.at("feasible_set");
      detail::reject_unknown(fj, "solver.feasible_set", {"kind", "lo", "hi"});
      const auto kind = fetch<std::string>(fj, "solver.feasible_set", "kind", "all");
      if (kind == "all") {
        s.set = FeasibleSet::all();
      } else if (kind == "box") {
        Vec lo = fetch_vec(fj, "solver.feasible_set", "lo");
        Vec hi = fetch_vec(fj, "solver.feasible_set", "hi");
        if (lo.size() == 0 || hi.size() == 0)
          throw config_error("solver.feasible_set: box needs lo and hi");
        s.set = FeasibleSet::box(std::move(lo), std::move(hi));
      } else {
        throw config_error("solver.feasible_set.kind: must be all or box");
      }
    }
  }

  if (j.contains("metrics")) {
    const auto& mj = j.at("metrics");
    detail::reject_unknown(mj, "metrics",
                           {"phi", "gen_grad", "inner_err", "wall_time", "inner_solve_tol"});
    MetricOptions& m = cfg.metrics;
    m.phi = fetch(mj, "metrics", "phi", m.phi);
    m.gen_grad = fetch<std::string>(mj, "metrics", "gen_grad", m.gen_grad);
    if (m.gen_grad != "none" && m.gen_grad != "exact" && m.gen_grad != "high_precision")
      throw config_error("metrics.gen_grad: must be none, exact or high_precision");
    m.inner_err = fetch(mj, "metrics", "inner_err", m.inner_err);
    m.wall_time = fetch(mj, "metrics", "wall_time", m.wall_time);
    m.inner_solve_tol = fetch(mj, "metrics", "inner_solve_tol", m.inner_solve_tol);
    if (!(m.inner_solve_tol > 0.0))
      throw config_error("metrics.inner_solve_tol: must be positive");
  }

  cfg.seeds = detail::fetch<std::vector<std::uint64_t>>(j, "config", "seeds", cfg.seeds);
  if (cfg.seeds.empty()) throw config_error("seeds: need at least one seed");
  cfg.out_dir = fetch<std::string>(j, "config", "out_dir", cfg.out_dir);
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

inline nlohmann::json serialize_config(const ExperimentConfig& cfg) {
  using detail::to_std;
  nlohmann::json j;
  nlohmann::json pj;
  const ProblemSpec& p = cfg.problem;
  pj["kind"] = p.kind;
  if (p.kind == "quadratic") {
    pj["d1"] = p.d1;
    pj["d2"] = p.d2;
    pj["n_f"] = p.n_f;
    pj["n_g"] = p.n_g;
    pj["condition_target"] = p.condition_target;
    pj["seed"] = p.problem_seed;
  } else {
    pj["n_train"] = p.n_train;
    pj["n_val"] = p.n_val;
    pj["dim"] = p.dim;
    pj["classes"] = p.classes;
    pj["rho"] = p.rho;
    pj["corruption_seed"] = p.corruption_seed;
    pj["separation"] = p.separation;
    pj["feature_scale"] = p.feature_scale;
    pj["ridge"] = p.ridge;
    if (!p.train_csv.empty()) {
      pj["train_csv"] = p.train_csv;
      pj["val_csv"] = p.val_csv;
    }
  }
  j["problem"] = std::move(pj);
  j["algorithm"] = cfg.algorithm;

  nlohmann::json sj;
  const SolverConfig& s = cfg.solver;
  sj["outer_iters"] = s.outer_iters;
  sj["inner_steps"] = s.inner_steps;
  sj["outer_step"] = s.outer_step;
  sj["inner_step"] = s.inner_step;
  sj["inner_interp"] = s.inner_interp;
  sj["curvature"] = s.curvature;
  sj["large_batch"] = s.large_batch;
  sj["small_batch"] = s.small_batch;
  sj["refresh_period"] = s.refresh_period;
  switch (s.mirror.kind) {
    case MirrorMap::Kind::euclidean:
      sj["mirror"] = {{"kind", "euclidean"}};
      break;
    case MirrorMap::Kind::diagonal:
      sj["mirror"] = {{"kind", "diagonal"}, {"diag", to_std(s.mirror.diag)}};
      break;
    case MirrorMap::Kind::adaptive:
      sj["mirror"] = {{"kind", "adaptive"}, {"beta", s.mirror.beta}, {"rho0", s.mirror.rho0}};
      break;
  }
  if (s.reg.kind == Regularizer::Kind::l1)
    sj["regularizer"] = {{"kind", "l1"}, {"weight", s.reg.weight}};
  else
    sj["regularizer"] = {{"kind", "none"}};
  if (s.set.kind == FeasibleSet::Kind::box)
    sj["feasible_set"] = {{"kind", "box"}, {"lo", to_std(s.set.lo)}, {"hi", to_std(s.set.hi)}};
  else
    sj["feasible_set"] = {{"kind", "all"}};
  if (s.x0.size() > 0) sj["x0"] = to_std(s.x0);
  if (s.y0.size() > 0) sj["y0"] = to_std(s.y0);
  j["solver"] = std::move(sj);

  j["metrics"] = {{"phi", cfg.metrics.phi},
                  {"gen_grad", cfg.metrics.gen_grad},
                  {"inner_err", cfg.metrics.inner_err},
                  {"wall_time", cfg.metrics.wall_time},
                  {"inner_solve_tol", cfg.metrics.inner_solve_tol}};
  j["seeds"] = cfg.seeds;
  if (!cfg.out_dir.empty()) j["out_dir"] = cfg.out_dir;
  return j;
}

/* A problem instance assembled from a spec, together with the reference
 * oracles implied by the metric options. */
struct BuiltProblem {
  std::string kind;
  std::optional<QuadraticBilevel> quadratic;
  std::optional<HyperCleanProblem> hyperclean;
  StochasticBilevelOracleSet stochastic;
  SmoothnessBase constants;
  ReferenceOracles refs;
  bool want_refs = false;

  const ReferenceOracles* refs_or_null() const { return want_refs ? &refs : nullptr; }
};

inline BuiltProblem build_problem(const ExperimentConfig& cfg) {
  const ProblemSpec& p = cfg.problem;
  const MetricOptions& m = cfg.metrics;
  BuiltProblem out;
  out.kind = p.kind;

  if (p.kind == "quadratic") {
    if (p.d1 < 1 || p.d2 < 1 || p.n_f < 1 || p.n_g < 1)
      throw config_error("problem: quadratic dims and pool sizes must be >= 1");
    if (!(p.condition_target >= 1.0))
      throw config_error("problem.condition_target: must be >= 1");
    out.quadratic = make_quadratic(p.d1, p.d2, p.n_f, p.n_g, p.condition_target, p.problem_seed);
    out.stochastic = out.quadratic->stochastic();
    out.constants = out.quadratic->constants();
    ReferenceOracles full = out.quadratic->references();
    if (m.phi) out.refs.phi_value = full.phi_value;
    if (m.gen_grad != "none") out.refs.grad_f = full.grad_f;  // closed form covers both modes
    if (m.inner_err) out.refs.y_star = full.y_star;
  } else if (p.kind == "hyperclean") {
    HyperCleanProblem prob;
    if (!p.train_csv.empty()) {
      Dataset train, val;
      try {
        train = load_dataset_csv(p.train_csv);
        val = load_dataset_csv(p.val_csv);
      } catch (const std::runtime_error& e) {
        throw config_error(e.what());
      }
      prob = HyperCleanProblem::from_data(std::move(train), std::move(val),
                                          CorruptionSpec{p.rho, p.corruption_seed}, p.ridge);
    } else {
      if (p.n_train < 1 || p.n_val < 1) throw config_error("problem: split sizes must be >= 1");
      if (p.classes < 2) throw config_error("problem.classes: must be >= 2");
      if (p.dim < p.classes) throw config_error("problem.dim: must be >= classes");
      if (!(p.rho >= 0.0 && p.rho <= 1.0)) throw config_error("problem.rho: must be in [0,1]");
      prob = make_hyperclean(p.n_train, p.n_val, p.dim, p.classes,
                             CorruptionSpec{p.rho, p.corruption_seed}, p.problem_seed,
                             p.separation, p.feature_scale, p.ridge);
    }
    out.hyperclean = prob;
    out.stochastic = prob.stochastic();
    out.constants = prob.constants();
    if (m.phi) out.refs.phi_value = prob.references().phi_value;
    if (m.gen_grad == "exact")
      throw config_error(
          "metrics.gen_grad: no closed form for this problem, use high_precision");
    if (m.gen_grad == "high_precision" || m.inner_err) {
      const BilevelOracleSet mean = out.stochastic.mean;
      const double step = 1.0 / out.constants.L;
      const double tol = m.inner_solve_tol;
      auto solve = [mean, step, tol](const Vec& x) {
        return inner_solve_high_precision(mean, x, Vec::Zero(mean.d2), step, tol).y;
      };
      if (m.gen_grad == "high_precision")
        out.refs.grad_f = [mean, solve](const Vec& x) {
          return exact_hypergradient(mean, x, solve(x));
        };
      if (m.inner_err) out.refs.y_star = solve;
    }
  } else {
    throw config_error("problem.kind: must be 'quadratic' or 'hyperclean'");
  }

  out.want_refs = static_cast<bool>(out.refs.phi_value) || static_cast<bool>(out.refs.grad_f) ||
                  static_cast<bool>(out.refs.y_star);
  return out;
}

namespace detail {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string trace_filename(const std::string& algorithm, std::uint64_t seed) {
  return "trace_" + algorithm + "_seed" + std::to_string(seed) + ".csv";
}

inline RunTrace dispatch_run(const BuiltProblem& prob, const std::string& algorithm,
                             SolverConfig cfg) {
  if (cfg.mirror.kind == MirrorMap::Kind::adaptive && cfg.mirror.ema.size() == 0)
    cfg.mirror = MirrorMap::adaptive(prob.stochastic.d1, cfg.mirror.beta, cfg.mirror.rho0);
  if (algorithm == "biobred") return run_biobred(prob.stochastic.mean, cfg, prob.refs_or_null());
  if (algorithm == "sbiobred") return run_sbiobred(prob.stochastic, cfg, prob.refs_or_null());
  if (algorithm == "asbiobred") return run_asbiobred(prob.stochastic, cfg, prob.refs_or_null());
  throw config_error("algorithm: must be one of biobred, sbiobred, asbiobred");
}

struct ExperimentResult {
  std::vector<std::string> trace_paths;
  std::string summary_path;
  std::vector<RunTrace> traces;
};

/* One run per seed, each trace written atomically to
 * out_dir/trace_{algorithm}_seed{seed}.csv, then a summary.json with final
 * phi mean/stdev across seeds, running-mean squared generalized gradient,
 * counter totals and wall time. On a numerical abort the partial trace is
 * still flushed (same filename) before the abort propagates. */
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  if (out_dir.empty()) throw config_error("out_dir: empty output directory");
  const BuiltProblem prob = build_problem(cfg);
  std::filesystem::create_directories(out_dir);

  ExperimentResult res;
  std::vector<double> final_phis;
  std::vector<double> mean_gen_grads;
  OracleCounters totals;
  double wall_total = 0.0;

  auto flush = [&](const RunTrace& tr, std::uint64_t seed) {
    std::ostringstream os;
    write_trace_csv(os, tr, cfg.metrics.wall_time);
    const auto path = std::filesystem::path(out_dir) / trace_filename(cfg.algorithm, seed);
    detail::write_file_atomic(path, os.str());
    return path.string();
  };

  for (std::uint64_t seed : cfg.seeds) {
    SolverConfig sc = cfg.solver;
    sc.seed = seed;
    RunTrace tr;
    try {
      tr = dispatch_run(prob, cfg.algorithm, std::move(sc));
    } catch (const std::invalid_argument& e) {
      throw config_error(e.what());  // SolverConfig validation failures
    } catch (numerical_abort& e) {
      flush(e.partial_trace, seed);
      throw;
    }
    res.trace_paths.push_back(flush(tr, seed));
    if (tr.final_phi) final_phis.push_back(*tr.final_phi);
    double gsum = 0.0;
    int gcount = 0;
    for (const TraceRow& r : tr.rows)
      if (r.gen_grad_sq) {
        gsum += *r.gen_grad_sq;
        ++gcount;
      }
    if (gcount > 0) mean_gen_grads.push_back(gsum / gcount);
    totals += tr.counters;
    wall_total += tr.total_wall_ms;
    res.traces.push_back(std::move(tr));
  }

  auto stats = [](const std::vector<double>& v) {
    nlohmann::json j;
    if (v.empty()) return j;  // null when the metric was not recorded
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double stdev = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    j = {{"mean", mean}, {"stdev", stdev}, {"values", v}};
    return j;
  };

  nlohmann::json summary;
  summary["config"] = serialize_config(cfg);
  summary["algorithm"] = cfg.algorithm;
  summary["seeds"] = cfg.seeds;
  summary["trace_files"] = res.trace_paths;
  summary["final_phi"] = stats(final_phis);
  summary["mean_gen_grad_sq"] = stats(mean_gen_grads);
  summary["counters"] = {{"gc_f", totals.gc_f}, {"gc_g", totals.gc_g}, {"jv", totals.jv},
                         {"hv", totals.hv}};
  summary["wall_ms"] = wall_total;
  const auto spath = std::filesystem::path(out_dir) / "summary.json";
  detail::write_file_atomic(spath, summary.dump(2) + "\n");
  res.summary_path = spath.string();
  return res;
}

/* Trace read back from CSV; only what the comparison needs. */
struct ParsedTrace {
  std::vector<TraceRow> rows;
};

inline ParsedTrace parse_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("trace: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw config_error("trace: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTraceHeader)
    throw config_error("trace: incompatible schema in " + path + " (header '" + line + "')");
  ParsedTrace out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) cells.push_back(tok);
    cells.resize(9);  // trailing empty fields drop out of the getline loop
    const auto num = [&](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        throw config_error("trace: bad number at " + path + ":" + std::to_string(lineno));
      }
      if (used != s.size())
        throw config_error("trace: bad number at " + path + ":" + std::to_string(lineno));
      return v;
    };
    TraceRow r;
    const auto t = num(cells[0]);
    if (!t) throw config_error("trace: missing t at " + path + ":" + std::to_string(lineno));
    r.t = static_cast<int>(*t);
    r.phi = num(cells[1]);
    r.gen_grad_sq = num(cells[2]);
    r.inner_err_sq = num(cells[3]);
    const auto count = [&](const std::string& s) {
      const auto v = num(s);
      if (!v) throw config_error("trace: missing counter at " + path + ":" + std::to_string(lineno));
      return static_cast<std::int64_t>(*v);
    };
    r.counters.gc_f = count(cells[4]);
    r.counters.gc_g = count(cells[5]);
    r.counters.jv = count(cells[6]);
    r.counters.hv = count(cells[7]);
    r.wall_ms = num(cells[8]);
    out.rows.push_back(std::move(r));
  }
  return out;
}

inline std::optional<double> trace_metric(const TraceRow& r, const std::string& metric) {
  if (metric == "phi") return r.phi;
  if (metric == "gen_grad_sq") return r.gen_grad_sq;
  if (metric == "inner_err_sq") return r.inner_err_sq;
  throw config_error("metric: must be phi, gen_grad_sq or inner_err_sq");
}

/* Samples consumed (inner plus outer per-sample gradient evaluations) at the
 * first row where the metric reaches the threshold; infinity if never. */
inline double samples_to_target(const ParsedTrace& tr, const std::string& metric,
                                double threshold) {
  for (const TraceRow& r : tr.rows) {
    const auto v = trace_metric(r, metric);
    if (v && *v <= threshold)
      return static_cast<double>(r.counters.gc_f + r.counters.gc_g);
  }
  return std::numeric_limits<double>::infinity();
}

struct CompareRow {
  std::string label;
  double samples_to_target = 0.0;  // +inf when the threshold is never reached
  OracleCounters total;
  std::optional<double> final_metric;
  int rows = 0;
};

struct CompareResult {
  std::string metric;
  double threshold = 0.0;
  std::vector<CompareRow> rows;
};

inline CompareResult compare_runs(const std::vector<std::string>& paths,
                                  const std::string& metric, double threshold) {
  if (paths.size() < 2) throw config_error("compare: need at least two trace files");
  trace_metric(TraceRow{}, metric);  // validates the metric name
  CompareResult out;
  out.metric = metric;
  out.threshold = threshold;
  for (const std::string& path : paths) {
    const ParsedTrace tr = parse_trace_csv(path);
    if (tr.rows.empty()) throw config_error("trace: no rows in " + path);
    bool any = false;
    for (const TraceRow& r : tr.rows)
      if (trace_metric(r, metric)) {
        any = true;
        break;
      }
    if (!any)
      throw config_error("trace: " + path + " has no values for metric '" + metric +
                         "' (incompatible schema)");
    CompareRow row;
    row.label = std::filesystem::path(path).filename().string();
    row.samples_to_target = samples_to_target(tr, metric, threshold);
    row.total = tr.rows.back().counters;
    row.final_metric = trace_metric(tr.rows.back(), metric);
    row.rows = static_cast<int>(tr.rows.size());
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline std::string compare_csv(const CompareResult& c) {
  std::ostringstream os;
  os << "trace,metric,threshold,samples_to_target,final_metric,rows,gc_f,gc_g,jv,hv\n";
  for (const CompareRow& r : c.rows) {
    os << r.label << ',' << c.metric << ',' << detail::csv_double(c.threshold) << ','
       << (std::isinf(r.samples_to_target) ? "inf"
                                           : detail::csv_double(r.samples_to_target))
       << ',' << (r.final_metric ? detail::csv_double(*r.final_metric) : std::string()) << ','
       << r.rows << ',' << r.total.gc_f << ',' << r.total.gc_g << ',' << r.total.jv << ','
       << r.total.hv << '\n';
  }
  return os.str();
}

inline std::string compare_text(const CompareResult& c) {
  std::vector<std::array<std::string, 5>> cells;
  cells.push_back({"trace", "samples_to_target", "final_" + c.metric, "rows", "oracle_total"});
  char buf[64];
  for (const CompareRow& r : c.rows) {
    std::array<std::string, 5> row;
    row[0] = r.label;
    if (std::isinf(r.samples_to_target)) {
      row[1] = "inf";
    } else {
      std::snprintf(buf, sizeof buf, "%.0f", r.samples_to_target);
      row[1] = buf;
    }
    if (r.final_metric) {
      std::snprintf(buf, sizeof buf, "%.6g", *r.final_metric);
      row[2] = buf;
    } else {
      row[2] = "-";
    }
    row[3] = std::to_string(r.rows);
    row[4] = std::to_string(r.total.gc_f + r.total.gc_g + r.total.jv + r.total.hv);
    cells.push_back(std::move(row));
  }
  std::array<std::size_t, 5> width{};
  for (const auto& row : cells)
    for (std::size_t i = 0; i < 5; ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < 5; ++i) {
      os << row[i];
      if (i + 1 < 5) os << std::string(width[i] - row[i].size() + 2, ' ');
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace biobred
