#pragma once

#include <chrono>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include "biobred/counters.hpp"
#include "biobred/exact.hpp"
#include "biobred/hypergrad.hpp"
#include "biobred/mirror.hpp"
#include "biobred/problem.hpp"
#include "biobred/rng.hpp"
#include "biobred/trace.hpp"
#include "biobred/types.hpp"

namespace biobred {

/* Shared solver configuration.
 *
 *   outer_iters   T, number of mirror steps
 *   inner_steps   K, inner GD depth (deterministic) / Neumann length (stochastic)
 *   outer_step    gamma
 *   inner_step    lambda, must satisfy 0 < lambda < 1/L for the declared L
 *   inner_interp  eta in (0, 1], scales the stochastic y update
 *   curvature     L scale of the Neumann series (stochastic solvers only)
 *   large_batch   b, per-iteration batch (checkpoint batch for the
 *                 variance-reduced solver)
 *   small_batch   b1, recursion batch of the variance-reduced solver
 *   refresh_period q, checkpoint spacing (t % q == 0 restarts the recursion)
 *
 * x0/y0 default to zero vectors of the problem's dimensions. Batches are
 * drawn without replacement, so batch sizes may not exceed pool sizes. */
struct SolverConfig {
  int outer_iters = 100;
  int inner_steps = 10;
  double outer_step = 0.1;
  double inner_step = 0.1;
  double inner_interp = 1.0;
  double curvature = 1.0;
  int large_batch = 1;
  int small_batch = 1;
  int refresh_period = 1;
  std::uint64_t seed = 0;

  MirrorMap mirror = MirrorMap::euclidean();
  Regularizer reg = Regularizer::none();
  FeasibleSet set = FeasibleSet::all();

  Vec x0;
  Vec y0;

  bool record_inner_path = false;

  void resolve_starts(int d1, int d2) {
    if (x0.size() == 0) x0 = Vec::Zero(d1);
    if (y0.size() == 0) y0 = Vec::Zero(d2);
  }

  void validate_common(int d1, int d2) const {
    if (outer_iters < 1) throw std::invalid_argument("SolverConfig: outer_iters must be >= 1");
    if (inner_steps < 1) throw std::invalid_argument("SolverConfig: inner_steps must be >= 1");
    if (!(outer_step > 0.0)) throw std::invalid_argument("SolverConfig: outer_step must be positive");
    if (!(inner_step > 0.0)) throw std::invalid_argument("SolverConfig: inner_step must be positive");
    if (!(inner_interp > 0.0 && inner_interp <= 1.0))
      throw std::invalid_argument("SolverConfig: inner_interp must lie in (0, 1]");
    if (x0.size() != d1 || y0.size() != d2)
      throw std::invalid_argument("SolverConfig: start point dimension mismatch");
    mirror.validate(d1);
    reg.validate();
    set.validate(d1);
    if (!set.contains(x0)) throw std::invalid_argument("SolverConfig: x0 outside the feasible set");
  }

  void validate_stochastic(const StochasticBilevelOracleSet& p) const {
    validate_common(p.d1, p.d2);
    if (!(curvature > 0.0)) throw std::invalid_argument("SolverConfig: curvature must be positive");
    if (large_batch < 1) throw std::invalid_argument("SolverConfig: large_batch must be >= 1");
    if (small_batch < 1) throw std::invalid_argument("SolverConfig: small_batch must be >= 1");
    if (small_batch > large_batch)
      throw std::invalid_argument("SolverConfig: need small_batch <= large_batch");
    if (refresh_period < 1) throw std::invalid_argument("SolverConfig: refresh_period must be >= 1");
    const int pool = p.n_f < p.n_g ? p.n_f : p.n_g;
    if (large_batch > pool || small_batch > pool)
      throw std::invalid_argument(
          "SolverConfig: batch sizes may not exceed pool sizes (sampling is without replacement)");
  }
};

/* Optional closed-form or high-precision references used only for trace
 * metrics. These never touch the run's oracle counters.
 *   phi_value(x, y)  objective value for the phi column (testbeds decide
 *                    whether y participates); the solver adds h(x) itself
 *   grad_f(x)        exact hypergradient, for the generalized-gradient column
 *   y_star(x)        inner solution, for the inner-error column
 */
struct ReferenceOracles {
  std::function<double(const Vec&, const Vec&)> phi_value;
  std::function<Vec(const Vec&)> grad_f;
  std::function<Vec(const Vec&)> y_star;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline void guard_finite(const Vec& v, const char* what, RunTrace& tr) {
  if (!v.allFinite()) {
    tr.aborted = true;
    tr.abort_reason = std::string("non-finite ") + what;
    throw numerical_abort(tr.abort_reason, tr);
  }
}

inline void fill_metrics(TraceRow& row, const ReferenceOracles* ref, const SolverConfig& cfg,
                         const MirrorMap& map, const Vec& x, const Vec& y_for_phi,
                         const Vec& y_for_err) {
  if (ref == nullptr) return;
  if (ref->phi_value) row.phi = ref->phi_value(x, y_for_phi) + cfg.reg.value(x);
  if (ref->grad_f)
    row.gen_grad_sq =
        generalized_gradient(map, cfg.set, cfg.reg, x, ref->grad_f(x), cfg.outer_step)
            .squaredNorm();
  if (ref->y_star) row.inner_err_sq = (y_for_err - ref->y_star(x)).squaredNorm();
}

inline void finish_trace(RunTrace& tr, const ReferenceOracles* ref, const SolverConfig& cfg,
                         Rng& rng, const Vec& x, const Vec& y,
                         std::chrono::steady_clock::time_point t0) {
  tr.final_x = x;
  tr.final_y = y;
  tr.output_index = 1 + static_cast<int>(rng.below(cfg.outer_iters));
  if (ref != nullptr && ref->phi_value) tr.final_phi = ref->phi_value(x, y) + cfg.reg.value(x);
  tr.total_wall_ms = elapsed_ms(t0);
}

}  // namespace detail

/* Deterministic solver: warm-started K-step inner GD, unrolled hypergradient,
 * proximal mirror step. Counter totals over a run follow closed forms
 * (gc_f = 2T, gc_g = TK, jv = TK, hv = T(K-1)). */
inline RunTrace run_biobred(const BilevelOracleSet& p, const SolverConfig& cfg_in,
                            const ReferenceOracles* ref = nullptr) {
  SolverConfig cfg = cfg_in;
  cfg.resolve_starts(p.d1, p.d2);
  cfg.validate_common(p.d1, p.d2);
  Rng rng(cfg.seed);
  Vec x = cfg.x0;
  Vec y_chain = cfg.y0;
  MirrorMap map = cfg.mirror;
  RunTrace tr;
  tr.rows.reserve(static_cast<std::size_t>(cfg.outer_iters));
  const auto t0 = std::chrono::steady_clock::now();
  for (int t = 0; t < cfg.outer_iters; ++t) {
    const Vec y_start = y_chain;  // warm start from the previous inner endpoint
    const InnerPath path = inner_gd(p, x, y_start, cfg.inner_step, cfg.inner_steps, tr.counters);
    y_chain = path.iterates.back();
    const Vec w = itd_hypergradient(p, path, tr.counters);
    if (map.kind == MirrorMap::Kind::adaptive) map = adaptive_update(std::move(map), w);
    TraceRow row;
    row.t = t;
    detail::fill_metrics(row, ref, cfg, map, x, y_chain, y_start);
    Vec x_next = mirror_step(map, cfg.set, cfg.reg, x, w, cfg.outer_step);
    detail::guard_finite(y_chain, "inner iterate", tr);
    detail::guard_finite(w, "gradient estimate", tr);
    detail::guard_finite(x_next, "outer iterate", tr);
    x = std::move(x_next);
    row.counters = tr.counters;
    row.wall_ms = detail::elapsed_ms(t0);
    if (cfg.record_inner_path) {
      tr.inner_starts.push_back(y_start);
      tr.inner_ends.push_back(y_chain);
    }
    tr.rows.push_back(std::move(row));
  }
  detail::finish_trace(tr, ref, cfg, rng, x, y_chain, t0);
  return tr;
}

/* Plain stochastic solver: minibatch inner gradient step plus a minibatch of
 * truncated Neumann estimator draws, both sampled fresh each iteration and
 * evaluated at the pre-update iterates. */
inline RunTrace run_sbiobred(const StochasticBilevelOracleSet& p, const SolverConfig& cfg_in,
                             const ReferenceOracles* ref = nullptr) {
  SolverConfig cfg = cfg_in;
  cfg.resolve_starts(p.d1, p.d2);
  cfg.validate_stochastic(p);
  Rng rng(cfg.seed);
  Vec x = cfg.x0;
  Vec y = cfg.y0;
  MirrorMap map = cfg.mirror;
  RunTrace tr;
  tr.rows.reserve(static_cast<std::size_t>(cfg.outer_iters));
  const auto t0 = std::chrono::steady_clock::now();
  for (int t = 0; t < cfg.outer_iters; ++t) {
    const auto gbatch = rng.sample_without_replacement(p.n_g, cfg.large_batch);
    const Vec v = batch_grad_y_g(p, x, y, gbatch, tr.counters);
    const auto tuples = draw_tuple_batch(rng, p.n_f, p.n_g, cfg.inner_steps, cfg.large_batch);
    const Vec w =
        neumann_minibatch(p, x, y, cfg.inner_steps, cfg.curvature, tuples, rng, tr.counters);
    if (map.kind == MirrorMap::Kind::adaptive) map = adaptive_update(std::move(map), w);
    TraceRow row;
    row.t = t;
    detail::fill_metrics(row, ref, cfg, map, x, y, y);
    Vec y_next = y - cfg.inner_step * cfg.inner_interp * v;
    Vec x_next = mirror_step(map, cfg.set, cfg.reg, x, w, cfg.outer_step);
    detail::guard_finite(y_next, "inner iterate", tr);
    detail::guard_finite(w, "gradient estimate", tr);
    detail::guard_finite(x_next, "outer iterate", tr);
    y = std::move(y_next);
    x = std::move(x_next);
    row.counters = tr.counters;
    row.wall_ms = detail::elapsed_ms(t0);
    tr.rows.push_back(std::move(row));
  }
  detail::finish_trace(tr, ref, cfg, rng, x, y, t0);
  return tr;
}

/* Variance-reduced recursion for the inner gradient:
 *   v_t = mean_{batch} [grad_y g(x_t, y_t; z) - grad_y g(x_prev, y_prev; z)] + v_prev */
inline Vec spider_v(const StochasticBilevelOracleSet& p, const Vec& x, const Vec& y,
                    const Vec& x_prev, const Vec& y_prev, const Vec& v_prev,
                    std::span<const int> batch, OracleCounters& c) {
  if (batch.empty()) throw std::invalid_argument("spider_v: empty batch");
  Vec s = Vec::Zero(p.d2);
  for (int i : batch) {
    if (i < 0 || i >= p.n_g) throw std::out_of_range("spider_v: index outside pool");
    s += p.grad_y_g_at(x, y, i) - p.grad_y_g_at(x_prev, y_prev, i);
  }
  c.gc_g += 2 * static_cast<std::int64_t>(batch.size());
  return Vec(s / static_cast<double>(batch.size()) + v_prev);
}

/* Same recursion for the hypergradient estimator. Each tuple is evaluated at
 * both points with the same inner samples AND the same realized truncation,
 * so the difference telescopes correctly. */
inline Vec spider_w(const StochasticBilevelOracleSet& p, const Vec& x, const Vec& y,
                    const Vec& x_prev, const Vec& y_prev, const Vec& w_prev, int series_len,
                    double curvature, std::span<const SampleTuple> tuples, Rng& rng,
                    OracleCounters& c) {
  if (tuples.empty()) throw std::invalid_argument("spider_w: empty batch");
  Vec s = Vec::Zero(p.d1);
  for (const SampleTuple& t : tuples) {
    NeumannSampleSpec spec{series_len, curvature, t.f_index, t.g_indices,
                           static_cast<int>(rng.below(series_len))};
    s += neumann_sample(p, x, y, spec, c) - neumann_sample(p, x_prev, y_prev, spec, c);
  }
  return Vec(s / static_cast<double>(tuples.size()) + w_prev);
}

/* Variance-reduced stochastic solver: fresh large-batch estimates at
 * checkpoints (t % q == 0, so always at t = 0), recursive updates from
 * small batches in between. With refresh_period = 1 the recursion branch is
 * never taken and the run coincides with run_sbiobred at batch b. */
inline RunTrace run_asbiobred(const StochasticBilevelOracleSet& p, const SolverConfig& cfg_in,
                              const ReferenceOracles* ref = nullptr) {
  SolverConfig cfg = cfg_in;
  cfg.resolve_starts(p.d1, p.d2);
  cfg.validate_stochastic(p);
  Rng rng(cfg.seed);
  Vec x = cfg.x0;
  Vec y = cfg.y0;
  Vec x_prev, y_prev, v_prev, w_prev;
  MirrorMap map = cfg.mirror;
  RunTrace tr;
  tr.rows.reserve(static_cast<std::size_t>(cfg.outer_iters));
  const auto t0 = std::chrono::steady_clock::now();
  for (int t = 0; t < cfg.outer_iters; ++t) {
    Vec v, w;
    if (t % cfg.refresh_period == 0) {
      const auto gbatch = rng.sample_without_replacement(p.n_g, cfg.large_batch);
      v = batch_grad_y_g(p, x, y, gbatch, tr.counters);
      const auto tuples = draw_tuple_batch(rng, p.n_f, p.n_g, cfg.inner_steps, cfg.large_batch);
      w = neumann_minibatch(p, x, y, cfg.inner_steps, cfg.curvature, tuples, rng, tr.counters);
    } else {
      const auto gbatch = rng.sample_without_replacement(p.n_g, cfg.small_batch);
      v = spider_v(p, x, y, x_prev, y_prev, v_prev, gbatch, tr.counters);
      const auto tuples = draw_tuple_batch(rng, p.n_f, p.n_g, cfg.inner_steps, cfg.small_batch);
      w = spider_w(p, x, y, x_prev, y_prev, w_prev, cfg.inner_steps, cfg.curvature, tuples, rng,
                   tr.counters);
    }
    if (map.kind == MirrorMap::Kind::adaptive) map = adaptive_update(std::move(map), w);
    TraceRow row;
    row.t = t;
    detail::fill_metrics(row, ref, cfg, map, x, y, y);
    x_prev = x;
    y_prev = y;
    v_prev = v;
    w_prev = w;
    Vec y_next = y - cfg.inner_step * cfg.inner_interp * v;
    Vec x_next = mirror_step(map, cfg.set, cfg.reg, x, w, cfg.outer_step);
    detail::guard_finite(y_next, "inner iterate", tr);
    detail::guard_finite(w, "gradient estimate", tr);
    detail::guard_finite(x_next, "outer iterate", tr);
    y = std::move(y_next);
    x = std::move(x_next);
    row.counters = tr.counters;
    row.wall_ms = detail::elapsed_ms(t0);
    tr.rows.push_back(std::move(row));
  }
  detail::finish_trace(tr, ref, cfg, rng, x, y, t0);
  return tr;
}

}  // namespace biobred
