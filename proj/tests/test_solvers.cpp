#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <vector>

#include "biobred/solvers.hpp"
#include "biobred/testbed/quadratic.hpp"
#include "biobred/trace.hpp"
#include "support/q2.hpp"

using namespace biobred;
using testsupport::q2_instance;
using testsupport::scalar_vec;

namespace {

SolverConfig q2_config() {
  SolverConfig cfg;
  cfg.outer_iters = 200;
  cfg.inner_steps = 20;
  cfg.outer_step = 0.1;
  cfg.inner_step = 0.25;
  return cfg;
}

}  // namespace

TEST_CASE("stochastic config validation") {
  const QuadraticBilevel prob = make_quadratic(2, 3, 8, 8, 3.0, 1);
  const StochasticBilevelOracleSet sp = prob.stochastic();
  SolverConfig cfg;
  cfg.x0 = Vec::Zero(2);
  cfg.y0 = Vec::Zero(3);
  cfg.large_batch = 4;
  cfg.small_batch = 4;
  REQUIRE_NOTHROW(cfg.validate_stochastic(sp));

  SolverConfig bad = cfg;
  bad.small_batch = 5;  // recursion batch may not exceed the checkpoint batch
  REQUIRE_THROWS_AS(bad.validate_stochastic(sp), std::invalid_argument);
  bad = cfg;
  bad.large_batch = 9;  // exceeds both pools
  REQUIRE_THROWS_AS(bad.validate_stochastic(sp), std::invalid_argument);
  bad = cfg;
  bad.inner_interp = 0.0;
  REQUIRE_THROWS_AS(bad.validate_stochastic(sp), std::invalid_argument);
  bad = cfg;
  bad.inner_interp = 1.5;
  REQUIRE_THROWS_AS(bad.validate_stochastic(sp), std::invalid_argument);
  bad = cfg;
  bad.refresh_period = 0;
  REQUIRE_THROWS_AS(bad.validate_stochastic(sp), std::invalid_argument);
  bad = cfg;
  bad.curvature = 0.0;
  REQUIRE_THROWS_AS(bad.validate_stochastic(sp), std::invalid_argument);
  bad = cfg;
  bad.x0 = Vec::Zero(3);  // wrong dimension
  REQUIRE_THROWS_AS(bad.validate_stochastic(sp), std::invalid_argument);
}

TEST_CASE("x0 must start inside the feasible set") {
  const QuadraticBilevel prob = q2_instance();
  SolverConfig cfg = q2_config();
  cfg.set = FeasibleSet::box(scalar_vec(-0.5), scalar_vec(0.5));
  cfg.x0 = scalar_vec(2.0);
  cfg.y0 = scalar_vec(0.0);
  REQUIRE_THROWS_AS(run_biobred(prob.oracles(), cfg), std::invalid_argument);
}

TEST_CASE("deterministic solver reaches the 1-D stationary point") {
  const QuadraticBilevel prob = q2_instance();
  const ReferenceOracles refs = prob.references();
  const RunTrace tr = run_biobred(prob.oracles(), q2_config(), &refs);

  REQUIRE(!tr.aborted);
  REQUIRE(tr.rows.size() == 200);
  REQUIRE(std::abs(tr.final_x[0] - 0.8) <= 1e-3);
  REQUIRE(std::abs(tr.final_y[0] - 0.4) <= 1e-3);

  // closed-form counter totals: gc_f = 2T, gc_g = TK, jv = TK, hv = T(K-1)
  REQUIRE(tr.counters == OracleCounters{400, 4000, 4000, 3800});
  REQUIRE(tr.rows.back().counters == tr.counters);
  REQUIRE(tr.rows.front().counters == OracleCounters{2, 20, 20, 19});

  REQUIRE(tr.output_index >= 1);
  REQUIRE(tr.output_index <= 200);
  for (std::size_t i = 0; i < tr.rows.size(); ++i) {
    REQUIRE(tr.rows[i].t == static_cast<int>(i));
    REQUIRE(tr.rows[i].phi.has_value());
    REQUIRE(std::isfinite(*tr.rows[i].phi));
    REQUIRE(tr.rows[i].gen_grad_sq.has_value());
    REQUIRE(tr.rows[i].inner_err_sq.has_value());
  }
  // phi is measured at the pre-step iterate, so row 0 sits at x0 = 0
  REQUIRE(*tr.rows[0].phi == Catch::Approx(0.5));
  REQUIRE(tr.final_phi.has_value());
  REQUIRE(*tr.final_phi <= *tr.rows[0].phi);
}

TEST_CASE("trace metrics at a hand-checked start point") {
  const QuadraticBilevel prob = q2_instance();
  const ReferenceOracles refs = prob.references();
  SolverConfig cfg = q2_config();
  cfg.outer_iters = 1;
  cfg.inner_steps = 1;
  cfg.x0 = scalar_vec(2.0);
  cfg.y0 = scalar_vec(0.0);
  const RunTrace tr = run_biobred(prob.oracles(), cfg, &refs);
  REQUIRE(tr.rows.size() == 1);
  REQUIRE(tr.output_index == 1);
  // F(2) = 1/2 + 1/2, grad F(2) = 1.5, |y0 - y*(2)|^2 = 1
  REQUIRE(*tr.rows[0].phi == Catch::Approx(1.0));
  REQUIRE(*tr.rows[0].gen_grad_sq == Catch::Approx(2.25));
  REQUIRE(*tr.rows[0].inner_err_sq == Catch::Approx(1.0));
}

TEST_CASE("runs without references leave metric columns unset") {
  const QuadraticBilevel prob = q2_instance();
  SolverConfig cfg = q2_config();
  cfg.outer_iters = 3;
  const RunTrace tr = run_biobred(prob.oracles(), cfg);
  for (const TraceRow& r : tr.rows) {
    REQUIRE(!r.phi.has_value());
    REQUIRE(!r.gen_grad_sq.has_value());
    REQUIRE(!r.inner_err_sq.has_value());
  }
  REQUIRE(!tr.final_phi.has_value());
}

TEST_CASE("inner loops warm start from the previous endpoint") {
  const QuadraticBilevel prob = make_quadratic(2, 3, 2, 2, 3.0, 8);
  SolverConfig cfg;
  cfg.outer_iters = 6;
  cfg.inner_steps = 4;
  cfg.outer_step = 0.05;
  cfg.inner_step = 0.2;
  cfg.record_inner_path = true;
  cfg.y0 = Vec::Ones(3);
  const RunTrace tr = run_biobred(prob.oracles(), cfg);
  REQUIRE(tr.inner_starts.size() == 6);
  REQUIRE(tr.inner_ends.size() == 6);
  REQUIRE(tr.inner_starts[0] == cfg.y0);
  for (std::size_t t = 1; t < tr.inner_starts.size(); ++t)
    REQUIRE(tr.inner_starts[t] == tr.inner_ends[t - 1]);
  REQUIRE(tr.final_y == tr.inner_ends.back());
}

TEST_CASE("repeated seeded runs are identical") {
  const QuadraticBilevel prob = make_quadratic(3, 3, 10, 10, 4.0, 17);
  const ReferenceOracles refs = prob.references();

  SolverConfig det = q2_config();
  det.outer_iters = 40;
  const RunTrace d1 = run_biobred(prob.oracles(), det, &refs);
  const RunTrace d2 = run_biobred(prob.oracles(), det, &refs);
  REQUIRE(traces_equal(d1, d2));

  SolverConfig st;
  st.outer_iters = 30;
  st.inner_steps = 4;
  st.outer_step = 0.05;
  st.inner_step = 0.1;
  st.curvature = 4.0;
  st.large_batch = 5;
  st.seed = 11;
  const RunTrace s1 = run_sbiobred(prob.stochastic(), st, &refs);
  const RunTrace s2 = run_sbiobred(prob.stochastic(), st, &refs);
  REQUIRE(traces_equal(s1, s2));
  SolverConfig st_other = st;
  st_other.seed = 12;
  const RunTrace s3 = run_sbiobred(prob.stochastic(), st_other, &refs);
  REQUIRE(!traces_equal(s1, s3));

  std::ostringstream a, b;
  write_trace_csv(a, s1);
  write_trace_csv(b, s2);
  REQUIRE(a.str() == b.str());
}

TEST_CASE("divergent run aborts with the partial trace attached") {
  const QuadraticBilevel prob = q2_instance();
  SolverConfig cfg = q2_config();
  cfg.outer_iters = 10;
  cfg.inner_steps = 1;
  cfg.outer_step = 1e300;
  bool thrown = false;
  try {
    run_biobred(prob.oracles(), cfg);
  } catch (const numerical_abort& e) {
    thrown = true;
    REQUIRE(e.partial_trace.aborted);
    REQUIRE(e.partial_trace.abort_reason.find("non-finite") != std::string::npos);
    REQUIRE(!e.partial_trace.rows.empty());
    REQUIRE(e.partial_trace.rows.size() < 10);
  }
  REQUIRE(thrown);
}

TEST_CASE("box constraint pins the iterate to the active face") {
  const QuadraticBilevel prob = q2_instance();
  SolverConfig cfg = q2_config();
  cfg.set = FeasibleSet::box(scalar_vec(-0.5), scalar_vec(0.5));
  const RunTrace tr = run_biobred(prob.oracles(), cfg);
  // unconstrained minimum 0.8 lies outside, so the run settles on the bound
  REQUIRE(cfg.set.contains(tr.final_x, 1e-12));
  REQUIRE(std::abs(tr.final_x[0] - 0.5) <= 1e-6);
}

TEST_CASE("l1 regularization shifts the stationary point by its threshold") {
  const QuadraticBilevel prob = q2_instance();
  SolverConfig cfg = q2_config();
  cfg.outer_iters = 300;
  cfg.outer_step = 0.2;
  cfg.inner_steps = 25;
  cfg.reg = Regularizer::l1(0.3);
  const RunTrace tr = run_biobred(prob.oracles(), cfg);
  // F'(x) = 1.25 x - 1, so F' + 0.3 sign(x) vanishes at x = 0.56
  REQUIRE(std::abs(tr.final_x[0] - 0.56) <= 1e-3);
}

TEST_CASE("adaptive mirror map still converges and stays deterministic") {
  const QuadraticBilevel prob = q2_instance();
  const ReferenceOracles refs = prob.references();
  SolverConfig cfg = q2_config();
  cfg.outer_iters = 400;
  cfg.outer_step = 0.05;
  cfg.mirror = MirrorMap::adaptive(1);
  const RunTrace a = run_biobred(prob.oracles(), cfg, &refs);
  const RunTrace b = run_biobred(prob.oracles(), cfg, &refs);
  REQUIRE(traces_equal(a, b));
  REQUIRE(std::abs(a.final_x[0] - 0.8) <= 1e-2);
}

TEST_CASE("stochastic solver counter arithmetic") {
  const QuadraticBilevel prob = make_quadratic(3, 3, 12, 12, 4.0, 2024);
  SolverConfig cfg;
  cfg.outer_iters = 25;
  cfg.inner_steps = 6;
  cfg.outer_step = 0.05;
  cfg.inner_step = 0.05;
  cfg.curvature = 4.0;
  cfg.large_batch = 6;
  cfg.seed = 4;
  const RunTrace tr = run_sbiobred(prob.stochastic(), cfg);
  const std::int64_t T = 25, b = 6, K = 6;
  REQUIRE(tr.counters.gc_f == 2 * b * T);
  REQUIRE(tr.counters.gc_g == b * T);
  REQUIRE(tr.counters.jv == b * T);
  REQUIRE(tr.counters.hv <= b * T * (K - 1));
  OracleCounters prev;
  for (const TraceRow& r : tr.rows) {
    REQUIRE(r.counters.gc_f - prev.gc_f == 2 * b);
    REQUIRE(r.counters.gc_g - prev.gc_g == b);
    REQUIRE(r.counters.jv - prev.jv == b);
    REQUIRE(r.counters.hv - prev.hv >= 0);
    REQUIRE(r.counters.hv - prev.hv <= b * (K - 1));
    prev = r.counters;
  }
}

TEST_CASE("stochastic solver makes progress on a conditioned instance") {
  const QuadraticBilevel prob = make_quadratic(3, 3, 12, 12, 4.0, 2024);
  const ReferenceOracles refs = prob.references();
  SolverConfig cfg;
  cfg.outer_iters = 250;
  cfg.inner_steps = 6;
  cfg.outer_step = 0.05;
  cfg.inner_step = 0.05;
  cfg.curvature = 4.0;
  cfg.large_batch = 6;
  cfg.seed = 4;
  const RunTrace tr = run_sbiobred(prob.stochastic(), cfg, &refs);
  REQUIRE(!tr.aborted);
  auto window_mean = [&](std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += *tr.rows[i].gen_grad_sq;
    return s / static_cast<double>(hi - lo);
  };
  REQUIRE(window_mean(200, 250) <= 0.7 * window_mean(0, 50));
}

TEST_CASE("degenerate pools make the stochastic run seed independent") {
  const QuadraticBilevel prob = q2_instance();  // single-sample pools
  const ReferenceOracles refs = prob.references();
  SolverConfig cfg;
  cfg.outer_iters = 60;
  cfg.inner_steps = 1;  // series length 1 forces truncation 0
  cfg.outer_step = 0.1;
  cfg.inner_step = 0.25;
  cfg.curvature = 2.0;
  cfg.large_batch = 1;
  cfg.seed = 100;
  const RunTrace a = run_sbiobred(prob.stochastic(), cfg, &refs);
  cfg.seed = 200;
  const RunTrace b = run_sbiobred(prob.stochastic(), cfg, &refs);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    REQUIRE(a.rows[i].phi == b.rows[i].phi);
    REQUIRE(a.rows[i].gen_grad_sq == b.rows[i].gen_grad_sq);
    REQUIRE(a.rows[i].counters == b.rows[i].counters);
  }
  REQUIRE(a.final_x == b.final_x);
  REQUIRE(a.final_y == b.final_y);
}

TEST_CASE("variance-reduced recursion identities for the inner gradient") {
  const QuadraticBilevel prob = make_quadratic(2, 3, 3, 4, 3.0, 41);
  const StochasticBilevelOracleSet sp = prob.stochastic();
  Rng r(7);
  const Vec x = r.gaussian(2), y = r.gaussian(3);
  const Vec xp = r.gaussian(2), yp = r.gaussian(3);
  const Vec v_prev = r.gaussian(3);
  const std::vector<int> batch{0, 2};
  OracleCounters c;

  // equal evaluation points collapse the correction to zero exactly
  const Vec same = spider_v(sp, x, y, x, y, v_prev, batch, c);
  REQUIRE(same == v_prev);
  REQUIRE(c.gc_g == 4);

  // full-pool batch telescopes to the fresh mean gradient
  const std::vector<int> full{0, 1, 2, 3};
  const Vec mean_prev = sp.mean.grad_y_g(xp, yp);
  const Vec tele = spider_v(sp, x, y, xp, yp, mean_prev, full, c);
  REQUIRE((tele - sp.mean.grad_y_g(x, y)).norm() <= 1e-12);

  // conditional expectation over all 2-subsets of a 4-pool
  Vec acc = Vec::Zero(3);
  int count = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) {
      const std::vector<int> sub{i, j};
      acc += spider_v(sp, x, y, xp, yp, v_prev, sub, c);
      ++count;
    }
  acc /= count;
  const Vec want = sp.mean.grad_y_g(x, y) - sp.mean.grad_y_g(xp, yp) + v_prev;
  REQUIRE((acc - want).norm() <= 1e-12);

  const std::vector<int> empty;
  REQUIRE_THROWS_AS(spider_v(sp, x, y, xp, yp, v_prev, empty, c), std::invalid_argument);
  const std::vector<int> oob{0, 4};
  REQUIRE_THROWS_AS(spider_v(sp, x, y, xp, yp, v_prev, oob, c), std::out_of_range);
}

TEST_CASE("variance-reduced recursion identities for the hypergradient") {
  const QuadraticBilevel prob = make_quadratic(2, 2, 2, 3, 2.0, 53);
  const StochasticBilevelOracleSet sp = prob.stochastic();
  Rng r(15);
  const Vec x = r.uniform_box(2, -1.0, 1.0), y = r.uniform_box(2, -1.0, 1.0);
  const Vec xp = r.uniform_box(2, -1.0, 1.0), yp = r.uniform_box(2, -1.0, 1.0);
  const Vec w_prev = r.gaussian(2);
  const int K = 2;
  const double L = 2.0;

  Rng draws(3);
  const auto tuples = draw_tuple_batch(draws, sp.n_f, sp.n_g, K, 2);
  OracleCounters c;
  const Vec same = spider_w(sp, x, y, x, y, w_prev, K, L, tuples, draws, c);
  REQUIRE(same == w_prev);  // identical points, shared truncation: exact cancellation
  REQUIRE(c.gc_f == 4 * 2);
  REQUIRE(c.jv == 2 * 2);
  REQUIRE(c.hv % 2 == 0);

  // conditional expectation over every (sample tuple, truncation) draw at
  // batch size one equals the difference of exact estimator expectations
  Vec acc = Vec::Zero(2);
  int count = 0;
  for (int xi = 0; xi < sp.n_f; ++xi)
    for (int z0 = 0; z0 < sp.n_g; ++z0)
      for (int z1 = 0; z1 < sp.n_g; ++z1)
        for (int k = 0; k < K; ++k) {
          OracleCounters cc;
          const NeumannSampleSpec spec{K, L, xi, {z0, z1}, k};
          acc += neumann_sample(sp, x, y, spec, cc) - neumann_sample(sp, xp, yp, spec, cc) +
                 w_prev;
          ++count;
        }
  acc /= count;
  const Vec want = exact_neumann_expectation(sp, x, y, K, L) -
                   exact_neumann_expectation(sp, xp, yp, K, L) + w_prev;
  REQUIRE((acc - want).norm() <= 1e-12);

  const std::vector<SampleTuple> empty;
  REQUIRE_THROWS_AS(spider_w(sp, x, y, xp, yp, w_prev, K, L, empty, draws, c),
                    std::invalid_argument);
}

TEST_CASE("refresh period one coincides with the plain stochastic solver") {
  const QuadraticBilevel prob = make_quadratic(2, 3, 8, 8, 3.0, 77);
  const ReferenceOracles refs = prob.references();
  SolverConfig cfg;
  cfg.outer_iters = 40;
  cfg.inner_steps = 3;
  cfg.outer_step = 0.05;
  cfg.inner_step = 0.1;
  cfg.curvature = 3.0;
  cfg.large_batch = 4;
  cfg.small_batch = 2;
  cfg.refresh_period = 1;
  cfg.seed = 31;
  const RunTrace a = run_asbiobred(prob.stochastic(), cfg, &refs);
  const RunTrace s = run_sbiobred(prob.stochastic(), cfg, &refs);
  REQUIRE(traces_equal(a, s));
}

TEST_CASE("checkpoint and recursion iterations have distinct oracle bills") {
  const QuadraticBilevel prob = make_quadratic(2, 3, 10, 10, 3.0, 5);
  SolverConfig cfg;
  cfg.outer_iters = 7;
  cfg.inner_steps = 4;
  cfg.outer_step = 0.05;
  cfg.inner_step = 0.1;
  cfg.curvature = 3.0;
  cfg.large_batch = 5;
  cfg.small_batch = 2;
  cfg.refresh_period = 3;
  cfg.seed = 9;
  const RunTrace tr = run_asbiobred(prob.stochastic(), cfg);
  const std::int64_t b = 5, b1 = 2, K = 4;
  OracleCounters prev;
  for (const TraceRow& r : tr.rows) {
    const std::int64_t df = r.counters.gc_f - prev.gc_f;
    const std::int64_t dg = r.counters.gc_g - prev.gc_g;
    const std::int64_t dj = r.counters.jv - prev.jv;
    const std::int64_t dh = r.counters.hv - prev.hv;
    if (r.t % cfg.refresh_period == 0) {
      REQUIRE(df == 2 * b);
      REQUIRE(dg == b);
      REQUIRE(dj == b);
      REQUIRE(dh <= b * (K - 1));
    } else {
      REQUIRE(df == 4 * b1);
      REQUIRE(dg == 2 * b1);
      REQUIRE(dj == 2 * b1);
      REQUIRE(dh % 2 == 0);
      REQUIRE(dh <= 2 * b1 * (K - 1));
    }
    prev = r.counters;
  }
  REQUIRE(!tr.aborted);
  REQUIRE(tr.rows.size() == 7);
}

TEST_CASE("variance-reduced solver runs clean with a longer refresh period") {
  const QuadraticBilevel prob = make_quadratic(3, 3, 16, 16, 4.0, 64);
  const ReferenceOracles refs = prob.references();
  SolverConfig cfg;
  cfg.outer_iters = 120;
  cfg.inner_steps = 5;
  cfg.outer_step = 0.04;
  cfg.inner_step = 0.05;
  cfg.curvature = 4.0;
  cfg.large_batch = 12;
  cfg.small_batch = 4;
  cfg.refresh_period = 6;
  cfg.seed = 21;
  cfg.set = FeasibleSet::box(Vec::Constant(3, -6.0), Vec::Constant(3, 6.0));
  const RunTrace tr = run_asbiobred(prob.stochastic(), cfg, &refs);
  REQUIRE(!tr.aborted);
  REQUIRE(cfg.set.contains(tr.final_x, 1e-12));
  auto window_mean = [&](std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += *tr.rows[i].gen_grad_sq;
    return s / static_cast<double>(hi - lo);
  };
  REQUIRE(window_mean(90, 120) <= 0.7 * window_mean(0, 30));
}

TEST_CASE("frozen-x inner sgd settles into the predicted noise floor") {
  const QuadraticBilevel prob = make_quadratic(2, 4, 3, 16, 3.0, 313);
  const StochasticBilevelOracleSet sp = prob.stochastic();
  Rng r(5);
  const Vec x = r.uniform_box(2, -1.0, 1.0);
  const Vec ys = prob.ystar(x);
  const double mu = prob.constants().mu;
  const double lam = 0.05 / prob.constants().L;
  const int b = 4;

  // empirical per-sample variance at the solution (mean gradient is zero there)
  double sigma_sq = 0.0;
  for (int i = 0; i < sp.n_g; ++i) sigma_sq += sp.grad_y_g_at(x, ys, i).squaredNorm();
  sigma_sq /= sp.n_g;

  Vec y = ys + 5.0 * Vec::Ones(4) / 2.0;
  const double d0_sq = (y - ys).squaredNorm();
  OracleCounters c;
  double window = 0.0;
  const int iters = 600, tail = 300;
  for (int t = 0; t < iters; ++t) {
    const auto batch = r.sample_without_replacement(sp.n_g, b);
    y -= lam * batch_grad_y_g(sp, x, y, batch, c);
    if (t >= iters - tail) window += (y - ys).squaredNorm();
  }
  window /= tail;
  REQUIRE(window <= 4.0 * lam * sigma_sq / (mu * b));
  REQUIRE(window <= 0.01 * d0_sq);
}
