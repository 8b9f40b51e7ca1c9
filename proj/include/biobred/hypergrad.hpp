#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "biobred/constants.hpp"
#include "biobred/counters.hpp"
#include "biobred/problem.hpp"
#include "biobred/rng.hpp"
#include "biobred/types.hpp"

namespace biobred {

/* Inner gradient-descent trajectory y^0..y^K at fixed x, kept whole because
 * the unrolled hypergradient replays it backwards. */
struct InnerPath {
  Vec x;
  std::vector<Vec> iterates;  // depth + 1 entries
  double step = 0.0;

  int depth() const { return static_cast<int>(iterates.size()) - 1; }
};

inline InnerPath inner_gd(const BilevelOracleSet& p, const Vec& x, const Vec& y0, double step,
                          int depth, OracleCounters& c) {
  if (depth < 1) throw std::invalid_argument("inner_gd: depth must be >= 1");
  if (!(step > 0.0)) throw std::invalid_argument("inner_gd: step must be positive");
  InnerPath path;
  path.x = x;
  path.step = step;
  path.iterates.reserve(static_cast<std::size_t>(depth) + 1);
  path.iterates.push_back(y0);
  Vec y = y0;
  for (int k = 0; k < depth; ++k) {
    y -= step * p.grad_y_g(x, y);
    path.iterates.push_back(y);
  }
  c.gc_g += depth;
  return path;
}

/* Hypergradient of the K-step unrolled inner loop, computed by one backward
 * sweep over the stored path:
 *
 *   d/dx f(x, y^K) = grad_x f(x, y^K)
 *     - step * sum_{k=0}^{K-1} (d^2g/dxdy)(x, y^k)
 *                  prod_{j=k+1}^{K-1} (I - step (d^2g/dy^2)(x, y^j))
 *                  grad_y f(x, y^K).
 *
 * The sweep holds p = (running product) grad_y f and per level accumulates
 * the mixed product, then applies one Hessian product, skipping the Hessian
 * at the last level where p is no longer needed. Exactly K jv and K-1 hv
 * products; gc_f += 2 for the two outer gradients. */
inline Vec itd_hypergradient(const BilevelOracleSet& p, const InnerPath& path,
                             OracleCounters& c) {
  const int K = path.depth();
  if (K < 1) throw std::invalid_argument("itd_hypergradient: path depth must be >= 1");
  const Vec& x = path.x;
  const Vec& yk = path.iterates.back();
  const Vec gx = p.grad_x_f(x, yk);
  Vec prod = p.grad_y_f(x, yk);
  c.gc_f += 2;
  Vec acc = Vec::Zero(p.d1);
  for (int k = K - 1; k >= 0; --k) {
    const Vec& ylevel = path.iterates[static_cast<std::size_t>(k)];
    acc += p.jvp_gxy(x, ylevel, prod);
    c.jv += 1;
    if (k > 0) {
      prod -= path.step * p.hvp_gyy(x, ylevel, prod);
      c.hv += 1;
    }
  }
  return gx - path.step * acc;
}

/* Deterministic envelope on |unrolled hypergradient - grad F|:
 *
 *   (l1 (1-step*mu)^{K/2} + l2 (1-step*mu)^{(K-1)/2}) dist0
 *     + l3 (1-step*mu)^K
 *
 * where dist0 = |y^0 - y*(x)|. Requires 0 < step < 1/L. */
inline double itd_error_bound(const SmoothnessConstants& constants, double step, int depth,
                              double dist0) {
  constants.base.validate();
  if (depth < 1) throw std::invalid_argument("itd_error_bound: depth must be >= 1");
  if (dist0 < 0.0) throw std::invalid_argument("itd_error_bound: dist0 must be non-negative");
  if (!(step > 0.0) || !(step < 1.0 / constants.base.L))
    throw std::invalid_argument("itd_error_bound: need 0 < step < 1/L");
  const double r = 1.0 - step * constants.base.mu;
  const double K = static_cast<double>(depth);
  const SmoothnessDerived& d = constants.derived;
  return (d.l1 * std::pow(r, K / 2.0) + d.l2 * std::pow(r, (K - 1.0) / 2.0)) * dist0 +
         d.l3 * std::pow(r, K);
}

/* One draw of the truncated Neumann-series hypergradient estimator.
 * g_indices holds zeta^0..zeta^{K-1}; zeta^0 feeds the mixed product and
 * zeta^1..zeta^truncation the Hessian factors; truncation ~ U{0..K-1} is
 * drawn by the caller. The empty product (truncation = 0) is the identity. */
struct NeumannSampleSpec {
  int series_len = 1;       // K
  double curvature = 1.0;   // L scale in the series
  int f_index = 0;          // xi
  std::vector<int> g_indices;
  int truncation = 0;       // realized k < K
};

inline Vec neumann_sample(const StochasticBilevelOracleSet& p, const Vec& x, const Vec& y,
                          const NeumannSampleSpec& spec, OracleCounters& c) {
  if (spec.series_len < 1) throw std::invalid_argument("neumann_sample: series_len must be >= 1");
  if (!(spec.curvature > 0.0))
    throw std::invalid_argument("neumann_sample: curvature must be positive");
  if (spec.truncation < 0 || spec.truncation >= spec.series_len)
    throw std::invalid_argument("neumann_sample: truncation outside {0..K-1}");
  if (static_cast<int>(spec.g_indices.size()) != spec.series_len)
    throw std::invalid_argument("neumann_sample: need exactly K inner sample indices");
  const double invL = 1.0 / spec.curvature;
  Vec prod = p.grad_y_f_at(x, y, spec.f_index);
  // right-to-left application of prod_{i=1}^{k} (I - (1/L) H(zeta^i))
  for (int i = spec.truncation; i >= 1; --i)
    prod -= invL * p.hvp_gyy_at(x, y, prod, spec.g_indices[static_cast<std::size_t>(i)]);
  c.hv += spec.truncation;
  prod *= static_cast<double>(spec.series_len) * invL;
  const Vec res =
      p.grad_x_f_at(x, y, spec.f_index) - p.jvp_gxy_at(x, y, prod, spec.g_indices[0]);
  c.jv += 1;
  c.gc_f += 2;
  return res;
}

// One sampled tuple (xi, zeta^0..zeta^{K-1}); the truncation is drawn at use.
struct SampleTuple {
  int f_index = 0;
  std::vector<int> g_indices;
};

/* Tuple batch: xi indices without replacement across the batch, zeta
 * positions i.i.d. within each tuple (the bias analysis needs independence
 * across positions). */
inline std::vector<SampleTuple> draw_tuple_batch(Rng& rng, int n_f, int n_g, int series_len,
                                                 int count) {
  if (count < 1) throw std::invalid_argument("draw_tuple_batch: count must be >= 1");
  if (series_len < 1) throw std::invalid_argument("draw_tuple_batch: series_len must be >= 1");
  const std::vector<int> xis = rng.sample_without_replacement(n_f, count);
  std::vector<SampleTuple> out(static_cast<std::size_t>(count));
  for (int t = 0; t < count; ++t) {
    out[static_cast<std::size_t>(t)].f_index = xis[static_cast<std::size_t>(t)];
    auto& zs = out[static_cast<std::size_t>(t)].g_indices;
    zs.resize(static_cast<std::size_t>(series_len));
    for (int i = 0; i < series_len; ++i) zs[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(n_g));
  }
  return out;
}

// Minibatch mean of the estimator, one independent truncation per tuple.
inline Vec neumann_minibatch(const StochasticBilevelOracleSet& p, const Vec& x, const Vec& y,
                             int series_len, double curvature,
                             std::span<const SampleTuple> tuples, Rng& rng, OracleCounters& c) {
  if (tuples.empty()) throw std::invalid_argument("neumann_minibatch: empty batch");
  Vec s = Vec::Zero(p.d1);
  for (const SampleTuple& t : tuples) {
    NeumannSampleSpec spec{series_len, curvature, t.f_index, t.g_indices,
                           static_cast<int>(rng.below(series_len))};
    s += neumann_sample(p, x, y, spec, c);
  }
  return Vec(s / static_cast<double>(tuples.size()));
}

/* Exact expectation of the estimator over xi, all zeta positions and the
 * uniform truncation. Independence across zeta positions factors the
 * expectation into powers of the mean Hessian map:
 *
 *   E = mean grad_x f - Jbar (1/L) sum_{k=0}^{K-1} (I - Hbar/L)^k mean grad_y f
 *
 * evaluated with (K+1)*n_g + 2*n_f pool passes instead of n_g^K * n_f terms.
 * Test oracle; does not touch counters. */
inline Vec exact_neumann_expectation(const StochasticBilevelOracleSet& p, const Vec& x,
                                     const Vec& y, int series_len, double curvature,
                                     double eval_cap = 1e7) {
  if (series_len < 1)
    throw std::invalid_argument("exact_neumann_expectation: series_len must be >= 1");
  if (!(curvature > 0.0))
    throw std::invalid_argument("exact_neumann_expectation: curvature must be positive");
  const double work = (static_cast<double>(series_len) + 1.0) * p.n_g + 2.0 * p.n_f;
  if (work > eval_cap) throw std::invalid_argument("exact_neumann_expectation: evaluation cap exceeded");
  const double invL = 1.0 / curvature;
  Vec gxf = Vec::Zero(p.d1);
  Vec gyf = Vec::Zero(p.d2);
  for (int i = 0; i < p.n_f; ++i) {
    gxf += p.grad_x_f_at(x, y, i);
    gyf += p.grad_y_f_at(x, y, i);
  }
  gxf /= p.n_f;
  gyf /= p.n_f;
  auto mean_hvp = [&](const Vec& v) {
    Vec s = Vec::Zero(p.d2);
    for (int i = 0; i < p.n_g; ++i) s += p.hvp_gyy_at(x, y, v, i);
    return Vec(s / p.n_g);
  };
  Vec cur = gyf;
  Vec series_sum = Vec::Zero(p.d2);
  for (int k = 0; k < series_len; ++k) {
    series_sum += cur;
    if (k + 1 < series_len) cur -= invL * mean_hvp(cur);
  }
  const Vec z = invL * series_sum;
  Vec jz = Vec::Zero(p.d1);
  for (int i = 0; i < p.n_g; ++i) jz += p.jvp_gxy_at(x, y, z, i);
  jz /= p.n_g;
  return gxf - jz;
}

/* Bias of the truncated estimator's expectation against the surrogate
 * hypergradient: |bias| <= (L c_fy / mu) (1 - mu/L)^K. */
inline double bias_bound(const SmoothnessBase& constants, int series_len) {
  constants.validate();
  if (series_len < 1) throw std::invalid_argument("bias_bound: series_len must be >= 1");
  return constants.L * constants.c_fy / constants.mu *
         std::pow(1.0 - constants.mu / constants.L, series_len);
}

}  // namespace biobred
