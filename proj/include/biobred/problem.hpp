#pragma once

#include <functional>
#include <span>
#include <stdexcept>

#include "biobred/counters.hpp"
#include "biobred/types.hpp"

namespace biobred {

/* Oracle bundle for one bilevel instance
 *
 *     min_x F(x) = f(x, y*(x))   s.t.   y*(x) = argmin_y g(x, y)
 *
 * with x in R^d1 and y in R^d2. The inner objective must be mu-strongly
 * convex in y for every x. Second-order information is exposed only through
 * products:
 *
 *   jvp_gxy(x, y, v) = (d^2 g / dx dy) v,   v in R^d2 -> R^d1
 *   hvp_gyy(x, y, v) = (d^2 g / dy^2)  v,   v in R^d2 -> R^d2
 *
 * All callables must be pure (same inputs, same outputs) and safe to invoke
 * concurrently for reads.
 */
struct BilevelOracleSet {
  int d1 = 0;
  int d2 = 0;
  std::function<double(const Vec&, const Vec&)> f_value;
  std::function<double(const Vec&, const Vec&)> g_value;
  std::function<Vec(const Vec&, const Vec&)> grad_x_f;
  std::function<Vec(const Vec&, const Vec&)> grad_y_f;
  std::function<Vec(const Vec&, const Vec&)> grad_y_g;
  std::function<Vec(const Vec&, const Vec&, const Vec&)> jvp_gxy;
  std::function<Vec(const Vec&, const Vec&, const Vec&)> hvp_gyy;
};

/* Finite-sum variant: the outer objective averages samples xi in
 * {0..n_f-1}, the inner averages zeta in {0..n_g-1}. `mean` holds the
 * full-pool averages (testbeds may implement it in closed form; it must agree
 * with the explicit pool average). noise_bound is an optional declared
 * variance bound sigma^2 for the per-sample inner gradients over the test
 * region. */
struct StochasticBilevelOracleSet {
  int d1 = 0;
  int d2 = 0;
  int n_f = 0;
  int n_g = 0;
  double noise_bound = 0.0;

  std::function<double(const Vec&, const Vec&, int)> f_value_at;
  std::function<double(const Vec&, const Vec&, int)> g_value_at;
  std::function<Vec(const Vec&, const Vec&, int)> grad_x_f_at;
  std::function<Vec(const Vec&, const Vec&, int)> grad_y_f_at;
  std::function<Vec(const Vec&, const Vec&, int)> grad_y_g_at;
  std::function<Vec(const Vec&, const Vec&, const Vec&, int)> jvp_gxy_at;
  std::function<Vec(const Vec&, const Vec&, const Vec&, int)> hvp_gyy_at;

  BilevelOracleSet mean;
};

// Pool averages computed the slow way, for cross-checking `mean`.
inline BilevelOracleSet mean_by_enumeration(const StochasticBilevelOracleSet& p) {
  if (p.n_f < 1 || p.n_g < 1)
    throw std::invalid_argument("mean_by_enumeration: pools must be non-empty");
  BilevelOracleSet m;
  m.d1 = p.d1;
  m.d2 = p.d2;
  m.f_value = [&p](const Vec& x, const Vec& y) {
    double s = 0.0;
    for (int i = 0; i < p.n_f; ++i) s += p.f_value_at(x, y, i);
    return s / p.n_f;
  };
  m.g_value = [&p](const Vec& x, const Vec& y) {
    double s = 0.0;
    for (int i = 0; i < p.n_g; ++i) s += p.g_value_at(x, y, i);
    return s / p.n_g;
  };
  m.grad_x_f = [&p](const Vec& x, const Vec& y) {
    Vec s = Vec::Zero(p.d1);
    for (int i = 0; i < p.n_f; ++i) s += p.grad_x_f_at(x, y, i);
    return Vec(s / p.n_f);
  };
  m.grad_y_f = [&p](const Vec& x, const Vec& y) {
    Vec s = Vec::Zero(p.d2);
    for (int i = 0; i < p.n_f; ++i) s += p.grad_y_f_at(x, y, i);
    return Vec(s / p.n_f);
  };
  m.grad_y_g = [&p](const Vec& x, const Vec& y) {
    Vec s = Vec::Zero(p.d2);
    for (int i = 0; i < p.n_g; ++i) s += p.grad_y_g_at(x, y, i);
    return Vec(s / p.n_g);
  };
  m.jvp_gxy = [&p](const Vec& x, const Vec& y, const Vec& v) {
    Vec s = Vec::Zero(p.d1);
    for (int i = 0; i < p.n_g; ++i) s += p.jvp_gxy_at(x, y, v, i);
    return Vec(s / p.n_g);
  };
  m.hvp_gyy = [&p](const Vec& x, const Vec& y, const Vec& v) {
    Vec s = Vec::Zero(p.d2);
    for (int i = 0; i < p.n_g; ++i) s += p.hvp_gyy_at(x, y, v, i);
    return Vec(s / p.n_g);
  };
  return m;
}

// Minibatch mean of per-sample inner gradients; counts one gc_g per sample.
inline Vec batch_grad_y_g(const StochasticBilevelOracleSet& p, const Vec& x, const Vec& y,
                          std::span<const int> batch, OracleCounters& c) {
  if (batch.empty()) throw std::invalid_argument("batch_grad_y_g: empty batch");
  Vec s = Vec::Zero(p.d2);
  for (int i : batch) {
    if (i < 0 || i >= p.n_g) throw std::out_of_range("batch_grad_y_g: index outside pool");
    s += p.grad_y_g_at(x, y, i);
  }
  c.gc_g += static_cast<std::int64_t>(batch.size());
  return Vec(s / static_cast<double>(batch.size()));
}

}  // namespace biobred
