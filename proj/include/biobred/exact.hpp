#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include "biobred/problem.hpp"
#include "biobred/types.hpp"

namespace biobred {

struct CgResult {
  Vec solution;
  int iterations = 0;
  double residual = 0.0;
};

/* Conjugate gradients on an SPD operator, absolute residual stopping rule.
 * Throws if the cap is hit before |r| <= tol; for strongly convex inner
 * Hessians a cap of 10*d2 is ample (exact-arithmetic CG finishes in d2
 * steps), so non-convergence signals an ill-conditioned or non-SPD operator. */
inline CgResult cg_solve(const std::function<Vec(const Vec&)>& apply, const Vec& rhs,
                         double tol, int max_iter) {
  if (tol <= 0.0) throw std::invalid_argument("cg_solve: tol must be positive");
  Vec x = Vec::Zero(rhs.size());
  Vec r = rhs;
  double rn = r.norm();
  if (rn <= tol) return {x, 0, rn};
  Vec p = r;
  double rs = r.squaredNorm();
  for (int it = 1; it <= max_iter; ++it) {
    const Vec ap = apply(p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0))
      throw std::runtime_error("cg_solve: operator not positive definite along search direction");
    const double alpha = rs / pap;
    x += alpha * p;
    r -= alpha * ap;
    const double rs_next = r.squaredNorm();
    rn = std::sqrt(rs_next);
    if (rn <= tol) return {x, it, rn};
    p = r + (rs_next / rs) * p;
    rs = rs_next;
  }
  throw std::runtime_error("cg_solve: no convergence in " + std::to_string(max_iter) +
                           " iterations (residual " + std::to_string(rn) + ")");
}

/* Hypergradient of F(x) = f(x, y*(x)) at a converged inner solution:
 *
 *   grad F = grad_x f - (d^2g/dxdy) [d^2g/dy^2]^{-1} grad_y f,
 *
 * all second-order terms evaluated at (x, ystar) and applied through
 * products, with the linear solve done by CG to `solve_tol`. Reference-path
 * computation: does not touch oracle counters. */
inline Vec exact_hypergradient(const BilevelOracleSet& p, const Vec& x, const Vec& ystar,
                               double solve_tol = 1e-10) {
  const double stat = p.grad_y_g(x, ystar).norm();
  if (stat > 1e3 * solve_tol + 1e-8)
    throw std::invalid_argument(
        "exact_hypergradient: ystar is not an inner solution (|grad_y g| = " +
        std::to_string(stat) + ")");
  const Vec gyf = p.grad_y_f(x, ystar);
  auto apply = [&](const Vec& v) { return p.hvp_gyy(x, ystar, v); };
  const CgResult cg = cg_solve(apply, gyf, solve_tol, 10 * p.d2);
  return p.grad_x_f(x, ystar) - p.jvp_gxy(x, ystar, cg.solution);
}

/* Same algebra at an arbitrary y (the hypergradient surrogate): unbiased
 * target of the stochastic estimators, equal to grad F when y = y*(x). */
inline Vec surrogate_gradient(const BilevelOracleSet& p, const Vec& x, const Vec& y,
                              double solve_tol = 1e-10) {
  const Vec gyf = p.grad_y_f(x, y);
  auto apply = [&](const Vec& v) { return p.hvp_gyy(x, y, v); };
  const CgResult cg = cg_solve(apply, gyf, solve_tol, 10 * p.d2);
  return p.grad_x_f(x, y) - p.jvp_gxy(x, y, cg.solution);
}

struct InnerSolveResult {
  Vec y;
  std::int64_t iterations = 0;
};

/* Gradient descent on y at fixed x until |grad_y g| <= tol. Requires
 * 0 < step < 1/L for the declared inner smoothness L; exhausting the cap
 * signals mis-declared (step, L, mu). */
inline InnerSolveResult inner_solve_high_precision(const BilevelOracleSet& p, const Vec& x,
                                                   const Vec& y0, double step, double tol,
                                                   std::int64_t max_iter = 2000000) {
  if (step <= 0.0) throw std::invalid_argument("inner_solve_high_precision: step must be positive");
  if (tol <= 0.0) throw std::invalid_argument("inner_solve_high_precision: tol must be positive");
  Vec y = y0;
  for (std::int64_t it = 0; it <= max_iter; ++it) {
    const Vec g = p.grad_y_g(x, y);
    if (g.norm() <= tol) return {y, it};
    y -= step * g;
  }
  throw std::runtime_error(
      "inner_solve_high_precision: cap exhausted; step/tolerance inconsistent with the "
      "declared smoothness");
}

}  // namespace biobred
