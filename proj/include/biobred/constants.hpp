#pragma once

#include <cmath>
#include <stdexcept>

namespace biobred {

/* Smoothness description of a bilevel problem instance.
 *
 *   L      Lipschitz constant of all first partial gradients (and an upper
 *          bound on inner curvature and on the mixed second derivative)
 *   mu     strong-convexity modulus of the inner objective in y
 *   c_fy   bound on |grad_y f| over the declared test region
 *   l_gxy  Lipschitz constant of the mixed second derivative
 *   l_gyy  Lipschitz constant of the inner Hessian
 *
 * Any upper bound is a valid constant; declared values may exceed the tight
 * ones, which only loosens derived error envelopes. */
struct SmoothnessBase {
  double L = 1.0;
  double mu = 1.0;
  double c_fy = 1.0;
  double l_gxy = 1.0;
  double l_gyy = 1.0;

  void validate() const {
    if (!(L > 0.0) || !(mu > 0.0) || !(c_fy > 0.0) || !(l_gxy > 0.0) || !(l_gyy > 0.0))
      throw std::invalid_argument("SmoothnessBase: all base constants must be positive");
    if (L < mu) throw std::invalid_argument("SmoothnessBase: need L >= mu");
  }
};

/* Constants derived from the base set.
 *
 *   kappa  condition number L/mu
 *   l_y    Lipschitz constant of x -> y*(x)'s gradient coupling
 *          (smoothness of the inner solution map composition)
 *   l_f    Lipschitz constant of the hypergradient of F(x) = f(x, y*(x))
 *   l1..l3 coefficients of the truncated-unroll hypergradient error envelope
 *   l_k_sq squared mean-square Lipschitz constant of the truncated Neumann
 *          estimator, for the unroll depth `series_len` it was derived with
 */
struct SmoothnessDerived {
  double kappa = 0.0;
  double l_y = 0.0;
  double l_f = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
  double l_k_sq = 0.0;
};

inline SmoothnessDerived derive_constants(const SmoothnessBase& b, int series_len) {
  b.validate();
  if (series_len < 1) throw std::invalid_argument("derive_constants: series_len must be >= 1");
  const double L = b.L, mu = b.mu, c = b.c_fy, gxy = b.l_gxy, gyy = b.l_gyy;
  const double K = static_cast<double>(series_len);
  SmoothnessDerived d;
  d.kappa = L / mu;
  d.l_y = L + L * L / mu + c * gxy / mu + gyy * c * L / (mu * mu);
  d.l_f = L + (2.0 * L * L + gxy * c * c) / mu +
          (gyy * c * L + L * L * L + gxy * c * L) / (mu * mu) +
          gyy * c * L * L / (mu * mu * mu);
  d.l1 = L * (L + mu) / mu;
  d.l2 = 2.0 * c * (mu * gxy + L * gyy) / (mu * mu);
  d.l3 = L * c / mu;
  // evaluated verbatim; degenerates to +inf when L == mu (the K^3 term's
  // denominator vanishes), which the conditioning-driven callers never hit
  const double denom = 2.0 * mu * L - mu * mu;
  d.l_k_sq = 2.0 * L * L + 6.0 * std::pow(L, 4) * K / denom +
             6.0 * c * c * gxy * gxy * K / denom +
             6.0 * std::pow(L, 4) * K * K * K * gyy * gyy /
                 ((L - mu) * (L - mu) * denom);
  return d;
}

struct SmoothnessConstants {
  SmoothnessBase base;
  int series_len = 1;
  SmoothnessDerived derived;

  static SmoothnessConstants make(const SmoothnessBase& b, int series_len) {
    return SmoothnessConstants{b, series_len, derive_constants(b, series_len)};
  }
};

}  // namespace biobred
