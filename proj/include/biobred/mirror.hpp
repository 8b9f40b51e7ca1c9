#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "biobred/types.hpp"

namespace biobred {

/* Mirror maps are diagonal quadratics psi(x) = 1/2 sum_i h_i x_i^2, in three
 * flavors:
 *
 *   euclidean  h = 1            (modulus rho = 1)
 *   diagonal   h fixed          (rho = min_i h_i)
 *   adaptive   h_i = sqrt(ema_i) + rho0, ema updated per step from the
 *              squared gradient estimate (rho = rho0, the declared floor)
 */
struct MirrorMap {
  enum class Kind { euclidean, diagonal, adaptive };

  Kind kind = Kind::euclidean;
  Vec diag;           // diagonal kind only
  Vec ema;            // adaptive kind only
  double beta = 0.99; // adaptive decay
  double rho0 = 0.1;  // adaptive floor

  static MirrorMap euclidean() { return MirrorMap{}; }

  static MirrorMap diagonal(Vec h) {
    MirrorMap m;
    m.kind = Kind::diagonal;
    m.diag = std::move(h);
    return m;
  }

  static MirrorMap adaptive(int dim, double beta = 0.99, double rho0 = 0.1) {
    MirrorMap m;
    m.kind = Kind::adaptive;
    m.ema = Vec::Zero(dim);
    m.beta = beta;
    m.rho0 = rho0;
    return m;
  }

  double rho() const {
    switch (kind) {
      case Kind::euclidean: return 1.0;
      case Kind::diagonal: return diag.size() > 0 ? diag.minCoeff() : 1.0;
      case Kind::adaptive: return rho0;
    }
    return 1.0;
  }

  Vec effective_diag(int dim) const {
    switch (kind) {
      case Kind::euclidean: return Vec::Ones(dim);
      case Kind::diagonal: return diag;
      case Kind::adaptive: return Vec(ema.array().sqrt() + rho0);
    }
    return Vec::Ones(dim);
  }

  void validate(int dim) const {
    if (kind == Kind::diagonal) {
      if (diag.size() != dim) throw std::invalid_argument("MirrorMap: diagonal size mismatch");
      if (!(diag.minCoeff() > 0.0))
        throw std::invalid_argument("MirrorMap: diagonal entries must be positive");
    }
    if (kind == Kind::adaptive) {
      if (ema.size() != dim) throw std::invalid_argument("MirrorMap: ema size mismatch");
      if (!(ema.minCoeff() >= 0.0))
        throw std::invalid_argument("MirrorMap: ema entries must be non-negative");
      if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("MirrorMap: beta in (0,1)");
      if (!(rho0 > 0.0)) throw std::invalid_argument("MirrorMap: rho0 must be positive");
    }
  }
};

struct Regularizer {
  enum class Kind { none, l1 };

  Kind kind = Kind::none;
  double weight = 0.0;

  static Regularizer none() { return Regularizer{}; }

  static Regularizer l1(double w) { return Regularizer{Kind::l1, w}; }

  double value(const Vec& x) const {
    return kind == Kind::l1 ? weight * x.lpNorm<1>() : 0.0;
  }

  void validate() const {
    if (kind == Kind::l1 && !(weight > 0.0))
      throw std::invalid_argument("Regularizer: l1 weight must be positive");
  }
};

struct FeasibleSet {
  enum class Kind { all, box };

  Kind kind = Kind::all;
  Vec lo, hi;

  static FeasibleSet all() { return FeasibleSet{}; }

  static FeasibleSet box(Vec lo, Vec hi) {
    FeasibleSet s;
    s.kind = Kind::box;
    s.lo = std::move(lo);
    s.hi = std::move(hi);
    return s;
  }

  bool contains(const Vec& x, double tol = 0.0) const {
    if (kind == Kind::all) return true;
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (x[i] < lo[i] - tol || x[i] > hi[i] + tol) return false;
    return true;
  }

  void validate(int dim) const {
    if (kind != Kind::box) return;
    if (lo.size() != dim || hi.size() != dim)
      throw std::invalid_argument("FeasibleSet: box bound size mismatch");
    for (int i = 0; i < dim; ++i)
      if (!(lo[i] <= hi[i])) throw std::invalid_argument("FeasibleSet: need lo <= hi");
  }
};

// D_psi(a, b) = psi(a) - psi(b) - <grad psi(b), a - b> = 1/2 sum h_i (a_i - b_i)^2
inline double bregman_divergence(const MirrorMap& map, const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("bregman_divergence: size mismatch");
  map.validate(static_cast<int>(a.size()));
  const Vec h = map.effective_diag(static_cast<int>(a.size()));
  return 0.5 * (h.array() * (a - b).array().square()).sum();
}

namespace detail {
inline double soft_threshold(double z, double thr) {
  const double mag = std::abs(z) - thr;
  return mag > 0.0 ? (z > 0.0 ? mag : -mag) : 0.0;
}
}  // namespace detail

/* One proximal mirror step
 *
 *   x+ = argmin_{x in X} <w, x> + h(x) + (1/gamma) D_psi(x, x_t)
 *
 * which for diagonal psi, h = l1 weight and box X separates per coordinate
 * into clamp(soft_threshold(x_i - gamma w_i / h_i, gamma l1 / h_i), lo, hi).
 * Clamping the unconstrained scalar solution is exact because each scalar
 * objective is convex. */
inline Vec mirror_step(const MirrorMap& map, const FeasibleSet& set, const Regularizer& reg,
                       const Vec& x_t, const Vec& w, double gamma) {
  const int dim = static_cast<int>(x_t.size());
  if (w.size() != x_t.size()) throw std::invalid_argument("mirror_step: size mismatch");
  if (!(gamma > 0.0)) throw std::invalid_argument("mirror_step: gamma must be positive");
  map.validate(dim);
  set.validate(dim);
  reg.validate();
  const Vec h = map.effective_diag(dim);
  const double l1 = reg.kind == Regularizer::Kind::l1 ? reg.weight : 0.0;
  Vec out(dim);
  for (int i = 0; i < dim; ++i) {
    double z = x_t[i] - gamma * w[i] / h[i];
    if (l1 > 0.0) z = detail::soft_threshold(z, gamma * l1 / h[i]);
    if (set.kind == FeasibleSet::Kind::box) z = std::clamp(z, set.lo[i], set.hi[i]);
    out[i] = z;
  }
  return out;
}

// ema' = beta ema + (1 - beta) grad^2, applied before the step that uses it
inline MirrorMap adaptive_update(MirrorMap state, const Vec& grad_estimate) {
  if (state.kind != MirrorMap::Kind::adaptive)
    throw std::invalid_argument("adaptive_update: map is not adaptive");
  state.validate(static_cast<int>(grad_estimate.size()));
  state.ema = state.beta * state.ema.array() +
              (1.0 - state.beta) * grad_estimate.array().square();
  return state;
}

/* Generalized projected-gradient residual: the mirror step taken with the
 * exact hypergradient, rescaled. Zero exactly at stationary points of
 * F + h over X; equals grad F for the euclidean/unconstrained/smooth case. */
inline Vec generalized_gradient(const MirrorMap& map, const FeasibleSet& set,
                                const Regularizer& reg, const Vec& x_t, const Vec& exact_grad,
                                double gamma) {
  const Vec x_plus = mirror_step(map, set, reg, x_t, exact_grad, gamma);
  return (x_t - x_plus) / gamma;
}

}  // namespace biobred
