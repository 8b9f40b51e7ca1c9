#pragma once

#include <cstdint>

namespace biobred {

/* Per-sample oracle evaluation counts. gc_f / gc_g count gradient (and value)
 * evaluations of the outer / inner objective, jv counts mixed
 * second-derivative products, hv counts inner Hessian-vector products.
 * Stochastic estimators count every per-sample evaluation they perform;
 * deterministic solvers count each full-oracle call as one. Sample indices
 * that are drawn but never evaluated do not count. */
struct OracleCounters {
  std::int64_t gc_f = 0;
  std::int64_t gc_g = 0;
  std::int64_t jv = 0;
  std::int64_t hv = 0;

  OracleCounters& operator+=(const OracleCounters& o) {
    gc_f += o.gc_f;
    gc_g += o.gc_g;
    jv += o.jv;
    hv += o.hv;
    return *this;
  }

  friend bool operator==(const OracleCounters&, const OracleCounters&) = default;
};

}  // namespace biobred
