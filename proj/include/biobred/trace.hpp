#pragma once

#include <cstdio>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "biobred/counters.hpp"
#include "biobred/types.hpp"

namespace biobred {

/* Metrics for one outer iteration, measured at the iterate the step starts
 * from (so the theorem-style running means over rows average t = 0..T-1).
 * Absent reference oracles leave fields unset; the CSV writer emits them as
 * empty fields, never zeros. Counters are the cumulative totals after the
 * iteration's oracle work. */
struct TraceRow {
  int t = 0;
  std::optional<double> phi;
  std::optional<double> gen_grad_sq;
  std::optional<double> inner_err_sq;
  OracleCounters counters;
  std::optional<double> wall_ms;
};

struct RunTrace {
  std::vector<TraceRow> rows;
  OracleCounters counters;
  Vec final_x;
  Vec final_y;
  int output_index = 0;  // uniform draw from {1..T}
  std::optional<double> final_phi;
  double total_wall_ms = 0.0;
  bool aborted = false;
  std::string abort_reason;

  // debug recording (enabled via SolverConfig) for warm-start assertions
  std::vector<Vec> inner_starts;
  std::vector<Vec> inner_ends;
};

/* Run failure that still carries everything recorded so far, so callers can
 * flush the partial trace before reporting the error. */
class numerical_abort : public std::runtime_error {
 public:
  numerical_abort(const std::string& what, RunTrace partial)
      : std::runtime_error(what), partial_trace(std::move(partial)) {}

  RunTrace partial_trace;
};

namespace detail {
inline std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string csv_opt(const std::optional<double>& v) {
  return v ? csv_double(*v) : std::string();
}
}  // namespace detail

inline constexpr const char* kTraceHeader = "t,phi,gen_grad_sq,inner_err_sq,gc_f,gc_g,jv,hv,wall_ms";

/* Fixed column set and order; wall_ms stays empty unless include_wall is set,
 * which keeps default trace files byte-stable across reruns of a seed. */
inline void write_trace_csv(std::ostream& os, const RunTrace& tr, bool include_wall = false) {
  os << kTraceHeader << '\n';
  for (const TraceRow& r : tr.rows) {
    os << r.t << ',' << detail::csv_opt(r.phi) << ',' << detail::csv_opt(r.gen_grad_sq) << ','
       << detail::csv_opt(r.inner_err_sq) << ',' << r.counters.gc_f << ',' << r.counters.gc_g
       << ',' << r.counters.jv << ',' << r.counters.hv << ','
       << (include_wall ? detail::csv_opt(r.wall_ms) : std::string()) << '\n';
  }
}

// Equality up to wall-clock fields (those are never reproducible).
inline bool traces_equal(const RunTrace& a, const RunTrace& b) {
  if (a.rows.size() != b.rows.size()) return false;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const TraceRow& x = a.rows[i];
    const TraceRow& y = b.rows[i];
    if (x.t != y.t || x.phi != y.phi || x.gen_grad_sq != y.gen_grad_sq ||
        x.inner_err_sq != y.inner_err_sq || !(x.counters == y.counters))
      return false;
  }
  if (a.counters != b.counters || a.output_index != b.output_index ||
      a.final_phi != b.final_phi || a.aborted != b.aborted)
    return false;
  if (a.final_x.size() != b.final_x.size() || a.final_y.size() != b.final_y.size()) return false;
  return a.final_x == b.final_x && a.final_y == b.final_y;
}

}  // namespace biobred
