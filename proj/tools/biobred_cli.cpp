// Experiment runner: seeded solver runs emitting CSV traces plus a JSON
// summary, a trace comparison table, and a config dry-run validator.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 numerical abort
// (partial trace flushed before exiting).

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "biobred/biobred.hpp"

namespace {

// --out flag > config file out_dir > BIOBRED_OUT > ./runs
std::string resolve_out_dir(const std::string& flag_value, const std::string& config_value) {
  if (!flag_value.empty()) return flag_value;
  if (!config_value.empty()) return config_value;
  if (const char* env = std::getenv("BIOBRED_OUT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bilevel optimization experiment runner"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_flag;
  std::string algorithm_flag;
  std::vector<std::uint64_t> seed_flags;
  int outer_iters_flag = 0;

  CLI::App* run = app.add_subcommand("run", "execute one run per seed and write traces");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--seed", seed_flags, "replace the config seed list");
  run->add_option("--out", out_flag, "output directory");
  run->add_option("--algorithm", algorithm_flag, "override the algorithm")
      ->check(CLI::IsMember({"biobred", "sbiobred", "asbiobred"}));
  run->add_option("--outer-iters", outer_iters_flag, "override the outer iteration count")
      ->check(CLI::PositiveNumber);

  std::vector<std::string> trace_paths;
  std::string metric = "phi";
  double threshold = -std::numeric_limits<double>::infinity();
  CLI::App* compare = app.add_subcommand("compare", "summarize trace files side by side");
  compare->add_option("traces", trace_paths, "trace CSV files")->required()->expected(-2);
  compare->add_option("--metric", metric, "column to compare (phi, gen_grad_sq, inner_err_sq)");
  compare->add_option("--threshold", threshold,
                      "target value for samples-to-target (unset: never reached)");
  std::string compare_csv_path;
  compare->add_option("--csv", compare_csv_path, "also write the comparison as CSV here");

  CLI::App* validate = app.add_subcommand("validate", "parse and dry-run check a config");
  validate->add_option("--config", config_path, "experiment config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) {
      biobred::ExperimentConfig cfg = biobred::load_config(config_path);
      if (!algorithm_flag.empty()) cfg.algorithm = algorithm_flag;
      if (!seed_flags.empty()) cfg.seeds = seed_flags;
      if (outer_iters_flag > 0) cfg.solver.outer_iters = outer_iters_flag;
      const std::string out_dir = resolve_out_dir(out_flag, cfg.out_dir);
      const biobred::ExperimentResult res = biobred::run_experiment(cfg, out_dir);
      for (const std::string& p : res.trace_paths) std::cout << p << '\n';
      std::cout << res.summary_path << '\n';
      return 0;
    }
    if (compare->parsed()) {
      const biobred::CompareResult res = biobred::compare_runs(trace_paths, metric, threshold);
      std::cout << biobred::compare_text(res);
      if (!compare_csv_path.empty()) {
        std::ofstream out(compare_csv_path);
        if (!out) throw biobred::config_error("compare: cannot open " + compare_csv_path);
        out << biobred::compare_csv(res);
      } else {
        std::cout << '\n' << biobred::compare_csv(res);
      }
      return 0;
    }
    // validate: full parse, problem construction, solver checks, no run
    biobred::ExperimentConfig cfg = biobred::load_config(config_path);
    biobred::BuiltProblem prob = biobred::build_problem(cfg);
    biobred::SolverConfig sc = cfg.solver;
    if (sc.mirror.kind == biobred::MirrorMap::Kind::adaptive && sc.mirror.ema.size() == 0)
      sc.mirror = biobred::MirrorMap::adaptive(prob.stochastic.d1, sc.mirror.beta, sc.mirror.rho0);
    sc.resolve_starts(prob.stochastic.d1, prob.stochastic.d2);
    try {
      if (cfg.algorithm == "biobred")
        sc.validate_common(prob.stochastic.d1, prob.stochastic.d2);
      else
        sc.validate_stochastic(prob.stochastic);
    } catch (const std::invalid_argument& e) {
      throw biobred::config_error(e.what());
    }
    std::cout << "ok: " << cfg.algorithm << " on " << prob.kind << " (d1=" << prob.stochastic.d1
              << ", d2=" << prob.stochastic.d2 << ", seeds=" << cfg.seeds.size() << ")\n";
    return 0;
  } catch (const biobred::numerical_abort& e) {
    std::cerr << "numerical abort: " << e.what() << " (partial trace flushed)\n";
    return 3;
  } catch (const biobred::config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
