// moegeo: train dense / top-k / soft MoE models and write geometry reports.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "moegeo/config.hpp"
#include "moegeo/harness.hpp"
#include "moegeo/oracles.hpp"

namespace {

int cmd_run(const std::optional<std::string>& config_path, const std::vector<std::uint64_t>& seeds,
            const std::vector<std::string>& routing, const std::optional<int>& iterations,
            const std::optional<std::string>& out) {
  moegeo::ModelConfig cfg;
  if (config_path) cfg = moegeo::load_config(*config_path);
  if (!seeds.empty()) cfg.seeds = seeds;
  if (!routing.empty()) cfg.routing = routing;
  if (iterations) cfg.iterations = *iterations;
  if (out) cfg.output_dir = *out;
  cfg.validate();

  const moegeo::RunReport report = moegeo::run_experiment(cfg);
  for (const auto& s : report.seeds) {
    if (s.error) std::cerr << "seed " << s.seed << " failed: " << *s.error << "\n";
  }
  std::cout << "wrote " << cfg.output_dir.string() << " (" << report.summary.seeds_completed.size() << " of "
            << cfg.seeds.size() << " seeds completed)\n";
  return 0;
}

int cmd_check() {
  const auto results = moegeo::run_oracle_suite();
  int passed = 0;
  for (const auto& r : results) {
    std::printf("%-28s %s  max_error=%.3g  tol=%.3g  cases=%ld\n", r.name.c_str(), r.passed ? "PASS" : "FAIL",
                r.max_error, r.tolerance, r.cases);
    passed += r.passed ? 1 : 0;
  }
  std::printf("%d/%zu checks passed\n", passed, results.size());
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}

int cmd_summarize(const std::string& dir) {
  std::cout << moegeo::summary_to_json(moegeo::summarize(dir)).dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense vs mixture-of-experts Jacobian and representation geometry"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Train all conditions for every seed and write reports");
  std::optional<std::string> config_path;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> routing;
  std::optional<int> iterations;
  std::optional<std::string> out;
  run->add_option("--config", config_path, "JSON config file; absent keys take defaults");
  run->add_option("--seeds", seeds, "Override the seed list")->delimiter(',');
  run->add_option("--routing", routing, "Conditions to run: dense, top_k, soft")
      ->delimiter(',')
      ->check(CLI::IsMember({"dense", "top_k", "soft"}));
  run->add_option("--iterations", iterations, "Override the iteration count");
  run->add_option("--out", out, "Output directory");

  auto* probe = app.add_subcommand("probe", "Re-run the probes on a saved checkpoint");
  std::string checkpoint;
  std::string probe_out;
  probe->add_option("--checkpoint", checkpoint, "checkpoint.json written by run")->required();
  probe->add_option("--out", probe_out, "Output directory")->required();

  auto* check = app.add_subcommand("check", "Run the built-in oracle checks");

  auto* summarize = app.add_subcommand("summarize", "Recompute summary statistics from a run directory");
  std::string summarize_dir;
  summarize->add_option("dir", summarize_dir, "Run output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, seeds, routing, iterations, out);
    if (*probe) {
      moegeo::probe_checkpoint(checkpoint, probe_out);
      return 0;
    }
    if (*check) return cmd_check();
    if (*summarize) return cmd_summarize(summarize_dir);
  } catch (const std::exception& e) {
    std::cerr << "moegeo: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
