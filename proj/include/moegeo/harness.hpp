#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moegeo/checkpoint.hpp"
#include "moegeo/config.hpp"
#include "moegeo/probes.hpp"
#include "moegeo/training.hpp"

namespace moegeo {

inline constexpr int kSchemaVersion = 1;

/// Geometry probes of one trained model on the probe batch.
struct ProbeResults {
  std::vector<SpectrumReport<double>> spectra;
  std::optional<AlignmentReport<double>> alignment;
  std::vector<PcaReport<double>> pca;
};

/// Dense: spectrum of the batch-mean Jacobian, PCA of the post-activation
/// hidden layer ("dense_hidden") and of the raw inputs ("dense_input").
ProbeResults probe_dense(const MlpParams<double>& p, const MatrixXd& batch);

/// MoE: spectra of the gate-weighted average expert Jacobians and of the
/// batch-mean effective Jacobian, cross-expert alignment, expert input PCA.
ProbeResults probe_moe(const MoeParams<double>& p, const MatrixXd& batch, const RoutingMode& mode);

struct ConditionReport {
  std::string label;    // output directory name: dense, top2, soft
  std::string routing;  // config name: dense, top_k, soft
  Index n_experts = 0;
  Index parameter_count = 0;
  TrainingTrace trace;
  ProbeResults probes;
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::optional<std::string> error;  // set when the seed failed
  std::string inputs_csv;
  std::string inputs_hash;
  std::vector<ConditionReport> conditions;
  Checkpoint checkpoint;
};

struct Stats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
  double min = 0.0;
  double max = 0.0;
  long count = 0;

  static Stats of(const std::vector<double>& values);
};

struct PcaSummary {
  std::string label;
  std::optional<double> k_at_90;
  std::optional<double> cum_var_at_10;
  double effective_count = 0.0;
  bool low_support = false;
};

/// Everything the summary uses for one (seed, condition), read back from CSV.
struct SeedConditionSummary {
  std::string label;
  double final_loss = 0.0;
  double sigma1 = 0.0;
  std::optional<double> mean_expert_sigma1;
  std::optional<double> sigma1_ratio;  // dense sigma1 / mean expert sigma1
  std::optional<double> alignment_mean;
  std::optional<double> alignment_min;
  std::optional<double> alignment_max;
  std::optional<double> alignment_max_abs;
  std::vector<PcaSummary> pca;
};

struct SeedSummary {
  std::uint64_t seed = 0;
  std::map<std::string, SeedConditionSummary> conditions;
};

struct ConditionSummary {
  std::string label;
  Stats final_loss;
  Stats sigma1;
  std::optional<Stats> mean_expert_sigma1;
  std::optional<Stats> sigma1_ratio;
  std::optional<double> sigma1_ratio_of_means;
  std::optional<Stats> alignment_mean;
  std::optional<Stats> alignment_min;
  std::optional<Stats> alignment_max;
  std::optional<double> alignment_max_abs;
  // Keyed by PCA group: "experts" (per-seed mean over supported experts),
  // "dense_hidden", "dense_input".
  std::map<std::string, Stats> k_at_90;
  std::map<std::string, Stats> cum_var_at_10;
  long low_support_excluded = 0;
};

/// Across-seed aggregates over completed seeds only.
struct SummaryStats {
  std::vector<std::uint64_t> seeds_completed;
  std::vector<std::uint64_t> seeds_failed;
  std::map<std::string, ConditionSummary> conditions;
  std::vector<SeedSummary> per_seed;
};

nlohmann::json summary_to_json(const SummaryStats& s);

struct RunReport {
  ModelConfig config;
  std::vector<SeedReport> seeds;
  SummaryStats summary;
};

/// Trains and probes every configured condition for one seed.
SeedReport run_seed(const ModelConfig& cfg, std::uint64_t seed);

/// Runs all seeds, then emits every report into cfg.output_dir. A failing
/// seed is recorded and skipped; failure of every seed throws.
RunReport run_experiment(const ModelConfig& cfg);

/// Writes per-seed CSV/JSON files, then summary.json (recomputed from the
/// written CSVs) and manifest.json. Fills report.summary.
void emit_reports(RunReport& report, const std::filesystem::path& dir);

/// jacobian_spectra.csv, pca.csv and (MoE only) alignment.csv.
void write_probe_files(const std::filesystem::path& condition_dir, const ProbeResults& probes, Index n_experts);

/// Recomputes SummaryStats from the raw files of a finished run directory.
SummaryStats summarize(const std::filesystem::path& dir);

/// Loads a checkpoint written by a run, rebuilds its batch, re-runs the
/// probes and writes them under out_dir/seed_<s>/<condition>/.
void probe_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir);

std::string seed_dir_name(std::uint64_t seed);

}  // namespace moegeo
