#include "moegeo/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

#include "moegeo/jacobians.hpp"
#include "moegeo/report_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace moegeo {

namespace {

const std::vector<std::string> kTraceBase = {"iteration", "loss", "sigma1_mean", "sigma1_min", "sigma1_max"};
const std::vector<std::string> kSpectraColumns = {"label", "rank_index", "sigma", "cumulative_energy"};
const std::vector<std::string> kPcaColumns = {"label",      "component_index", "eigenvalue",
                                              "ratio",      "cumulative",      "effective_count"};

std::string condition_label(const std::string& routing, const ModelConfig& cfg) {
  if (routing == "dense") return "dense";
  if (routing == "top_k") return top_k_mode(cfg).label();
  return soft_mode(cfg).label();
}

std::string trace_csv(const TrainingTrace& trace, Index n_experts) {
  std::vector<std::string> header = kTraceBase;
  for (Index e = 0; e < n_experts; ++e) header.push_back("expert_sigma1_" + std::to_string(e));
  for (Index e = 0; e < n_experts; ++e) header.push_back("expert_weight_" + std::to_string(e));
  CsvBuilder csv(header);
  for (const auto& r : trace.records) {
    csv.cell(static_cast<long long>(r.iteration)).cell(r.loss).cell(r.sigma1_mean).cell(r.sigma1_min).cell(r.sigma1_max);
    for (Index e = 0; e < n_experts; ++e) csv.cell(r.expert_sigma1.at(static_cast<size_t>(e)));
    for (Index e = 0; e < n_experts; ++e) csv.cell(r.expert_weight.at(static_cast<size_t>(e)));
    csv.end_row();
  }
  return csv.str();
}

std::string spectra_csv(const std::vector<SpectrumReport<double>>& spectra) {
  CsvBuilder csv(kSpectraColumns);
  for (const auto& s : spectra) {
    for (Index i = 0; i < s.sigmas.size(); ++i) {
      csv.cell(s.label).cell(static_cast<long long>(i + 1)).cell(s.sigmas(i));
      csv.cell(s.cumulative_energy ? std::optional<double>((*s.cumulative_energy)(i)) : std::nullopt);
      csv.end_row();
    }
  }
  return csv.str();
}

std::string pca_csv(const std::vector<PcaReport<double>>& reports) {
  CsvBuilder csv(kPcaColumns);
  for (const auto& r : reports) {
    for (Index i = 0; i < r.eigenvalues.size(); ++i) {
      csv.cell(r.label).cell(static_cast<long long>(i + 1)).cell(r.eigenvalues(i));
      if (r.degenerate()) {
        csv.cell(std::string()).cell(std::string());
      } else {
        csv.cell(r.explained_ratios(i)).cell(r.cumulative(i));
      }
      csv.cell(r.effective_count);
      csv.end_row();
    }
  }
  return csv.str();
}

// E x E grid; rows and columns of absent experts are left blank.
std::string alignment_csv(const AlignmentReport<double>& a, Index n_experts) {
  std::vector<std::string> header = {"expert"};
  for (Index e = 0; e < n_experts; ++e) header.push_back(std::to_string(e));
  CsvBuilder csv(header);
  std::vector<std::optional<Index>> slot(static_cast<size_t>(n_experts));
  for (size_t i = 0; i < a.experts.size(); ++i) slot[static_cast<size_t>(a.experts[i])] = static_cast<Index>(i);
  for (Index r = 0; r < n_experts; ++r) {
    csv.cell(static_cast<long long>(r));
    for (Index c = 0; c < n_experts; ++c) {
      const auto sr = slot[static_cast<size_t>(r)];
      const auto sc = slot[static_cast<size_t>(c)];
      csv.cell(sr && sc ? std::optional<double>(a.matrix(*sr, *sc)) : std::nullopt);
    }
    csv.end_row();
  }
  return csv.str();
}

MatrixXd mean_jacobian(const MatrixXd& batch, const auto& jacobian_at) {
  MatrixXd sum;
  for (Index i = 0; i < batch.rows(); ++i) {
    const MatrixXd j = jacobian_at(VectorXd(batch.row(i).transpose()));
    if (i == 0) {
      sum = j;
    } else {
      sum += j;
    }
  }
  return sum / static_cast<double>(batch.rows());
}

json stats_json(const Stats& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"min", s.min}, {"max", s.max}, {"count", s.count}};
}

template <typename T>
void put_optional(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

void put_optional_stats(json& j, const char* key, const std::optional<Stats>& v) {
  if (v) j[key] = stats_json(*v);
}

std::optional<double> cell_value(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  return parse_number(cell);
}

std::vector<PcaSummary> read_pca_summary(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const size_t c_label = t.column("label");
  const size_t c_cum = t.column("cumulative");
  const size_t c_count = t.column("effective_count");
  std::vector<PcaSummary> out;
  std::vector<std::vector<std::optional<double>>> cumulative;
  for (const auto& row : t.rows) {
    if (out.empty() || out.back().label != row[c_label]) {
      out.push_back({row[c_label], std::nullopt, std::nullopt, parse_number(row[c_count]), false});
      cumulative.emplace_back();
    }
    cumulative.back().push_back(cell_value(row[c_cum]));
  }
  for (size_t i = 0; i < out.size(); ++i) {
    out[i].low_support = out[i].effective_count < kLowSupportCount;
    const auto& cum = cumulative[i];
    if (cum.empty() || !cum.front()) continue;
    VectorXd curve(static_cast<Index>(cum.size()));
    for (size_t k = 0; k < cum.size(); ++k) curve(static_cast<Index>(k)) = *cum[k];
    out[i].k_at_90 = static_cast<double>(components_to_reach(curve, kVarianceThreshold));
    out[i].cum_var_at_10 = curve(std::min<Index>(kCumVarComponents, curve.size()) - 1);
  }
  return out;
}

SeedConditionSummary read_condition_summary(const fs::path& dir, const std::string& label) {
  SeedConditionSummary s;
  s.label = label;
  const CsvTable trace = read_csv(dir / "trace.csv");
  if (trace.rows.empty()) throw std::runtime_error("empty trace in " + dir.string());
  const auto& last = trace.rows.back();
  s.final_loss = parse_number(last[trace.column("loss")]);
  s.sigma1 = parse_number(last[trace.column("sigma1_mean")]);

  std::vector<double> expert_sigmas;
  for (size_t c = 0; c < trace.header.size(); ++c) {
    if (trace.header[c].rfind("expert_sigma1_", 0) == 0) {
      if (auto v = cell_value(last[c])) expert_sigmas.push_back(*v);
    }
  }
  if (!expert_sigmas.empty()) s.mean_expert_sigma1 = Stats::of(expert_sigmas).mean;

  if (fs::exists(dir / "alignment.csv")) {
    const CsvTable a = read_csv(dir / "alignment.csv");
    std::vector<double> off;
    for (size_t r = 0; r < a.rows.size(); ++r) {
      for (size_t c = r + 2; c < a.header.size(); ++c) {  // column 0 is the row label
        if (auto v = cell_value(a.rows[r][c])) off.push_back(*v);
      }
    }
    if (!off.empty()) {
      const Stats st = Stats::of(off);
      s.alignment_mean = st.mean;
      s.alignment_min = st.min;
      s.alignment_max = st.max;
      s.alignment_max_abs = std::max(std::abs(st.min), std::abs(st.max));
    }
  }
  s.pca = read_pca_summary(dir / "pca.csv");
  return s;
}

std::optional<Stats> stats_if_any(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return Stats::of(v);
}

json manifest_schemas() {
  return {{"trace.csv", kTraceBase},
          {"trace.csv#moe_extra", {"expert_sigma1_<e>", "expert_weight_<e>"}},
          {"jacobian_spectra.csv", kSpectraColumns},
          {"pca.csv", kPcaColumns},
          {"alignment.csv", {"expert", "<e>..."}},
          {"inputs.csv", {"x<j>..."}}};
}

// The echoed config omits the output location so that the same experiment
// written to two directories yields identical trees.
ModelConfig location_free(ModelConfig cfg) {
  cfg.output_dir = ".";
  return cfg;
}

}  // namespace

std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

Stats Stats::of(const std::vector<double>& values) {
  Stats s;
  s.count = static_cast<long>(values.size());
  if (values.empty()) return s;
  double total = 0.0;
  s.min = values.front();
  s.max = values.front();
  for (double v : values) {
    total += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
  }
  s.mean = total / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

ProbeResults probe_dense(const MlpParams<double>& p, const MatrixXd& batch) {
  ProbeResults out;
  const MatrixXd j_mean = mean_jacobian(batch, [&](const VectorXd& x) { return mlp_jacobian(p, x); });
  out.spectra.push_back(spectrum_report("dense_mean_jacobian", j_mean));
  out.pca.push_back(dense_pca(p, batch));
  out.pca.push_back(dense_input_pca(batch));
  return out;
}

ProbeResults probe_moe(const MoeParams<double>& p, const MatrixXd& batch, const RoutingMode& mode) {
  ProbeResults out;
  const auto averages = average_expert_jacobians(p, batch, mode);
  for (const auto& a : averages) {
    if (a) out.spectra.push_back(spectrum_report(expert_label(a->expert), a->j_bar));
  }
  const MatrixXd j_eff =
      mean_jacobian(batch, [&](const VectorXd& x) { return moe_effective_jacobian(p, x, mode); });
  out.spectra.push_back(spectrum_report("moe_effective_mean_jacobian", j_eff));
  const auto present = std::count_if(averages.begin(), averages.end(),
                                     [](const auto& a) { return a && a->j_bar.norm() > 0.0; });
  if (present >= 2) out.alignment = alignment_report(averages);
  out.pca = expert_pca_suite(p, batch, mode);
  return out;
}

SeedReport run_seed(const ModelConfig& cfg, std::uint64_t seed) {
  SeedReport report;
  report.seed = seed;
  const Rng rng(seed);
  TrainingResult trained = train(cfg, rng);
  report.inputs_csv = matrix_csv(trained.batch.inputs, "x");
  report.inputs_hash = hex64(fnv1a64(report.inputs_csv));

  report.checkpoint.config = location_free(cfg);
  report.checkpoint.seed = seed;
  report.checkpoint.inputs_hash = report.inputs_hash;
  const MatrixXd& inputs = trained.batch.inputs;

  if (trained.dense) {
    ConditionReport c{"dense", "dense", 0, trained.dense->params.parameter_count(), std::move(trained.dense->trace), {}};
    c.probes = probe_dense(trained.dense->params, inputs);
    report.checkpoint.dense = trained.dense->params;
    report.conditions.push_back(std::move(c));
  }
  auto add_moe = [&](std::optional<TrainedModel<MoeParams<double>>>& m, const std::string& routing,
                     const RoutingMode& mode, std::optional<MoeParams<double>>& slot) {
    if (!m) return;
    Index count = m->params.router.w_r.size() + m->params.router.b_r.size();
    for (const auto& e : m->params.experts) count += e.parameter_count();
    ConditionReport c{condition_label(routing, cfg), routing, m->params.n_experts(), count, std::move(m->trace), {}};
    c.probes = probe_moe(m->params, inputs, mode);
    slot = m->params;
    report.conditions.push_back(std::move(c));
  };
  add_moe(trained.top_k, "top_k", top_k_mode(cfg), report.checkpoint.top_k);
  add_moe(trained.soft, "soft", soft_mode(cfg), report.checkpoint.soft);
  return report;
}

RunReport run_experiment(const ModelConfig& cfg) {
  cfg.validate();
  RunReport report;
  report.config = cfg;
  for (std::uint64_t seed : cfg.seeds) {
    try {
      report.seeds.push_back(run_seed(cfg, seed));
    } catch (const std::exception& e) {
      SeedReport failed;
      failed.seed = seed;
      failed.error = e.what();
      report.seeds.push_back(std::move(failed));
    }
  }
  const bool any_ok = std::any_of(report.seeds.begin(), report.seeds.end(), [](const auto& s) { return !s.error; });
  emit_reports(report, cfg.output_dir);
  if (!any_ok) throw std::runtime_error("run_experiment: every seed failed; see per-seed meta.json");
  return report;
}

void write_probe_files(const fs::path& condition_dir, const ProbeResults& probes, Index n_experts) {
  write_text_file(condition_dir / "jacobian_spectra.csv", spectra_csv(probes.spectra));
  write_text_file(condition_dir / "pca.csv", pca_csv(probes.pca));
  if (probes.alignment) write_text_file(condition_dir / "alignment.csv", alignment_csv(*probes.alignment, n_experts));
}

void emit_reports(RunReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  json cfg_json = location_free(report.config);
  write_text_file(dir / "config.json", cfg_json.dump(2) + "\n");

  for (const auto& seed : report.seeds) {
    const fs::path seed_dir = dir / seed_dir_name(seed.seed);
    json meta = {{"seed", seed.seed}};
    if (seed.error) {
      meta["status"] = "failed";
      meta["error"] = *seed.error;
      write_text_file(seed_dir / "meta.json", meta.dump(2) + "\n");
      continue;
    }
    meta["status"] = "ok";
    meta["inputs_hash"] = seed.inputs_hash;
    meta["sigma1_aggregation"] = "mean over the probe batch; min and max in trace.csv";
    meta["capacity_matching"] = "dense and every expert share d_model x d_hidden; total parameter counts differ";
    json conditions = json::array();
    for (const auto& c : seed.conditions) {
      const fs::path cdir = seed_dir / c.label;
      write_text_file(cdir / "trace.csv", trace_csv(c.trace, c.n_experts));
      write_probe_files(cdir, c.probes, c.n_experts);
      json cmeta = {{"label", c.label},
                    {"routing", c.routing},
                    {"n_experts", c.n_experts},
                    {"parameter_count", c.parameter_count},
                    {"inputs_hash", seed.inputs_hash}};
      if (c.probes.alignment) {
        cmeta["absent_experts"] = c.probes.alignment->absent;
      }
      json low = json::array();
      for (const auto& p : c.probes.pca)
        if (p.low_support) low.push_back(p.label);
      cmeta["low_support"] = low;
      json undefined = json::array();
      for (const auto& s : c.probes.spectra)
        if (!s.cumulative_energy) undefined.push_back(s.label);
      cmeta["undefined_cumulative_energy"] = undefined;
      conditions.push_back(cmeta);
    }
    meta["conditions"] = conditions;
    write_text_file(seed_dir / "inputs.csv", seed.inputs_csv);
    save_checkpoint(seed.checkpoint, seed_dir / "checkpoint.json");
    write_text_file(seed_dir / "meta.json", meta.dump(2) + "\n");
  }

  report.summary = summarize(dir);
  write_text_file(dir / "summary.json", summary_to_json(report.summary).dump(2) + "\n");

  json files = json::array();
  std::vector<fs::path> paths;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    files.push_back({{"path", fs::relative(p, dir).generic_string()}, {"bytes", fs::file_size(p)}});
  }
  json manifest = {{"schema_version", kSchemaVersion},
                   {"files", files},
                   {"columns", manifest_schemas()},
                   {"thread_env", "MOEGEO_THREADS"}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

SummaryStats summarize(const fs::path& dir) {
  const ModelConfig cfg = load_config(dir / "config.json");
  SummaryStats out;
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path seed_dir = dir / seed_dir_name(seed);
    const json meta = json::parse(read_text_file(seed_dir / "meta.json"));
    if (meta.at("status") != "ok") {
      out.seeds_failed.push_back(seed);
      continue;
    }
    out.seeds_completed.push_back(seed);
    SeedSummary ss;
    ss.seed = seed;
    for (const auto& c : meta.at("conditions")) {
      const std::string label = c.at("label");
      ss.conditions[label] = read_condition_summary(seed_dir / label, label);
    }
    if (ss.conditions.count("dense")) {
      const double dense_sigma = ss.conditions.at("dense").sigma1;
      for (auto& [label, c] : ss.conditions) {
        if (c.mean_expert_sigma1 && *c.mean_expert_sigma1 > 0.0) c.sigma1_ratio = dense_sigma / *c.mean_expert_sigma1;
      }
    }
    out.per_seed.push_back(std::move(ss));
  }

  std::map<std::string, std::vector<const SeedConditionSummary*>> by_label;
  for (const auto& s : out.per_seed)
    for (const auto& [label, c] : s.conditions) by_label[label].push_back(&c);

  for (const auto& [label, items] : by_label) {
    ConditionSummary cs;
    cs.label = label;
    std::vector<double> loss, sigma, expert, ratio, amean, amin, amax, dense_sigma;
    std::map<std::string, std::vector<double>> k90, cv10;
    double max_abs = -1.0;
    for (const auto* c : items) {
      loss.push_back(c->final_loss);
      sigma.push_back(c->sigma1);
      if (c->mean_expert_sigma1) expert.push_back(*c->mean_expert_sigma1);
      if (c->sigma1_ratio) ratio.push_back(*c->sigma1_ratio);
      if (c->alignment_mean) {
        amean.push_back(*c->alignment_mean);
        amin.push_back(*c->alignment_min);
        amax.push_back(*c->alignment_max);
        max_abs = std::max(max_abs, *c->alignment_max_abs);
      }
      std::vector<double> expert_k, expert_cv;
      for (const auto& p : c->pca) {
        if (p.low_support) {
          ++cs.low_support_excluded;
          continue;
        }
        if (!p.k_at_90) continue;
        if (p.label.rfind("expert_", 0) == 0) {
          expert_k.push_back(*p.k_at_90);
          expert_cv.push_back(*p.cum_var_at_10);
        } else {
          k90[p.label].push_back(*p.k_at_90);
          cv10[p.label].push_back(*p.cum_var_at_10);
        }
      }
      if (!expert_k.empty()) {
        k90["experts"].push_back(Stats::of(expert_k).mean);
        cv10["experts"].push_back(Stats::of(expert_cv).mean);
      }
    }
    cs.final_loss = Stats::of(loss);
    cs.sigma1 = Stats::of(sigma);
    cs.mean_expert_sigma1 = stats_if_any(expert);
    cs.sigma1_ratio = stats_if_any(ratio);
    cs.alignment_mean = stats_if_any(amean);
    cs.alignment_min = stats_if_any(amin);
    cs.alignment_max = stats_if_any(amax);
    if (max_abs >= 0.0) cs.alignment_max_abs = max_abs;
    if (cs.mean_expert_sigma1 && by_label.count("dense") && cs.mean_expert_sigma1->mean > 0.0) {
      // Ratio of across-seed means over the seeds where both conditions ran.
      std::vector<double> d, e;
      for (const auto& s : out.per_seed) {
        auto dc = s.conditions.find("dense");
        auto mc = s.conditions.find(label);
        if (dc != s.conditions.end() && mc != s.conditions.end() && mc->second.mean_expert_sigma1) {
          d.push_back(dc->second.sigma1);
          e.push_back(*mc->second.mean_expert_sigma1);
        }
      }
      if (!d.empty()) cs.sigma1_ratio_of_means = Stats::of(d).mean / Stats::of(e).mean;
    }
    for (const auto& [group, v] : k90) cs.k_at_90[group] = Stats::of(v);
    for (const auto& [group, v] : cv10) cs.cum_var_at_10[group] = Stats::of(v);
    out.conditions[label] = std::move(cs);
  }
  return out;
}

nlohmann::json summary_to_json(const SummaryStats& s) {
  json conditions = json::object();
  for (const auto& [label, c] : s.conditions) {
    json j = {{"final_loss", stats_json(c.final_loss)}, {"sigma1", stats_json(c.sigma1)}};
    put_optional_stats(j, "mean_expert_sigma1", c.mean_expert_sigma1);
    put_optional_stats(j, "sigma1_ratio", c.sigma1_ratio);
    put_optional(j, "sigma1_ratio_of_means", c.sigma1_ratio_of_means);
    put_optional_stats(j, "alignment_off_diagonal_mean", c.alignment_mean);
    put_optional_stats(j, "alignment_off_diagonal_min", c.alignment_min);
    put_optional_stats(j, "alignment_off_diagonal_max", c.alignment_max);
    put_optional(j, "alignment_off_diagonal_max_abs", c.alignment_max_abs);
    json k = json::object();
    for (const auto& [group, st] : c.k_at_90) k[group] = stats_json(st);
    json cv = json::object();
    for (const auto& [group, st] : c.cum_var_at_10) cv[group] = stats_json(st);
    j["k_at_90"] = k;
    j["cum_var_at_10"] = cv;
    j["low_support_excluded"] = c.low_support_excluded;
    conditions[label] = j;
  }

  json per_seed = json::array();
  for (const auto& seed : s.per_seed) {
    json cj = json::object();
    for (const auto& [label, c] : seed.conditions) {
      json j = {{"final_loss", c.final_loss}, {"sigma1", c.sigma1}};
      put_optional(j, "mean_expert_sigma1", c.mean_expert_sigma1);
      put_optional(j, "sigma1_ratio", c.sigma1_ratio);
      put_optional(j, "alignment_off_diagonal_mean", c.alignment_mean);
      put_optional(j, "alignment_off_diagonal_min", c.alignment_min);
      put_optional(j, "alignment_off_diagonal_max", c.alignment_max);
      json pca = json::array();
      for (const auto& p : c.pca) {
        json pj = {{"label", p.label}, {"effective_count", p.effective_count}, {"low_support", p.low_support}};
        put_optional(pj, "k_at_90", p.k_at_90);
        put_optional(pj, "cum_var_at_10", p.cum_var_at_10);
        pca.push_back(pj);
      }
      j["pca"] = pca;
      cj[label] = j;
    }
    per_seed.push_back({{"seed", seed.seed}, {"conditions", cj}});
  }

  return {{"schema_version", kSchemaVersion},
          {"seed_count", s.seeds_completed.size()},
          {"seeds_completed", s.seeds_completed},
          {"seeds_failed", s.seeds_failed},
          {"sigma1_aggregation", "mean over the probe batch"},
          {"conditions", conditions},
          {"per_seed", per_seed}};
}

void probe_checkpoint(const fs::path& checkpoint, const fs::path& out_dir) {
  const Checkpoint c = load_checkpoint(checkpoint);
  const Batch batch = make_batch(c.config, Rng(c.seed));
  const std::string hash = hex64(fnv1a64(matrix_csv(batch.inputs, "x")));
  if (hash != c.inputs_hash) {
    throw std::runtime_error("probe: rebuilt inputs do not match the checkpoint fingerprint " + c.inputs_hash);
  }
  const fs::path seed_dir = out_dir / seed_dir_name(c.seed);
  if (c.dense) write_probe_files(seed_dir / "dense", probe_dense(*c.dense, batch.inputs), 0);
  if (c.top_k) {
    const RoutingMode mode = top_k_mode(c.config);
    write_probe_files(seed_dir / mode.label(), probe_moe(*c.top_k, batch.inputs, mode), c.top_k->n_experts());
  }
  if (c.soft) {
    const RoutingMode mode = soft_mode(c.config);
    write_probe_files(seed_dir / mode.label(), probe_moe(*c.soft, batch.inputs, mode), c.soft->n_experts());
  }
}

}  // namespace moegeo
