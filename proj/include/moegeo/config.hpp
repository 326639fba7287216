#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace moegeo {

/// Experiment configuration. Absent JSON keys take these defaults.
struct ModelConfig {
  int d_model = 64;
  int d_hidden = 128;
  int n_experts = 8;
  int k = 2;
  int batch_size = 512;
  int iterations = 1000;
  double lr = 1e-3;
  double temperature = 1.0;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  int log_every = 10;
  std::filesystem::path output_dir = "moegeo_out";
  // Subset of {"dense", "top_k", "soft"}; order is irrelevant.
  std::vector<std::string> routing = {"dense", "top_k", "soft"};

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
  bool runs(const std::string& condition) const;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

/// Reads and validates a JSON config; missing files and malformed JSON throw
/// std::runtime_error with the path in the message.
ModelConfig load_config(const std::filesystem::path& path);

}  // namespace moegeo
