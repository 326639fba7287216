#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "moegeo/config.hpp"
#include "moegeo/models.hpp"

namespace moegeo {

/// Trained parameters of one seed plus everything needed to rebuild its batch.
///
/// Serialized as JSON: the config echo, the seed, the input fingerprint and
/// one entry per condition. Each tensor is {"shape": [...], "data": [...]}
/// with data in row-major order. Doubles are written in shortest round-trip
/// form, so save/load is bit-exact.
struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::string inputs_hash;
  std::optional<MlpParams<double>> dense;
  std::optional<MoeParams<double>> top_k;
  std::optional<MoeParams<double>> soft;
};

nlohmann::json tensor_to_json(const MatrixXd& m);
nlohmann::json tensor_to_json(const VectorXd& v);
MatrixXd matrix_from_json(const nlohmann::json& j);
VectorXd vector_from_json(const nlohmann::json& j);

nlohmann::json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace moegeo
