#include "moegeo/checkpoint.hpp"

#include <stdexcept>

#include "moegeo/report_io.hpp"

namespace moegeo {

namespace {

constexpr const char* kFormat = "moegeo-checkpoint";
constexpr int kVersion = 1;

nlohmann::json mlp_to_json(const MlpParams<double>& p) {
  return {{"w1", tensor_to_json(p.w1)}, {"b1", tensor_to_json(p.b1)},
          {"w2", tensor_to_json(p.w2)}, {"b2", tensor_to_json(p.b2)}};
}

MlpParams<double> mlp_from_json(const nlohmann::json& j) {
  MlpParams<double> p{matrix_from_json(j.at("w1")), vector_from_json(j.at("b1")),
                      matrix_from_json(j.at("w2")), vector_from_json(j.at("b2"))};
  p.validate();
  return p;
}

nlohmann::json moe_to_json(const MoeParams<double>& p) {
  nlohmann::json experts = nlohmann::json::array();
  for (const auto& e : p.experts) experts.push_back(mlp_to_json(e));
  return {{"experts", experts},
          {"router", {{"w_r", tensor_to_json(p.router.w_r)}, {"b_r", tensor_to_json(p.router.b_r)}}}};
}

MoeParams<double> moe_from_json(const nlohmann::json& j) {
  MoeParams<double> p;
  for (const auto& e : j.at("experts")) p.experts.push_back(mlp_from_json(e));
  p.router.w_r = matrix_from_json(j.at("router").at("w_r"));
  p.router.b_r = vector_from_json(j.at("router").at("b_r"));
  p.validate();
  return p;
}

}  // namespace

nlohmann::json tensor_to_json(const MatrixXd& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
}

nlohmann::json tensor_to_json(const VectorXd& v) {
  nlohmann::json data = nlohmann::json::array();
  for (Index i = 0; i < v.size(); ++i) data.push_back(v(i));
  return {{"shape", {v.size()}}, {"data", std::move(data)}};
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Index>>();
  const auto& data = j.at("data");
  if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0 ||
      data.size() != static_cast<size_t>(shape[0] * shape[1])) {
    throw std::invalid_argument("checkpoint: matrix shape header does not match data");
  }
  MatrixXd m(shape[0], shape[1]);
  size_t k = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index c = 0; c < m.cols(); ++c) m(i, c) = data[k++].get<double>();
  require_finite(m, "checkpoint matrix");
  return m;
}

VectorXd vector_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Index>>();
  const auto& data = j.at("data");
  if (shape.size() != 1 || shape[0] < 0 || data.size() != static_cast<size_t>(shape[0])) {
    throw std::invalid_argument("checkpoint: vector shape header does not match data");
  }
  VectorXd v(shape[0]);
  for (Index i = 0; i < v.size(); ++i) v(i) = data[static_cast<size_t>(i)].get<double>();
  require_finite(v, "checkpoint vector");
  return v;
}

nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::json models = nlohmann::json::object();
  if (c.dense) models["dense"] = mlp_to_json(*c.dense);
  if (c.top_k) models["top_k"] = moe_to_json(*c.top_k);
  if (c.soft) models["soft"] = moe_to_json(*c.soft);
  return {{"format", kFormat},   {"version", kVersion}, {"config", c.config},
          {"seed", c.seed},      {"inputs_hash", c.inputs_hash}, {"models", models}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != kFormat || j.value("version", 0) != kVersion) {
    throw std::invalid_argument("checkpoint: unrecognised format or version");
  }
  Checkpoint c;
  c.config = j.at("config").get<ModelConfig>();
  c.config.validate();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.inputs_hash = j.at("inputs_hash").get<std::string>();
  const auto& models = j.at("models");
  if (models.contains("dense")) c.dense = mlp_from_json(models.at("dense"));
  if (models.contains("top_k")) c.top_k = moe_from_json(models.at("top_k"));
  if (models.contains("soft")) c.soft = moe_from_json(models.at("soft"));
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_text_file(path, checkpoint_to_json(c).dump() + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  }
  try {
    return checkpoint_from_json(j);
  } catch (const std::exception& e) {
    throw std::runtime_error("invalid checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace moegeo
