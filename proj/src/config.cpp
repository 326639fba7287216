#include "moegeo/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace moegeo {

namespace {

const std::vector<std::string> kKnownKeys = {
    "d_model", "d_hidden", "n_experts", "k",         "batch_size", "iterations",
    "lr",      "temperature", "seeds",  "log_every", "output_dir", "routing"};

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("config: ") + name + " must be >= 1");
  };
  positive(d_model, "d_model");
  positive(d_hidden, "d_hidden");
  positive(n_experts, "n_experts");
  positive(k, "k");
  positive(batch_size, "batch_size");
  positive(log_every, "log_every");
  if (iterations < 0) throw std::invalid_argument("config: iterations must be >= 0");
  if (k > n_experts) throw std::invalid_argument("config: k must not exceed n_experts");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("config: lr must be finite and >= 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("config: temperature must be > 0");
  }
  if (seeds.empty()) throw std::invalid_argument("config: seeds must be nonempty");
  if (routing.empty()) throw std::invalid_argument("config: routing must name at least one condition");
  for (const auto& r : routing) {
    if (r != "dense" && r != "top_k" && r != "soft") {
      throw std::invalid_argument("config: unknown routing condition '" + r + "'");
    }
  }
}

bool ModelConfig::runs(const std::string& condition) const {
  return std::find(routing.begin(), routing.end(), condition) != routing.end();
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"d_model", cfg.d_model},
                     {"d_hidden", cfg.d_hidden},
                     {"n_experts", cfg.n_experts},
                     {"k", cfg.k},
                     {"batch_size", cfg.batch_size},
                     {"iterations", cfg.iterations},
                     {"lr", cfg.lr},
                     {"temperature", cfg.temperature},
                     {"seeds", cfg.seeds},
                     {"log_every", cfg.log_every},
                     {"output_dir", cfg.output_dir.generic_string()},
                     {"routing", cfg.routing}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(kKnownKeys.begin(), kKnownKeys.end(), item.key()) == kKnownKeys.end()) {
      throw std::invalid_argument("config: unknown key '" + item.key() + "'");
    }
  }
  ModelConfig out;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("d_model", out.d_model);
  get("d_hidden", out.d_hidden);
  get("n_experts", out.n_experts);
  get("k", out.k);
  get("batch_size", out.batch_size);
  get("iterations", out.iterations);
  get("lr", out.lr);
  get("temperature", out.temperature);
  get("seeds", out.seeds);
  get("log_every", out.log_every);
  get("routing", out.routing);
  if (j.contains("output_dir")) out.output_dir = j.at("output_dir").get<std::string>();
  cfg = std::move(out);
}

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed config " + path.string() + ": " + e.what());
  }
  ModelConfig cfg;
  try {
    cfg = j.get<ModelConfig>();
    cfg.validate();
  } catch (const std::exception& e) {
    throw std::runtime_error("invalid config " + path.string() + ": " + e.what());
  }
  return cfg;
}

}  // namespace moegeo
