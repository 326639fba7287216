#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "moegeo/config.hpp"
#include "moegeo/models.hpp"
#include "moegeo/rng.hpp"

namespace moegeo {

/// Fixed inputs and regression targets shared by every condition of a seed.
struct Batch {
  MatrixXd inputs;   // N x d_model
  MatrixXd targets;  // N x d_model
};

/// Inputs and targets from independent forks of `rng`, both N(0, I).
Batch make_batch(const ModelConfig& cfg, const Rng& rng);

double mse_loss(const MatrixXd& pred, const MatrixXd& target);

template <typename Params>
struct LossAndGrad {
  double loss = 0.0;
  Params grads;
};

LossAndGrad<MlpParams<double>> backward(const MlpParams<double>& p, const Batch& batch);

/// Gradients through the gate-weighted mixture. Expert selection is held
/// fixed; router gradients flow through the (restricted) softmax. Experts
/// never selected in the batch get exactly zero gradient.
LossAndGrad<MoeParams<double>> backward(const MoeParams<double>& p, const Batch& batch, const RoutingMode& mode);

/// Row-batched mixture output; agrees with per-sample moe_forward to rounding.
MatrixXd moe_forward_batch(const MoeParams<double>& p, const MatrixXd& x, const RoutingMode& mode);

/// Flat views over every tensor of a parameter set, in a fixed order.
std::vector<std::span<double>> parameter_spans(MlpParams<double>& p);
std::vector<std::span<double>> parameter_spans(MoeParams<double>& p);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  /// Zeroed moments shaped like `params`.
  static AdamState for_params(const std::vector<std::span<double>>& params, double lr = 1e-3);
};

void adam_step(AdamState& state, const std::vector<std::span<double>>& params,
               const std::vector<std::span<double>>& grads);

struct TraceRecord {
  int iteration = 0;
  double loss = 0.0;
  // Dense: sigma_1 of the model Jacobian; MoE: of the effective Jacobian.
  double sigma1_mean = 0.0;
  double sigma1_min = 0.0;
  double sigma1_max = 0.0;
  std::vector<std::optional<double>> expert_sigma1;
  std::vector<double> expert_weight;
};

struct TrainingTrace {
  std::vector<TraceRecord> records;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam on the MSE for cfg.iterations steps, logging at iteration 0, every
/// cfg.log_every steps and at the final iteration.
TrainingTrace train_dense(MlpParams<double>& p, const Batch& batch, const ModelConfig& cfg);
TrainingTrace train_moe(MoeParams<double>& p, const Batch& batch, const RoutingMode& mode, const ModelConfig& cfg);

template <typename Params>
struct TrainedModel {
  Params params;
  TrainingTrace trace;
};

struct TrainingResult {
  Batch batch;
  std::optional<TrainedModel<MlpParams<double>>> dense;
  std::optional<TrainedModel<MoeParams<double>>> top_k;
  std::optional<TrainedModel<MoeParams<double>>> soft;
};

/// One fixed batch, then each configured condition trained independently.
/// Top-k and soft MoE start from the same initial parameters.
TrainingResult train(const ModelConfig& cfg, const Rng& rng);

RoutingMode top_k_mode(const ModelConfig& cfg);
RoutingMode soft_mode(const ModelConfig& cfg);

}  // namespace moegeo
