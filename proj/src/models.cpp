#include "moegeo/models.hpp"

#include <cmath>

namespace moegeo {

namespace {

constexpr std::uint64_t kDenseStream = 101;
constexpr std::uint64_t kMoeStream = 102;

MatrixXd scaled_gaussian(Rng& rng, Index rows, Index fan_in) {
  return sample_gaussian(rng, rows, fan_in) / std::sqrt(static_cast<double>(fan_in));
}

MlpParams<double> init_mlp(Rng& rng, Index d_model, Index d_hidden) {
  MlpParams<double> p = MlpParams<double>::zeros(d_model, d_hidden);
  p.w1 = scaled_gaussian(rng, d_hidden, d_model);
  p.w2 = scaled_gaussian(rng, d_model, d_hidden);
  return p;
}

}  // namespace

InitialParams init_params(const ModelConfig& cfg, const Rng& rng) {
  cfg.validate();
  InitialParams out;
  Rng dense_rng = rng.fork(kDenseStream);
  out.dense = init_mlp(dense_rng, cfg.d_model, cfg.d_hidden);

  Rng moe_rng = rng.fork(kMoeStream);
  out.moe.experts.reserve(static_cast<size_t>(cfg.n_experts));
  for (int e = 0; e < cfg.n_experts; ++e) out.moe.experts.push_back(init_mlp(moe_rng, cfg.d_model, cfg.d_hidden));
  out.moe.router.w_r = scaled_gaussian(moe_rng, cfg.n_experts, cfg.d_model);
  out.moe.router.b_r = VectorXd::Zero(cfg.n_experts);
  return out;
}

}  // namespace moegeo
