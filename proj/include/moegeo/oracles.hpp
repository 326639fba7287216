#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moegeo/models.hpp"
#include "moegeo/rng.hpp"

namespace moegeo {

/// Outcome of one built-in oracle check.
struct OracleResult {
  std::string name;
  bool passed = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  long cases = 0;
};

/// Random weights ~ N(0, 1/fan_in) and random N(0, 0.1^2) biases.
MlpParams<double> random_mlp(Rng& rng, Index d_model, Index d_hidden);
MoeParams<double> random_moe(Rng& rng, Index d_model, Index d_hidden, Index n_experts);

/// Analytic mlp_jacobian against central differences (step 1e-4).
OracleResult check_fd_jacobian(std::uint64_t seed, int cases = 20, Index d_model = 64, Index d_hidden = 128);

/// backward() against central differences of the loss over every parameter
/// (d=3, hidden=2, E=3, k=2). `routing` is "dense", "soft" or "top_k".
OracleResult check_fd_gradient(std::uint64_t seed, const std::string& routing);

/// Integer-weight weighted PCA against unweighted PCA of duplicated rows.
OracleResult check_pca_duplication(std::uint64_t seed, int instances = 10);

/// Gate properties over random logit vectors: simplex, top-k support size,
/// k = E equal to soft, invariance to a constant shift.
std::vector<OracleResult> check_gate_invariants(std::uint64_t seed, int vectors = 1000);

/// Cumulative spectral energy of c*m equals that of m, sigma1 scales by c.
OracleResult check_spectrum_scale_invariance(std::uint64_t seed, int matrices = 10);

/// The full suite run by `moegeo check`.
std::vector<OracleResult> run_oracle_suite(std::uint64_t seed = 2024);

}  // namespace moegeo
