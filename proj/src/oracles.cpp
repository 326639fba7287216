#include "moegeo/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "moegeo/jacobians.hpp"
#include "moegeo/probes.hpp"
#include "moegeo/training.hpp"

namespace moegeo {

namespace {

constexpr double kFdStep = 1e-4;

OracleResult finish(std::string name, double max_error, double tolerance, long cases) {
  return {std::move(name), max_error < tolerance, max_error, tolerance, cases};
}

MatrixXd scaled_gaussian(Rng& rng, Index rows, Index cols, double scale) {
  return sample_gaussian(rng, rows, cols) * scale;
}

template <typename Params, typename LossFn>
double max_gradient_error(Params& p, const Params& analytic, LossFn&& loss) {
  auto spans = parameter_spans(p);
  Params g = analytic;
  auto grad_spans = parameter_spans(g);
  double worst = 0.0;
  for (size_t s = 0; s < spans.size(); ++s) {
    for (size_t i = 0; i < spans[s].size(); ++i) {
      double& v = spans[s][i];
      const double saved = v;
      v = saved + kFdStep;
      const double plus = loss();
      v = saved - kFdStep;
      const double minus = loss();
      v = saved;
      const double fd = (plus - minus) / (2.0 * kFdStep);
      worst = std::max(worst, std::abs(fd - grad_spans[s][i]));
    }
  }
  return worst;
}

}  // namespace

MlpParams<double> random_mlp(Rng& rng, Index d_model, Index d_hidden) {
  MlpParams<double> p;
  p.w1 = scaled_gaussian(rng, d_hidden, d_model, 1.0 / std::sqrt(static_cast<double>(d_model)));
  p.b1 = scaled_gaussian(rng, d_hidden, 1, 0.1);
  p.w2 = scaled_gaussian(rng, d_model, d_hidden, 1.0 / std::sqrt(static_cast<double>(d_hidden)));
  p.b2 = scaled_gaussian(rng, d_model, 1, 0.1);
  return p;
}

MoeParams<double> random_moe(Rng& rng, Index d_model, Index d_hidden, Index n_experts) {
  MoeParams<double> p;
  for (Index e = 0; e < n_experts; ++e) p.experts.push_back(random_mlp(rng, d_model, d_hidden));
  p.router.w_r = scaled_gaussian(rng, n_experts, d_model, 1.0 / std::sqrt(static_cast<double>(d_model)));
  p.router.b_r = scaled_gaussian(rng, n_experts, 1, 0.1);
  return p;
}

OracleResult check_fd_jacobian(std::uint64_t seed, int cases, Index d_model, Index d_hidden) {
  Rng rng(seed);
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    const MlpParams<double> p = random_mlp(rng, d_model, d_hidden);
    const VectorXd x = sample_gaussian(rng, d_model, 1);
    const MatrixXd exact = mlp_jacobian(p, x);
    const MatrixXd fd = fd_jacobian([&](const VectorXd& v) { return mlp_forward(p, v).y; }, x, kFdStep);
    worst = std::max(worst, (exact - fd).cwiseAbs().maxCoeff());
  }
  return finish("fd_jacobian", worst, 1e-5, cases);
}

OracleResult check_fd_gradient(std::uint64_t seed, const std::string& routing) {
  constexpr Index d = 3, h = 2, experts = 3, n = 4;
  Rng rng(seed);
  Batch batch{sample_gaussian(rng, n, d), sample_gaussian(rng, n, d)};
  double worst = 0.0;
  if (routing == "dense") {
    MlpParams<double> p = random_mlp(rng, d, h);
    const auto analytic = backward(p, batch).grads;
    worst = max_gradient_error(p, analytic, [&] { return backward(p, batch).loss; });
  } else {
    const RoutingMode mode = routing == "soft" ? RoutingMode::soft() : RoutingMode::top_k(2);
    if (routing != "soft" && routing != "top_k") throw std::invalid_argument("check_fd_gradient: unknown routing " + routing);
    MoeParams<double> p = random_moe(rng, d, h, experts);
    const auto analytic = backward(p, batch, mode).grads;
    worst = max_gradient_error(p, analytic, [&] { return backward(p, batch, mode).loss; });
  }
  return finish("fd_gradient_" + routing, worst, 1e-5, 1);
}

OracleResult check_pca_duplication(std::uint64_t seed, int instances) {
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < instances; ++t) {
    const Index n = 2 + static_cast<Index>(rng.next_u64() % 19);  // 2..20
    const Index d = 1 + static_cast<Index>(rng.next_u64() % 8);   // 1..8
    const MatrixXd h = sample_gaussian(rng, n, d);
    VectorXd w(n);
    for (Index i = 0; i < n; ++i) w(i) = static_cast<double>(rng.next_u64() % 4);
    // At least two samples must carry weight.
    if ((w.array() > 0).count() < 2) w.head(2).setOnes();

    std::vector<Index> rows;
    for (Index i = 0; i < n; ++i)
      for (int r = 0; r < static_cast<int>(w(i)); ++r) rows.push_back(i);
    const MatrixXd dup = h(rows, Eigen::all);

    const auto weighted = weighted_pca(h, w, "weighted");
    const auto plain = weighted_pca(dup, VectorXd::Ones(dup.rows()), "duplicated");
    worst = std::max(worst, (weighted.eigenvalues - plain.eigenvalues).cwiseAbs().maxCoeff());
  }
  return finish("pca_duplication", worst, 1e-10, instances);
}

std::vector<OracleResult> check_gate_invariants(std::uint64_t seed, int vectors) {
  Rng rng(seed);
  double simplex = 0.0, support = 0.0, k_equals_e = 0.0, shift = 0.0;
  for (int t = 0; t < vectors; ++t) {
    const Index e = 1 + static_cast<Index>(rng.next_u64() % 16);
    const int k = 1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(e));
    const VectorXd logits = sample_gaussian(rng, e, 1) * 3.0;
    const double c = 10.0 * (2.0 * rng.uniform() - 1.0);

    for (const RoutingMode& mode : {RoutingMode::soft(), RoutingMode::top_k(k)}) {
      const auto g = gate(logits, mode);
      simplex = std::max(simplex, std::abs(g.gates.sum() - 1.0));
      simplex = std::max(simplex, std::max(0.0, -g.gates.minCoeff()));
      const auto shifted = gate(VectorXd(logits.array() + c), mode);
      shift = std::max(shift, (shifted.gates - g.gates).cwiseAbs().maxCoeff());
    }
    const auto top = gate(logits, RoutingMode::top_k(k));
    const auto nonzero = (top.gates.array() > 0.0).count();
    if (static_cast<int>(top.selected.size()) != k || nonzero != k) support = 1.0;
    const auto full = gate(logits, RoutingMode::top_k(static_cast<int>(e)));
    const auto soft = gate(logits, RoutingMode::soft());
    k_equals_e = std::max(k_equals_e, (full.gates - soft.gates).cwiseAbs().maxCoeff());
  }
  return {finish("gate_simplex", simplex, 1e-10, vectors),
          {"gate_top_k_support", support == 0.0, support, 0.0, vectors},
          finish("gate_k_equals_e", k_equals_e, 1e-12, vectors),
          finish("gate_shift_invariance", shift, 1e-12, vectors)};
}

OracleResult check_spectrum_scale_invariance(std::uint64_t seed, int matrices) {
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < matrices; ++t) {
    const Index r = 2 + static_cast<Index>(rng.next_u64() % 10);
    const Index c = 2 + static_cast<Index>(rng.next_u64() % 10);
    const MatrixXd m = sample_gaussian(rng, r, c);
    const double scale = std::exp(4.0 * (2.0 * rng.uniform() - 1.0));
    const auto base = spectrum_report("m", m);
    const auto scaled = spectrum_report("cm", MatrixXd(scale * m));
    worst = std::max(worst, (*base.cumulative_energy - *scaled.cumulative_energy).cwiseAbs().maxCoeff());
    worst = std::max(worst, std::abs(scaled.sigma1 - scale * base.sigma1) / (scale * base.sigma1));
  }
  return finish("spectrum_scale_invariance", worst, 1e-10, matrices);
}

std::vector<OracleResult> run_oracle_suite(std::uint64_t seed) {
  std::vector<OracleResult> out;
  out.push_back(check_fd_jacobian(seed));
  for (const char* routing : {"dense", "soft", "top_k"}) out.push_back(check_fd_gradient(seed + 1, routing));
  out.push_back(check_pca_duplication(seed + 2));
  for (auto& r : check_gate_invariants(seed + 3)) out.push_back(std::move(r));
  out.push_back(check_spectrum_scale_invariance(seed + 4));
  return out;
}

}  // namespace moegeo
