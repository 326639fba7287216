#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "moegeo/models.hpp"
#include "moegeo/numerics.hpp"
#include "moegeo/parallel.hpp"

namespace moegeo {

/// d y / d x of the two-layer block: w2 * diag(gelu'(w1 x + b1)) * w1.
template <typename Scalar, typename Derived>
Matrix<Scalar> mlp_jacobian(const MlpParams<Scalar>& p, const Eigen::MatrixBase<Derived>& x) {
  if (x.size() != p.d_model()) throw std::invalid_argument("mlp_jacobian: input dimension mismatch");
  const Vector<Scalar> slope = gelu_prime(Vector<Scalar>(p.w1 * x + p.b1));
  Matrix<Scalar> scaled = p.w2 * slope.asDiagonal();
  return scaled * p.w1;
}

/// Central-difference Jacobian; column i perturbs coordinate i by +-step.
template <typename Fn, typename Scalar>
Matrix<Scalar> fd_jacobian(Fn&& f, const Vector<Scalar>& x, Scalar step) {
  if (!(step > Scalar(0))) throw std::invalid_argument("fd_jacobian: step must be > 0");
  Vector<Scalar> probe = x;
  Matrix<Scalar> j;
  for (Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + step;
    const Vector<Scalar> plus = f(probe);
    probe(i) = x(i) - step;
    const Vector<Scalar> minus = f(probe);
    probe(i) = x(i);
    if (i == 0) j.resize(plus.size(), x.size());
    j.col(i) = (plus - minus) / (Scalar(2) * step);
  }
  return j;
}

/// Gate-frozen mixture sum_e g_e(x) J_e(x); router derivatives are not included.
template <typename Scalar, typename Derived>
Matrix<Scalar> moe_effective_jacobian(const MoeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& x,
                                      const RoutingMode& mode) {
  if (mode.kind == RoutingKind::dense) throw std::invalid_argument("moe_effective_jacobian: dense mode");
  const auto routing = gate(router_logits(p.router, x), mode);
  Matrix<Scalar> j = Matrix<Scalar>::Zero(p.d_model(), p.d_model());
  for (Index e : routing.selected) {
    j += routing.gates(e) * mlp_jacobian(p.experts[static_cast<size_t>(e)], x);
  }
  return j;
}

template <typename Scalar>
struct AverageJacobian {
  Index expert = 0;
  Matrix<Scalar> j_bar;
  Scalar effective_count = 0;  // N_e, the summed gate weight
};

/// Gate-weighted mean Jacobian per expert over the rows of `batch`.
/// Entry e is empty when expert e never receives weight.
template <typename Scalar, typename Derived>
std::vector<std::optional<AverageJacobian<Scalar>>> average_expert_jacobians(
    const MoeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& batch, const RoutingMode& mode) {
  const Index n = batch.rows();
  const Index e_count = p.n_experts();
  if (n < 1) throw std::invalid_argument("average_expert_jacobians: empty batch");

  std::vector<Matrix<Scalar>> sums(static_cast<size_t>(e_count),
                                   Matrix<Scalar>::Zero(p.d_model(), p.d_model()));
  std::vector<Scalar> weight(static_cast<size_t>(e_count), Scalar(0));
  for (Index i = 0; i < n; ++i) {
    const Vector<Scalar> x = batch.row(i).transpose();
    const auto routing = gate(router_logits(p.router, x), mode);
    for (Index e : routing.selected) {
      const Scalar g = routing.gates(e);
      if (g == Scalar(0)) continue;
      sums[static_cast<size_t>(e)] += g * mlp_jacobian(p.experts[static_cast<size_t>(e)], x);
      weight[static_cast<size_t>(e)] += g;
    }
  }

  std::vector<std::optional<AverageJacobian<Scalar>>> out(static_cast<size_t>(e_count));
  for (Index e = 0; e < e_count; ++e) {
    const auto s = static_cast<size_t>(e);
    if (weight[s] > Scalar(0)) out[s] = AverageJacobian<Scalar>{e, sums[s] / weight[s], weight[s]};
  }
  return out;
}

/// Batch summary of leading singular values.
template <typename Scalar>
struct Sigma1Summary {
  // Dense: sigma_1 of the model Jacobian. MoE: sigma_1 of the effective Jacobian.
  Scalar mean = 0;
  Scalar min = 0;
  Scalar max = 0;
  // Gate-weighted mean of sigma_1(J_e(x_i)); empty for experts with N_e = 0.
  std::vector<std::optional<Scalar>> expert;
  std::vector<Scalar> effective_count;
};

namespace detail {

template <typename Scalar>
void summarize_model_sigmas(const std::vector<Scalar>& sigmas, Sigma1Summary<Scalar>& out) {
  Scalar total = 0;
  out.min = sigmas.front();
  out.max = sigmas.front();
  for (Scalar s : sigmas) {
    total += s;
    out.min = std::min(out.min, s);
    out.max = std::max(out.max, s);
  }
  out.mean = total / Scalar(sigmas.size());
}

}  // namespace detail

template <typename Scalar, typename Derived>
Sigma1Summary<Scalar> dense_batch_sigma1(const MlpParams<Scalar>& p, const Eigen::MatrixBase<Derived>& batch) {
  const Index n = batch.rows();
  if (n < 1) throw std::invalid_argument("dense_batch_sigma1: empty batch");
  std::vector<Scalar> sigmas(static_cast<size_t>(n));
  parallel_for(n, [&](long i) {
    sigmas[static_cast<size_t>(i)] = spectral_norm(mlp_jacobian(p, Vector<Scalar>(batch.row(i).transpose())));
  });
  Sigma1Summary<Scalar> out;
  detail::summarize_model_sigmas(sigmas, out);
  return out;
}

/// Effective and per-expert sigma_1 over a batch. Each selected expert's
/// Jacobian is formed once per sample and reused for the effective mixture.
template <typename Scalar, typename Derived>
Sigma1Summary<Scalar> batch_sigma1(const MoeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& batch,
                                   const RoutingMode& mode) {
  if (mode.kind == RoutingKind::dense) throw std::invalid_argument("batch_sigma1: dense mode, use dense_batch_sigma1");
  const Index n = batch.rows();
  const auto e_count = static_cast<size_t>(p.n_experts());
  if (n < 1) throw std::invalid_argument("batch_sigma1: empty batch");

  struct PerSample {
    Scalar effective = 0;
    Vector<Scalar> gates;
    std::vector<Scalar> expert_sigma;
  };
  std::vector<PerSample> samples(static_cast<size_t>(n));
  parallel_for(n, [&](long i) {
    const Vector<Scalar> x = batch.row(i).transpose();
    const auto routing = gate(router_logits(p.router, x), mode);
    PerSample& s = samples[static_cast<size_t>(i)];
    s.gates = routing.gates;
    s.expert_sigma.assign(e_count, Scalar(0));
    Matrix<Scalar> effective = Matrix<Scalar>::Zero(p.d_model(), p.d_model());
    for (Index e : routing.selected) {
      const Matrix<Scalar> j = mlp_jacobian(p.experts[static_cast<size_t>(e)], x);
      s.expert_sigma[static_cast<size_t>(e)] = spectral_norm(j);
      effective += routing.gates(e) * j;
    }
    s.effective = spectral_norm(effective);
  });

  Sigma1Summary<Scalar> out;
  std::vector<Scalar> effective(static_cast<size_t>(n));
  std::vector<Scalar> weighted(e_count, Scalar(0));
  out.effective_count.assign(e_count, Scalar(0));
  for (Index i = 0; i < n; ++i) {
    const PerSample& s = samples[static_cast<size_t>(i)];
    effective[static_cast<size_t>(i)] = s.effective;
    for (size_t e = 0; e < e_count; ++e) {
      const Scalar g = s.gates(static_cast<Index>(e));
      weighted[e] += g * s.expert_sigma[e];
      out.effective_count[e] += g;
    }
  }
  detail::summarize_model_sigmas(effective, out);
  out.expert.resize(e_count);
  for (size_t e = 0; e < e_count; ++e) {
    if (out.effective_count[e] > Scalar(0)) out.expert[e] = weighted[e] / out.effective_count[e];
  }
  return out;
}

}  // namespace moegeo
