#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moegeo/config.hpp"
#include "moegeo/numerics.hpp"
#include "moegeo/rng.hpp"

namespace moegeo {

/// Two-layer GELU block: y = w2 * gelu(w1 * x + b1) + b2.
/// Shared by the dense baseline and every expert.
template <typename Scalar>
struct MlpParams {
  Matrix<Scalar> w1;  // d_hidden x d_model
  Vector<Scalar> b1;  // d_hidden
  Matrix<Scalar> w2;  // d_model x d_hidden
  Vector<Scalar> b2;  // d_model

  Index d_model() const { return w1.cols(); }
  Index d_hidden() const { return w1.rows(); }
  Index parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

  static MlpParams zeros(Index d_model, Index d_hidden) {
    return {Matrix<Scalar>::Zero(d_hidden, d_model), Vector<Scalar>::Zero(d_hidden),
            Matrix<Scalar>::Zero(d_model, d_hidden), Vector<Scalar>::Zero(d_model)};
  }

  void validate() const {
    if (b1.size() != w1.rows() || w2.cols() != w1.rows() || w2.rows() != w1.cols() ||
        b2.size() != w2.rows()) {
      throw std::invalid_argument("MlpParams: inconsistent shapes");
    }
    require_finite(w1, "MlpParams.w1");
    require_finite(b1, "MlpParams.b1");
    require_finite(w2, "MlpParams.w2");
    require_finite(b2, "MlpParams.b2");
  }
};

template <typename Scalar>
struct RouterParams {
  Matrix<Scalar> w_r;  // n_experts x d_model
  Vector<Scalar> b_r;  // n_experts

  Index n_experts() const { return w_r.rows(); }
};

template <typename Scalar>
struct MoeParams {
  std::vector<MlpParams<Scalar>> experts;
  RouterParams<Scalar> router;

  Index n_experts() const { return static_cast<Index>(experts.size()); }
  Index d_model() const { return experts.empty() ? 0 : experts.front().d_model(); }

  void validate() const {
    if (experts.empty()) throw std::invalid_argument("MoeParams: no experts");
    for (const auto& e : experts) {
      e.validate();
      if (e.w1.rows() != experts.front().w1.rows() || e.w1.cols() != experts.front().w1.cols()) {
        throw std::invalid_argument("MoeParams: experts differ in shape");
      }
    }
    if (router.w_r.rows() != n_experts() || router.w_r.cols() != d_model() ||
        router.b_r.size() != n_experts()) {
      throw std::invalid_argument("MoeParams: router shape does not match experts");
    }
    require_finite(router.w_r, "RouterParams.w_r");
    require_finite(router.b_r, "RouterParams.b_r");
  }
};

enum class RoutingKind { dense, top_k, soft };

struct RoutingMode {
  RoutingKind kind = RoutingKind::soft;
  int k = 2;
  double temperature = 1.0;

  static RoutingMode dense() { return {RoutingKind::dense, 0, 1.0}; }
  static RoutingMode top_k(int k, double temperature = 1.0) { return {RoutingKind::top_k, k, temperature}; }
  static RoutingMode soft(double temperature = 1.0) { return {RoutingKind::soft, 0, temperature}; }

  /// Directory-style label: "dense", "top2", "soft".
  std::string label() const {
    switch (kind) {
      case RoutingKind::dense: return "dense";
      case RoutingKind::top_k: return "top" + std::to_string(k);
      case RoutingKind::soft: return "soft";
    }
    return "unknown";
  }
};

template <typename Scalar>
struct RoutingOutput {
  Vector<Scalar> gates;        // on the simplex, zero outside `selected`
  std::vector<Index> selected;  // ascending
};

template <typename Scalar>
struct MlpForward {
  Vector<Scalar> y;
  Vector<Scalar> hidden_pre;
};

template <typename Scalar>
struct MoeForward {
  Vector<Scalar> y;
  RoutingOutput<Scalar> routing;
  // Present only for selected experts.
  std::vector<std::optional<Vector<Scalar>>> expert_outputs;
};

template <typename Scalar, typename Derived>
MlpForward<Scalar> mlp_forward(const MlpParams<Scalar>& p, const Eigen::MatrixBase<Derived>& x) {
  if (x.size() != p.d_model()) throw std::invalid_argument("mlp_forward: input dimension mismatch");
  MlpForward<Scalar> out;
  out.hidden_pre = p.w1 * x + p.b1;
  out.y = p.w2 * gelu(out.hidden_pre) + p.b2;
  return out;
}

/// Row-batched forward; rows of `x` are samples. Returns outputs row-wise
/// and writes pre-activations to `hidden_pre` when given.
template <typename Scalar, typename Derived>
Matrix<Scalar> mlp_forward_batch(const MlpParams<Scalar>& p, const Eigen::MatrixBase<Derived>& x,
                                 Matrix<Scalar>* hidden_pre = nullptr) {
  if (x.cols() != p.d_model()) throw std::invalid_argument("mlp_forward_batch: input dimension mismatch");
  Matrix<Scalar> pre = x * p.w1.transpose();
  pre.rowwise() += p.b1.transpose();
  Matrix<Scalar> y = gelu(pre) * p.w2.transpose();
  y.rowwise() += p.b2.transpose();
  if (hidden_pre) *hidden_pre = std::move(pre);
  return y;
}

template <typename Scalar, typename Derived>
Vector<Scalar> router_logits(const RouterParams<Scalar>& r, const Eigen::MatrixBase<Derived>& x) {
  if (x.size() != r.w_r.cols()) throw std::invalid_argument("router_logits: input dimension mismatch");
  return r.w_r * x + r.b_r;
}

/// Soft: softmax over all logits. Top-k: softmax restricted to the k largest
/// logits (ties go to the lower index), zero elsewhere.
template <typename Derived>
RoutingOutput<typename Derived::Scalar> gate(const Eigen::MatrixBase<Derived>& logits,
                                             const RoutingMode& mode) {
  using Scalar = typename Derived::Scalar;
  const Index e = logits.size();
  if (mode.kind == RoutingKind::dense) throw std::invalid_argument("gate: dense model has no router");
  if (e < 1) throw std::invalid_argument("gate: empty logits");
  if (!(mode.temperature > 0.0)) throw std::invalid_argument("gate: temperature must be > 0");

  RoutingOutput<Scalar> out;
  out.gates = Vector<Scalar>::Zero(e);
  if (mode.kind == RoutingKind::soft) {
    out.gates = softmax(logits / Scalar(mode.temperature));
    out.selected.resize(static_cast<size_t>(e));
    for (Index i = 0; i < e; ++i) out.selected[static_cast<size_t>(i)] = i;
    return out;
  }

  if (mode.k < 1 || mode.k > e) throw std::invalid_argument("gate: k must satisfy 1 <= k <= E");
  std::vector<Index> order(static_cast<size_t>(e));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return logits(a) > logits(b); });
  out.selected.assign(order.begin(), order.begin() + mode.k);
  std::sort(out.selected.begin(), out.selected.end());

  Vector<Scalar> chosen(mode.k);
  for (int i = 0; i < mode.k; ++i) chosen(i) = logits(out.selected[static_cast<size_t>(i)]) / Scalar(mode.temperature);
  const Vector<Scalar> weights = softmax(chosen);
  for (int i = 0; i < mode.k; ++i) out.gates(out.selected[static_cast<size_t>(i)]) = weights(i);
  return out;
}

template <typename Scalar, typename Derived>
MoeForward<Scalar> moe_forward(const MoeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& x,
                               const RoutingMode& mode) {
  MoeForward<Scalar> out;
  out.routing = gate(router_logits(p.router, x), mode);
  out.y = Vector<Scalar>::Zero(p.d_model());
  out.expert_outputs.resize(p.experts.size());
  for (Index e : out.routing.selected) {
    Vector<Scalar> fe = mlp_forward(p.experts[static_cast<size_t>(e)], x).y;
    out.y += out.routing.gates(e) * fe;
    out.expert_outputs[static_cast<size_t>(e)] = std::move(fe);
  }
  return out;
}

/// Initial parameters for one seed: weights ~ N(0, 1/fan_in), zero biases.
/// Dense and MoE parameters come from separate forks of `rng`.
struct InitialParams {
  MlpParams<double> dense;
  MoeParams<double> moe;
};

InitialParams init_params(const ModelConfig& cfg, const Rng& rng);

}  // namespace moegeo
