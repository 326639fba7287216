#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moegeo/jacobians.hpp"
#include "moegeo/models.hpp"
#include "moegeo/numerics.hpp"

namespace moegeo {

// ---------------------------------------------------------------------------
// Jacobian spectra
// ---------------------------------------------------------------------------

template <typename Scalar>
struct SpectrumReport {
  std::string label;
  Vector<Scalar> sigmas;  // descending
  Scalar sigma1 = 0;
  // Partial sums of sigmas over their total; empty for the zero matrix.
  std::optional<Vector<Scalar>> cumulative_energy;
};

template <typename Derived>
SpectrumReport<typename Derived::Scalar> spectrum_report(std::string label, const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  SpectrumReport<Scalar> out;
  out.label = std::move(label);
  out.sigmas = singular_values(m);
  out.sigma1 = out.sigmas.size() > 0 ? out.sigmas(0) : Scalar(0);
  const Scalar total = out.sigmas.sum();
  if (total > Scalar(0)) {
    Vector<Scalar> cum(out.sigmas.size());
    Scalar running = 0;
    for (Index i = 0; i < out.sigmas.size(); ++i) {
      running += out.sigmas(i);
      cum(i) = std::min(Scalar(1), running / total);
    }
    cum(cum.size() - 1) = Scalar(1);
    out.cumulative_energy = std::move(cum);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-expert alignment
// ---------------------------------------------------------------------------

template <typename Scalar>
struct AlignmentReport {
  std::vector<Index> experts;  // present experts, row/column order of `matrix`
  std::vector<Index> absent;
  Matrix<Scalar> matrix;
  Scalar off_diagonal_mean = 0;
  Scalar off_diagonal_min = 0;
  Scalar off_diagonal_max = 0;
};

template <typename Scalar>
AlignmentReport<Scalar> alignment_report(const std::vector<std::optional<AverageJacobian<Scalar>>>& avg) {
  AlignmentReport<Scalar> out;
  std::vector<const Matrix<Scalar>*> mats;
  for (size_t e = 0; e < avg.size(); ++e) {
    if (avg[e] && avg[e]->j_bar.norm() > Scalar(0)) {
      out.experts.push_back(static_cast<Index>(e));
      mats.push_back(&avg[e]->j_bar);
    } else {
      out.absent.push_back(static_cast<Index>(e));
    }
  }
  const auto p = static_cast<Index>(mats.size());
  if (p < 2) throw std::invalid_argument("alignment_report: need at least two present experts");

  out.matrix = Matrix<Scalar>::Identity(p, p);
  Scalar total = 0;
  out.off_diagonal_min = Scalar(1);
  out.off_diagonal_max = Scalar(-1);
  for (Index a = 0; a < p; ++a) {
    for (Index b = a + 1; b < p; ++b) {
      const Scalar c = cosine_flat(*mats[static_cast<size_t>(a)], *mats[static_cast<size_t>(b)]);
      out.matrix(a, b) = c;
      out.matrix(b, a) = c;
      total += c;
      out.off_diagonal_min = std::min(out.off_diagonal_min, c);
      out.off_diagonal_max = std::max(out.off_diagonal_max, c);
    }
  }
  out.off_diagonal_mean = total / Scalar(p * (p - 1) / 2);
  return out;
}

// ---------------------------------------------------------------------------
// Weighted PCA
// ---------------------------------------------------------------------------

inline constexpr double kVarianceThreshold = 0.9;
inline constexpr Index kCumVarComponents = 10;
inline constexpr double kLowSupportCount = 1.0;

template <typename Scalar>
struct PcaReport {
  std::string label;
  Vector<Scalar> eigenvalues;  // descending, rounding negatives clamped to 0
  // Empty when the covariance is zero (single effective sample, constant data).
  Vector<Scalar> explained_ratios;
  Vector<Scalar> cumulative;
  std::optional<Index> k_at_90;
  std::optional<Scalar> cum_var_at_10;
  Scalar effective_count = 0;
  bool low_support = false;

  bool degenerate() const { return !k_at_90.has_value(); }
};

/// Smallest k with cumulative[k-1] >= threshold.
template <typename Scalar>
Index components_to_reach(const Vector<Scalar>& cumulative, Scalar threshold) {
  for (Index i = 0; i < cumulative.size(); ++i) {
    if (cumulative(i) >= threshold) return i + 1;
  }
  return cumulative.size();
}

/// Eigenvalues of a covariance matrix turned into ratio / cumulative / k@0.9.
template <typename Scalar>
PcaReport<Scalar> pca_from_covariance(std::string label, const Matrix<Scalar>& cov, Scalar effective_count) {
  PcaReport<Scalar> out;
  out.label = std::move(label);
  out.effective_count = effective_count;
  out.low_support = effective_count < Scalar(kLowSupportCount);

  Vector<Scalar> eig = sym_eigendecomposition(cov).eigenvalues;
  const Scalar floor = Scalar(-1e-10) * std::max(Scalar(1), std::abs(cov.trace()));
  for (Index i = 0; i < eig.size(); ++i) {
    if (eig(i) < floor) throw std::runtime_error("weighted_pca: covariance is not positive semidefinite");
    eig(i) = std::max(eig(i), Scalar(0));
  }
  out.eigenvalues = eig;

  const Scalar total = eig.sum();
  if (total > Scalar(0)) {
    out.explained_ratios = eig / total;
    out.cumulative.resize(eig.size());
    Scalar running = 0;
    for (Index i = 0; i < eig.size(); ++i) {
      running += out.explained_ratios(i);
      out.cumulative(i) = std::min(Scalar(1), running);
    }
    out.cumulative(eig.size() - 1) = Scalar(1);
    out.k_at_90 = components_to_reach(out.cumulative, Scalar(kVarianceThreshold));
    out.cum_var_at_10 = out.cumulative(std::min(kCumVarComponents, eig.size()) - 1);
  }
  return out;
}

/// PCA of the rows of `h` with per-row weights; mean and covariance are both
/// normalised by the weight total.
template <typename DerivedH, typename DerivedW>
PcaReport<typename DerivedH::Scalar> weighted_pca(const Eigen::MatrixBase<DerivedH>& h,
                                                  const Eigen::MatrixBase<DerivedW>& weights,
                                                  std::string label = "") {
  using Scalar = typename DerivedH::Scalar;
  if (weights.size() != h.rows()) throw std::invalid_argument("weighted_pca: one weight per sample required");
  if ((weights.array() < Scalar(0)).any()) throw std::invalid_argument("weighted_pca: negative weight");
  const Scalar total = weights.sum();
  if (!(total > Scalar(0))) throw std::invalid_argument("weighted_pca: weights sum to zero");

  const Vector<Scalar> mean = (h.transpose() * weights) / total;
  Matrix<Scalar> centered = h.rowwise() - mean.transpose();
  Matrix<Scalar> scaled = centered.array().colwise() * weights.array();
  Matrix<Scalar> cov = (scaled.transpose() * centered) / total;
  cov = (cov + cov.transpose()) / Scalar(2);
  return pca_from_covariance(std::move(label), cov, total);
}

inline std::string expert_label(Index e) { return "expert_" + std::to_string(e); }

/// Per-expert weighted PCA of the inputs to the MoE layer, weighted by the
/// gates under `mode`. Only experts with N_e > 0 are reported.
template <typename Scalar, typename Derived>
std::vector<PcaReport<Scalar>> expert_pca_suite(const MoeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& batch,
                                                const RoutingMode& mode) {
  const Index n = batch.rows();
  Matrix<Scalar> gates(n, p.n_experts());
  for (Index i = 0; i < n; ++i) {
    gates.row(i) = gate(router_logits(p.router, Vector<Scalar>(batch.row(i).transpose())), mode).gates.transpose();
  }
  std::vector<PcaReport<Scalar>> out;
  for (Index e = 0; e < p.n_experts(); ++e) {
    if (gates.col(e).sum() > Scalar(0)) out.push_back(weighted_pca(batch, gates.col(e), expert_label(e)));
  }
  return out;
}

/// Unweighted PCA of the dense model's post-activation hidden layer.
template <typename Scalar, typename Derived>
PcaReport<Scalar> dense_pca(const MlpParams<Scalar>& dense, const Eigen::MatrixBase<Derived>& batch) {
  Matrix<Scalar> pre;
  mlp_forward_batch(dense, batch, &pre);
  const Matrix<Scalar> hidden = gelu(pre);
  return weighted_pca(hidden, Vector<Scalar>::Ones(batch.rows()), "dense_hidden");
}

/// Unweighted PCA of the raw probe inputs, the dense-side counterpart of the
/// expert input PCA.
template <typename Derived>
PcaReport<typename Derived::Scalar> dense_input_pca(const Eigen::MatrixBase<Derived>& batch) {
  using Scalar = typename Derived::Scalar;
  return weighted_pca(batch, Vector<Scalar>::Ones(batch.rows()), "dense_input");
}

}  // namespace moegeo
