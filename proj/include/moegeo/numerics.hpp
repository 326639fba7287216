#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace moegeo {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;
using Index = Eigen::Index;

/// Raised when an iterative decomposition exhausts its sweep budget.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* what) {
  if (!m.allFinite()) {
    throw std::invalid_argument(std::string(what) + ": non-finite entry");
  }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <std::floating_point Scalar>
Scalar normal_cdf(Scalar x) {
  using std::erfc;
  using std::sqrt;
  // erfc keeps full relative precision in the lower tail.
  return Scalar(0.5) * erfc(-x / sqrt(Scalar(2)));
}

template <std::floating_point Scalar>
Scalar normal_pdf(Scalar x) {
  using std::exp;
  constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;
  return Scalar(kInvSqrt2Pi) * exp(Scalar(-0.5) * x * x);
}

/// Exact GELU, x * Phi(x).
template <std::floating_point Scalar>
Scalar gelu(Scalar x) {
  return x * normal_cdf(x);
}

template <std::floating_point Scalar>
Scalar gelu_prime(Scalar x) {
  return normal_cdf(x) + x * normal_pdf(x);
}

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return gelu(v); });
}

template <typename Derived>
auto gelu_prime(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return gelu_prime(v); });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() < 1) throw std::invalid_argument("softmax: empty input");
  const Scalar top = logits.maxCoeff();
  Vector<Scalar> out = (logits.array() - top).exp().matrix();
  out /= out.sum();
  return out;
}

// ---------------------------------------------------------------------------
// Small dense decompositions
// ---------------------------------------------------------------------------

struct JacobiOptions {
  double tolerance = 1e-12;
  // Sweep cap is sweep_factor * min(rows, cols).
  int sweep_factor = 100;
};

/// Singular values by one-sided (Hestenes) Jacobi, sorted descending.
///
/// The wider orientation is transposed first so the column pairs being
/// orthogonalised number min(rows, cols). A pair is rotated while
/// |<a_p, a_q>| > tol * |a_p| |a_q|; columns whose norm has fallen to
/// rounding level relative to the whole matrix are treated as converged.
template <typename Derived>
Vector<typename Derived::Scalar> singular_values(const Eigen::MatrixBase<Derived>& m,
                                                 const JacobiOptions& opts = {}) {
  using Scalar = typename Derived::Scalar;
  require_finite(m, "singular_values");
  Matrix<Scalar> a = m.rows() >= m.cols() ? Matrix<Scalar>(m) : Matrix<Scalar>(m.transpose());
  const Index n = a.cols();
  if (n == 0) return Vector<Scalar>();

  const Scalar frob = a.norm();
  const Scalar negligible =
      Scalar(n) * std::numeric_limits<Scalar>::epsilon() * frob;
  const Scalar negligible_sq = negligible * negligible;
  const Scalar tol = Scalar(opts.tolerance);
  const long max_sweeps = static_cast<long>(opts.sweep_factor) * std::max<Index>(n, 1);

  bool converged = frob == Scalar(0);
  for (long sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    bool rotated = false;
    for (Index p = 0; p + 1 < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const Scalar alpha = a.col(p).squaredNorm();
        const Scalar beta = a.col(q).squaredNorm();
        if (alpha <= negligible_sq || beta <= negligible_sq) continue;
        const Scalar gamma = a.col(p).dot(a.col(q));
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const Scalar zeta = (beta - alpha) / (Scalar(2) * gamma);
        const Scalar t = (zeta >= 0 ? Scalar(1) : Scalar(-1)) /
                         (std::abs(zeta) + std::sqrt(Scalar(1) + zeta * zeta));
        const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + t * t);
        const Scalar s = c * t;
        for (Index r = 0; r < a.rows(); ++r) {
          const Scalar ap = a(r, p);
          const Scalar aq = a(r, q);
          a(r, p) = c * ap - s * aq;
          a(r, q) = s * ap + c * aq;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) throw ConvergenceError("singular_values: Jacobi sweeps did not converge");

  Vector<Scalar> sigma = a.colwise().norm().transpose();
  std::sort(sigma.data(), sigma.data() + sigma.size(), std::greater<Scalar>());
  return sigma;
}

/// Largest singular value via the eigenvalues of the smaller Gram matrix.
///
/// Used on hot paths where only sigma_1 is needed; the largest eigenvalue of
/// the Gram matrix is well conditioned, unlike the trailing ones.
template <typename Derived>
typename Derived::Scalar spectral_norm(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.size() == 0) return Scalar(0);
  Matrix<Scalar> gram;
  if (m.rows() >= m.cols()) {
    gram.noalias() = m.transpose() * m;
  } else {
    gram.noalias() = m * m.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> solver(gram, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw ConvergenceError("spectral_norm: eigenvalue solver failed");
  }
  return std::sqrt(std::max(Scalar(0), solver.eigenvalues().maxCoeff()));
}

template <typename Scalar>
struct SymEigen {
  Vector<Scalar> eigenvalues;   // descending
  Matrix<Scalar> eigenvectors;  // column i pairs with eigenvalues(i)
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Input is symmetrised as (m + m^T)/2 after the symmetry check. Sweeps stop
/// once the off-diagonal Frobenius norm falls below tol * |m|_F.
template <typename Derived>
SymEigen<typename Derived::Scalar> sym_eigendecomposition(const Eigen::MatrixBase<Derived>& m,
                                                          const JacobiOptions& opts = {}) {
  using Scalar = typename Derived::Scalar;
  if (m.rows() != m.cols()) throw std::invalid_argument("sym_eigendecomposition: matrix not square");
  require_finite(m, "sym_eigendecomposition");
  const Index n = m.rows();
  const Scalar scale = std::max(Scalar(1), m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-10) * scale) {
    throw std::invalid_argument("sym_eigendecomposition: matrix not symmetric");
  }

  Matrix<Scalar> a = (m + m.transpose()) / Scalar(2);
  Matrix<Scalar> v = Matrix<Scalar>::Identity(n, n);
  const Scalar frob = a.norm();
  const Scalar target = Scalar(opts.tolerance) * frob;
  const long max_sweeps = static_cast<long>(opts.sweep_factor) * std::max<Index>(n, 1);

  auto off_norm = [&]() {
    Scalar s = 0;
    for (Index j = 0; j < n; ++j)
      for (Index i = 0; i < n; ++i)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  long sweep = 0;
  for (; sweep < max_sweeps && off_norm() > target; ++sweep) {
    for (Index p = 0; p + 1 < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= 0 ? Scalar(1) : Scalar(-1)) /
                         (std::abs(theta) + std::sqrt(theta * theta + Scalar(1)));
        const Scalar c = Scalar(1) / std::sqrt(t * t + Scalar(1));
        const Scalar s = t * c;
        // A <- J^T A J, rows then columns.
        for (Index k = 0; k < n; ++k) {
          const Scalar akp = a(k, p);
          const Scalar akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const Scalar apk = a(p, k);
          const Scalar aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Index k = 0; k < n; ++k) {
          const Scalar vkp = v(k, p);
          const Scalar vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (off_norm() > target) {
    throw ConvergenceError("sym_eigendecomposition: Jacobi sweeps did not converge");
  }

  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return a(i, i) > a(j, j); });
  SymEigen<Scalar> out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Index i = 0; i < n; ++i) {
    out.eigenvalues(i) = a(order[i], order[i]);
    out.eigenvectors.col(i) = v.col(order[i]);
  }
  return out;
}

/// Cosine between two matrices flattened to vectors.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_flat(const Eigen::MatrixBase<DerivedA>& a,
                                      const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("cosine_flat: shape mismatch");
  }
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0)) {
    throw std::invalid_argument("cosine_flat: zero matrix has no direction");
  }
  const Scalar inner = a.cwiseProduct(b).sum();
  return std::clamp(inner / (na * nb), Scalar(-1), Scalar(1));
}

}  // namespace moegeo
