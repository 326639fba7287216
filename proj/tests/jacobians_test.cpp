#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "moegeo/jacobians.hpp"
#include "moegeo/oracles.hpp"

namespace moegeo {
namespace {

TEST(MlpJacobian, IdentityEmbeddingAtOrigin) {
  auto p = MlpParams<double>::zeros(4, 6);
  p.w1.topRows(4).setIdentity();
  p.w2 = p.w1.transpose();
  const MatrixXd j = mlp_jacobian(p, VectorXd::Zero(4));
  EXPECT_LT((j - 0.5 * p.w2 * p.w1).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MlpJacobian, ZeroWeights) {
  const auto p = MlpParams<double>::zeros(3, 5);
  EXPECT_EQ(mlp_jacobian(p, VectorXd::Ones(3)), MatrixXd::Zero(3, 3));
}

TEST(MlpJacobian, MatchesFiniteDifferences) {
  const auto r = check_fd_jacobian(17, 20, 64, 128);
  EXPECT_TRUE(r.passed) << r.max_error;
}

TEST(MlpJacobian, LinearInW2) {
  Rng rng(1);
  auto p = random_mlp(rng, 5, 7);
  const VectorXd x = sample_gaussian(rng, 5, 1);
  const MatrixXd j = mlp_jacobian(p, x);
  p.w2 *= 3.0;
  EXPECT_LT((mlp_jacobian(p, x) - 3.0 * j).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(MlpJacobian, RejectsDimensionMismatch) {
  const auto p = MlpParams<double>::zeros(3, 5);
  EXPECT_THROW(mlp_jacobian(p, VectorXd::Zero(4)), std::invalid_argument);
}

TEST(FdJacobian, AffineConstantAndQuadratic) {
  Rng rng(2);
  const MatrixXd a = sample_gaussian(rng, 3, 4);
  const VectorXd x = sample_gaussian(rng, 4, 1);
  const MatrixXd ja = fd_jacobian([&](const VectorXd& v) { return VectorXd(a * v); }, x, 1e-3);
  EXPECT_LT((ja - a).cwiseAbs().maxCoeff(), 1e-9);

  const MatrixXd jc = fd_jacobian([](const VectorXd&) { return VectorXd::Ones(2); }, x, 1e-3);
  EXPECT_EQ(jc, MatrixXd::Zero(2, 4));

  const MatrixXd jq = fd_jacobian([](const VectorXd& v) { return VectorXd(v.array().square()); }, x, 1e-4);
  EXPECT_LT((jq - MatrixXd((2.0 * x).asDiagonal())).cwiseAbs().maxCoeff(), 1e-8);

  EXPECT_THROW(fd_jacobian([](const VectorXd& v) { return v; }, x, 0.0), std::invalid_argument);
}

TEST(EffectiveJacobian, SingleAndIdenticalExperts) {
  Rng rng(3);
  const auto one = random_moe(rng, 4, 6, 1);
  const VectorXd x = sample_gaussian(rng, 4, 1);
  EXPECT_LT((moe_effective_jacobian(one, x, RoutingMode::soft()) - mlp_jacobian(one.experts[0], x))
                .cwiseAbs()
                .maxCoeff(),
            1e-15);

  auto same = random_moe(rng, 4, 6, 4);
  for (auto& e : same.experts) e = same.experts[0];
  const MatrixXd shared = mlp_jacobian(same.experts[0], x);
  for (const auto& mode : {RoutingMode::soft(), RoutingMode::top_k(2)}) {
    EXPECT_LT((moe_effective_jacobian(same, x, mode) - shared).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(EffectiveJacobian, SoftComposition) {
  Rng rng(4);
  const auto p = random_moe(rng, 6, 8, 5);
  const VectorXd x = sample_gaussian(rng, 6, 1);
  const auto g = gate(router_logits(p.router, x), RoutingMode::soft());
  MatrixXd ref = MatrixXd::Zero(6, 6);
  for (Index e = 0; e < 5; ++e) ref += g.gates(e) * mlp_jacobian(p.experts[static_cast<size_t>(e)], x);
  EXPECT_LT((moe_effective_jacobian(p, x, RoutingMode::soft()) - ref).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(moe_effective_jacobian(p, x, RoutingMode::dense()), std::invalid_argument);
}

TEST(EffectiveJacobian, GateFrozenDiffersFromFullDerivative) {
  // The router term is deliberately left out, so the effective Jacobian is
  // not the derivative of the soft MoE output when the router depends on x.
  Rng rng(5);
  auto p = random_moe(rng, 3, 4, 3);
  p.router.w_r *= 5.0;
  const VectorXd x = sample_gaussian(rng, 3, 1);
  const MatrixXd full =
      fd_jacobian([&](const VectorXd& v) { return moe_forward(p, v, RoutingMode::soft()).y; }, x, 1e-5);
  EXPECT_GT((full - moe_effective_jacobian(p, x, RoutingMode::soft())).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(EffectiveJacobian, TriangleInequality) {
  Rng rng(6);
  const auto p = random_moe(rng, 6, 8, 4);
  for (int t = 0; t < 30; ++t) {
    const VectorXd x = sample_gaussian(rng, 6, 1);
    for (const auto& mode : {RoutingMode::soft(), RoutingMode::top_k(2)}) {
      const auto g = gate(router_logits(p.router, x), mode);
      double bound = 0.0;
      for (Index e : g.selected) bound += g.gates(e) * spectral_norm(mlp_jacobian(p.experts[static_cast<size_t>(e)], x));
      EXPECT_LE(spectral_norm(moe_effective_jacobian(p, x, mode)), bound * (1 + 1e-12));
    }
  }
}

TEST(AverageJacobians, SingleSampleSoft) {
  Rng rng(7);
  const auto p = random_moe(rng, 4, 5, 3);
  const MatrixXd batch = sample_gaussian(rng, 1, 4);
  const auto avg = average_expert_jacobians(p, batch, RoutingMode::soft());
  for (Index e = 0; e < 3; ++e) {
    ASSERT_TRUE(avg[static_cast<size_t>(e)].has_value());
    const MatrixXd j = mlp_jacobian(p.experts[static_cast<size_t>(e)], VectorXd(batch.row(0).transpose()));
    EXPECT_LT((avg[static_cast<size_t>(e)]->j_bar - j).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(AverageJacobians, UnselectedExpertIsAbsent) {
  Rng rng(8);
  auto p = random_moe(rng, 4, 5, 8);
  p.router.w_r.setZero();
  p.router.b_r.setLinSpaced(8, 1.0, -1.0);  // expert 7 always last
  const MatrixXd batch = sample_gaussian(rng, 10, 4);
  const auto avg = average_expert_jacobians(p, batch, RoutingMode::top_k(2));
  EXPECT_TRUE(avg[0].has_value());
  EXPECT_TRUE(avg[1].has_value());
  for (size_t e = 2; e < 8; ++e) EXPECT_FALSE(avg[e].has_value());
  EXPECT_NEAR(avg[0]->effective_count + avg[1]->effective_count, 10.0, 1e-12);
}

TEST(AverageJacobians, DisjointSupport) {
  Rng rng(9);
  auto p = random_moe(rng, 2, 3, 2);
  p.router.w_r.setZero();
  p.router.w_r(0, 0) = 1.0;
  p.router.w_r(1, 0) = -1.0;
  MatrixXd batch(2, 2);
  batch << 2.0, 0.3, -2.0, 0.7;
  const auto avg = average_expert_jacobians(p, batch, RoutingMode::top_k(1));
  const MatrixXd j0 = mlp_jacobian(p.experts[0], VectorXd(batch.row(0).transpose()));
  const MatrixXd j1 = mlp_jacobian(p.experts[1], VectorXd(batch.row(1).transpose()));
  EXPECT_LT((avg[0]->j_bar - j0).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((avg[1]->j_bar - j1).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(AverageJacobians, BatchOrderInvariant) {
  Rng rng(10);
  const auto p = random_moe(rng, 5, 6, 4);
  const MatrixXd batch = sample_gaussian(rng, 12, 5);
  std::vector<Index> rows(12);
  std::iota(rows.begin(), rows.end(), Index(0));
  std::reverse(rows.begin(), rows.end());
  const MatrixXd shuffled = batch(rows, Eigen::all);
  for (const auto& mode : {RoutingMode::soft(), RoutingMode::top_k(2)}) {
    const auto a = average_expert_jacobians(p, batch, mode);
    const auto b = average_expert_jacobians(p, shuffled, mode);
    for (size_t e = 0; e < a.size(); ++e) {
      ASSERT_EQ(a[e].has_value(), b[e].has_value());
      if (a[e]) EXPECT_LT((a[e]->j_bar - b[e]->j_bar).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(BatchSigma1, ZeroModel) {
  MoeParams<double> p;
  for (int e = 0; e < 3; ++e) p.experts.push_back(MlpParams<double>::zeros(4, 5));
  p.router = {MatrixXd::Zero(3, 4), VectorXd::Zero(3)};
  Rng rng(11);
  const MatrixXd batch = sample_gaussian(rng, 6, 4);
  const auto s = batch_sigma1(p, batch, RoutingMode::soft());
  EXPECT_EQ(s.mean, 0.0);
  EXPECT_EQ(s.max, 0.0);
  for (const auto& e : s.expert) EXPECT_EQ(*e, 0.0);
  EXPECT_EQ(dense_batch_sigma1(p.experts[0], batch).mean, 0.0);
}

TEST(BatchSigma1, SingleExpertSingleSample) {
  Rng rng(12);
  const auto p = random_moe(rng, 4, 6, 1);
  const MatrixXd batch = sample_gaussian(rng, 1, 4);
  const auto s = batch_sigma1(p, batch, RoutingMode::soft());
  EXPECT_NEAR(s.mean, *s.expert[0], 1e-12);
}

TEST(BatchSigma1, MatchesBruteForce) {
  Rng rng(13);
  const auto p = random_moe(rng, 4, 6, 3);
  const MatrixXd batch = sample_gaussian(rng, 8, 4);
  for (const auto& mode : {RoutingMode::soft(), RoutingMode::top_k(2)}) {
    const auto s = batch_sigma1(p, batch, mode);
    double eff_total = 0.0, eff_min = 1e300, eff_max = 0.0;
    std::vector<double> num(3, 0.0), den(3, 0.0);
    for (Index i = 0; i < 8; ++i) {
      const VectorXd x = batch.row(i).transpose();
      const auto g = gate(router_logits(p.router, x), mode);
      MatrixXd eff = MatrixXd::Zero(4, 4);
      for (Index e = 0; e < 3; ++e) {
        const MatrixXd j = mlp_jacobian(p.experts[static_cast<size_t>(e)], x);
        eff += g.gates(e) * j;
        num[static_cast<size_t>(e)] += g.gates(e) * singular_values(j)(0);
        den[static_cast<size_t>(e)] += g.gates(e);
      }
      const double sv = singular_values(eff)(0);
      eff_total += sv;
      eff_min = std::min(eff_min, sv);
      eff_max = std::max(eff_max, sv);
    }
    EXPECT_NEAR(s.mean, eff_total / 8.0, 1e-10);
    EXPECT_NEAR(s.min, eff_min, 1e-10);
    EXPECT_NEAR(s.max, eff_max, 1e-10);
    for (size_t e = 0; e < 3; ++e) {
      if (den[e] > 0) {
        EXPECT_NEAR(*s.expert[e], num[e] / den[e], 1e-10);
      } else {
        EXPECT_FALSE(s.expert[e].has_value());
      }
    }
  }

  const auto& d = p.experts[0];
  double total = 0.0;
  for (Index i = 0; i < 8; ++i) total += singular_values(mlp_jacobian(d, VectorXd(batch.row(i).transpose())))(0);
  EXPECT_NEAR(dense_batch_sigma1(d, batch).mean, total / 8.0, 1e-10);
}

}  // namespace
}  // namespace moegeo
