#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "moegeo/config.hpp"
#include "moegeo/models.hpp"
#include "moegeo/oracles.hpp"

namespace moegeo {
namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Index>(v.size()));
  std::copy(v.begin(), v.end(), out.data());
  return out;
}

// Straight-line evaluation with explicit loops, independent of Eigen products.
VectorXd reference_mlp(const MlpParams<double>& p, const VectorXd& x) {
  VectorXd act(p.d_hidden());
  for (Index j = 0; j < p.d_hidden(); ++j) {
    double z = p.b1(j);
    for (Index i = 0; i < p.d_model(); ++i) z += p.w1(j, i) * x(i);
    act(j) = gelu(z);
  }
  VectorXd y(p.d_model());
  for (Index o = 0; o < p.d_model(); ++o) {
    double s = p.b2(o);
    for (Index j = 0; j < p.d_hidden(); ++j) s += p.w2(o, j) * act(j);
    y(o) = s;
  }
  return y;
}

TEST(MlpForward, ZeroParametersGiveZero) {
  const auto p = MlpParams<double>::zeros(4, 6);
  Rng rng(1);
  const VectorXd x = sample_gaussian(rng, 4, 1);
  EXPECT_EQ(mlp_forward(p, x).y, VectorXd::Zero(4));
}

TEST(MlpForward, IdentityEmbeddingAtOrigin) {
  auto p = MlpParams<double>::zeros(64, 128);
  p.w1.topRows(64).setIdentity();
  p.w2 = p.w1.transpose();
  EXPECT_EQ(mlp_forward(p, VectorXd::Zero(64)).y, VectorXd::Zero(64));
}

TEST(MlpForward, MatchesReferenceEvaluation) {
  Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    const auto p = random_mlp(rng, 8, 16);
    const VectorXd x = sample_gaussian(rng, 8, 1);
    const auto f = mlp_forward(p, x);
    EXPECT_LT((f.y - reference_mlp(p, x)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((f.hidden_pre - (p.w1 * x + p.b1)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MlpForward, BatchMatchesPerSample) {
  Rng rng(3);
  const auto p = random_mlp(rng, 5, 7);
  const MatrixXd x = sample_gaussian(rng, 9, 5);
  MatrixXd pre;
  const MatrixXd y = mlp_forward_batch(p, x, &pre);
  for (Index i = 0; i < x.rows(); ++i) {
    const auto f = mlp_forward(p, VectorXd(x.row(i).transpose()));
    EXPECT_LT((y.row(i).transpose() - f.y).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((pre.row(i).transpose() - f.hidden_pre).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MlpForward, RejectsDimensionMismatch) {
  const auto p = MlpParams<double>::zeros(4, 6);
  EXPECT_THROW(mlp_forward(p, VectorXd::Zero(3)), std::invalid_argument);
}

TEST(RouterLogits, KnownValues) {
  RouterParams<double> r{MatrixXd::Zero(3, 4), VectorXd::Zero(3)};
  EXPECT_EQ(router_logits(r, VectorXd::Ones(4)), VectorXd::Zero(3));
  r.b_r = vec({1, -2, 3});
  EXPECT_EQ(router_logits(r, VectorXd::Ones(4)), r.b_r);
  EXPECT_THROW(router_logits(r, VectorXd::Ones(5)), std::invalid_argument);
}

TEST(RouterLogits, MatchesReferenceEvaluation) {
  Rng rng(4);
  const auto p = random_moe(rng, 6, 3, 5);
  const VectorXd x = sample_gaussian(rng, 6, 1);
  const VectorXd s = router_logits(p.router, x);
  for (Index e = 0; e < 5; ++e) {
    double ref = p.router.b_r(e);
    for (Index i = 0; i < 6; ++i) ref += p.router.w_r(e, i) * x(i);
    EXPECT_NEAR(s(e), ref, 1e-12);
  }
}

TEST(Gate, TopTwoExample) {
  const auto g = gate(vec({3, 1, 2, 0}), RoutingMode::top_k(2));
  EXPECT_EQ(g.selected, (std::vector<Index>{0, 2}));
  EXPECT_NEAR(g.gates(0), 0.731059, 1e-5);
  EXPECT_EQ(g.gates(1), 0.0);
  EXPECT_NEAR(g.gates(2), 0.268941, 1e-5);
  EXPECT_EQ(g.gates(3), 0.0);
}

TEST(Gate, TiesGoToLowerIndex) {
  const auto g = gate(VectorXd::Constant(5, 0.7), RoutingMode::top_k(2));
  EXPECT_EQ(g.selected, (std::vector<Index>{0, 1}));
  EXPECT_EQ(g.gates(0), 0.5);
  EXPECT_EQ(g.gates(1), 0.5);
  EXPECT_EQ(g.gates.tail(3), VectorXd::Zero(3));
}

TEST(Gate, KEqualsESoft) {
  Rng rng(5);
  const VectorXd s = sample_gaussian(rng, 8, 1);
  const auto full = gate(s, RoutingMode::top_k(8));
  const auto soft = gate(s, RoutingMode::soft());
  EXPECT_LT((full.gates - soft.gates).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(full.selected, soft.selected);
}

TEST(Gate, TemperatureScalesLogits) {
  const VectorXd s = vec({1, 2});
  const auto hot = gate(s, RoutingMode::soft(2.0));
  const auto ref = softmax(VectorXd(s / 2.0));
  EXPECT_LT((hot.gates - ref).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Gate, RejectsInvalidModes) {
  const VectorXd s = vec({1, 2, 3});
  EXPECT_THROW(gate(s, RoutingMode::top_k(4)), std::invalid_argument);
  EXPECT_THROW(gate(s, RoutingMode::top_k(0)), std::invalid_argument);
  EXPECT_THROW(gate(s, RoutingMode::dense()), std::invalid_argument);
  EXPECT_THROW(gate(s, RoutingMode::soft(0.0)), std::invalid_argument);
}

TEST(Gate, PropertySuite) {
  for (const auto& r : check_gate_invariants(11, 1000)) {
    EXPECT_TRUE(r.passed) << r.name << " max_error=" << r.max_error;
  }
}

TEST(Gate, GatesVanishOutsideSelection) {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const VectorXd s = sample_gaussian(rng, 8, 1);
    const auto g = gate(s, RoutingMode::top_k(3));
    ASSERT_EQ(g.selected.size(), 3u);
    EXPECT_TRUE(std::is_sorted(g.selected.begin(), g.selected.end()));
    for (Index e = 0; e < 8; ++e) {
      const bool chosen = std::find(g.selected.begin(), g.selected.end(), e) != g.selected.end();
      if (chosen) {
        EXPECT_GT(g.gates(e), 0.0);
      } else {
        EXPECT_EQ(g.gates(e), 0.0);
      }
    }
  }
}

TEST(Gate, PermutationConsistent) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const VectorXd s = sample_gaussian(rng, 6, 1);
    std::vector<Index> perm(6);
    std::iota(perm.begin(), perm.end(), Index(0));
    std::rotate(perm.begin(), perm.begin() + (t % 6), perm.end());
    VectorXd permuted(6);
    for (Index i = 0; i < 6; ++i) permuted(i) = s(perm[static_cast<size_t>(i)]);
    const auto a = gate(s, RoutingMode::top_k(2));
    const auto b = gate(permuted, RoutingMode::top_k(2));
    for (Index i = 0; i < 6; ++i) EXPECT_EQ(b.gates(i), a.gates(perm[static_cast<size_t>(i)]));
  }
}

TEST(MoeForward, SingleExpertEqualsExpert) {
  Rng rng(8);
  const auto p = random_moe(rng, 4, 6, 1);
  const VectorXd x = sample_gaussian(rng, 4, 1);
  const auto out = moe_forward(p, x, RoutingMode::soft());
  EXPECT_LT((out.y - mlp_forward(p.experts[0], x).y).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MoeForward, IdenticalExpertsIgnoreGates) {
  Rng rng(9);
  auto p = random_moe(rng, 4, 6, 5);
  for (auto& e : p.experts) e = p.experts[0];
  const VectorXd x = sample_gaussian(rng, 4, 1);
  const VectorXd ref = mlp_forward(p.experts[0], x).y;
  for (const auto& mode : {RoutingMode::soft(), RoutingMode::top_k(2)}) {
    EXPECT_LT((moe_forward(p, x, mode).y - ref).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MoeForward, SoftIsGateWeightedSum) {
  Rng rng(10);
  const auto p = random_moe(rng, 16, 8, 8);
  const VectorXd x = sample_gaussian(rng, 16, 1);
  const auto out = moe_forward(p, x, RoutingMode::soft());
  const auto g = gate(router_logits(p.router, x), RoutingMode::soft());
  VectorXd ref = VectorXd::Zero(16);
  for (Index e = 0; e < 8; ++e) ref += g.gates(e) * mlp_forward(p.experts[static_cast<size_t>(e)], x).y;
  EXPECT_LT((out.y - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MoeForward, UnselectedExpertsNotEvaluated) {
  Rng rng(11);
  const auto p = random_moe(rng, 4, 3, 6);
  const auto out = moe_forward(p, VectorXd(sample_gaussian(rng, 4, 1)), RoutingMode::top_k(2));
  long present = 0;
  for (Index e = 0; e < 6; ++e) {
    const bool chosen =
        std::find(out.routing.selected.begin(), out.routing.selected.end(), e) != out.routing.selected.end();
    EXPECT_EQ(out.expert_outputs[static_cast<size_t>(e)].has_value(), chosen);
    present += chosen;
  }
  EXPECT_EQ(present, 2);
}

TEST(MoeForward, TopKJumpsOnlyAtLogitCrossing) {
  // Two experts, router logit difference equals x_0: crossing at x_0 = 0.
  Rng rng(12);
  auto p = random_moe(rng, 3, 4, 2);
  p.router.w_r.setZero();
  p.router.w_r(0, 0) = 1.0;
  p.router.b_r.setZero();
  const auto mode = RoutingMode::top_k(1);
  auto y_at = [&](double x0) {
    VectorXd x = VectorXd::Constant(3, 0.3);
    x(0) = x0;
    return moe_forward(p, x, mode).y;
  };
  const double eps = 1e-7;
  EXPECT_LT((y_at(0.5) - y_at(0.5 + eps)).norm(), 1e-5);
  EXPECT_GT((y_at(-eps) - y_at(eps)).norm(), 1e-3);
}

TEST(InitParams, DeterministicAndZeroBiases) {
  ModelConfig cfg;
  const auto a = init_params(cfg, Rng(3));
  const auto b = init_params(cfg, Rng(3));
  EXPECT_EQ(a.dense.w1, b.dense.w1);
  EXPECT_EQ(a.moe.router.w_r, b.moe.router.w_r);
  EXPECT_EQ(a.moe.experts[7].w2, b.moe.experts[7].w2);
  EXPECT_EQ(a.dense.b1, VectorXd::Zero(128));
  EXPECT_EQ(a.dense.b2, VectorXd::Zero(64));
  EXPECT_EQ(a.moe.router.b_r, VectorXd::Zero(8));
  for (const auto& e : a.moe.experts) {
    EXPECT_EQ(e.b1, VectorXd::Zero(128));
    EXPECT_EQ(e.b2, VectorXd::Zero(64));
  }
  EXPECT_NE(init_params(cfg, Rng(4)).dense.w1, a.dense.w1);
}

TEST(InitParams, FanInVariance) {
  ModelConfig cfg;
  const auto p = init_params(cfg, Rng(0));
  const auto& w = p.dense.w1;
  const double mean = w.mean();
  const double var = (w.array() - mean).square().sum() / static_cast<double>(w.size() - 1);
  EXPECT_NEAR(var, 1.0 / 64.0, 0.2 / 64.0);
  const auto& w2 = p.dense.w2;
  const double var2 = (w2.array() - w2.mean()).square().sum() / static_cast<double>(w2.size() - 1);
  EXPECT_NEAR(var2, 1.0 / 128.0, 0.2 / 128.0);
}

TEST(InitParams, CapacityMatchedPerExpert) {
  ModelConfig cfg;
  const auto p = init_params(cfg, Rng(0));
  ASSERT_EQ(p.moe.n_experts(), 8);
  for (const auto& e : p.moe.experts) {
    EXPECT_EQ(e.w1.rows(), p.dense.w1.rows());
    EXPECT_EQ(e.w1.cols(), p.dense.w1.cols());
    EXPECT_EQ(e.parameter_count(), p.dense.parameter_count());
  }
  EXPECT_NO_THROW(p.moe.validate());
}

TEST(MoeParams, ValidateRejectsMismatchedExperts) {
  Rng rng(13);
  auto p = random_moe(rng, 4, 3, 3);
  p.experts[1] = random_mlp(rng, 4, 5);
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace moegeo
