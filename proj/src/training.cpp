#include "moegeo/training.hpp"

#include <cmath>
#include <string>

#include "moegeo/jacobians.hpp"

namespace moegeo {

namespace {

constexpr std::uint64_t kInputStream = 1;
constexpr std::uint64_t kTargetStream = 2;

struct MlpCache {
  MatrixXd act;    // gelu(pre), rows x d_hidden
  MatrixXd slope;  // gelu'(pre)
  MatrixXd out;    // rows x d_model
};

// Same arithmetic as mlp_forward_batch, with Phi evaluated once per unit for
// both the activation and its derivative.
MlpCache mlp_cached_forward(const MlpParams<double>& p, const MatrixXd& x) {
  MlpCache c;
  MatrixXd pre = x * p.w1.transpose();
  pre.rowwise() += p.b1.transpose();
  c.act.resize(pre.rows(), pre.cols());
  c.slope.resize(pre.rows(), pre.cols());
  for (Index j = 0; j < pre.cols(); ++j) {
    for (Index i = 0; i < pre.rows(); ++i) {
      const double z = pre(i, j);
      const double cdf = normal_cdf(z);
      c.act(i, j) = z * cdf;
      c.slope(i, j) = cdf + z * normal_pdf(z);
    }
  }
  c.out = c.act * p.w2.transpose();
  c.out.rowwise() += p.b2.transpose();
  return c;
}

// Accumulates parameter gradients for output gradient d_out (rows x d_model).
void mlp_backward(const MlpParams<double>& p, const MatrixXd& x, const MlpCache& c, const MatrixXd& d_out,
                  MlpParams<double>& g) {
  g.w2.noalias() += d_out.transpose() * c.act;
  g.b2 += d_out.colwise().sum().transpose();
  MatrixXd d_pre = (d_out * p.w2).cwiseProduct(c.slope);
  g.w1.noalias() += d_pre.transpose() * x;
  g.b1 += d_pre.colwise().sum().transpose();
}

struct Routing {
  MatrixXd gates;                              // N x E
  std::vector<std::vector<Index>> rows_for;    // per expert, selected sample rows
};

Routing route_batch(const MoeParams<double>& p, const MatrixXd& x, const RoutingMode& mode) {
  Routing r;
  const Index n = x.rows();
  r.gates = MatrixXd::Zero(n, p.n_experts());
  r.rows_for.resize(p.experts.size());
  MatrixXd logits = x * p.router.w_r.transpose();
  logits.rowwise() += p.router.b_r.transpose();
  for (Index i = 0; i < n; ++i) {
    const auto out = gate(VectorXd(logits.row(i).transpose()), mode);
    r.gates.row(i) = out.gates.transpose();
    for (Index e : out.selected) r.rows_for[static_cast<size_t>(e)].push_back(i);
  }
  return r;
}

MlpParams<double> zeros_like(const MlpParams<double>& p) { return MlpParams<double>::zeros(p.d_model(), p.d_hidden()); }

MoeParams<double> zeros_like(const MoeParams<double>& p) {
  MoeParams<double> g;
  for (const auto& e : p.experts) g.experts.push_back(zeros_like(e));
  g.router.w_r = MatrixXd::Zero(p.router.w_r.rows(), p.router.w_r.cols());
  g.router.b_r = VectorXd::Zero(p.router.b_r.size());
  return g;
}

std::span<double> view(MatrixXd& m) { return {m.data(), static_cast<size_t>(m.size())}; }
std::span<double> view(VectorXd& v) { return {v.data(), static_cast<size_t>(v.size())}; }

void check_finite_loss(double loss, int iteration, const std::string& label) {
  if (!std::isfinite(loss)) {
    throw DivergenceError(label + ": non-finite loss at iteration " + std::to_string(iteration));
  }
}

bool should_log(int t, const ModelConfig& cfg) { return t % cfg.log_every == 0 || t == cfg.iterations; }

}  // namespace

Batch make_batch(const ModelConfig& cfg, const Rng& rng) {
  Rng input_rng = rng.fork(kInputStream);
  Rng target_rng = rng.fork(kTargetStream);
  return {sample_gaussian(input_rng, cfg.batch_size, cfg.d_model),
          sample_gaussian(target_rng, cfg.batch_size, cfg.d_model)};
}

double mse_loss(const MatrixXd& pred, const MatrixXd& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw std::invalid_argument("mse_loss: shape mismatch");
  }
  if (pred.size() == 0) throw std::invalid_argument("mse_loss: empty input");
  return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

LossAndGrad<MlpParams<double>> backward(const MlpParams<double>& p, const Batch& batch) {
  const MlpCache c = mlp_cached_forward(p, batch.inputs);
  LossAndGrad<MlpParams<double>> out{mse_loss(c.out, batch.targets), zeros_like(p)};
  const MatrixXd d_out = 2.0 * (c.out - batch.targets) / static_cast<double>(c.out.size());
  mlp_backward(p, batch.inputs, c, d_out, out.grads);
  return out;
}

MatrixXd moe_forward_batch(const MoeParams<double>& p, const MatrixXd& x, const RoutingMode& mode) {
  const Routing r = route_batch(p, x, mode);
  MatrixXd y = MatrixXd::Zero(x.rows(), p.d_model());
  for (size_t e = 0; e < p.experts.size(); ++e) {
    const auto& rows = r.rows_for[e];
    if (rows.empty()) continue;
    const MatrixXd xe = x(rows, Eigen::all);
    const MatrixXd fe = mlp_forward_batch(p.experts[e], xe);
    for (size_t k = 0; k < rows.size(); ++k) {
      y.row(rows[k]) += r.gates(rows[k], static_cast<Index>(e)) * fe.row(static_cast<Index>(k));
    }
  }
  return y;
}

LossAndGrad<MoeParams<double>> backward(const MoeParams<double>& p, const Batch& batch, const RoutingMode& mode) {
  if (mode.kind == RoutingKind::dense) throw std::invalid_argument("backward: dense mode on MoE parameters");
  const MatrixXd& x = batch.inputs;
  const Routing r = route_batch(p, x, mode);
  const size_t e_count = p.experts.size();

  std::vector<MatrixXd> inputs(e_count);
  std::vector<MlpCache> caches(e_count);
  MatrixXd y = MatrixXd::Zero(x.rows(), p.d_model());
  for (size_t e = 0; e < e_count; ++e) {
    const auto& rows = r.rows_for[e];
    if (rows.empty()) continue;
    inputs[e] = x(rows, Eigen::all);
    caches[e] = mlp_cached_forward(p.experts[e], inputs[e]);
    for (size_t k = 0; k < rows.size(); ++k) {
      y.row(rows[k]) += r.gates(rows[k], static_cast<Index>(e)) * caches[e].out.row(static_cast<Index>(k));
    }
  }

  LossAndGrad<MoeParams<double>> out{mse_loss(y, batch.targets), zeros_like(p)};
  const MatrixXd d_y = 2.0 * (y - batch.targets) / static_cast<double>(y.size());

  // d_gate(i, e) = <dL/dy_i, f_e(x_i)> for selected pairs.
  MatrixXd d_gate = MatrixXd::Zero(x.rows(), p.n_experts());
  for (size_t e = 0; e < e_count; ++e) {
    const auto& rows = r.rows_for[e];
    if (rows.empty()) continue;
    const auto col = static_cast<Index>(e);
    MatrixXd d_out(static_cast<Index>(rows.size()), p.d_model());
    for (size_t k = 0; k < rows.size(); ++k) {
      const auto ki = static_cast<Index>(k);
      d_out.row(ki) = r.gates(rows[k], col) * d_y.row(rows[k]);
      d_gate(rows[k], col) = d_y.row(rows[k]).dot(caches[e].out.row(ki));
    }
    mlp_backward(p.experts[e], inputs[e], caches[e], d_out, out.grads.experts[e]);
  }

  // Softmax over the selected set: ds_e = g_e (dg_e - sum_j g_j dg_j) / T.
  // Unselected experts have g_e = 0, so their logit gradient vanishes.
  const double inv_t = 1.0 / mode.temperature;
  MatrixXd d_logits(x.rows(), p.n_experts());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mean = r.gates.row(i).dot(d_gate.row(i));
    d_logits.row(i) = (r.gates.row(i).array() * (d_gate.row(i).array() - mean) * inv_t).matrix();
  }
  out.grads.router.w_r.noalias() += d_logits.transpose() * x;
  out.grads.router.b_r += d_logits.colwise().sum().transpose();
  return out;
}

std::vector<std::span<double>> parameter_spans(MlpParams<double>& p) {
  return {view(p.w1), view(p.b1), view(p.w2), view(p.b2)};
}

std::vector<std::span<double>> parameter_spans(MoeParams<double>& p) {
  std::vector<std::span<double>> out;
  for (auto& e : p.experts) {
    auto s = parameter_spans(e);
    out.insert(out.end(), s.begin(), s.end());
  }
  out.push_back(view(p.router.w_r));
  out.push_back(view(p.router.b_r));
  return out;
}

AdamState AdamState::for_params(const std::vector<std::span<double>>& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& t : params) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

void adam_step(AdamState& state, const std::vector<std::span<double>>& params,
               const std::vector<std::span<double>>& grads) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: tensor count mismatch");
  }
  ++state.step_count;
  const double correction1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double correction2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (size_t t = 0; t < params.size(); ++t) {
    auto& m = state.m[t];
    auto& v = state.v[t];
    if (params[t].size() != grads[t].size() || params[t].size() != m.size()) {
      throw std::invalid_argument("adam_step: tensor shape mismatch");
    }
    for (size_t i = 0; i < m.size(); ++i) {
      const double g = grads[t][i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      params[t][i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

TrainingTrace train_dense(MlpParams<double>& p, const Batch& batch, const ModelConfig& cfg) {
  TrainingTrace trace;
  AdamState adam = AdamState::for_params(parameter_spans(p), cfg.lr);
  for (int t = 0;; ++t) {
    auto lg = backward(p, batch);
    check_finite_loss(lg.loss, t, "dense");
    if (should_log(t, cfg)) {
      const auto s = dense_batch_sigma1(p, batch.inputs);
      trace.records.push_back({t, lg.loss, s.mean, s.min, s.max, {}, {}});
    }
    if (t == cfg.iterations) break;
    adam_step(adam, parameter_spans(p), parameter_spans(lg.grads));
  }
  return trace;
}

TrainingTrace train_moe(MoeParams<double>& p, const Batch& batch, const RoutingMode& mode, const ModelConfig& cfg) {
  TrainingTrace trace;
  AdamState adam = AdamState::for_params(parameter_spans(p), cfg.lr);
  for (int t = 0;; ++t) {
    auto lg = backward(p, batch, mode);
    check_finite_loss(lg.loss, t, mode.label());
    if (should_log(t, cfg)) {
      const auto s = batch_sigma1(p, batch.inputs, mode);
      trace.records.push_back({t, lg.loss, s.mean, s.min, s.max, s.expert, s.effective_count});
    }
    if (t == cfg.iterations) break;
    adam_step(adam, parameter_spans(p), parameter_spans(lg.grads));
  }
  return trace;
}

RoutingMode top_k_mode(const ModelConfig& cfg) { return RoutingMode::top_k(cfg.k, cfg.temperature); }
RoutingMode soft_mode(const ModelConfig& cfg) { return RoutingMode::soft(cfg.temperature); }

TrainingResult train(const ModelConfig& cfg, const Rng& rng) {
  cfg.validate();
  TrainingResult out;
  out.batch = make_batch(cfg, rng);
  const InitialParams init = init_params(cfg, rng);
  if (cfg.runs("dense")) {
    TrainedModel<MlpParams<double>> m{init.dense, {}};
    m.trace = train_dense(m.params, out.batch, cfg);
    out.dense = std::move(m);
  }
  if (cfg.runs("top_k")) {
    TrainedModel<MoeParams<double>> m{init.moe, {}};
    m.trace = train_moe(m.params, out.batch, top_k_mode(cfg), cfg);
    out.top_k = std::move(m);
  }
  if (cfg.runs("soft")) {
    TrainedModel<MoeParams<double>> m{init.moe, {}};
    m.trace = train_moe(m.params, out.batch, soft_mode(cfg), cfg);
    out.soft = std::move(m);
  }
  return out;
}

}  // namespace moegeo
