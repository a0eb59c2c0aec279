#include "trajdistill/buffer.hpp"

#include "trajdistill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace trajdistill {

MomentumState make_momentum_state(Index n, double gamma, double eta) {
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("momentum factor must lie in [0, 1)");
  if (!(eta > 0.0)) throw std::invalid_argument("learning rate must be positive");
  return MomentumState{Eigen::VectorXd::Zero(n), gamma, eta, 0};
}

std::pair<ParamVector, MomentumState> momentum_step(const ParamVector& params, const Eigen::VectorXd& grad,
                                                    MomentumState state) {
  if (grad.size() != params.size() || state.velocity.size() != params.size()) {
    throw ShapeError("momentum_step: gradient/velocity length does not match parameters");
  }
  if (!grad.allFinite()) {
    throw NumericalError("momentum_step: non-finite gradient at step " + std::to_string(state.step));
  }
  state.velocity = state.gamma * state.velocity + state.eta * grad;
  ParamVector next{params.values - state.velocity, params.layout};
  ++state.step;
  return {std::move(next), std::move(state)};
}

std::vector<Eigen::VectorXd> closed_form_velocities(std::span<const Eigen::VectorXd> grads, double gamma, double eta) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(grads.size());
  for (std::size_t t = 0; t < grads.size(); ++t) {
    Eigen::VectorXd acc = grads[t];
    for (std::size_t k = 0; k < t; ++k) acc += std::pow(gamma, static_cast<double>(t - k)) * grads[k];
    out.push_back(eta * acc);
  }
  return out;
}

std::vector<Eigen::VectorXd> cumulative_terms(std::span<const Eigen::VectorXd> grads, double gamma, double eta) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(grads.size());
  if (grads.empty()) return out;
  Eigen::VectorXd v = Eigen::VectorXd::Zero(grads.front().size());
  for (const auto& g : grads) {
    v = gamma * v + eta * g;
    out.push_back(v - eta * g);
  }
  return out;
}

double alignment_gap(std::span<const Eigen::VectorXd> expert_grads, std::span<const Eigen::VectorXd> student_grads,
                     double gamma, double eta, std::size_t start, std::size_t span) {
  if (start + span > expert_grads.size() || span > student_grads.size()) {
    throw std::out_of_range("alignment_gap: segment exceeds recorded gradients");
  }
  if (span == 0) return 0.0;
  const auto expert = cumulative_terms(expert_grads.first(start + span), gamma, eta);
  const auto student = cumulative_terms(student_grads.first(span), gamma, eta);
  Eigen::VectorXd gap = Eigen::VectorXd::Zero(expert.front().size());
  for (std::size_t p = 0; p < span; ++p) gap += expert[start + p] - student[p];
  return gap.squaredNorm();
}

// ---------------------------------------------------------------------------

std::vector<double> linear_lambda_ramp(int ramp_epochs) {
  std::vector<double> out;
  if (ramp_epochs <= 0) return out;
  if (ramp_epochs == 1) return {1.0};
  for (int e = 0; e < ramp_epochs; ++e) out.push_back(0.5 + 0.5 * e / static_cast<double>(ramp_epochs - 1));
  return out;
}

double SmoothnessConfig::lambda(int epoch) const {
  if (epoch < 0) throw std::invalid_argument("negative epoch");
  if (static_cast<std::size_t>(epoch) >= lambda_schedule.size()) return 1.0;
  return lambda_schedule[static_cast<std::size_t>(epoch)];
}

SmoothnessConfig SmoothnessConfig::standard(int ramp_epochs, double mu, double k_target) {
  if (mu < 0.0 || !(k_target > 0.0)) throw std::invalid_argument("smoothness: need mu >= 0 and K > 0");
  return SmoothnessConfig{linear_lambda_ramp(ramp_epochs), mu, k_target};
}

SmoothnessConfig SmoothnessConfig::off() { return SmoothnessConfig{{}, 0.0, 1.0}; }

Var smooth_loss(const Var& logits, std::span<const int> labels, const Var& inputs, const SmoothnessConfig& cfg,
                int epoch) {
  const Var per_sample = cross_entropy_per_sample(logits, labels);
  Var loss = scale(mean(per_sample), cfg.lambda(epoch));
  if (!cfg.penalized()) return loss;

  Graph& g = logits.graph();
  const Var gx = g.grad(sum(per_sample), inputs, /*create_graph=*/true);
  const Index n = inputs.shape()[0];
  Shape per_row(inputs.shape().size(), 1);
  per_row[0] = n;
  // The 1e-12 keeps sqrt differentiable for samples with a vanishing gradient.
  const Var norms = sqrt(add_scalar(reshape(reduce_sum_to(square(gx), per_row), Shape{n}), 1e-12));
  const Var penalty = mean(square(add_scalar(norms, -cfg.k_target)));
  return add(loss, scale(penalty, cfg.mu));
}

// ---------------------------------------------------------------------------

namespace {

struct EpochOutcome {
  double loss = 0.0;
  double delta_sq = 0.0;
};

}  // namespace

Trajectory train_expert(const LabeledDataset& data, const ModelSpec& spec, const SmoothnessConfig& smoothness,
                        const ExpertOptimizer& optimizer, int epochs, std::uint64_t seed, const LabeledDataset* test) {
  if (epochs < 1) throw std::invalid_argument("train_expert: need at least one epoch");
  if (optimizer.batch_size < 1 || optimizer.batch_size > data.size()) {
    throw std::invalid_argument("train_expert: batch size must lie in [1, dataset size]");
  }
  data.validate();

  Trajectory traj;
  traj.spec = spec;
  traj.meta.seed = seed;
  traj.meta.epochs = epochs;
  traj.meta.optimizer = optimizer;
  traj.meta.smoothness = smoothness;
  traj.meta.dataset_fingerprint = fingerprint(data);

  ParamVector params = init_params(spec, derive_seed(seed, "expert-init"));
  MomentumState state = make_momentum_state(params.size(), optimizer.gamma, optimizer.eta);
  Rng shuffle(derive_seed(seed, "expert-shuffle"));
  traj.checkpoints.push_back(params);
  traj.meta.initial_train_accuracy = accuracy(spec, params, data.images, data.labels);
  if (test) traj.meta.initial_test_accuracy = accuracy(spec, params, test->images, test->labels);

  const int halve_after = (epochs + 1) / 2;
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});

  for (int e = 0; e < epochs; ++e) {
    if (optimizer.halve_lr && e == halve_after) state.eta = 0.5 * optimizer.eta;
    std::shuffle(order.begin(), order.end(), shuffle);
    EpochOutcome out;
    Index steps = 0;
    for (Index begin = 0; begin < data.size(); begin += optimizer.batch_size, ++steps) {
      const Index end = std::min<Index>(begin + optimizer.batch_size, data.size());
      const std::span<const Index> idx(order.data() + begin, static_cast<std::size_t>(end - begin));
      const std::vector<int> labels = data.gather_labels(idx);

      Eigen::VectorXd grad;
      try {
        Graph g(smoothness.penalized());
        const Var p = g.variable(params.tensor());
        const Var x = smoothness.penalized() ? g.variable(data.gather(idx)) : g.constant(data.gather(idx));
        const Var loss = smooth_loss(forward(spec, p, x).logits, labels, x, smoothness, e);
        out.loss += loss.value().item();
        grad = g.grad(loss, p, false).value().array().matrix();
      } catch (const NumericalError& err) {
        throw TrainingAborted(e + 1, "expert training diverged in epoch " + std::to_string(e + 1) + ": " + err.what());
      }
      try {
        std::tie(params, state) = momentum_step(params, grad, std::move(state));
      } catch (const NumericalError& err) {
        throw TrainingAborted(e + 1, "expert training diverged in epoch " + std::to_string(e + 1) + ": " + err.what());
      }
      out.delta_sq += (state.velocity - state.eta * grad).squaredNorm();
    }
    if (!std::isfinite(out.loss)) {
      throw TrainingAborted(e + 1, "expert training diverged in epoch " + std::to_string(e + 1));
    }
    traj.checkpoints.push_back(params);
    EpochMetrics m;
    m.epoch = e + 1;
    m.loss = out.loss / static_cast<double>(steps);
    m.delta_sq_mean = out.delta_sq / static_cast<double>(steps);
    m.learning_rate = state.eta;
    m.lambda = smoothness.lambda(e);
    m.train_accuracy = accuracy(spec, params, data.images, data.labels);
    if (test) m.test_accuracy = accuracy(spec, params, test->images, test->labels);
    traj.meta.metrics.push_back(m);
  }
  return traj;
}

double avg_var(const Trajectory& traj) {
  if (traj.checkpoints.size() < 2) throw std::invalid_argument("avg_var: need at least two checkpoints");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < traj.checkpoints.size(); ++i) {
    total += param_distance_sq(traj.checkpoints[i], traj.checkpoints[i + 1]);
  }
  return total / static_cast<double>(traj.checkpoints.size() - 1);
}

}  // namespace trajdistill
