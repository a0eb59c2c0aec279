#pragma once

#include "trajdistill/data.hpp"
#include "trajdistill/model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace trajdistill {

// ---------------------------------------------------------------------------
// Momentum SGD

struct MomentumState {
  Eigen::VectorXd velocity;
  double gamma = 0.9;
  double eta = 0.01;
  std::int64_t step = 0;
};

MomentumState make_momentum_state(Index n, double gamma, double eta);

/// v' = gamma * v + eta * g, theta' = theta - v'.
std::pair<ParamVector, MomentumState> momentum_step(const ParamVector& params, const Eigen::VectorXd& grad,
                                                    MomentumState state);

/// Velocities from the unrolled sum v_t = eta * (sum_{k<t} gamma^(t-k) g_k + g_t).
std::vector<Eigen::VectorXd> closed_form_velocities(std::span<const Eigen::VectorXd> grads, double gamma, double eta);

/// Cumulative terms delta_t = v_t - eta * g_t = eta * sum_{k<t} gamma^(t-k) g_k,
/// i.e. what momentum adds on top of a plain SGD step (all zero when gamma = 0).
/// Note the eta factor: this is the parameter-space displacement.
std::vector<Eigen::VectorXd> cumulative_terms(std::span<const Eigen::VectorXd> grads, double gamma, double eta);

/// Squared gap between the momentum history an expert segment carries and the
/// one a student rebuilds from zero:
///   || sum_{p=start}^{start+span-1} delta_p(expert) - sum_{p<span} delta_p(student) ||^2
/// where expert deltas accumulate over the whole expert history and student
/// deltas over `student_grads` only.
double alignment_gap(std::span<const Eigen::VectorXd> expert_grads, std::span<const Eigen::VectorXd> student_grads,
                     double gamma, double eta, std::size_t start, std::size_t span);

struct MomentumDiagnostics {
  std::vector<double> delta_norms;  // ||delta_t|| per step
  std::vector<double> epsilon;      // alignment gaps
  double avg_var = 0.0;
};

// ---------------------------------------------------------------------------
// Smoothness-constrained loss

struct SmoothnessConfig {
  /// Per-epoch weights on the cross-entropy term; epochs past the end use 1.
  std::vector<double> lambda_schedule;
  double mu = 1.0;        // gradient penalty weight
  double k_target = 1.0;  // target input-gradient norm

  double lambda(int epoch) const;
  bool penalized() const { return mu > 0.0; }

  /// Ramp 0.5 -> 1.0 (linearly spaced) over `ramp_epochs`, penalty weight 1, K 1.
  static SmoothnessConfig standard(int ramp_epochs = 5, double mu = 1.0, double k_target = 1.0);
  /// Plain cross-entropy.
  static SmoothnessConfig off();

  bool operator==(const SmoothnessConfig&) const = default;
};

std::vector<double> linear_lambda_ramp(int ramp_epochs);

/// lambda_epoch * CE(logits, labels) + mu * mean_i (||d CE_i / d x_i|| - K)^2.
///
/// `inputs` must be the tracked batch that produced `logits`, on a graph with
/// higher-order support whenever mu > 0; per-sample input gradients rely on
/// samples not interacting in the forward pass.
Var smooth_loss(const Var& logits, std::span<const int> labels, const Var& inputs, const SmoothnessConfig& cfg,
                int epoch);

// ---------------------------------------------------------------------------
// Expert trajectories

struct ExpertOptimizer {
  double eta = 0.01;
  double gamma = 0.9;
  int batch_size = 32;
  /// Halve eta once ceil(E/2) epochs are complete.
  bool halve_lr = true;

  bool operator==(const ExpertOptimizer&) const = default;
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double learning_rate = 0.0;
  double lambda = 1.0;
  double delta_sq_mean = 0.0;  // mean ||delta_t||^2 over the epoch's steps
};

struct TrajectoryMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  ExpertOptimizer optimizer;
  SmoothnessConfig smoothness;
  std::uint32_t dataset_fingerprint = 0;
  double initial_train_accuracy = 0.0;
  double initial_test_accuracy = 0.0;
  std::vector<EpochMetrics> metrics;
};

/// checkpoints[0] is the initialization; checkpoints[e] the weights at the end
/// of epoch e, so there are epochs + 1 entries.
struct Trajectory {
  ModelSpec spec;
  std::vector<ParamVector> checkpoints;
  TrajectoryMeta meta;

  int epochs() const { return meta.epochs; }
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(int epoch, const std::string& what) : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// Expert training with momentum SGD under the smoothness-constrained loss.
/// Deterministic in `seed`. Throws TrainingAborted on a non-finite loss.
Trajectory train_expert(const LabeledDataset& data, const ModelSpec& spec, const SmoothnessConfig& smoothness,
                        const ExpertOptimizer& optimizer, int epochs, std::uint64_t seed,
                        const LabeledDataset* test = nullptr);

/// Mean squared distance between consecutive checkpoints.
double avg_var(const Trajectory& traj);

}  // namespace trajdistill
