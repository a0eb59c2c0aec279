#pragma once

#include "trajdistill/buffer.hpp"
#include "trajdistill/data.hpp"
#include "trajdistill/model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajdistill {

// ---------------------------------------------------------------------------
// K-means and representative initialization

struct KMeansResult {
  Eigen::MatrixXd centroids;  // K x d
  std::vector<int> assignments;
  double inertia = 0.0;
  int iterations = 0;
};

/// Lloyd iterations from k-means++ seeding, best of `restarts` runs. An empty
/// cluster is re-seeded with the point farthest from its centroid.
/// Deterministic in `seed`.
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iters = 100, int restarts = 10);

/// Rows of `features` chosen to represent them: the sample nearest each
/// k-means centroid. With ipc >= 50 and ipc % 10 == 0 the features are split
/// into 10 clusters and each contributes its ipc / 10 nearest samples.
std::vector<Index> select_representatives(const Eigen::MatrixXd& features, int ipc, std::uint64_t seed);

/// Synthetic set seeded with the real samples closest to per-class centroids
/// of classifier-input features, computed with the last checkpoint of `traj`.
SyntheticDataset representative_init(const LabeledDataset& data, const Trajectory& traj, int ipc, double alpha0,
                                     std::uint64_t seed);

// ---------------------------------------------------------------------------
// Loss components

/// Loss-balancing factor for a student started at expert epoch `start`:
/// ln(|start - middle| + vartheta) at or past middle = max_start / 2, the
/// reciprocal of that before it.
double balance_coefficient(double start, double max_start, double vartheta);

struct MatchPoint {
  int student_step;   // 1-based inner step after which the match is taken
  int expert_offset;  // target checkpoint is start + expert_offset
};

/// Points floor(i N / M) -> expert start + i for i = 1..M-1, plus the terminal
/// N -> start + M. With `intermediate` off only the terminal point remains.
std::vector<MatchPoint> match_schedule(int student_steps, int expert_epochs, bool intermediate = true);

enum class BetaMode { equal, scaled };
std::string to_string(BetaMode m);
BetaMode parse_beta_mode(const std::string& s);
double beta_weight(BetaMode mode, const MatchPoint& p, int expert_epochs);

class DegenerateSegment : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// ||student - target||^2 / ||start - target||^2.
double matching_loss(const ParamVector& student, const ParamVector& start, const ParamVector& target);
Var matching_loss(const Var& student, const ParamVector& start, const ParamVector& target);

/// nu * CE(student(augment(images)), labels).
Var inner_loss(const ModelSpec& spec, const Var& student, const Var& images, std::span<const int> labels,
               const AugmentationPolicy& policy, std::uint64_t step_seed, double nu);

/// theta + rho * d, where d is Gaussian noise rescaled per filter to the
/// Frobenius norm of the matching filter of theta. Zero-norm filters get no
/// perturbation; their count is stored in `zero_filters` when given.
ParamVector perturb_weights(const ParamVector& theta, double rho, std::uint64_t seed, int* zero_filters = nullptr);

// ---------------------------------------------------------------------------
// Alignment loop

struct DistillConfig {
  int expert_epochs = 2;   // M
  int student_steps = 10;  // N
  int max_start = 5;       // T+
  int ipc = 1;
  BetaMode beta = BetaMode::equal;
  double rho = 0.1;
  double vartheta = 8.0;
  double alpha0 = 0.01;
  int outer_iters = 200;
  double lr_images = 1.0;
  double lr_alpha = 1e-4;
  AugmentationPolicy policy;
  std::uint64_t seed = 0;
  bool balance = true;
  bool intermediate = true;
  int syn_batch = 0;  // 0 = whole synthetic set per inner step

  /// Throws std::invalid_argument naming the offending field.
  void validate(int trajectory_epochs) const;
  /// rho = 0, nu = 1, terminal matching only, equal beta.
  DistillConfig vanilla() const;
};

/// Everything one outer iteration needs besides the synthetic set.
struct MetaTask {
  const Trajectory* trajectory = nullptr;
  int start = 0;
  ParamVector start_params;  // possibly perturbed expert weights at `start`
  double nu = 1.0;
  std::uint64_t aug_seed = 0;
  std::uint64_t batch_seed = 0;
};

struct MetaStep {
  double loss = 0.0;
  std::vector<double> match_losses;
  Tensor grad_images;
  double grad_alpha = 0.0;
};

/// Unrolls N inner SGD steps from task.start_params with learning rate alpha
/// and returns the weighted matching loss and, if `with_grad`, its gradient
/// with respect to the synthetic pixels and alpha.
MetaStep meta_step(const MetaTask& task, const Tensor& images, std::span<const int> labels, double alpha,
                   const DistillConfig& cfg, bool with_grad = true);

struct DistillLogRow {
  int iteration = 0;
  int trajectory = 0;
  int start_epoch = 0;
  double nu = 1.0;
  std::vector<double> match_losses;
  double loss = 0.0;
  double alpha = 0.0;
  double grad_norm_images = 0.0;
  double grad_alpha = 0.0;
  bool skipped = false;
};

struct DistillResult {
  SyntheticDataset syn;
  std::vector<DistillLogRow> log;
  int skipped = 0;
};

class DistillAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Called after each outer iteration with the current synthetic set.
using DistillObserver = std::function<void(int iteration, const SyntheticDataset&)>;

MetaTask sample_task(std::span<const Trajectory> trajectories, const DistillConfig& cfg, int iteration);

DistillResult run_distillation(std::span<const Trajectory> trajectories, SyntheticDataset syn,
                               const DistillConfig& cfg, const DistillObserver& observer = {});

}  // namespace trajdistill
