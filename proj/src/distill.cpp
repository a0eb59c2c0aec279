#include "trajdistill/distill.hpp"

#include "trajdistill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace trajdistill {

// ---------------------------------------------------------------------------
// K-means

namespace {

double sq_dist(const Eigen::MatrixXd& a, Index i, const Eigen::MatrixXd& b, Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

// Nearest centroid, ties to the lower index.
std::pair<int, double> nearest(const Eigen::MatrixXd& points, Index i, const Eigen::MatrixXd& centroids) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index c = 0; c < centroids.rows(); ++c) {
    const double d = sq_dist(points, i, centroids, c);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return {best, best_d};
}

}  // namespace

namespace {

KMeansResult lloyd(const Eigen::MatrixXd& points, int k, Rng& rng, int max_iters) {
  const Index n = points.rows();
  KMeansResult res;
  res.centroids.resize(k, points.cols());

  // k-means++ seeding.
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  Index first = std::uniform_int_distribution<Index>(0, n - 1)(rng);
  res.centroids.row(0) = points.row(first);
  chosen[static_cast<std::size_t>(first)] = 1;
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], sq_dist(points, i, res.centroids, c - 1));
      total += d2[static_cast<std::size_t>(i)];
    }
    Index pick = -1;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (Index i = 0; i < n; ++i) {
        r -= d2[static_cast<std::size_t>(i)];
        if (r <= 0.0 && d2[static_cast<std::size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {
        for (Index i = n; i-- > 0;)
          if (d2[static_cast<std::size_t>(i)] > 0.0) {
            pick = i;
            break;
          }
      }
    } else {
      // All remaining points coincide with centroids; take unused ones in order.
      for (Index i = 0; i < n && pick < 0; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) pick = i;
    }
    if (pick < 0) pick = 0;
    chosen[static_cast<std::size_t>(pick)] = 1;
    res.centroids.row(c) = points.row(pick);
  }

  res.assignments.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iters; ++it) {
    res.iterations = it + 1;
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      const int c = nearest(points, i, res.centroids).first;
      if (c != res.assignments[static_cast<std::size_t>(i)]) {
        res.assignments[static_cast<std::size_t>(i)] = c;
        changed = true;
      }
    }
    if (!changed && it > 0) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      const int c = res.assignments[static_cast<std::size_t>(i)];
      sums.row(c) += points.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        res.centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      // Empty cluster: move it onto the point worst served by its centroid.
      Index far = 0;
      double far_d = -1.0;
      for (Index i = 0; i < n; ++i) {
        const double d = sq_dist(points, i, res.centroids, res.assignments[static_cast<std::size_t>(i)]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      res.centroids.row(c) = points.row(far);
      res.assignments[static_cast<std::size_t>(far)] = c;
    }
  }
  res.inertia = 0.0;
  for (Index i = 0; i < n; ++i) {
    res.inertia += sq_dist(points, i, res.centroids, res.assignments[static_cast<std::size_t>(i)]);
  }
  return res;
}

}  // namespace

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iters, int restarts) {
  const Index n = points.rows();
  if (k < 1) throw std::invalid_argument("kmeans: K must be positive");
  if (restarts < 1) throw std::invalid_argument("kmeans: restarts must be positive");
  if (n < k) {
    throw std::invalid_argument("kmeans: " + std::to_string(n) + " points cannot form " + std::to_string(k) +
                                " clusters");
  }
  KMeansResult best;
  for (int r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(seed, "kmeans", static_cast<std::uint64_t>(r)));
    KMeansResult res = lloyd(points, k, rng, max_iters);
    if (r == 0 || res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

std::vector<Index> select_representatives(const Eigen::MatrixXd& features, int ipc, std::uint64_t seed) {
  const int clusters = (ipc >= 50 && ipc % 10 == 0) ? 10 : ipc;
  const int per_cluster = ipc / clusters;
  const KMeansResult km = kmeans(features, clusters, seed);
  std::vector<char> used(static_cast<std::size_t>(features.rows()), 0);
  std::vector<Index> picked;
  picked.reserve(static_cast<std::size_t>(ipc));
  std::vector<Index> order(static_cast<std::size_t>(features.rows()));
  for (int c = 0; c < clusters; ++c) {
    std::iota(order.begin(), order.end(), Index{0});
    std::vector<double> d(order.size());
    for (Index i = 0; i < features.rows(); ++i) d[static_cast<std::size_t>(i)] = sq_dist(features, i, km.centroids, c);
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return d[static_cast<std::size_t>(a)] < d[static_cast<std::size_t>(b)]; });
    int taken = 0;
    for (Index i : order) {
      if (taken == per_cluster) break;
      if (used[static_cast<std::size_t>(i)]) continue;
      used[static_cast<std::size_t>(i)] = 1;
      picked.push_back(i);
      ++taken;
    }
  }
  return picked;
}

SyntheticDataset representative_init(const LabeledDataset& data, const Trajectory& traj, int ipc, double alpha0,
                                     std::uint64_t seed) {
  if (ipc < 1) throw std::invalid_argument("representative_init: ipc must be positive");
  if (traj.checkpoints.empty()) throw std::invalid_argument("representative_init: empty trajectory");
  const ParamVector& extractor = traj.checkpoints.back();
  const auto groups = data.by_class();
  std::string short_classes;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (static_cast<int>(groups[c].size()) < ipc) {
      short_classes += (short_classes.empty() ? "" : ", ") + std::to_string(c) + " (" +
                       std::to_string(groups[c].size()) + " samples)";
    }
  }
  if (!short_classes.empty()) {
    throw std::invalid_argument("representative_init: fewer than ipc=" + std::to_string(ipc) +
                                " samples in class " + short_classes);
  }

  SyntheticDataset syn;
  syn.class_count = data.class_count;
  syn.ipc = ipc;
  syn.alpha = alpha0;
  std::vector<Index> chosen;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    const Tensor f = features(traj.spec, extractor, data.gather(groups[c]));
    const Eigen::MatrixXd feats =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(f.data(), f.dim(0),
                                                                                                  f.dim(1));
    for (Index local : select_representatives(feats, ipc, derive_seed(seed, "representative", c))) {
      chosen.push_back(groups[c][static_cast<std::size_t>(local)]);
      syn.labels.push_back(static_cast<int>(c));
    }
  }
  syn.images = data.gather(chosen);
  return syn;
}

// ---------------------------------------------------------------------------
// Loss components

double balance_coefficient(double start, double max_start, double vartheta) {
  if (start < 0.0 || start > max_start) throw std::invalid_argument("balance_coefficient: start outside [0, T+]");
  if (!(vartheta > 1.0)) throw std::invalid_argument("balance_coefficient: vartheta must exceed 1");
  const double middle = max_start / 2.0;
  const double v = std::log(std::abs(start - middle) + vartheta);
  return start >= middle ? v : 1.0 / v;
}

std::vector<MatchPoint> match_schedule(int student_steps, int expert_epochs, bool intermediate) {
  if (expert_epochs < 1 || student_steps < expert_epochs) {
    throw std::invalid_argument("match_schedule: need 1 <= M <= N");
  }
  std::vector<MatchPoint> out;
  if (intermediate) {
    for (int i = 1; i < expert_epochs; ++i) out.push_back({i * student_steps / expert_epochs, i});
  }
  out.push_back({student_steps, expert_epochs});
  return out;
}

std::string to_string(BetaMode m) { return m == BetaMode::equal ? "equal" : "scaled"; }

BetaMode parse_beta_mode(const std::string& s) {
  if (s == "equal") return BetaMode::equal;
  if (s == "scaled") return BetaMode::scaled;
  throw std::invalid_argument("unknown beta mode '" + s + "'");
}

double beta_weight(BetaMode mode, const MatchPoint& p, int expert_epochs) {
  return mode == BetaMode::equal ? 1.0 : static_cast<double>(p.expert_offset) / expert_epochs;
}

double matching_loss(const ParamVector& student, const ParamVector& start, const ParamVector& target) {
  const double denom = param_distance_sq(start, target);
  if (denom == 0.0) throw DegenerateSegment("degenerate expert segment: start and target coincide");
  return param_distance_sq(student, target) / denom;
}

Var matching_loss(const Var& student, const ParamVector& start, const ParamVector& target) {
  const double denom = param_distance_sq(start, target);
  if (denom == 0.0) throw DegenerateSegment("degenerate expert segment: start and target coincide");
  return scale(param_distance_sq(student, target), 1.0 / denom);
}

Var inner_loss(const ModelSpec& spec, const Var& student, const Var& images, std::span<const int> labels,
               const AugmentationPolicy& policy, std::uint64_t step_seed, double nu) {
  const Var z = forward(spec, student, augment(images, policy, step_seed)).logits;
  return scale(cross_entropy(z, labels), nu);
}

ParamVector perturb_weights(const ParamVector& theta, double rho, std::uint64_t seed, int* zero_filters) {
  if (rho < 0.0) throw std::invalid_argument("perturb_weights: rho must be non-negative");
  if (zero_filters) *zero_filters = 0;
  ParamVector out = theta;
  if (rho == 0.0) return out;
  Rng rng(derive_seed(seed, "perturb"));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& r : theta.layout->records) {
    const Index filters = r.filter_count(), len = r.size() / filters;
    for (Index f = 0; f < filters; ++f) {
      const Index off = r.offset + f * len;
      Eigen::VectorXd d(len);
      for (Index i = 0; i < len; ++i) d[i] = normal(rng);
      const double target = theta.values.segment(off, len).norm();
      if (target == 0.0) {
        if (zero_filters) ++*zero_filters;
        continue;
      }
      out.values.segment(off, len) += rho * (target / d.norm()) * d;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alignment loop

void DistillConfig::validate(int trajectory_epochs) const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("distill." + field + ": " + why);
  };
  if (expert_epochs < 1) fail("expert_epochs", "must be >= 1");
  if (student_steps < expert_epochs) fail("student_steps", "must be >= expert_epochs");
  if (max_start < 0) fail("max_start", "must be >= 0");
  if (max_start + expert_epochs > trajectory_epochs) {
    fail("max_start", "max_start + expert_epochs exceeds the " + std::to_string(trajectory_epochs) +
                          " expert epochs available");
  }
  if (ipc < 1) fail("ipc", "must be >= 1");
  if (rho < 0.0) fail("rho", "must be >= 0");
  if (!(vartheta > 1.0)) fail("vartheta", "must be > 1");
  if (!(alpha0 > 0.0)) fail("alpha0", "must be > 0");
  if (outer_iters < 0) fail("outer_iters", "must be >= 0");
  if (lr_images < 0.0 || lr_alpha < 0.0) fail("lr_images", "outer learning rates must be >= 0");
  if (syn_batch < 0) fail("syn_batch", "must be >= 0");
}

DistillConfig DistillConfig::vanilla() const {
  DistillConfig v = *this;
  v.rho = 0.0;
  v.balance = false;
  v.intermediate = false;
  v.beta = BetaMode::equal;
  return v;
}

namespace {

// Differentiable row selection as a product with a constant 0/1 matrix.
Var select_rows(const Var& images, std::span<const Index> rows) {
  const Index n = images.shape()[0];
  const Index per = images.size() / n;
  Tensor sel(Shape{static_cast<Index>(rows.size()), n});
  for (std::size_t r = 0; r < rows.size(); ++r) sel[static_cast<Index>(r) * n + rows[r]] = 1.0;
  Shape out_shape = images.shape();
  out_shape[0] = static_cast<Index>(rows.size());
  return reshape(matmul(images.graph().constant(std::move(sel)), reshape(images, Shape{n, per})), out_shape);
}

}  // namespace

MetaStep meta_step(const MetaTask& task, const Tensor& images, std::span<const int> labels, double alpha,
                   const DistillConfig& cfg, bool with_grad) {
  const Trajectory& traj = *task.trajectory;
  const auto schedule = match_schedule(cfg.student_steps, cfg.expert_epochs, cfg.intermediate);
  if (task.start + cfg.expert_epochs >= static_cast<int>(traj.checkpoints.size())) {
    throw std::out_of_range("meta_step: start epoch leaves no room for the expert segment");
  }

  Graph g(true);
  const Var img = with_grad ? g.variable(images) : g.constant(images);
  const Var lr = with_grad ? g.variable(Tensor::scalar(alpha)) : g.constant(Tensor::scalar(alpha));
  Var theta = g.variable(task.start_params.tensor());
  const Index n_syn = images.dim(0);
  const bool batched = cfg.syn_batch > 0 && cfg.syn_batch < n_syn;
  Rng batch_rng(task.batch_seed);

  MetaStep out;
  Var total;
  std::size_t next = 0;
  for (int n = 1; n <= cfg.student_steps; ++n) {
    Var batch = img;
    std::vector<int> batch_labels(labels.begin(), labels.end());
    if (batched) {
      std::vector<Index> rows(static_cast<std::size_t>(n_syn));
      std::iota(rows.begin(), rows.end(), Index{0});
      std::shuffle(rows.begin(), rows.end(), batch_rng);
      rows.resize(static_cast<std::size_t>(cfg.syn_batch));
      batch = select_rows(img, rows);
      batch_labels.clear();
      for (Index r : rows) batch_labels.push_back(labels[static_cast<std::size_t>(r)]);
    }
    const Var loss =
        inner_loss(traj.spec, theta, batch, batch_labels, cfg.policy, derive_seed(task.aug_seed, "inner", n), task.nu);
    const Var step_grad = g.grad(loss, theta, /*create_graph=*/true);
    theta = theta - lr * step_grad;

    while (next < schedule.size() && schedule[next].student_step == n) {
      const MatchPoint& p = schedule[next];
      const Var li = matching_loss(theta, task.start_params,
                                   traj.checkpoints[static_cast<std::size_t>(task.start + p.expert_offset)]);
      out.match_losses.push_back(li.value().item());
      const Var weighted = scale(li, beta_weight(cfg.beta, p, cfg.expert_epochs));
      total = total.valid() ? add(total, weighted) : weighted;
      ++next;
    }
  }
  out.loss = total.value().item();
  if (with_grad) {
    const Var wrt[2] = {img, lr};
    const auto grads = g.grad(total, std::span<const Var>(wrt), false);
    out.grad_images = grads[0].value();
    out.grad_alpha = grads[1].value().item();
  }
  return out;
}

MetaTask sample_task(std::span<const Trajectory> trajectories, const DistillConfig& cfg, int iteration) {
  Rng rng = make_rng(cfg.seed, "distill-iteration", static_cast<std::uint64_t>(iteration));
  MetaTask task;
  const auto which = std::uniform_int_distribution<std::size_t>(0, trajectories.size() - 1)(rng);
  task.trajectory = &trajectories[which];
  task.start = std::uniform_int_distribution<int>(0, cfg.max_start)(rng);
  task.start_params = perturb_weights(task.trajectory->checkpoints[static_cast<std::size_t>(task.start)], cfg.rho,
                                      derive_seed(cfg.seed, "perturb", static_cast<std::uint64_t>(iteration)));
  task.nu = cfg.balance ? balance_coefficient(task.start, cfg.max_start, cfg.vartheta) : 1.0;
  task.aug_seed = derive_seed(cfg.seed, "augment", static_cast<std::uint64_t>(iteration));
  task.batch_seed = derive_seed(cfg.seed, "syn-batch", static_cast<std::uint64_t>(iteration));
  return task;
}

DistillResult run_distillation(std::span<const Trajectory> trajectories, SyntheticDataset syn,
                               const DistillConfig& cfg, const DistillObserver& observer) {
  if (trajectories.empty()) throw std::invalid_argument("run_distillation: no expert trajectories");
  int min_epochs = std::numeric_limits<int>::max();
  for (const auto& t : trajectories) {
    if (!(t.spec == trajectories.front().spec)) {
      throw std::invalid_argument("run_distillation: trajectories disagree on the model spec");
    }
    min_epochs = std::min(min_epochs, t.epochs());
  }
  cfg.validate(min_epochs);
  syn.validate();

  DistillResult res;
  for (int it = 0; it < cfg.outer_iters; ++it) {
    const MetaTask task = sample_task(trajectories, cfg, it);
    DistillLogRow row;
    row.iteration = it + 1;
    row.trajectory = static_cast<int>(task.trajectory - trajectories.data());
    row.start_epoch = task.start;
    row.nu = task.nu;

    MetaStep ms;
    bool ok = true;
    try {
      ms = meta_step(task, syn.images, syn.labels, syn.alpha, cfg);
      ok = ms.grad_images.all_finite() && std::isfinite(ms.grad_alpha) && std::isfinite(ms.loss);
    } catch (const NumericalError&) {
      ok = false;
    } catch (const DegenerateSegment&) {
      ok = false;
    }

    if (!ok) {
      row.skipped = true;
      row.loss = std::numeric_limits<double>::quiet_NaN();
      row.alpha = syn.alpha;
      res.log.push_back(row);
      if (++res.skipped * 10 > cfg.outer_iters) {
        throw DistillAborted("distillation aborted: " + std::to_string(res.skipped) + " of " +
                             std::to_string(cfg.outer_iters) + " outer iterations produced non-finite meta-gradients");
      }
      continue;
    }

    syn.images.array() = (syn.images.array() - cfg.lr_images * ms.grad_images.array()).min(1.0).max(0.0);
    syn.alpha = std::max(syn.alpha - cfg.lr_alpha * ms.grad_alpha, 1e-8);

    row.match_losses = ms.match_losses;
    row.loss = ms.loss;
    row.alpha = syn.alpha;
    row.grad_norm_images = ms.grad_images.array().matrix().norm();
    row.grad_alpha = ms.grad_alpha;
    res.log.push_back(std::move(row));
    if (observer) observer(it + 1, syn);
  }
  res.syn = std::move(syn);
  return res;
}

}  // namespace trajdistill
