#pragma once

#include "trajdistill/data.hpp"
#include "trajdistill/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace trajdistill {

struct EvalOptions {
  int iters = 300;
  /// Learning rate; <= 0 means use the synthetic set's alpha.
  double lr = 0.0;
  /// Iteration at which the rate is halved; < 0 means iters / 2.
  int halve_at = -1;
  AugmentationPolicy policy;
  /// Mini-batch size; 0 trains full-batch.
  int batch = 0;
};

struct EvalReport {
  std::string tag;
  ModelSpec spec;
  int iters = 0;
  double learning_rate = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;  // NaN where training diverged
  std::vector<std::uint64_t> diverged;
  double mean = 0.0;
  double std = 0.0;  // population std over finite seeds

  nlohmann::json to_json() const;
  /// One row per seed: artifact,seed,accuracy.
  std::string to_csv(bool header = true) const;
};

/// Trains a freshly initialized network per seed with plain SGD on `syn`
/// and reports top-1 accuracy on `test`.
EvalReport evaluate(const SyntheticDataset& syn, const ModelSpec& spec, const LabeledDataset& test,
                    std::span<const std::uint64_t> seeds, const EvalOptions& options, const std::string& tag = "");

/// Uniform per-class sample of ipc real images without replacement.
SyntheticDataset baseline_random_subset(const LabeledDataset& data, int ipc, std::uint64_t seed, double alpha);

/// Random-subset comparator: subset k is drawn with subset_seeds[k] and
/// trained with seeds[k]; one accuracy per pair.
EvalReport evaluate_random_baseline(const LabeledDataset& data, int ipc, double alpha, const ModelSpec& spec,
                                    const LabeledDataset& test, std::span<const std::uint64_t> seeds,
                                    std::span<const std::uint64_t> subset_seeds, const EvalOptions& options);

/// Mean and population standard deviation of the finite entries.
std::pair<double, double> mean_std(std::span<const double> values);

}  // namespace trajdistill
