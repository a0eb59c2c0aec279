#include "trajdistill/eval.hpp"

#include "trajdistill/rng.hpp"
#include "trajdistill/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace trajdistill {

std::pair<double, double> mean_std(std::span<const double> values) {
  double sum = 0.0;
  int n = 0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  if (n == 0) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const double mean = sum / n;
  double ss = 0.0;
  for (double v : values)
    if (std::isfinite(v)) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / n)};
}

namespace {

double train_and_score(const SyntheticDataset& syn, const ModelSpec& spec, const LabeledDataset& test,
                       std::uint64_t seed, const EvalOptions& opt, double lr) {
  ParamVector params = init_params(spec, derive_seed(seed, "eval-init"));
  Rng batch_rng(derive_seed(seed, "eval-batch"));
  const int halve_at = opt.halve_at < 0 ? opt.iters / 2 : opt.halve_at;
  const Index n = syn.size();
  const bool batched = opt.batch > 0 && opt.batch < n;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const Index per = syn.images.size() / n;
  for (int it = 0; it < opt.iters; ++it) {
    const double rate = it >= halve_at ? 0.5 * lr : lr;
    Tensor batch = syn.images;
    std::vector<int> labels = syn.labels;
    if (batched) {
      std::shuffle(order.begin(), order.end(), batch_rng);
      Shape s = syn.images.shape();
      s[0] = opt.batch;
      batch = Tensor(s);
      labels.resize(static_cast<std::size_t>(opt.batch));
      for (int k = 0; k < opt.batch; ++k) {
        batch.array().segment(k * per, per) = syn.images.array().segment(order[static_cast<std::size_t>(k)] * per, per);
        labels[static_cast<std::size_t>(k)] = syn.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
      }
    }
    Graph g;
    const Var p = g.variable(params.tensor());
    const Var x = augment(g.constant(std::move(batch)), opt.policy, derive_seed(seed, "eval-augment", it));
    const Var loss = cross_entropy(forward(spec, p, x).logits, labels);
    const Var grad = g.grad(loss, p, false);
    params.values -= rate * grad.value().array().matrix();
    if (!params.values.allFinite()) throw NumericalError("evaluation diverged at iteration " + std::to_string(it));
  }
  return accuracy(spec, params, test.images, test.labels);
}

}  // namespace

EvalReport evaluate(const SyntheticDataset& syn, const ModelSpec& spec, const LabeledDataset& test,
                    std::span<const std::uint64_t> seeds, const EvalOptions& options, const std::string& tag) {
  if (options.iters < 1) throw std::invalid_argument("evaluate: iters must be >= 1");
  if (seeds.empty()) throw std::invalid_argument("evaluate: no seeds");
  EvalReport rep;
  rep.tag = tag;
  rep.spec = spec;
  rep.iters = options.iters;
  rep.learning_rate = options.lr > 0.0 ? options.lr : syn.alpha;
  rep.seeds.assign(seeds.begin(), seeds.end());
  for (std::uint64_t s : seeds) {
    double acc = std::numeric_limits<double>::quiet_NaN();
    try {
      acc = train_and_score(syn, spec, test, s, options, rep.learning_rate);
    } catch (const NumericalError&) {
      rep.diverged.push_back(s);
    }
    rep.accuracies.push_back(acc);
  }
  std::tie(rep.mean, rep.std) = mean_std(rep.accuracies);
  return rep;
}

SyntheticDataset baseline_random_subset(const LabeledDataset& data, int ipc, std::uint64_t seed, double alpha) {
  if (ipc < 1) throw std::invalid_argument("baseline_random_subset: ipc must be positive");
  auto groups = data.by_class();
  Rng rng(derive_seed(seed, "random-subset"));
  SyntheticDataset syn;
  syn.class_count = data.class_count;
  syn.ipc = ipc;
  syn.alpha = alpha;
  std::vector<Index> chosen;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (static_cast<int>(groups[c].size()) < ipc) {
      throw std::invalid_argument("baseline_random_subset: class " + std::to_string(c) + " has only " +
                                  std::to_string(groups[c].size()) + " samples, need " + std::to_string(ipc));
    }
    std::shuffle(groups[c].begin(), groups[c].end(), rng);
    for (int k = 0; k < ipc; ++k) {
      chosen.push_back(groups[c][static_cast<std::size_t>(k)]);
      syn.labels.push_back(static_cast<int>(c));
    }
  }
  syn.images = data.gather(chosen);
  return syn;
}

EvalReport evaluate_random_baseline(const LabeledDataset& data, int ipc, double alpha, const ModelSpec& spec,
                                    const LabeledDataset& test, std::span<const std::uint64_t> seeds,
                                    std::span<const std::uint64_t> subset_seeds, const EvalOptions& options) {
  if (seeds.size() != subset_seeds.size()) {
    throw std::invalid_argument("evaluate_random_baseline: one subset seed per evaluation seed");
  }
  EvalReport rep;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const SyntheticDataset sub = baseline_random_subset(data, ipc, subset_seeds[k], alpha);
    const EvalReport one = evaluate(sub, spec, test, seeds.subspan(k, 1), options, "random");
    if (k == 0) rep = one;
    else {
      rep.seeds.push_back(one.seeds.front());
      rep.accuracies.push_back(one.accuracies.front());
      rep.diverged.insert(rep.diverged.end(), one.diverged.begin(), one.diverged.end());
    }
  }
  std::tie(rep.mean, rep.std) = mean_std(rep.accuracies);
  return rep;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json accs = nlohmann::json::array();
  for (double a : accuracies) accs.push_back(std::isfinite(a) ? nlohmann::json(a) : nlohmann::json(nullptr));
  return {{"tag", tag},
          {"spec", trajdistill::to_json(spec)},
          {"iters", iters},
          {"learning_rate", learning_rate},
          {"seeds", seeds},
          {"accuracies", accs},
          {"diverged_seeds", diverged},
          {"mean", std::isfinite(mean) ? nlohmann::json(mean) : nlohmann::json(nullptr)},
          {"std", std::isfinite(this->std) ? nlohmann::json(this->std) : nlohmann::json(nullptr)}};
}

std::string EvalReport::to_csv(bool header) const {
  std::ostringstream os;
  os.precision(17);
  if (header) os << "artifact,seed,accuracy\n";
  for (std::size_t i = 0; i < seeds.size(); ++i) os << tag << ',' << seeds[i] << ',' << accuracies[i] << '\n';
  return os.str();
}

}  // namespace trajdistill
