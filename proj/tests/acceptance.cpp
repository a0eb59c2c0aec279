// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any fails.

#include "trajdistill/buffer.hpp"
#include "trajdistill/distill.hpp"
#include "trajdistill/eval.hpp"
#include "trajdistill/gradcheck.hpp"
#include "trajdistill/rng.hpp"
#include "trajdistill/serialize.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace trajdistill;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// ---------------------------------------------------------------------------
// 1. finite-difference oracle over every op, the penalty and the meta-gradient

Outcome gradient_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckOptions opt;  // eps 1e-5, first order 1e-6, second order 1e-4
  opt.include_models = false;
  GradcheckReport rep = run_gradcheck_suite(opt);
  rep.results.push_back(check_penalty_gradient(opt.eps, 1e-4));
  for (auto& r : check_meta_gradient(opt.eps, 1e-4, 3)) rep.results.push_back(r);

  std::set<std::string> ops;
  for (const auto& c : op_cases()) ops.insert(c.name);
  double first = 0.0, second = 0.0;
  bool tol_ok = true;
  std::string failed;
  for (const auto& r : rep.results) {
    const bool first_order = ops.count(r.name) > 0;
    (first_order ? first : second) = std::max(first_order ? first : second, r.rel_error);
    tol_ok = tol_ok && r.tolerance <= (first_order ? 1e-6 : 1e-4);
    if (!r.passed()) failed += " " + r.name;
  }
  const double secs = seconds_since(t0);
  const bool ok = rep.passed() && tol_ok && rep.results.size() > op_cases().size() && secs < 60.0;
  return {ok, std::to_string(rep.results.size()) + " checks, max first-order " + fmt("%.1e", first) +
                  ", max second-order/meta " + fmt("%.1e", second) + ", " + fmt("%.2f", secs) + " s" +
                  (failed.empty() ? "" : "; failed:" + failed)};
}

// ---------------------------------------------------------------------------
// 2. momentum recurrence against the unrolled sum, and no history at gamma 0

Outcome momentum_identities() {
  const auto t0 = std::chrono::steady_clock::now();
  const Index dim = 9;
  const double gamma = 0.9, eta = 0.03;
  std::vector<Eigen::VectorXd> g;
  for (int t = 0; t < 10; ++t) {
    const Tensor r = random_tensor({dim}, 500 + static_cast<std::uint64_t>(t));
    g.push_back(Eigen::Map<const Eigen::VectorXd>(r.data(), dim));
  }
  double worst = 0.0;
  MomentumState s = make_momentum_state(dim, gamma, eta);
  ParamVector p{Eigen::VectorXd::Zero(dim), nullptr};
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim);
  for (int t = 0; t < 10; ++t) {
    std::tie(p, s) = momentum_step(p, g[static_cast<std::size_t>(t)], std::move(s));
    Eigen::VectorXd v = g[static_cast<std::size_t>(t)];
    for (int k = 0; k < t; ++k) v += std::pow(gamma, t - k) * g[static_cast<std::size_t>(k)];
    v *= eta;
    theta -= v;
    worst = std::max({worst, (s.velocity - v).cwiseAbs().maxCoeff(), (p.values - theta).cwiseAbs().maxCoeff()});
  }

  double delta0 = 0.0;
  for (const auto& d : cumulative_terms(g, 0.0, eta)) delta0 = std::max(delta0, d.cwiseAbs().maxCoeff());
  MomentumState z = make_momentum_state(dim, 0.0, eta);
  ParamVector q{Eigen::VectorXd::Zero(dim), nullptr};
  for (const auto& gt : g) {
    std::tie(q, z) = momentum_step(q, gt, std::move(z));
    delta0 = std::max(delta0, (z.velocity - eta * gt).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && delta0 == 0.0 && secs < 1.0,
          "max deviation " + fmt("%.1e", worst) + " over 10 steps, max |delta| at gamma 0 = " + fmt("%.1e", delta0) +
              ", " + fmt("%.3f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// Shared blobs fixture for criteria 3 to 5

struct Fixture {
  LabeledDataset train, test;
  ModelSpec spec{ModelKind::mlp, 1, 32, {16}, 3};
  static constexpr int kEpochs = 20;
  std::vector<std::uint64_t> expert_seeds{100, 101};
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture f;
    std::tie(f.train, f.test) = split_per_class(gen_blobs(3, 100, {16}, 0.3, 1), 60);
    return f;
  }();
  return f;
}

struct ExpertSet {
  std::vector<Trajectory> experts;
  double avg_var = 0.0;
  double test_accuracy = 0.0;
};

ExpertSet train_set(const SmoothnessConfig& sc, double gamma) {
  const Fixture& f = fixture();
  ExpertSet s;
  for (auto seed : f.expert_seeds) {
    s.experts.push_back(
        train_expert(f.train, f.spec, sc, ExpertOptimizer{0.01, gamma, 32, true}, Fixture::kEpochs, seed, &f.test));
    s.avg_var += avg_var(s.experts.back()) / static_cast<double>(f.expert_seeds.size());
    s.test_accuracy += s.experts.back().meta.metrics.back().test_accuracy / static_cast<double>(f.expert_seeds.size());
  }
  return s;
}

// Penalty target sits below this task's input-gradient norms (about 0.14 at init).
SmoothnessConfig fixture_smoothness() { return SmoothnessConfig::standard(5, 1.0, 0.1); }

const ExpertSet& smooth_experts() {
  static const ExpertSet s = train_set(fixture_smoothness(), 0.9);
  return s;
}

// ---------------------------------------------------------------------------
// 3. smoothness direction

Outcome smoothness_direction(std::string& note) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExpertSet sgd = train_set(SmoothnessConfig::off(), 0.0);
  const ExpertSet mom = train_set(SmoothnessConfig::off(), 0.9);
  const ExpertSet& smooth = smooth_experts();
  const ExpertSet k1 = train_set(SmoothnessConfig::standard(5, 1.0, 1.0), 0.9);
  const double secs = seconds_since(t0);
  const double up = mom.avg_var / sgd.avg_var, down = smooth.avg_var / mom.avg_var;
  const bool ok = up >= 5.0 && down <= 0.5 && smooth.test_accuracy >= sgd.test_accuracy - 0.01 && secs < 300.0;
  note = "with K=1 the same ratio is " + fmt("%.2f", k1.avg_var / mom.avg_var);
  return {ok, "avg_var sgd " + fmt("%.3g", sgd.avg_var) + ", momentum " + fmt("%.3g", mom.avg_var) + " (x" +
                  fmt("%.1f", up) + "), momentum+smooth " + fmt("%.3g", smooth.avg_var) + " (x" + fmt("%.2f", down) +
                  "); test acc sgd " + fmt("%.3f", sgd.test_accuracy) + ", momentum+smooth " +
                  fmt("%.3f", smooth.test_accuracy) + "; " + fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 4. end-to-end distillation against the random-subset and full-data baselines

DistillConfig fixture_distill() {
  DistillConfig c;
  c.expert_epochs = 2;
  c.student_steps = 10;
  c.max_start = 5;
  c.ipc = 1;
  c.rho = 0.1;
  c.vartheta = 8.0;
  c.alpha0 = 0.01;
  c.outer_iters = 200;
  c.lr_images = 1.0;
  c.lr_alpha = 1e-5;
  c.seed = 3;
  return c;
}

Outcome end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const Fixture& f = fixture();
  const ExpertSet& ex = smooth_experts();
  const DistillConfig cfg = fixture_distill();
  const SyntheticDataset init =
      representative_init(f.train, ex.experts.front(), cfg.ipc, cfg.alpha0, derive_seed(cfg.seed, "init"));
  const DistillResult res = run_distillation(ex.experts, init, cfg);

  EvalOptions opt;
  opt.iters = 1000;
  opt.halve_at = 500;
  const std::vector<std::uint64_t> seeds{0, 1, 2}, subsets{10, 11, 12};
  const EvalReport syn = evaluate(res.syn, f.spec, f.test, seeds, opt, "synthetic");
  const EvalReport start = evaluate(init, f.spec, f.test, seeds, opt, "init");
  const EvalReport random = evaluate_random_baseline(f.train, cfg.ipc, cfg.alpha0, f.spec, f.test, seeds, subsets, opt);
  const EvalReport full = evaluate(as_synthetic(f.train, cfg.alpha0), f.spec, f.test, seeds, opt, "full");
  const double secs = seconds_since(t0);
  const bool ok = syn.diverged.empty() && syn.mean >= random.mean + 0.05 && syn.mean >= 0.9 * full.mean &&
                  secs < 600.0;
  return {ok, "distilled " + fmt("%.3f", syn.mean) + " +- " + fmt("%.3f", syn.std) + ", random " +
                  fmt("%.3f", random.mean) + ", init " + fmt("%.3f", start.mean) + ", full " + fmt("%.3f", full.mean) +
                  " (" + fmt("%.1f", 100.0 * syn.mean / full.mean) + "% of full, +" +
                  fmt("%.1f", 100.0 * (syn.mean - random.mean)) + " points over random); " + fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 5. balancing narrows the spread of the inner loss across start epochs

Outcome balanced_loss() {
  const Fixture& f = fixture();
  const ExpertSet& ex = smooth_experts();
  const DistillConfig cfg = fixture_distill();
  const SyntheticDataset syn =
      representative_init(f.train, ex.experts.front(), cfg.ipc, cfg.alpha0, derive_seed(cfg.seed, "init"));
  const Trajectory& t = ex.experts.front();

  double lo = INFINITY, hi = 0.0, blo = INFINITY, bhi = 0.0;
  for (int start = 0; start <= cfg.max_start; ++start) {
    Graph g;
    const Var p = g.constant(t.checkpoints[static_cast<std::size_t>(start)].tensor());
    const Var x = g.constant(syn.images);
    const double il = inner_loss(f.spec, p, x, syn.labels, {}, 0, 1.0).value().item();
    const double nu = balance_coefficient(start, cfg.max_start, cfg.vartheta);
    const double bil = inner_loss(f.spec, p, x, syn.labels, {}, 0, nu).value().item();
    lo = std::min(lo, il);
    hi = std::max(hi, il);
    blo = std::min(blo, bil);
    bhi = std::max(bhi, bil);
  }
  const double ratio = hi / lo, bratio = bhi / blo;

  const double mid = balance_coefficient(2.5, 5, 8.0);
  bool recip = true;
  for (double d : {0.5, 1.0, 1.5, 2.5})
    recip = recip && balance_coefficient(2.5 + d, 5, 8.0) * balance_coefficient(2.5 - d, 5, 8.0) == 1.0;
  const bool ok = bratio < ratio && std::abs(mid - std::log(8.0)) <= 1e-12 && recip;
  const double nu_spread = balance_coefficient(cfg.max_start, cfg.max_start, cfg.vartheta) /
                           balance_coefficient(0, cfg.max_start, cfg.vartheta);
  return {ok, "max/min over starts 0.." + std::to_string(cfg.max_start) + ": unbalanced " + fmt("%.3f", ratio) +
                  ", balanced " + fmt("%.3f", bratio) + " (nu spans x" + fmt("%.2f", nu_spread) +
                  "); nu(middle) - ln 8 = " +
                  fmt("%.1e", mid - std::log(8.0)) + "; reciprocity " + (recip ? "exact" : "broken")};
}

// ---------------------------------------------------------------------------
// 6. formula unit suite

double exhaustive_two_means(const Eigen::MatrixXd& pts) {
  double best = INFINITY;
  for (unsigned mask = 1; mask + 1 < (1u << pts.rows()); ++mask) {
    double total = 0.0;
    for (unsigned side = 0; side < 2; ++side) {
      Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(pts.cols());
      int n = 0;
      for (Index i = 0; i < pts.rows(); ++i)
        if (((mask >> i) & 1u) == side) c += pts.row(i), ++n;
      c /= n;
      for (Index i = 0; i < pts.rows(); ++i)
        if (((mask >> i) & 1u) == side) total += (pts.row(i) - c).squaredNorm();
    }
    best = std::min(best, total);
  }
  return best;
}

Outcome formula_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> bad;

  const auto s = match_schedule(30, 3);
  if (s.size() != 3 || s[0].student_step != 10 || s[1].student_step != 20 || s[2].student_step != 30 ||
      s[0].expert_offset != 1 || s[1].expert_offset != 2 || s[2].expert_offset != 3)
    bad.push_back("schedule");

  const ModelSpec spec{ModelKind::convnet, 1, 4, {1, 6, 6}, 3};
  const ParamVector a = init_params(spec, 1), b = init_params(spec, 2), c = init_params(spec, 3);
  if (matching_loss(b, a, b) != 0.0 || matching_loss(a, a, b) != 1.0) bad.push_back("matching_loss");

  if (!(perturb_weights(a, 0.0, 7) == a)) bad.push_back("rho=0");
  const double rho = 0.1;
  const ParamVector pa = perturb_weights(a, rho, 7);
  double worst = 0.0;
  for (const auto& r : a.layout->records) {
    const Index per = r.size() / r.filter_count();
    for (Index fl = 0; fl < r.filter_count(); ++fl) {
      double dn = 0.0, tn = 0.0;
      for (Index k = 0; k < per; ++k) {
        const Index i = r.offset + fl * per + k;
        dn += (pa.values[i] - a.values[i]) * (pa.values[i] - a.values[i]);
        tn += a.values[i] * a.values[i];
      }
      worst = std::max(worst, std::abs(std::sqrt(dn) - rho * std::sqrt(tn)) / std::max(1e-300, rho * std::sqrt(tn)));
    }
  }
  if (worst > 1e-12) bad.push_back("perturbation norms");

  double gap = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Eigen::MatrixXd pts(8, 2);
    const Tensor t = random_tensor({8, 2}, 900 + seed);
    for (Index i = 0; i < 8; ++i) pts.row(i) << t[2 * i], t[2 * i + 1];
    const double opt = exhaustive_two_means(pts);
    gap = std::max(gap, std::abs(kmeans(pts, 2, seed).inertia - opt) / opt);
  }
  if (gap > 1e-12) bad.push_back("kmeans");
  (void)c;

  const double secs = seconds_since(t0);
  std::string failed;
  for (const auto& x : bad) failed += " " + x;
  return {bad.empty() && secs < 10.0, "schedule {10,20,30}, matching 0/1, per-filter norm error " + fmt("%.1e", worst) +
                                          ", k-means gap to exhaustive optimum " + fmt("%.1e", gap) +
                                          " over 20 point sets; " + fmt("%.2f", secs) + " s" +
                                          (failed.empty() ? "" : "; failed:" + failed)};
}

// ---------------------------------------------------------------------------
// 7. ablated configuration reproduces a hand-unrolled plain trajectory-matching gradient

struct HandGrad {
  Eigen::MatrixXd images;  // [n, D]
  double alpha = 0.0;
  double loss = 0.0;
};

// Linear softmax model, theta = [W (C x D, row-major), b (C)]. N plain SGD steps
// on mean cross-entropy, then |theta_N - target|^2 / |theta_0 - target|^2, and
// reverse accumulation through the unroll with explicit Hessian-vector products.
HandGrad hand_unrolled(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes, const Eigen::VectorXd& theta0,
                       const Eigen::VectorXd& target, double alpha, int steps) {
  const Index n = x.rows(), d = x.cols(), c = classes;
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto unpack = [&](const Eigen::VectorXd& th) {
    return std::pair<Mat, Eigen::VectorXd>(Eigen::Map<const Mat>(th.data(), c, d), th.tail(c));
  };
  auto pack = [&](const Mat& w, const Eigen::VectorXd& b) {
    Eigen::VectorXd th(c * d + c);
    th.head(c * d) = Eigen::Map<const Eigen::VectorXd>(w.data(), c * d);
    th.tail(c) = b;
    return th;
  };
  auto probs = [&](const Mat& w, const Eigen::VectorXd& b, Index i) {
    Eigen::VectorXd z = w * x.row(i).transpose() + b;
    z = (z.array() - z.maxCoeff()).exp().matrix();
    return Eigen::VectorXd(z / z.sum());
  };
  auto residual = [&](const Eigen::VectorXd& p, Index i) {
    Eigen::VectorXd r = p;
    r[y[static_cast<std::size_t>(i)]] -= 1.0;
    return r;
  };
  auto gradient = [&](const Eigen::VectorXd& th) {
    const auto [w, b] = unpack(th);
    Mat gw = Mat::Zero(c, d);
    Eigen::VectorXd gb = Eigen::VectorXd::Zero(c);
    for (Index i = 0; i < n; ++i) {
      const Eigen::VectorXd r = residual(probs(w, b, i), i);
      gw += r * x.row(i) / static_cast<double>(n);
      gb += r / static_cast<double>(n);
    }
    return pack(gw, gb);
  };

  std::vector<Eigen::VectorXd> th{theta0};
  for (int k = 0; k < steps; ++k) th.push_back(th.back() - alpha * gradient(th.back()));
  const double denom = (theta0 - target).squaredNorm();

  HandGrad out;
  out.loss = (th.back() - target).squaredNorm() / denom;
  out.images = Eigen::MatrixXd::Zero(n, d);
  Eigen::VectorXd lam = 2.0 * (th.back() - target) / denom;
  for (int k = steps - 1; k >= 0; --k) {
    const auto [w, b] = unpack(th[static_cast<std::size_t>(k)]);
    const auto [u, ub] = unpack(lam);
    out.alpha -= gradient(th[static_cast<std::size_t>(k)]).dot(lam);
    Mat hw = Mat::Zero(c, d);
    Eigen::VectorXd hb = Eigen::VectorXd::Zero(c);
    for (Index i = 0; i < n; ++i) {
      const Eigen::VectorXd p = probs(w, b, i);
      const Eigen::MatrixXd jac = Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();
      const Eigen::VectorXd dz = u * x.row(i).transpose() + ub;
      const Eigen::VectorXd dp = jac * dz;
      hw += dp * x.row(i) / static_cast<double>(n);
      hb += dp / static_cast<double>(n);
      // d/dx_i of <g(theta, x), lambda>
      const Eigen::VectorXd gx = (u.transpose() * residual(p, i) + w.transpose() * dp) / static_cast<double>(n);
      out.images.row(i) -= alpha * gx.transpose();
    }
    lam -= alpha * pack(hw, hb);
  }
  return out;
}

Outcome ablation_recovery() {
  const int classes = 3;
  const Index dim = 8;
  const ModelSpec spec{ModelKind::mlp, 0, 1, {dim}, classes};  // 27 parameters
  const LabeledDataset data = gen_blobs(classes, 12, {dim}, 0.3, 77);
  std::vector<Trajectory> experts{
      train_expert(data, spec, SmoothnessConfig::off(), ExpertOptimizer{0.2, 0.9, 12, true}, 6, 5)};

  DistillConfig base;
  base.expert_epochs = 2;
  base.student_steps = 5;
  base.max_start = 3;
  base.ipc = 2;
  base.rho = 0.1;
  base.beta = BetaMode::scaled;
  base.alpha0 = 0.05;
  base.lr_images = 0.5;
  base.lr_alpha = 1e-3;
  base.outer_iters = 1;
  base.seed = 21;
  const DistillConfig cfg = base.vanilla();

  SyntheticDataset syn;
  syn.images = random_tensor({classes * 2, dim}, 31, 0.0, 1.0);
  syn.labels = {0, 0, 1, 1, 2, 2};
  syn.class_count = classes;
  syn.ipc = 2;
  syn.alpha = cfg.alpha0;

  const MetaTask task = sample_task(experts, cfg, 0);
  const MetaStep ms = meta_step(task, syn.images, syn.labels, syn.alpha, cfg);
  const Trajectory& t = experts.front();
  const Eigen::MatrixXd x = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(syn.images.data(),
                                                                                             classes * 2, dim);
  const Eigen::VectorXd& start = t.checkpoints[static_cast<std::size_t>(task.start)].values;
  const Eigen::VectorXd& target = t.checkpoints[static_cast<std::size_t>(task.start + cfg.expert_epochs)].values;
  const HandGrad ref = hand_unrolled(x, syn.labels, classes, start, target, syn.alpha, cfg.student_steps);

  const Eigen::MatrixXd got =
      Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(ms.grad_images.data(), classes * 2, dim);
  const double img_err = (got - ref.images).norm() / std::max(ref.images.norm(), 1e-300);
  const double alpha_err = std::abs(ms.grad_alpha - ref.alpha) / std::max(std::abs(ref.alpha), 1e-300);
  const double loss_err = std::abs(ms.loss - ref.loss) / ref.loss;
  const bool unperturbed = task.start_params.values == start && task.nu == 1.0 && ms.match_losses.size() == 1;

  // the outer update applies exactly this gradient
  const DistillResult res = run_distillation(experts, syn, cfg);
  Eigen::MatrixXd expect = (x - cfg.lr_images * ref.images).cwiseMax(0.0).cwiseMin(1.0);
  const Eigen::MatrixXd after =
      Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(res.syn.images.data(), classes * 2, dim);
  const double update_err = (after - expect).cwiseAbs().maxCoeff();

  const bool ok = unperturbed && img_err <= 1e-10 && alpha_err <= 1e-10 && loss_err <= 1e-10 && update_err <= 1e-10 &&
                  param_count(spec) <= 100;
  return {ok, std::to_string(param_count(spec)) + "-parameter model, start epoch " + std::to_string(task.start) +
                  ": pixel gradient rel. error " + fmt("%.1e", img_err) + ", alpha " + fmt("%.1e", alpha_err) +
                  ", loss " + fmt("%.1e", loss_err) + ", applied update " + fmt("%.1e", update_err)};
}

// ---------------------------------------------------------------------------
// 8. persistence

Outcome persistence() {
  const fs::path dir = fs::temp_directory_path() / ("trajdistill_acceptance_" + std::to_string(std::random_device{}()));
  std::vector<std::string> bad;
  try {
    const LabeledDataset d = gen_blobs(3, 8, {1, 6, 6}, 0.3, 4);
    const Trajectory t = train_expert(d, ModelSpec{ModelKind::convnet, 1, 3, {1, 6, 6}, 3},
                                      SmoothnessConfig::standard(2), ExpertOptimizer{0.05, 0.9, 8, true}, 3, 9, &d);
    save_trajectory(t, dir / "traj");
    const Trajectory u = load_trajectory(dir / "traj");
    bool same = u.spec == t.spec && u.checkpoints.size() == t.checkpoints.size() &&
                u.meta.smoothness == t.meta.smoothness && u.meta.optimizer == t.meta.optimizer;
    for (std::size_t i = 0; same && i < t.checkpoints.size(); ++i) same = u.checkpoints[i] == t.checkpoints[i];
    save_trajectory(u, dir / "traj2");
    for (const auto& e : fs::directory_iterator(dir / "traj"))
      same = same && read_file(e.path()) == read_file(dir / "traj2" / e.path().filename());
    if (!same) bad.push_back("trajectory round trip");

    SyntheticDataset s;
    s.images = random_tensor({3, 1, 6, 6}, 8, 0.0, 1.0);
    s.labels = {0, 1, 2};
    s.class_count = 3;
    s.ipc = 1;
    s.alpha = 0.0137;
    save_synthetic(s, dir / "syn");
    const SyntheticDataset v = load_synthetic(dir / "syn");
    if (!(v.images == s.images && v.labels == s.labels && v.alpha == s.alpha)) bad.push_back("synthetic round trip");

    auto bytes = read_file(dir / "traj/epoch_0001.bin");
    bytes[bytes.size() / 2] ^= 0x01;
    write_file(dir / "traj/epoch_0001.bin", bytes);
    try {
      load_trajectory(dir / "traj");
      bad.push_back("corruption undetected");
    } catch (const FormatError& e) {
      if (e.code() != FormatErrorCode::checksum_mismatch) bad.push_back("corruption misreported");
    }

    // 3 images of 2x2 and their labels, written byte by byte
    const unsigned char img[] = {0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2,
                                 0, 51, 102, 255, 255, 0, 0, 0, 1, 2, 3, 4};
    const unsigned char lab[] = {0, 0, 8, 1, 0, 0, 0, 3, 2, 0, 1};
    std::ofstream(dir / "img.idx", std::ios::binary).write(reinterpret_cast<const char*>(img), sizeof img);
    std::ofstream(dir / "lab.idx", std::ios::binary).write(reinterpret_cast<const char*>(lab), sizeof lab);
    const LabeledDataset idx = load_idx(dir / "img.idx", dir / "lab.idx");
    const Tensor expect({3, 1, 2, 2}, {0.0, 0.2, 0.4, 1.0, 1.0, 0.0, 0.0, 0.0, 1 / 255.0, 2 / 255.0, 3 / 255.0,
                                       4 / 255.0});
    if (!(idx.images.shape() == expect.shape() && (idx.images.array() - expect.array()).abs().maxCoeff() == 0.0 &&
          idx.labels == std::vector<int>{2, 0, 1}))
      bad.push_back("idx fixture");
  } catch (const std::exception& e) {
    bad.push_back(std::string("exception: ") + e.what());
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  std::string failed;
  for (const auto& x : bad) failed += " " + x;
  return {bad.empty(), bad.empty() ? "trajectory and synthetic directories byte-identical after reload, flipped "
                                     "checkpoint bit caught by checksum, IDX fixture [3,1,2,2] exact"
                                   : "failed:" + failed};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s  %d  %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };
  std::string k1_note;
  report(1, "gradient oracle suite", gradient_oracles);
  report(2, "momentum identities", momentum_identities);
  report(3, "smoothness direction", [&] { return smoothness_direction(k1_note); });
  if (!k1_note.empty()) std::printf("      note: %s\n", k1_note.c_str());
  report(4, "end-to-end distillation", end_to_end);
  report(5, "balanced inner loss", balanced_loss);
  report(6, "formula unit suite", formula_suite);
  report(7, "ablation recovery", ablation_recovery);
  report(8, "persistence", persistence);
  std::printf("%d of 8 criteria passed\n", 8 - failures);
  return failures == 0 ? 0 : 1;
}
