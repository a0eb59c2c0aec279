#include <doctest.h>

#include "helpers.hpp"
#include "trajdistill/buffer.hpp"
#include "trajdistill/gradcheck.hpp"

#include <Eigen/Dense>

#include <cmath>

using namespace trajdistill;

namespace {

ModelSpec linear(Index d, int c) { return ModelSpec{ModelKind::mlp, 0, 1, {d}, c}; }

std::vector<Eigen::VectorXd> random_grads(int n, Index dim, unsigned seed) {
  std::vector<Eigen::VectorXd> g;
  for (int i = 0; i < n; ++i) g.push_back(Eigen::Map<const Eigen::VectorXd>(
                                  testing::random_tensor({dim}, seed + static_cast<unsigned>(i)).data(), dim));
  return g;
}

}  // namespace

TEST_CASE("momentum_step with gamma 0 is plain SGD") {
  const ModelSpec spec = linear(3, 2);
  const ParamVector p = init_params(spec, 1);
  const Eigen::VectorXd g = random_grads(1, p.size(), 2)[0];
  const auto [next, state] = momentum_step(p, g, make_momentum_state(p.size(), 0.0, 0.1));
  CHECK(next.values == p.values - 0.1 * g);
  CHECK(state.step == 1);
}

TEST_CASE("zero gradient from rest leaves parameters unchanged") {
  const ModelSpec spec = linear(3, 2);
  const ParamVector p = init_params(spec, 1);
  const auto [next, state] = momentum_step(p, Eigen::VectorXd::Zero(p.size()), make_momentum_state(p.size(), 0.9, 0.1));
  CHECK(next == p);
}

TEST_CASE("momentum recurrence equals the unrolled closed form over 10 steps") {
  const double gamma = 0.9, eta = 0.05;
  const auto grads = random_grads(10, 7, 30);
  MomentumState s = make_momentum_state(7, gamma, eta);
  ParamVector p{Eigen::VectorXd::Zero(7), nullptr};
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(7);
  for (int t = 0; t < 10; ++t) {
    std::tie(p, s) = momentum_step(p, grads[static_cast<std::size_t>(t)], std::move(s));
    // v_t = eta * (sum_{k<t} gamma^(t-k) g_k + g_t)
    Eigen::VectorXd v = grads[static_cast<std::size_t>(t)];
    for (int k = 0; k < t; ++k) v += std::pow(gamma, t - k) * grads[static_cast<std::size_t>(k)];
    v *= eta;
    theta -= v;
    CHECK((s.velocity - v).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((p.values - theta).cwiseAbs().maxCoeff() < 1e-12);
  }
  const auto closed = closed_form_velocities(grads, gamma, eta);
  CHECK((closed.back() - s.velocity).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cumulative terms vanish without momentum") {
  const auto grads = random_grads(10, 5, 40);
  for (const auto& d : cumulative_terms(grads, 0.0, 0.1)) CHECK(d.cwiseAbs().maxCoeff() == 0.0);
  const auto with = cumulative_terms(grads, 0.9, 0.1);
  CHECK(with.front().cwiseAbs().maxCoeff() == 0.0);
  CHECK(with.back().norm() > 0.0);
  // delta_t = v_t - eta g_t
  const auto v = closed_form_velocities(grads, 0.9, 0.1);
  for (std::size_t t = 0; t < grads.size(); ++t) CHECK((with[t] - (v[t] - 0.1 * grads[t])).norm() < 1e-12);
}

TEST_CASE("alignment gap is zero when the student sees the expert from step 0") {
  const auto grads = random_grads(6, 4, 50);
  CHECK(alignment_gap(grads, grads, 0.9, 0.1, 0, 6) == doctest::Approx(0.0));
  CHECK(alignment_gap(grads, std::span(grads).subspan(2), 0.9, 0.1, 2, 4) > 0.0);
  CHECK(alignment_gap(grads, std::span(grads).subspan(2), 0.0, 0.1, 2, 4) == 0.0);
}

TEST_CASE("non-finite gradients are rejected with the step index") {
  MomentumState s = make_momentum_state(2, 0.9, 0.1);
  s.step = 4;
  Eigen::VectorXd g(2);
  g << 1.0, std::nan("");
  try {
    momentum_step(ParamVector{Eigen::VectorXd::Zero(2), nullptr}, g, s);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step 4") != std::string::npos);
  }
}

TEST_CASE("lambda schedule ramps from 0.5 to 1 and holds") {
  const SmoothnessConfig c = SmoothnessConfig::standard(5);
  CHECK(c.lambda(0) == 0.5);
  CHECK(c.lambda(4) == 1.0);
  CHECK(c.lambda(40) == 1.0);
  for (int e = 0; e < 8; ++e) {
    CHECK(c.lambda(e + 1) >= c.lambda(e));
    CHECK(c.lambda(e) <= 1.0);
  }
  CHECK(c.lambda(2) == doctest::Approx(0.75));
}

TEST_CASE("smooth_loss without penalty and lambda 1 is cross-entropy") {
  Graph g(true);
  const std::vector<int> labels{0, 2, 1};
  Var x = g.variable(testing::random_tensor({3, 4}, 1));
  Var w = g.constant(testing::random_tensor({4, 3}, 2));
  Var z = matmul(x, w);
  SmoothnessConfig off = SmoothnessConfig::off();
  CHECK(smooth_loss(z, labels, x, off, 0).value().item() == cross_entropy(z, labels).value().item());
}

TEST_CASE("penalty vanishes when the input-gradient norm equals K") {
  // Linear logits z = x W: dCE/dx = W (p - y), with norm computed here directly.
  const Tensor wt = testing::random_tensor({4, 3}, 3);
  const Tensor xt = testing::random_tensor({1, 4}, 4);
  const Eigen::Map<const Eigen::Matrix<double, 4, 3, Eigen::RowMajor>> w(wt.data());
  const Eigen::Map<const Eigen::RowVector4d> x(xt.data());
  Eigen::RowVector3d z = x * w;
  Eigen::RowVector3d p = (z.array() - z.maxCoeff()).exp().matrix();
  p /= p.sum();
  p[1] -= 1.0;
  const double k = (w * p.transpose()).norm();

  Graph g(true);
  Var xv = g.variable(xt);
  Var zv = matmul(xv, g.constant(wt));
  const std::vector<int> labels{1};
  SmoothnessConfig c = SmoothnessConfig::standard(1, 1.0, k);
  const double with = smooth_loss(zv, labels, xv, c, 3).value().item();
  CHECK(std::abs(with - cross_entropy(zv, labels).value().item()) < 1e-15);
}

TEST_CASE("penalty parameter gradient matches finite differences") {
  const CheckResult r = check_penalty_gradient(1e-5, 1e-4);
  INFO(r.rel_error);
  CHECK(r.passed());
}

TEST_CASE("one epoch on one batch is one momentum step from the initialization") {
  const LabeledDataset d = gen_blobs(3, 4, {5}, 0.3, 7);
  const ModelSpec spec = linear(5, 3);
  ExpertOptimizer opt{0.2, 0.9, static_cast<int>(d.size()), true};
  const Trajectory t = train_expert(d, spec, SmoothnessConfig::off(), opt, 1, 3);
  REQUIRE(t.checkpoints.size() == 2);

  // Hand gradient of mean CE for logits = x W^T + b, with W stored [C, D].
  const Index n = d.size();
  const Eigen::Map<const Eigen::MatrixXd> xt(d.images.data(), 5, n);  // columns are samples
  const Eigen::VectorXd& th = t.checkpoints[0].values;
  const Eigen::Map<const Eigen::Matrix<double, 3, 5, Eigen::RowMajor>> w(th.data());
  const Eigen::Vector3d b = th.tail(3);
  Eigen::Matrix<double, 3, 5> gw = Eigen::Matrix<double, 3, 5>::Zero();
  Eigen::Vector3d gb = Eigen::Vector3d::Zero();
  for (Index i = 0; i < n; ++i) {
    Eigen::Vector3d z = w * xt.col(i) + b;
    Eigen::Vector3d p = (z.array() - z.maxCoeff()).exp().matrix();
    p /= p.sum();
    p[d.labels[static_cast<std::size_t>(i)]] -= 1.0;
    gw += p * xt.col(i).transpose() / static_cast<double>(n);
    gb += p / static_cast<double>(n);
  }
  Eigen::VectorXd grad(18);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 5; ++c) grad[r * 5 + c] = gw(r, c);
  grad.tail(3) = gb;
  const Eigen::VectorXd expect = th - 0.2 * grad;
  CHECK((t.checkpoints[1].values - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("expert training is deterministic and learns") {
  const LabeledDataset d = gen_blobs(3, 30, {6}, 0.3, 8);
  const ModelSpec spec{ModelKind::mlp, 1, 16, {6}, 3};
  ExpertOptimizer opt{0.05, 0.9, 16, true};
  const SmoothnessConfig sc = SmoothnessConfig::standard(3);
  const Trajectory a = train_expert(d, spec, sc, opt, 10, 5);
  const Trajectory b = train_expert(d, spec, sc, opt, 10, 5);
  CHECK(a.checkpoints.size() == 11);
  for (std::size_t i = 0; i < a.checkpoints.size(); ++i) CHECK(a.checkpoints[i] == b.checkpoints[i]);
  CHECK(a.meta.metrics.back().train_accuracy > a.meta.initial_train_accuracy);
  for (std::size_t i = 1; i < a.checkpoints.size(); ++i) CHECK(a.checkpoints[i].same_layout(a.checkpoints[0]));
}

TEST_CASE("learning rate halves after the first ceil(E/2) epochs") {
  const LabeledDataset d = gen_blobs(2, 8, {3}, 0.3, 9);
  ExpertOptimizer opt{0.1, 0.5, 8, true};
  for (const auto& [epochs, first_halved] : {std::pair{4, 3}, std::pair{5, 4}, std::pair{1, 2}}) {
    const Trajectory t = train_expert(d, linear(3, 2), SmoothnessConfig::off(), opt, epochs, 1);
    for (const auto& m : t.meta.metrics) CHECK(m.learning_rate == (m.epoch >= first_halved ? 0.05 : 0.1));
  }
}

TEST_CASE("divergent training aborts with the epoch") {
  const LabeledDataset d = gen_blobs(2, 8, {3}, 0.3, 9);
  ExpertOptimizer opt{1e200, 0.9, 4, false};
  try {
    train_expert(d, ModelSpec{ModelKind::mlp, 1, 8, {3}, 2}, SmoothnessConfig::off(), opt, 3, 1);
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    CHECK(e.epoch() == 1);
  }
}

TEST_CASE("avg_var") {
  Trajectory t;
  const ModelSpec spec = linear(2, 2);
  t.spec = spec;
  const ParamVector p = init_params(spec, 1);
  t.checkpoints = {p, p, p};
  CHECK(avg_var(t) == 0.0);
  t.checkpoints = {make_params(spec, Eigen::VectorXd::Zero(6)), make_params(spec, Eigen::VectorXd::Ones(6))};
  CHECK(avg_var(t) == 6.0);
  t.checkpoints.pop_back();
  CHECK_THROWS_AS(avg_var(t), std::invalid_argument);

  const LabeledDataset d = gen_blobs(3, 10, {4}, 0.3, 2);
  const Trajectory e = train_expert(d, ModelSpec{ModelKind::mlp, 1, 8, {4}, 3}, SmoothnessConfig::off(),
                                    ExpertOptimizer{0.05, 0.9, 10, true}, 4, 2);
  double loop = 0.0;
  for (std::size_t i = 0; i + 1 < e.checkpoints.size(); ++i)
    for (Index k = 0; k < e.checkpoints[i].size(); ++k) {
      const double diff = e.checkpoints[i].values[k] - e.checkpoints[i + 1].values[k];
      loop += diff * diff;
    }
  CHECK(avg_var(e) == loop / 4.0);
}
