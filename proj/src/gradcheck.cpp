#include "trajdistill/gradcheck.hpp"

#include "trajdistill/buffer.hpp"
#include "trajdistill/data.hpp"
#include "trajdistill/distill.hpp"
#include "trajdistill/model.hpp"
#include "trajdistill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace trajdistill {

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& at, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff: eps must be positive");
  Tensor out(at.shape());
  Tensor probe = at;
  for (Index i = 0; i < at.size(); ++i) {
    const double x0 = at[i];
    probe[i] = x0 + eps;
    const double fp = f(probe);
    probe[i] = x0 - eps;
    const double fm = f(probe);
    probe[i] = x0;
    out[i] = (fp - fm) / (2.0 * eps);
  }
  return out;
}

double relative_error(const Tensor& analytic, const Tensor& reference) {
  if (analytic.size() != reference.size()) {
    throw ShapeError("relative_error: sizes " + std::to_string(analytic.size()) + " and " +
                     std::to_string(reference.size()) + " differ");
  }
  const double diff = (analytic.array() - reference.array()).matrix().norm();
  const double denom = std::max({analytic.array().matrix().norm(), reference.array().matrix().norm(), 1e-10});
  return diff / denom;
}

namespace {

double eval_scalar(const ScalarFn& fn, const Tensor& t) {
  Graph g;
  return fn(g.constant(t)).value().item();
}

Tensor first_grad(const ScalarFn& fn, const Tensor& t) {
  Graph g;
  const Var x = g.variable(t);
  return g.grad(fn(x), x, false).value();
}

Tensor uniform(const Shape& s, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// Values bounded away from zero in magnitude, for kinks and poles.
Tensor away_from_zero(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor t = uniform(s, rng, lo, hi);
  std::bernoulli_distribution sign(0.5);
  for (Index i = 0; i < t.size(); ++i)
    if (sign(rng)) t[i] = -t[i];
  return t;
}

Tensor concat(const std::vector<Tensor>& parts) {
  Index n = 0;
  for (const auto& p : parts) n += p.size();
  Tensor out(Shape{n});
  Index off = 0;
  for (const auto& p : parts) {
    out.array().segment(off, p.size()) = p.array();
    off += p.size();
  }
  return out;
}

// sum(y * W) with W drawn from a fixed stream, so every output element
// contributes with a distinct weight.
Var contract(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, y.graph().constant(uniform(y.shape(), rng, -1.0, 1.0))));
}

using MultiFn = std::function<Var(const std::vector<Var>&)>;

OpCase make_case(const std::string& name, std::vector<Tensor> operands, MultiFn body, bool second_order = true) {
  std::vector<Shape> shapes;
  for (const auto& t : operands) shapes.push_back(t.shape());
  const std::uint64_t seed = derive_seed(0x6772616463686bULL, name);
  OpCase c;
  c.name = name;
  c.at = concat(operands);
  c.second_order = second_order;
  c.fn = [shapes, body, seed](const Var& x) {
    std::vector<Var> in;
    Index off = 0;
    for (const auto& s : shapes) {
      in.push_back(slice(x, off, s));
      off += shape_size(s);
    }
    return contract(body(in), seed);
  };
  return c;
}

}  // namespace

CheckResult check_first_order(const std::string& name, const ScalarFn& fn, const Tensor& at, double eps, double tol) {
  const Tensor analytic = first_grad(fn, at);
  const Tensor numeric = finite_diff([&](const Tensor& t) { return eval_scalar(fn, t); }, at, eps);
  return {name, relative_error(analytic, numeric), tol};
}

CheckResult check_second_order(const std::string& name, const ScalarFn& fn, const Tensor& at, const Tensor& v,
                               double eps, double tol) {
  Graph g(true);
  const Var x = g.variable(at);
  const Var gx = g.grad(fn(x), x, true);
  const Var s = sum(mul(gx, g.constant(v.reshaped(gx.shape()))));
  const Tensor analytic = g.grad(s, x, false).value();
  const Tensor numeric = finite_diff(
      [&](const Tensor& t) { return (first_grad(fn, t).array() * v.array()).sum(); }, at, eps);
  return {name, relative_error(analytic, numeric), tol};
}

std::vector<OpCase> op_cases() {
  Rng rng(derive_seed(20240611, "op-cases"));
  auto U = [&](Shape s, double lo = -1.0, double hi = 1.0) { return uniform(s, rng, lo, hi); };
  auto A = [&](Shape s) { return away_from_zero(s, rng, 0.2, 1.0); };
  std::vector<OpCase> cs;

  cs.push_back(make_case("add", {U({3, 4}), U({3, 4})}, [](auto& v) { return add(v[0], v[1]); }));
  cs.push_back(make_case("sub", {U({3, 4}), U({3, 4})}, [](auto& v) { return sub(v[0], v[1]); }));
  cs.push_back(make_case("mul", {U({3, 4}), U({3, 4})}, [](auto& v) { return mul(v[0], v[1]); }));
  cs.push_back(make_case("div", {U({3, 4}), U({3, 4}, 0.5, 1.5)}, [](auto& v) { return div(v[0], v[1]); }));
  cs.push_back(make_case("neg", {U({5})}, [](auto& v) { return neg(v[0]); }));
  cs.push_back(make_case("scale", {U({5})}, [](auto& v) { return scale(v[0], -2.5); }));
  cs.push_back(make_case("add_scalar", {U({5})}, [](auto& v) { return mul(add_scalar(v[0], 0.7), v[0]); }));
  cs.push_back(make_case("exp", {U({6})}, [](auto& v) { return exp(v[0]); }));
  cs.push_back(make_case("log", {U({6}, 0.3, 2.0)}, [](auto& v) { return log(v[0]); }));
  cs.push_back(make_case("sqrt", {U({6}, 0.3, 2.0)}, [](auto& v) { return sqrt(v[0]); }));
  cs.push_back(make_case("square", {U({6})}, [](auto& v) { return square(v[0]); }));
  cs.push_back(make_case("relu", {A({8})}, [](auto& v) { return mul(relu(v[0]), v[0]); }));
  cs.push_back(make_case("matmul", {U({3, 4}), U({4, 2})}, [](auto& v) { return matmul(v[0], v[1]); }));
  cs.push_back(make_case("transpose", {U({3, 4})}, [](auto& v) { return square(transpose(v[0])); }));
  cs.push_back(make_case("reshape", {U({2, 6})}, [](auto& v) { return square(reshape(v[0], {3, 4})); }));
  cs.push_back(make_case("expand", {U({3, 1}), U({4})}, [](auto& v) {
    return mul(expand(v[0], {2, 3, 4}), expand(v[1], {2, 3, 4}));
  }));
  cs.push_back(make_case("reduce_sum_to", {U({2, 3, 4})}, [](auto& v) { return square(reduce_sum_to(v[0], {3, 1})); }));
  cs.push_back(make_case("sum", {U({7})}, [](auto& v) { return square(sum(v[0])); }));
  cs.push_back(make_case("slice", {U({10})}, [](auto& v) { return square(slice(v[0], 3, {2, 2})); }));
  cs.push_back(make_case("embed", {U({4})}, [](auto& v) { return square(embed(v[0], 2, 9)); }));
  cs.push_back(make_case("broadcast_ops", {U({2, 3}), U({3}, 0.5, 1.5)}, [](auto& v) {
    return (v[0] + v[1]) * v[0] - v[0] / v[1];
  }));

  cs.push_back(make_case("conv2d", {U({2, 2, 5, 5}), U({3, 2, 3, 3})}, [](auto& v) {
    return square(conv2d(v[0], v[1], 1));
  }));
  cs.push_back(make_case("conv2d_nopad", {U({1, 2, 5, 4}), U({2, 2, 3, 3})}, [](auto& v) {
    return square(conv2d(v[0], v[1], 0));
  }));
  cs.push_back(make_case("conv2d_input_grad", {U({2, 3, 4, 4}), U({3, 2, 3, 3})}, [](auto& v) {
    return square(conv2d_input_grad(v[0], v[1], {2, 2, 4, 4}, 1));
  }));
  cs.push_back(make_case("conv2d_weight_grad", {U({2, 2, 4, 4}), U({2, 3, 4, 4})}, [](auto& v) {
    return square(conv2d_weight_grad(v[0], v[1], {3, 2, 3, 3}, 1));
  }));
  cs.push_back(make_case("avg_pool2", {U({2, 2, 4, 6})}, [](auto& v) { return square(avg_pool2(v[0])); }));
  cs.push_back(make_case("avg_pool2_adjoint", {U({2, 2, 2, 3})}, [](auto& v) {
    return square(avg_pool2_adjoint(v[0], {2, 2, 4, 6}));
  }));

  Transform flip;
  flip.kind = Transform::Kind::flip;
  Transform shift;
  shift.kind = Transform::Kind::shift;
  shift.dy = 1;
  shift.dx = -2;
  Transform zoom;
  zoom.kind = Transform::Kind::scale;
  zoom.factor = 1.15;
  for (const auto& [tag, t] : {std::pair{"flip", flip}, std::pair{"shift", shift}, std::pair{"scale", zoom}}) {
    auto map = transform_map(t, 5, 6);
    cs.push_back(make_case(std::string("plane_map_") + tag, {U({2, 1, 5, 6})}, [map](auto& v) {
      return square(plane_map(v[0], map));
    }));
  }

  cs.push_back(make_case("mean", {U({3, 3})}, [](auto& v) { return square(mean(v[0])); }));
  cs.push_back(make_case("log_softmax", {U({3, 4}, -2.0, 2.0)}, [](auto& v) { return log_softmax(v[0]); }));
  cs.push_back(make_case("softmax", {U({3, 4}, -2.0, 2.0)}, [](auto& v) { return softmax(v[0]); }));
  cs.push_back(make_case("cross_entropy_per_sample", {U({3, 4}, -2.0, 2.0)}, [](auto& v) {
    const int labels[3] = {2, 0, 3};
    return cross_entropy_per_sample(v[0], labels);
  }));
  cs.push_back(make_case("cross_entropy", {U({3, 4}, -2.0, 2.0)}, [](auto& v) {
    const int labels[3] = {1, 1, 0};
    return cross_entropy(v[0], labels);
  }));
  cs.push_back(make_case("instance_norm", {U({2, 3, 3, 4}), U({3}), U({3})}, [](auto& v) {
    return instance_norm(v[0], v[1], v[2]);
  }));
  cs.push_back(make_case("l2_norm", {U({6})}, [](auto& v) { return l2_norm(v[0]); }));
  cs.push_back(make_case("squared_distance", {U({2, 3}), U({2, 3})}, [](auto& v) {
    return squared_distance(v[0], v[1]);
  }));
  return cs;
}

CheckResult check_penalty_gradient(double eps, double tol) {
  ModelSpec spec;
  spec.kind = ModelKind::mlp;
  spec.depth = 1;
  spec.width = 5;
  spec.input_shape = {3};
  spec.num_classes = 3;
  const ParamVector p0 = init_params(spec, 7);
  Rng rng(derive_seed(7, "penalty-batch"));
  const Tensor batch = uniform({4, 3}, rng, 0.0, 1.0);
  const std::vector<int> labels{0, 2, 1, 2};
  SmoothnessConfig cfg = SmoothnessConfig::standard(1, 1.0, 0.5);
  auto loss_at = [&](Graph& g, const Var& theta) {
    const Var x = g.variable(batch);
    return smooth_loss(forward(spec, theta, x).logits, labels, x, cfg, 0);
  };
  Graph g(true);
  const Var theta = g.variable(p0.tensor());
  const Tensor analytic = g.grad(loss_at(g, theta), theta, false).value();
  const Tensor numeric = finite_diff(
      [&](const Tensor& t) {
        Graph h(true);
        return loss_at(h, h.constant(t)).value().item();
      },
      p0.tensor(), eps);
  return {"gradient_penalty_params", relative_error(analytic, numeric), tol};
}

std::vector<CheckResult> check_meta_gradient(double eps, double tol, int student_steps) {
  ModelSpec spec;
  spec.kind = ModelKind::mlp;
  spec.depth = 1;
  spec.width = 8;
  spec.input_shape = {4};
  spec.num_classes = 3;
  const LabeledDataset data = gen_blobs(3, 12, {4}, 0.15, 11);
  ExpertOptimizer opt;
  opt.eta = 0.05;
  opt.batch_size = 12;
  const Trajectory traj = train_expert(data, spec, SmoothnessConfig::off(), opt, 3, 11);

  DistillConfig cfg;
  cfg.expert_epochs = 1;
  cfg.student_steps = student_steps;
  cfg.max_start = 1;
  cfg.rho = 0.1;
  cfg.seed = 5;
  const MetaTask task = sample_task(std::span<const Trajectory>(&traj, 1), cfg, 0);

  Rng rng(derive_seed(5, "meta-images"));
  const Tensor images = uniform({3, 4}, rng, 0.1, 0.9);
  const std::vector<int> labels{0, 1, 2};
  const double alpha = 0.05;

  const MetaStep ms = meta_step(task, images, labels, alpha, cfg, true);
  const Tensor num_img = finite_diff(
      [&](const Tensor& t) { return meta_step(task, t, labels, alpha, cfg, false).loss; }, images, eps);
  const Tensor num_alpha = finite_diff(
      [&](const Tensor& t) { return meta_step(task, images, labels, t.item(), cfg, false).loss; },
      Tensor::scalar(alpha), eps);
  return {{"meta_gradient_pixels", relative_error(ms.grad_images, num_img), tol},
          {"meta_gradient_alpha", relative_error(Tensor::scalar(ms.grad_alpha), num_alpha), tol}};
}

bool GradcheckReport::passed() const {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed(); });
}

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& r : results) m = std::max(m, r.rel_error);
  return m;
}

GradcheckReport run_gradcheck_suite(const GradcheckOptions& options) {
  GradcheckReport rep;
  auto cases = op_cases();
  cases.insert(cases.end(), options.extra_cases.begin(), options.extra_cases.end());
  for (const auto& c : cases)
    rep.results.push_back(check_first_order(c.name, c.fn, c.at, options.eps, options.first_order_tol));
  for (const auto& c : cases) {
    if (!c.second_order) continue;
    Rng rng(derive_seed(99, c.name));
    const Tensor v = uniform(c.at.shape(), rng, -1.0, 1.0);
    rep.results.push_back(
        check_second_order(c.name + "/second_order", c.fn, c.at, v, options.eps, options.second_order_tol));
  }
  if (options.include_models) {
    rep.results.push_back(check_penalty_gradient(options.eps, options.second_order_tol));
    for (auto& r : check_meta_gradient(options.eps, options.second_order_tol, 3)) rep.results.push_back(r);
  }
  return rep;
}

bool EpsSweep::stable(double floor) const {
  if (max_error.empty()) return true;
  const auto [lo, hi] = std::minmax_element(max_error.begin(), max_error.end());
  return *hi <= 10.0 * std::max(*lo, floor);
}

EpsSweep eps_sweep(std::span<const double> eps, int student_steps) {
  EpsSweep sw;
  for (double e : eps) {
    double worst = check_penalty_gradient(e, 1.0).rel_error;
    for (const auto& r : check_meta_gradient(e, 1.0, student_steps)) worst = std::max(worst, r.rel_error);
    sw.eps.push_back(e);
    sw.max_error.push_back(worst);
  }
  return sw;
}

}  // namespace trajdistill
