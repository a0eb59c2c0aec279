#include "trajdistill/model.hpp"

#include "trajdistill/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace trajdistill {

std::string to_string(ModelKind kind) { return kind == ModelKind::mlp ? "mlp" : "convnet"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "mlp") return ModelKind::mlp;
  if (s == "convnet") return ModelKind::convnet;
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

const LayerRecord& ParamLayout::at(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return r;
  throw std::out_of_range("no parameter block named '" + name + "'");
}

namespace {

void validate(const ModelSpec& spec) {
  if (spec.depth < 0 || spec.width < 1 || spec.num_classes < 2) {
    throw std::invalid_argument("model spec: need depth >= 0, width >= 1, num_classes >= 2");
  }
  if (spec.input_shape.empty() || shape_size(spec.input_shape) < 1) {
    throw ShapeError("model spec: empty input shape");
  }
  if (spec.kind == ModelKind::convnet) {
    if (spec.input_shape.size() != 3) {
      throw ShapeError("convnet expects input shape [channels, h, w], got " + shape_str(spec.input_shape));
    }
    Index h = spec.input_shape[1], w = spec.input_shape[2];
    for (int l = 0; l < spec.depth; ++l) {
      h /= 2;
      w /= 2;
    }
    if (h < 1 || w < 1) throw ShapeError("convnet: input " + shape_str(spec.input_shape) + " too small for depth");
  }
}

Index conv_feature_size(const ModelSpec& spec) {
  Index h = spec.input_shape[1], w = spec.input_shape[2];
  for (int l = 0; l < spec.depth; ++l) {
    h /= 2;
    w /= 2;
  }
  return (spec.depth > 0 ? spec.width : spec.input_shape[0]) * h * w;
}

}  // namespace

ParamLayout param_layout(const ModelSpec& spec) {
  validate(spec);
  ParamLayout layout;
  auto add = [&](std::string name, Shape shape) {
    LayerRecord r{std::move(name), std::move(shape), layout.total};
    layout.total += r.size();
    layout.records.push_back(std::move(r));
  };
  const Index classes = spec.num_classes;
  if (spec.kind == ModelKind::mlp) {
    Index in = shape_size(spec.input_shape);
    for (int l = 0; l < spec.depth; ++l) {
      const std::string p = "dense" + std::to_string(l);
      add(p + ".weight", {spec.width, in});
      add(p + ".bias", {spec.width});
      in = spec.width;
    }
    add("fc.weight", {classes, in});
    add("fc.bias", {classes});
  } else {
    Index in = spec.input_shape[0];
    for (int l = 0; l < spec.depth; ++l) {
      const std::string p = "conv" + std::to_string(l);
      add(p + ".weight", {spec.width, in, 3, 3});
      add("norm" + std::to_string(l) + ".scale", {spec.width});
      add("norm" + std::to_string(l) + ".shift", {spec.width});
      in = spec.width;
    }
    add("fc.weight", {classes, conv_feature_size(spec)});
    add("fc.bias", {classes});
  }
  return layout;
}

Index param_count(const ModelSpec& spec) { return param_layout(spec).total; }

Tensor ParamVector::block(const std::string& name) const {
  const LayerRecord& r = layout->at(name);
  return Tensor(r.shape, values.segment(r.offset, r.size()).array());
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layout == other.layout) return true;
  return layout && other.layout && *layout == *other.layout;
}

ParamVector make_params(const ModelSpec& spec, Eigen::VectorXd values) {
  auto layout = std::make_shared<const ParamLayout>(param_layout(spec));
  if (values.size() != layout->total) {
    throw ShapeError("parameter vector of length " + std::to_string(values.size()) + " does not match layout of " +
                     std::to_string(layout->total));
  }
  return ParamVector{std::move(values), std::move(layout)};
}

std::vector<Tensor> unflatten(const ParamVector& p) {
  std::vector<Tensor> out;
  out.reserve(p.layout->records.size());
  for (const auto& r : p.layout->records) out.emplace_back(r.shape, p.values.segment(r.offset, r.size()).array());
  return out;
}

ParamVector flatten(const ModelSpec& spec, std::span<const Tensor> blocks) {
  auto layout = std::make_shared<const ParamLayout>(param_layout(spec));
  if (blocks.size() != layout->records.size()) throw ShapeError("flatten: wrong number of blocks");
  Eigen::VectorXd v(layout->total);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& r = layout->records[i];
    if (blocks[i].shape() != r.shape) {
      throw ShapeError("flatten: block " + r.name + " has shape " + shape_str(blocks[i].shape()) + ", expected " +
                       shape_str(r.shape));
    }
    v.segment(r.offset, r.size()) = blocks[i].array().matrix();
  }
  return ParamVector{std::move(v), std::move(layout)};
}

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  auto layout = std::make_shared<const ParamLayout>(param_layout(spec));
  Eigen::VectorXd v = Eigen::VectorXd::Zero(layout->total);
  Rng rng(derive_seed(seed, "init-params"));
  for (const auto& r : layout->records) {
    if (r.name.ends_with(".scale")) {
      v.segment(r.offset, r.size()).setOnes();
    } else if (r.shape.size() >= 2) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(r.size() / r.shape[0]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index i = 0; i < r.size(); ++i) v[r.offset + i] = u(rng);
    }
  }
  return ParamVector{std::move(v), std::move(layout)};
}

ForwardResult forward(const ModelSpec& spec, const Var& params, const Var& batch) {
  const Shape& bs = batch.shape();
  Shape expect{bs.empty() ? 0 : bs[0]};
  expect.insert(expect.end(), spec.input_shape.begin(), spec.input_shape.end());
  if (bs != expect) {
    throw ShapeError("forward: batch shape " + shape_str(bs) + " does not match model input " +
                     shape_str(spec.input_shape));
  }
  const ParamLayout layout = param_layout(spec);
  if (params.shape() != Shape{layout.total}) {
    throw ShapeError("forward: parameter vector " + shape_str(params.shape()) + " does not match model with " +
                     std::to_string(layout.total) + " parameters");
  }
  auto block = [&](const std::string& name) {
    const LayerRecord& r = layout.at(name);
    return slice(params, r.offset, r.shape);
  };
  auto dense = [&](const Var& x, const std::string& p) {
    return matmul(x, transpose(block(p + ".weight"))) + block(p + ".bias");
  };

  const Index n = bs[0];
  Var h;
  if (spec.kind == ModelKind::mlp) {
    h = reshape(batch, Shape{n, shape_size(spec.input_shape)});
    for (int l = 0; l < spec.depth; ++l) h = relu(dense(h, "dense" + std::to_string(l)));
  } else {
    h = batch;
    for (int l = 0; l < spec.depth; ++l) {
      const std::string s = std::to_string(l);
      h = conv2d(h, block("conv" + s + ".weight"), 1);
      h = instance_norm(h, block("norm" + s + ".scale"), block("norm" + s + ".shift"));
      h = avg_pool2(relu(h));
    }
    h = reshape(h, Shape{n, h.size() / n});
  }
  return {dense(h, "fc"), h};
}

Tensor logits(const ModelSpec& spec, const ParamVector& params, const Tensor& batch) {
  Graph g;
  return forward(spec, g.constant(params.tensor()), g.constant(batch)).logits.value();
}

Tensor features(const ModelSpec& spec, const ParamVector& params, const Tensor& batch) {
  Graph g;
  return forward(spec, g.constant(params.tensor()), g.constant(batch)).features.value();
}

double accuracy(const ModelSpec& spec, const ParamVector& params, const Tensor& batch, std::span<const int> labels) {
  const Tensor z = logits(spec, params, batch);
  const Index n = z.dim(0), c = z.dim(1);
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("accuracy: label count does not match batch");
  if (n == 0) return 0.0;
  Index correct = 0;
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index k = 1; k < c; ++k)
      if (z[i * c + k] > z[i * c + best]) best = k;
    correct += best == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double param_distance_sq(const ParamVector& a, const ParamVector& b) {
  if (!a.same_layout(b)) throw ShapeError("param_distance_sq: layout mismatch");
  // in-order sum so results match a plain reference loop bit for bit
  double s = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return s;
}

Var param_distance_sq(const Var& a, const ParamVector& b) {
  if (a.shape() != Shape{b.size()}) throw ShapeError("param_distance_sq: layout mismatch");
  return squared_distance(a, a.graph().constant(b.tensor()));
}

}  // namespace trajdistill
