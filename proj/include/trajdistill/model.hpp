#pragma once

#include "trajdistill/autodiff.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace trajdistill {

enum class ModelKind { mlp, convnet };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& s);

/// Network architecture.
///
/// mlp: `depth` hidden dense layers of `width` units with ReLU, then a dense
/// classifier. depth 0 is a linear softmax model.
///
/// convnet: `depth` blocks of [3x3 conv (width channels, pad 1) -> instance
/// norm with affine parameters -> ReLU -> 2x2 average pool], then a dense
/// classifier on the flattened features.
///
/// In both cases the feature tap is the input of the final dense layer.
struct ModelSpec {
  ModelKind kind = ModelKind::mlp;
  int depth = 1;
  int width = 16;
  Shape input_shape{2};
  int num_classes = 2;

  bool operator==(const ModelSpec&) const = default;
};

struct LayerRecord {
  std::string name;
  Shape shape;
  Index offset = 0;

  Index size() const { return shape_size(shape); }
  /// Filters are the leading-axis slices of a weight; a vector is one filter.
  Index filter_count() const { return shape.size() >= 2 ? shape[0] : 1; }

  bool operator==(const LayerRecord&) const = default;
};

struct ParamLayout {
  std::vector<LayerRecord> records;
  Index total = 0;

  const LayerRecord& at(const std::string& name) const;
  bool operator==(const ParamLayout&) const = default;
};

ParamLayout param_layout(const ModelSpec& spec);
Index param_count(const ModelSpec& spec);

/// Flat parameters plus the layout that gives them structure.
struct ParamVector {
  Eigen::VectorXd values;
  std::shared_ptr<const ParamLayout> layout;

  Index size() const { return values.size(); }
  Tensor tensor() const { return Tensor::vector(values); }
  /// Copy of one named block with its recorded shape.
  Tensor block(const std::string& name) const;
  bool same_layout(const ParamVector& other) const;

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.same_layout(b) && a.values == b.values;
  }
};

ParamVector make_params(const ModelSpec& spec, Eigen::VectorXd values);
/// Splits flat values into one tensor per layer.
std::vector<Tensor> unflatten(const ParamVector& p);
ParamVector flatten(const ModelSpec& spec, std::span<const Tensor> blocks);

/// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and
/// norm shifts zero; norm scales one. Deterministic in (spec, seed).
ParamVector init_params(const ModelSpec& spec, std::uint64_t seed);

struct ForwardResult {
  Var logits;    // [n, C]
  Var features;  // [n, F], input of the classifier
};

/// Differentiable forward pass. `params` is a rank-1 Var holding the flat
/// parameters; `batch` is [n, input_shape...].
ForwardResult forward(const ModelSpec& spec, const Var& params, const Var& batch);

/// Forward pass on plain values (no gradient tracking).
Tensor logits(const ModelSpec& spec, const ParamVector& params, const Tensor& batch);
Tensor features(const ModelSpec& spec, const ParamVector& params, const Tensor& batch);

/// Top-1 accuracy in [0, 1].
double accuracy(const ModelSpec& spec, const ParamVector& params, const Tensor& batch, std::span<const int> labels);

double param_distance_sq(const ParamVector& a, const ParamVector& b);
/// Differentiable in `a`.
Var param_distance_sq(const Var& a, const ParamVector& b);

}  // namespace trajdistill
