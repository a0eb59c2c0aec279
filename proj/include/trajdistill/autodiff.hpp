#pragma once

#include "trajdistill/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace trajdistill {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid as long as the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const;
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Index size() const { return value().size(); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Maps (output node, adjoint of output) to one adjoint per parent. Entries may
/// be left invalid to signal a zero contribution. Implemented with Var ops so a
/// recording backward sweep yields differentiable gradients.
using BackwardFn = std::function<std::vector<Var>(const Var& out, const Var& grad_out)>;

struct Node {
  Tensor value;
  const char* op = "leaf";
  std::vector<Var> parents;
  BackwardFn backward;
  bool requires_grad = false;
};

/// Append-only tape. Nodes are created in topological order, so a reverse
/// sweep over ids is a valid backward order. When higher-order support is
/// enabled, grad() can record the backward sweep itself as new nodes.
///
/// A Graph is single-writer; distinct graphs are independent.
class Graph {
 public:
  explicit Graph(bool higher_order = false) : higher_order_(higher_order) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var variable(Tensor value);
  Var constant(Tensor value);

  /// Adds an op result. If no parent requires grad, or recording is paused,
  /// the result is stored as a constant.
  Var record(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward);

  /// Gradients of scalar `loss` with respect to `wrt`. With `create_graph`
  /// the returned Vars are differentiable nodes; without it the graph is
  /// consumed and a later grad() call throws.
  std::vector<Var> grad(const Var& loss, std::span<const Var> wrt, bool create_graph);
  std::vector<Var> grad(const Var& loss, std::span<const Var> wrt) {
    return grad(loss, wrt, higher_order_);
  }
  Var grad(const Var& loss, const Var& wrt, bool create_graph);

  bool higher_order_enabled() const { return higher_order_; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::uint32_t id) const { return nodes_.at(id); }

 private:
  friend class PauseRecording;

  std::deque<Node> nodes_;
  bool higher_order_ = false;
  bool recording_ = true;
  bool consumed_ = false;
};

/// Scoped no-record region; ops inside produce constants.
class PauseRecording {
 public:
  explicit PauseRecording(Graph& g) : g_(g), prev_(g.recording_) { g_.recording_ = false; }
  ~PauseRecording() { g_.recording_ = prev_; }
  PauseRecording(const PauseRecording&) = delete;
  PauseRecording& operator=(const PauseRecording&) = delete;

 private:
  Graph& g_;
  bool prev_;
};

// ---------------------------------------------------------------------------
// Primitive ops. Every primitive registers an exact local derivative written
// in terms of other primitives.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& x);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);
Var relu(const Var& x);

/// [m,k] x [k,n] -> [m,n]
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& x, Shape shape);
/// Broadcast to `shape` (numpy rules after left-padding the rank with ones).
Var expand(const Var& x, Shape shape);
/// Adjoint of expand: sums broadcast axes away.
Var reduce_sum_to(const Var& x, Shape shape);
Var sum(const Var& x);

/// Contiguous block of a rank-1 tensor, reshaped to `shape`.
Var slice(const Var& flat, Index offset, Shape shape);
/// Places `x` (flattened) into a zero rank-1 tensor of length `total`.
Var embed(const Var& x, Index offset, Index total);

/// Stride-1 2-D convolution with symmetric zero padding.
/// x: [n, cin, h, w], w: [cout, cin, kh, kw].
Var conv2d(const Var& x, const Var& w, Index pad);
Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape, Index pad);
Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape, Index pad);

/// 2x2 average pooling, stride 2, on the last two axes.
Var avg_pool2(const Var& x);
Var avg_pool2_adjoint(const Var& g, const Shape& x_shape);

/// Fixed linear map over the trailing (h, w) plane, applied to every leading
/// slice: out[dst] += weight * in[src].
struct PlaneMap {
  Index in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  struct Entry {
    Index dst;
    Index src;
    double weight;
  };
  std::vector<Entry> entries;

  PlaneMap transposed() const;
};
Var plane_map(const Var& x, std::shared_ptr<const PlaneMap> map);

// ---------------------------------------------------------------------------
// Composites (exact derivatives follow from the primitives).

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& x);
Var operator*(const Var& x, double c);
Var operator*(double c, const Var& x);
Var operator+(const Var& x, double c);
Var operator-(const Var& x, double c);

Var mean(const Var& x);
/// Row-wise log-softmax of [n, c] logits.
Var log_softmax(const Var& logits);
Var softmax(const Var& logits);
/// Per-sample cross-entropy, shape [n].
Var cross_entropy_per_sample(const Var& logits, std::span<const int> labels);
/// Mean cross-entropy over the batch.
Var cross_entropy(const Var& logits, std::span<const int> labels);
/// Per-(sample, channel) normalization over the spatial axes of [n, c, h, w],
/// followed by a per-channel affine map.
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_norm(const Var& x);
Var squared_distance(const Var& a, const Var& b);

/// Shape common to `a` and `b` under broadcasting, or throws ShapeError.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);

}  // namespace trajdistill
