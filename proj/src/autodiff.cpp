#include "trajdistill/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

namespace trajdistill {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

Graph& same_graph(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(op) + ": invalid operand");
  if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": operands live in different graphs");
  return a.graph();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Var& x, Index rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(x.shape()));
  }
}

Shape left_pad(const Shape& s, std::size_t rank) {
  Shape out(rank - s.size(), 1);
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

// For every linear index of `big`, the linear index of `small` it broadcasts from.
std::vector<Index> broadcast_map(const Shape& small_in, const Shape& big, const char* op) {
  if (small_in.size() > big.size()) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(small_in) + " to " + shape_str(big));
  }
  const Shape small = left_pad(small_in, big.size());
  const std::size_t r = big.size();
  std::vector<Index> stride(r, 0);
  Index acc = 1;
  for (std::size_t k = r; k-- > 0;) {
    if (small[k] == big[k]) {
      stride[k] = acc;
    } else if (small[k] == 1) {
      stride[k] = 0;
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(small_in) + " to " + shape_str(big));
    }
    acc *= small[k];
  }
  const Index n = shape_size(big);
  std::vector<Index> map(static_cast<std::size_t>(n));
  std::vector<Index> counter(r, 0);
  Index pos = 0;
  for (Index i = 0; i < n; ++i) {
    map[static_cast<std::size_t>(i)] = pos;
    for (std::size_t k = r; k-- > 0;) {
      ++counter[k];
      pos += stride[k];
      if (counter[k] < big[k]) break;
      pos -= stride[k] * counter[k];
      counter[k] = 0;
    }
  }
  return map;
}

Var unary(const char* op, const Var& x, Eigen::ArrayXd out, BackwardFn bw) {
  return x.graph().record(op, Tensor(x.shape(), std::move(out)), {x}, std::move(bw));
}

Var zeros_like(const Var& x) { return x.graph().constant(Tensor(x.shape())); }

}  // namespace

// ---------------------------------------------------------------------------
// Var / Graph

Graph& Var::graph() const {
  if (!graph_) throw std::logic_error("use of an invalid Var");
  return *graph_;
}

const Tensor& Var::value() const { return graph().node(id_).value; }

bool Var::requires_grad() const { return graph().node(id_).requires_grad; }

Var Graph::variable(Tensor value) {
  if (!value.all_finite()) throw NumericalError("variable: non-finite input of shape " + shape_str(value.shape()));
  Node n;
  n.value = std::move(value);
  n.op = "variable";
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw NumericalError("constant: non-finite input of shape " + shape_str(value.shape()));
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::record(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericalError(std::string(op) + ": non-finite result of shape " + shape_str(value.shape()));
  }
  bool needs = false;
  if (recording_) {
    for (const Var& p : parents) needs = needs || p.requires_grad();
  }
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (needs) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

std::vector<Var> Graph::grad(const Var& loss, std::span<const Var> wrt, bool create_graph) {
  if (&loss.graph() != this) throw std::invalid_argument("grad: loss belongs to another graph");
  if (loss.size() != 1) throw ShapeError("grad: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (create_graph && !higher_order_) {
    throw std::logic_error("grad: create_graph requested on a graph without higher-order support");
  }
  if (consumed_) throw std::logic_error("grad: graph already consumed by a first-order backward pass");

  std::optional<PauseRecording> pause;
  if (!create_graph) pause.emplace(*this);

  const std::uint32_t last = loss.id();
  std::vector<Var> adj(static_cast<std::size_t>(last) + 1);
  adj[last] = constant(Tensor::filled(loss.shape(), 1.0));
  for (std::uint32_t i = last + 1; i-- > 0;) {
    if (!adj[i].valid()) continue;
    const Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward) continue;
    std::vector<Var> pg = node.backward(Var(this, i), adj[i]);
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const Var& p = node.parents[k];
      if (k >= pg.size() || !pg[k].valid() || !p.requires_grad()) continue;
      Var& slot = adj[p.id()];
      slot = slot.valid() ? add(slot, pg[k]) : pg[k];
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (&w.graph() != this) throw std::invalid_argument("grad: wrt node belongs to another graph");
    if (w.id() <= last && adj[w.id()].valid()) {
      out.push_back(adj[w.id()]);
    } else {
      out.push_back(zeros_like(w));
    }
  }
  if (!create_graph) consumed_ = true;
  return out;
}

Var Graph::grad(const Var& loss, const Var& wrt, bool create_graph) {
  const Var w[1] = {wrt};
  return grad(loss, std::span<const Var>(w), create_graph).front();
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  const Shape pa = left_pad(a, r), pb = left_pad(b, r);
  Shape out(r);
  for (std::size_t k = 0; k < r; ++k) {
    if (pa[k] == pb[k] || pb[k] == 1) {
      out[k] = pa[k];
    } else if (pa[k] == 1) {
      out[k] = pb[k];
    } else {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise primitives

Var add(const Var& a, const Var& b) {
  Graph& g = same_graph(a, b, "add");
  require_same_shape(a, b, "add");
  return g.record("add", Tensor(a.shape(), a.value().array() + b.value().array()), {a, b},
                  [](const Var&, const Var& go) { return std::vector<Var>{go, go}; });
}

Var sub(const Var& a, const Var& b) {
  Graph& g = same_graph(a, b, "sub");
  require_same_shape(a, b, "sub");
  return g.record("sub", Tensor(a.shape(), a.value().array() - b.value().array()), {a, b},
                  [](const Var&, const Var& go) { return std::vector<Var>{go, neg(go)}; });
}

Var mul(const Var& a, const Var& b) {
  Graph& g = same_graph(a, b, "mul");
  require_same_shape(a, b, "mul");
  return g.record("mul", Tensor(a.shape(), a.value().array() * b.value().array()), {a, b},
                  [a, b](const Var&, const Var& go) {
                    return std::vector<Var>{a.requires_grad() ? mul(go, b) : Var{},
                                            b.requires_grad() ? mul(go, a) : Var{}};
                  });
}

Var div(const Var& a, const Var& b) {
  Graph& g = same_graph(a, b, "div");
  require_same_shape(a, b, "div");
  return g.record("div", Tensor(a.shape(), a.value().array() / b.value().array()), {a, b},
                  [a, b](const Var& out, const Var& go) {
                    return std::vector<Var>{a.requires_grad() ? div(go, b) : Var{},
                                            b.requires_grad() ? neg(div(mul(go, out), b)) : Var{}};
                  });
}

Var neg(const Var& x) {
  return unary("neg", x, -x.value().array(), [](const Var&, const Var& go) { return std::vector<Var>{neg(go)}; });
}

Var scale(const Var& x, double c) {
  return unary("scale", x, c * x.value().array(),
               [c](const Var&, const Var& go) { return std::vector<Var>{scale(go, c)}; });
}

Var add_scalar(const Var& x, double c) {
  return unary("add_scalar", x, x.value().array() + c,
               [](const Var&, const Var& go) { return std::vector<Var>{go}; });
}

Var exp(const Var& x) {
  return unary("exp", x, x.value().array().exp(),
               [](const Var& out, const Var& go) { return std::vector<Var>{mul(go, out)}; });
}

Var log(const Var& x) {
  return unary("log", x, x.value().array().log(),
               [x](const Var&, const Var& go) { return std::vector<Var>{div(go, x)}; });
}

Var sqrt(const Var& x) {
  return unary("sqrt", x, x.value().array().sqrt(),
               [](const Var& out, const Var& go) { return std::vector<Var>{div(go, scale(out, 2.0))}; });
}

Var square(const Var& x) {
  return unary("square", x, x.value().array().square(),
               [x](const Var&, const Var& go) { return std::vector<Var>{mul(go, scale(x, 2.0))}; });
}

Var relu(const Var& x) {
  return unary("relu", x, x.value().array().max(0.0), [x](const Var&, const Var& go) {
    Tensor mask(x.shape(), (x.value().array() > 0.0).cast<double>());
    return std::vector<Var>{mul(go, go.graph().constant(std::move(mask)))};
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape primitives

Var matmul(const Var& a, const Var& b) {
  Graph& g = same_graph(a, b, "matmul");
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  RowMap(out.data(), m, n).noalias() = ConstRowMap(a.value().data(), m, k) * ConstRowMap(b.value().data(), k, n);
  return g.record("matmul", std::move(out), {a, b}, [a, b](const Var&, const Var& go) {
    return std::vector<Var>{a.requires_grad() ? matmul(go, transpose(b)) : Var{},
                            b.requires_grad() ? matmul(transpose(a), go) : Var{}};
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const Index m = a.shape()[0], n = a.shape()[1];
  Tensor out(Shape{n, m});
  RowMap(out.data(), n, m) = ConstRowMap(a.value().data(), m, n).transpose();
  return a.graph().record("transpose", std::move(out), {a},
                          [](const Var&, const Var& go) { return std::vector<Var>{transpose(go)}; });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const Shape in_shape = x.shape();
  return x.graph().record("reshape", std::move(out), {x}, [in_shape](const Var&, const Var& go) {
    return std::vector<Var>{reshape(go, in_shape)};
  });
}

Var expand(const Var& x, Shape shape) {
  if (x.shape() == shape) return x;
  const auto map = broadcast_map(x.shape(), shape, "expand");
  Tensor out(shape);
  const double* src = x.value().data();
  for (std::size_t i = 0; i < map.size(); ++i) out[static_cast<Index>(i)] = src[map[i]];
  const Shape in_shape = x.shape();
  return x.graph().record("expand", std::move(out), {x}, [in_shape](const Var&, const Var& go) {
    return std::vector<Var>{reduce_sum_to(go, in_shape)};
  });
}

Var reduce_sum_to(const Var& x, Shape shape) {
  if (x.shape() == shape) return x;
  const auto map = broadcast_map(shape, x.shape(), "reduce_sum_to");
  Tensor out(shape);
  const double* src = x.value().data();
  for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] += src[i];
  const Shape in_shape = x.shape();
  return x.graph().record("reduce_sum_to", std::move(out), {x}, [in_shape](const Var&, const Var& go) {
    return std::vector<Var>{expand(go, in_shape)};
  });
}

Var sum(const Var& x) {
  const Shape in_shape = x.shape();
  return x.graph().record("sum", Tensor::scalar(x.value().array().sum()), {x},
                          [in_shape](const Var&, const Var& go) { return std::vector<Var>{expand(go, in_shape)}; });
}

Var slice(const Var& flat, Index offset, Shape shape) {
  require_rank(flat, 1, "slice");
  const Index n = shape_size(shape), total = flat.size();
  if (offset < 0 || offset + n > total) {
    throw ShapeError("slice: block [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                     ") exceeds length " + std::to_string(total));
  }
  Tensor out(std::move(shape), flat.value().array().segment(offset, n));
  return flat.graph().record("slice", std::move(out), {flat}, [offset, total](const Var&, const Var& go) {
    return std::vector<Var>{embed(go, offset, total)};
  });
}

Var embed(const Var& x, Index offset, Index total) {
  const Index n = x.size();
  if (offset < 0 || offset + n > total) throw ShapeError("embed: block exceeds target length");
  Tensor out(Shape{total});
  out.array().segment(offset, n) = x.value().array();
  const Shape in_shape = x.shape();
  return x.graph().record("embed", std::move(out), {x}, [offset, in_shape](const Var&, const Var& go) {
    return std::vector<Var>{slice(go, offset, in_shape)};
  });
}

// ---------------------------------------------------------------------------
// Convolution family. conv2d, conv2d_input_grad and conv2d_weight_grad are
// the three partial maps of the trilinear form <conv2d(x, w), g>, so their
// derivatives close over the same set.

namespace {

struct ConvDims {
  Index n, cin, h, w, cout, kh, kw, oh, ow, pad;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, Index pad, const char* op) {
  if (xs.size() != 4 || ws.size() != 4) {
    throw ShapeError(std::string(op) + ": expected rank-4 input and weight, got " + shape_str(xs) + " and " +
                     shape_str(ws));
  }
  if (xs[1] != ws[1]) {
    throw ShapeError(std::string(op) + ": input channels " + shape_str(xs) + " do not match weight " +
                     shape_str(ws));
  }
  ConvDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, pad};
  d.oh = d.h + 2 * pad - d.kh + 1;
  d.ow = d.w + 2 * pad - d.kw + 1;
  if (d.oh <= 0 || d.ow <= 0) throw ShapeError(std::string(op) + ": kernel larger than padded input");
  return d;
}

// Loops shared by the three maps. For a kernel tap (a, b) the valid output
// rows are those i with 0 <= i + a - pad < h.
template <typename F>
void conv_taps(const ConvDims& d, F&& f) {
  for (Index a = 0; a < d.kh; ++a) {
    const Index i0 = std::max<Index>(0, d.pad - a), i1 = std::min<Index>(d.oh, d.h + d.pad - a);
    for (Index b = 0; b < d.kw; ++b) {
      const Index j0 = std::max<Index>(0, d.pad - b), j1 = std::min<Index>(d.ow, d.w + d.pad - b);
      f(a, b, i0, i1, j0, j1);
    }
  }
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvDims& d) {
  Tensor y(Shape{d.n, d.cout, d.oh, d.ow});
  const double* xp = x.data();
  const double* wp = w.data();
  double* yp = y.data();
  for (Index s = 0; s < d.n; ++s)
    for (Index o = 0; o < d.cout; ++o) {
      double* yo = yp + (s * d.cout + o) * d.oh * d.ow;
      for (Index c = 0; c < d.cin; ++c) {
        const double* xc = xp + (s * d.cin + c) * d.h * d.w;
        const double* wk = wp + (o * d.cin + c) * d.kh * d.kw;
        conv_taps(d, [&](Index a, Index b, Index i0, Index i1, Index j0, Index j1) {
          const double wv = wk[a * d.kw + b];
          for (Index i = i0; i < i1; ++i) {
            const double* xr = xc + (i + a - d.pad) * d.w + (b - d.pad);
            double* yr = yo + i * d.ow;
            for (Index j = j0; j < j1; ++j) yr[j] += wv * xr[j];
          }
        });
      }
    }
  return y;
}

Tensor conv_input_grad(const Tensor& g, const Tensor& w, const ConvDims& d) {
  Tensor dx(Shape{d.n, d.cin, d.h, d.w});
  const double* gp = g.data();
  const double* wp = w.data();
  double* xp = dx.data();
  for (Index s = 0; s < d.n; ++s)
    for (Index o = 0; o < d.cout; ++o) {
      const double* go = gp + (s * d.cout + o) * d.oh * d.ow;
      for (Index c = 0; c < d.cin; ++c) {
        double* xc = xp + (s * d.cin + c) * d.h * d.w;
        const double* wk = wp + (o * d.cin + c) * d.kh * d.kw;
        conv_taps(d, [&](Index a, Index b, Index i0, Index i1, Index j0, Index j1) {
          const double wv = wk[a * d.kw + b];
          for (Index i = i0; i < i1; ++i) {
            double* xr = xc + (i + a - d.pad) * d.w + (b - d.pad);
            const double* gr = go + i * d.ow;
            for (Index j = j0; j < j1; ++j) xr[j] += wv * gr[j];
          }
        });
      }
    }
  return dx;
}

Tensor conv_weight_grad(const Tensor& x, const Tensor& g, const ConvDims& d) {
  Tensor dw(Shape{d.cout, d.cin, d.kh, d.kw});
  const double* gp = g.data();
  const double* xp = x.data();
  double* wp = dw.data();
  for (Index s = 0; s < d.n; ++s)
    for (Index o = 0; o < d.cout; ++o) {
      const double* go = gp + (s * d.cout + o) * d.oh * d.ow;
      for (Index c = 0; c < d.cin; ++c) {
        const double* xc = xp + (s * d.cin + c) * d.h * d.w;
        double* wk = wp + (o * d.cin + c) * d.kh * d.kw;
        conv_taps(d, [&](Index a, Index b, Index i0, Index i1, Index j0, Index j1) {
          double acc = 0.0;
          for (Index i = i0; i < i1; ++i) {
            const double* xr = xc + (i + a - d.pad) * d.w + (b - d.pad);
            const double* gr = go + i * d.ow;
            for (Index j = j0; j < j1; ++j) acc += gr[j] * xr[j];
          }
          wk[a * d.kw + b] += acc;
        });
      }
    }
  return dw;
}

}  // namespace

Var conv2d(const Var& x, const Var& w, Index pad) {
  Graph& g = same_graph(x, w, "conv2d");
  const ConvDims d = conv_dims(x.shape(), w.shape(), pad, "conv2d");
  return g.record("conv2d", conv_forward(x.value(), w.value(), d), {x, w}, [x, w, pad](const Var&, const Var& go) {
    return std::vector<Var>{x.requires_grad() ? conv2d_input_grad(go, w, x.shape(), pad) : Var{},
                            w.requires_grad() ? conv2d_weight_grad(x, go, w.shape(), pad) : Var{}};
  });
}

Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape, Index pad) {
  Graph& g = same_graph(gy, w, "conv2d_input_grad");
  const ConvDims d = conv_dims(x_shape, w.shape(), pad, "conv2d_input_grad");
  if (gy.shape() != Shape{d.n, d.cout, d.oh, d.ow}) {
    throw ShapeError("conv2d_input_grad: adjoint shape " + shape_str(gy.shape()) + " does not match output");
  }
  return g.record("conv2d_input_grad", conv_input_grad(gy.value(), w.value(), d), {gy, w},
                  [gy, w, pad](const Var&, const Var& go) {
                    return std::vector<Var>{gy.requires_grad() ? conv2d(go, w, pad) : Var{},
                                            w.requires_grad() ? conv2d_weight_grad(go, gy, w.shape(), pad) : Var{}};
                  });
}

Var conv2d_weight_grad(const Var& x, const Var& gy, const Shape& w_shape, Index pad) {
  Graph& g = same_graph(x, gy, "conv2d_weight_grad");
  const ConvDims d = conv_dims(x.shape(), w_shape, pad, "conv2d_weight_grad");
  if (gy.shape() != Shape{d.n, d.cout, d.oh, d.ow}) {
    throw ShapeError("conv2d_weight_grad: adjoint shape " + shape_str(gy.shape()) + " does not match output");
  }
  return g.record("conv2d_weight_grad", conv_weight_grad(x.value(), gy.value(), d), {x, gy},
                  [x, gy, pad](const Var&, const Var& go) {
                    return std::vector<Var>{x.requires_grad() ? conv2d_input_grad(gy, go, x.shape(), pad) : Var{},
                                            gy.requires_grad() ? conv2d(x, go, pad) : Var{}};
                  });
}

// ---------------------------------------------------------------------------
// Pooling and plane maps

Var avg_pool2(const Var& x) {
  if (x.value().rank() < 2) throw ShapeError("avg_pool2: need at least rank 2, got " + shape_str(x.shape()));
  Shape os = x.shape();
  const Index h = os[os.size() - 2], w = os[os.size() - 1];
  const Index oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("avg_pool2: plane too small in " + shape_str(x.shape()));
  os[os.size() - 2] = oh;
  os[os.size() - 1] = ow;
  Tensor out(os);
  const Index planes = x.size() / (h * w);
  const double* xp = x.value().data();
  double* yp = out.data();
  for (Index p = 0; p < planes; ++p) {
    const double* xi = xp + p * h * w;
    double* yi = yp + p * oh * ow;
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j) {
        const double* r0 = xi + (2 * i) * w + 2 * j;
        const double* r1 = r0 + w;
        yi[i * ow + j] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  }
  const Shape in_shape = x.shape();
  return x.graph().record("avg_pool2", std::move(out), {x}, [in_shape](const Var&, const Var& go) {
    return std::vector<Var>{avg_pool2_adjoint(go, in_shape)};
  });
}

Var avg_pool2_adjoint(const Var& g, const Shape& x_shape) {
  if (x_shape.size() < 2) throw ShapeError("avg_pool2_adjoint: need at least rank 2");
  const Index h = x_shape[x_shape.size() - 2], w = x_shape[x_shape.size() - 1];
  const Index oh = h / 2, ow = w / 2;
  Shape expect = x_shape;
  expect[expect.size() - 2] = oh;
  expect[expect.size() - 1] = ow;
  if (g.shape() != expect) {
    throw ShapeError("avg_pool2_adjoint: adjoint " + shape_str(g.shape()) + " does not match " + shape_str(expect));
  }
  Tensor out(x_shape);
  const Index planes = shape_size(x_shape) / (h * w);
  const double* gp = g.value().data();
  double* xp = out.data();
  for (Index p = 0; p < planes; ++p) {
    const double* gi = gp + p * oh * ow;
    double* xi = xp + p * h * w;
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j) {
        const double v = 0.25 * gi[i * ow + j];
        double* r0 = xi + (2 * i) * w + 2 * j;
        double* r1 = r0 + w;
        r0[0] += v;
        r0[1] += v;
        r1[0] += v;
        r1[1] += v;
      }
  }
  return g.graph().record("avg_pool2_adjoint", std::move(out), {g},
                          [](const Var&, const Var& go) { return std::vector<Var>{avg_pool2(go)}; });
}

PlaneMap PlaneMap::transposed() const {
  PlaneMap t;
  t.in_h = out_h;
  t.in_w = out_w;
  t.out_h = in_h;
  t.out_w = in_w;
  t.entries.reserve(entries.size());
  for (const Entry& e : entries) t.entries.push_back({e.src, e.dst, e.weight});
  return t;
}

Var plane_map(const Var& x, std::shared_ptr<const PlaneMap> map) {
  const Shape& xs = x.shape();
  if (xs.size() < 2 || xs[xs.size() - 2] != map->in_h || xs[xs.size() - 1] != map->in_w) {
    throw ShapeError("plane_map: input " + shape_str(xs) + " does not match map plane " +
                     shape_str({map->in_h, map->in_w}));
  }
  Shape os = xs;
  os[os.size() - 2] = map->out_h;
  os[os.size() - 1] = map->out_w;
  Tensor out(os);
  const Index in_plane = map->in_h * map->in_w, out_plane = map->out_h * map->out_w;
  const Index planes = x.size() / in_plane;
  const double* xp = x.value().data();
  double* yp = out.data();
  for (Index p = 0; p < planes; ++p) {
    const double* xi = xp + p * in_plane;
    double* yi = yp + p * out_plane;
    for (const auto& e : map->entries) yi[e.dst] += e.weight * xi[e.src];
  }
  return x.graph().record("plane_map", std::move(out), {x}, [map](const Var&, const Var& go) {
    return std::vector<Var>{plane_map(go, std::make_shared<const PlaneMap>(map->transposed()))};
  });
}

// ---------------------------------------------------------------------------
// Composites

namespace {

template <typename Prim>
Var broadcast_binary(const Var& a, const Var& b, const char* op, Prim prim) {
  same_graph(a, b, op);
  if (a.shape() == b.shape()) return prim(a, b);
  const Shape s = broadcast_shape(a.shape(), b.shape(), op);
  return prim(expand(a, s), expand(b, s));
}

}  // namespace

Var operator+(const Var& a, const Var& b) { return broadcast_binary(a, b, "add", add); }
Var operator-(const Var& a, const Var& b) { return broadcast_binary(a, b, "sub", sub); }
Var operator*(const Var& a, const Var& b) { return broadcast_binary(a, b, "mul", mul); }
Var operator/(const Var& a, const Var& b) { return broadcast_binary(a, b, "div", div); }
Var operator-(const Var& x) { return neg(x); }
Var operator*(const Var& x, double c) { return scale(x, c); }
Var operator*(double c, const Var& x) { return scale(x, c); }
Var operator+(const Var& x, double c) { return add_scalar(x, c); }
Var operator-(const Var& x, double c) { return add_scalar(x, -c); }

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Var log_softmax(const Var& logits) {
  require_rank(logits, 2, "log_softmax");
  const Index n = logits.shape()[0];
  Tensor rowmax(Shape{n, 1}, ConstRowMap(logits.value().data(), n, logits.shape()[1]).rowwise().maxCoeff().array());
  const Var shifted = logits - logits.graph().constant(std::move(rowmax));
  const Var lse = log(reduce_sum_to(exp(shifted), Shape{n, 1}));
  return shifted - lse;
}

Var softmax(const Var& logits) { return exp(log_softmax(logits)); }

Var cross_entropy_per_sample(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const Index n = logits.shape()[0], c = logits.shape()[1];
  if (static_cast<Index>(labels.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  Tensor onehot(Shape{n, c});
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " out of range");
    onehot[i * c + y] = 1.0;
  }
  const Var picked = reduce_sum_to(log_softmax(logits) * logits.graph().constant(std::move(onehot)), Shape{n, 1});
  return neg(reshape(picked, Shape{n}));
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  return mean(cross_entropy_per_sample(logits, labels));
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 4, "instance_norm");
  const Index n = x.shape()[0], c = x.shape()[1];
  const double plane = static_cast<double>(x.shape()[2] * x.shape()[3]);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("instance_norm: affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match channels of " + shape_str(x.shape()));
  }
  const Shape stat{n, c, 1, 1};
  const Var mu = scale(reduce_sum_to(x, stat), 1.0 / plane);
  const Var centered = x - mu;
  const Var var = scale(reduce_sum_to(square(centered), stat), 1.0 / plane);
  const Var normed = centered / sqrt(add_scalar(var, eps));
  return normed * reshape(gamma, Shape{c, 1, 1}) + reshape(beta, Shape{c, 1, 1});
}

Var l2_norm(const Var& x) { return sqrt(sum(square(x))); }

Var squared_distance(const Var& a, const Var& b) {
  require_same_shape(a, b, "squared_distance");
  return sum(square(sub(a, b)));
}

}  // namespace trajdistill
