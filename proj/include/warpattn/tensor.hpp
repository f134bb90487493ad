#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "warpattn/common.hpp"
#include "warpattn/rng.hpp"

namespace warpattn {

template <class S>
using MatMap =
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

namespace detail {

// Every tensor buffer goes through here so the benchmark harness can track
// peak transient bytes.
template <class S>
std::shared_ptr<std::vector<S>> make_buffer(Index n) {
  const std::int64_t bytes = n * static_cast<std::int64_t>(sizeof(S));
  alloc_stats().on_alloc(bytes);
  return std::shared_ptr<std::vector<S>>(
      new std::vector<S>(static_cast<std::size_t>(n)),
      [bytes](std::vector<S>* p) {
        alloc_stats().on_free(bytes);
        delete p;
      });
}

}  // namespace detail

template <class S>
class Tensor;

// Append-only tape. Parents always have smaller ids, so a reverse sweep
// visits children before parents. One graph per pipeline instance; not
// shareable across threads.
template <class S>
class Graph {
 public:
  using BackwardFn = std::function<std::vector<Tensor<S>>(const Tensor<S>&)>;

  struct Node {
    const char* op;
    std::vector<Index> parents;
    BackwardFn backward;  // null for leaves
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Index add_node(const char* op, std::vector<Index> parents, BackwardFn fn) {
    for (Index p : parents) {
      if (p < 0 || p >= size())
        throw ValidationError("graph parent id out of range");
    }
    nodes_.push_back(Node{op, std::move(parents), std::move(fn)});
    return size() - 1;
  }

  Index size() const { return static_cast<Index>(nodes_.size()); }
  const Node& node(Index id) const { return nodes_[static_cast<std::size_t>(id)]; }

 private:
  std::vector<Node> nodes_;
};

// Dense row-major tensor. Immutable after construction: ops return new
// tensors, copies share buffers. node >= 0 marks participation in a Graph.
template <class S>
class Tensor {
  static_assert(std::is_floating_point_v<S>, "Tensor requires f32 or f64");

 public:
  Tensor() = default;

  static Tensor wrap(Shape shape, std::shared_ptr<std::vector<S>> buf) {
    if (shape_numel(shape) != static_cast<Index>(buf->size()))
      throw ValidationError("tensor shape " + shape_str(shape) +
                            " does not match buffer length " +
                            std::to_string(buf->size()));
    for (Index d : shape)
      if (d <= 0) throw ValidationError("non-positive dimension in " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(buf);
    return t;
  }

  static Tensor from_vector(Shape shape, const std::vector<S>& values) {
    auto buf = detail::make_buffer<S>(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), buf->begin());
    Tensor t = wrap(std::move(shape), std::move(buf));
    for (Index i = 0; i < t.size(); ++i)
      if (!std::isfinite(t[i]))
        throw NumericError("non-finite value rejected at tensor construction");
    return t;
  }

  static Tensor zeros(Shape shape) {
    auto buf = detail::make_buffer<S>(shape_numel(shape));
    return wrap(std::move(shape), std::move(buf));
  }

  static Tensor full(Shape shape, S value) {
    auto buf = detail::make_buffer<S>(shape_numel(shape));
    std::fill(buf->begin(), buf->end(), value);
    return wrap(std::move(shape), std::move(buf));
  }

  static Tensor scalar(S value) { return full({1}, value); }

  // Registers `value` as a tracked leaf of `g`. Shares the buffer.
  static Tensor leaf(Graph<S>& g, const Tensor& value, const char* name = "leaf") {
    Tensor t = value;
    t.graph_ = &g;
    t.node_ = g.add_node(name, {}, nullptr);
    return t;
  }

  bool valid() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return static_cast<Index>(data_ ? data_->size() : 0); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  const S* data() const { return data_->data(); }
  S* mutable_data() { return data_->data(); }
  const std::shared_ptr<std::vector<S>>& buffer() const { return data_; }

  S operator[](Index i) const { return (*data_)[static_cast<std::size_t>(i)]; }

  S at(std::initializer_list<Index> idx) const {
    Index flat = 0;
    auto it = idx.begin();
    for (std::size_t d = 0; d < shape_.size(); ++d, ++it) flat = flat * shape_[d] + *it;
    return (*data_)[static_cast<std::size_t>(flat)];
  }

  S item() const {
    if (size() != 1) throw ValidationError("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  bool tracked() const { return node_ >= 0; }
  Index node() const { return node_; }
  Graph<S>* graph() const { return graph_; }

  Tensor detached() const {
    Tensor t = *this;
    t.graph_ = nullptr;
    t.node_ = -1;
    return t;
  }

  void set_node(Graph<S>* g, Index node) {
    graph_ = g;
    node_ = node;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
  Graph<S>* graph_ = nullptr;
  Index node_ = -1;
};

namespace detail {

template <class S>
void maybe_scan(const char* op, const Tensor<S>& t) {
  if (!debug_checks_enabled()) return;
  const S* p = t.data();
  for (Index i = 0; i < t.size(); ++i)
    if (!std::isfinite(p[i]))
      throw NumericError(std::string("non-finite value after op '") + op + "'");
}

template <class S>
Graph<S>* common_graph(std::initializer_list<const Tensor<S>*> ts) {
  Graph<S>* g = nullptr;
  for (const Tensor<S>* t : ts) {
    if (!t->tracked()) continue;
    if (g == nullptr) g = t->graph();
    else if (g != t->graph())
      throw ValidationError("operands belong to different graphs");
  }
  return g;
}

// Records `out` on the tape. `inputs` pairs each operand with a function
// producing its gradient from the output gradient; untracked operands are
// skipped.
template <class S>
using GradFn = std::function<Tensor<S>(const Tensor<S>&)>;

template <class S>
void record_op(Tensor<S>& out, const char* op,
               std::vector<std::pair<const Tensor<S>*, GradFn<S>>> inputs) {
  std::vector<const Tensor<S>*> operands;
  operands.reserve(inputs.size());
  for (auto& in : inputs) operands.push_back(in.first);

  Graph<S>* g = nullptr;
  for (const Tensor<S>* t : operands) {
    if (!t->tracked()) continue;
    if (g == nullptr) g = t->graph();
    else if (g != t->graph())
      throw ValidationError("operands belong to different graphs");
  }
  if (g == nullptr) return;

  std::vector<Index> parents;
  std::vector<GradFn<S>> fns;
  for (auto& in : inputs) {
    if (!in.first->tracked()) continue;
    parents.push_back(in.first->node());
    fns.push_back(std::move(in.second));
  }
  auto backward = [fns = std::move(fns)](const Tensor<S>& grad_out) {
    std::vector<Tensor<S>> grads;
    grads.reserve(fns.size());
    for (const auto& fn : fns) grads.push_back(fn(grad_out));
    return grads;
  };
  out.set_node(g, g->add_node(op, std::move(parents), std::move(backward)));
}

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ValidationError(std::string(op) + ": shape mismatch " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Untracked elementwise add; gradient accumulation uses this.
template <class S>
Tensor<S> add_data(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("add", a, b);
  auto buf = make_buffer<S>(a.size());
  ArrMap<S>(buf->data(), a.size()) =
      ConstArrMap<S>(a.data(), a.size()) + ConstArrMap<S>(b.data(), b.size());
  return Tensor<S>::wrap(a.shape(), std::move(buf));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  auto buf = detail::make_buffer<S>(a.size());
  ArrMap<S>(buf->data(), a.size()) =
      ConstArrMap<S>(a.data(), a.size()) + ConstArrMap<S>(b.data(), b.size());
  Tensor<S> out = Tensor<S>::wrap(a.shape(), std::move(buf));
  detail::maybe_scan("add", out);
  detail::record_op<S>(out, "add",
                       {{&a, [](const Tensor<S>& g) { return g; }},
                        {&b, [](const Tensor<S>& g) { return g; }}});
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  auto buf = detail::make_buffer<S>(a.size());
  ArrMap<S>(buf->data(), a.size()) =
      ConstArrMap<S>(a.data(), a.size()) - ConstArrMap<S>(b.data(), b.size());
  Tensor<S> out = Tensor<S>::wrap(a.shape(), std::move(buf));
  detail::maybe_scan("sub", out);
  detail::record_op<S>(
      out, "sub",
      {{&a, [](const Tensor<S>& g) { return g; }},
       {&b, [](const Tensor<S>& g) { return scale(g, S(-1)); }}});
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  auto buf = detail::make_buffer<S>(a.size());
  ArrMap<S>(buf->data(), a.size()) =
      ConstArrMap<S>(a.data(), a.size()) * ConstArrMap<S>(b.data(), b.size());
  Tensor<S> out = Tensor<S>::wrap(a.shape(), std::move(buf));
  detail::maybe_scan("mul", out);
  Tensor<S> ad = a.detached(), bd = b.detached();
  detail::record_op<S>(out, "mul",
                       {{&a, [bd](const Tensor<S>& g) { return mul(g, bd); }},
                        {&b, [ad](const Tensor<S>& g) { return mul(g, ad); }}});
  return out;
}

// y = m*x + c, applied elementwise with scalar constants.
template <class S>
Tensor<S> affine(const Tensor<S>& x, S m, S c) {
  auto buf = detail::make_buffer<S>(x.size());
  ArrMap<S>(buf->data(), x.size()) = ConstArrMap<S>(x.data(), x.size()) * m + c;
  Tensor<S> out = Tensor<S>::wrap(x.shape(), std::move(buf));
  detail::maybe_scan("affine", out);
  detail::record_op<S>(out, "affine",
                       {{&x, [m](const Tensor<S>& g) { return scale(g, m); }}});
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return affine(x, c, S(0));
}

template <class S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope) {
  auto buf = detail::make_buffer<S>(x.size());
  S* o = buf->data();
  const S* p = x.data();
  for (Index i = 0; i < x.size(); ++i) o[i] = p[i] > S(0) ? p[i] : slope * p[i];
  Tensor<S> out = Tensor<S>::wrap(x.shape(), std::move(buf));
  detail::maybe_scan("leaky_relu", out);
  Tensor<S> xd = x.detached();
  // subgradient at exactly 0 takes the negative-slope branch
  detail::record_op<S>(out, "leaky_relu",
                       {{&x, [xd, slope](const Tensor<S>& g) {
                           auto gbuf = detail::make_buffer<S>(g.size());
                           S* gp = gbuf->data();
                           const S* xp = xd.data();
                           const S* gg = g.data();
                           for (Index i = 0; i < g.size(); ++i)
                             gp[i] = xp[i] > S(0) ? gg[i] : slope * gg[i];
                           return Tensor<S>::wrap(g.shape(), std::move(gbuf));
                         }}});
  return out;
}

template <class S>
Tensor<S> tanh_map(const Tensor<S>& x) {
  auto buf = detail::make_buffer<S>(x.size());
  S* o = buf->data();
  const S* p = x.data();
  for (Index i = 0; i < x.size(); ++i) o[i] = std::tanh(p[i]);
  Tensor<S> out = Tensor<S>::wrap(x.shape(), std::move(buf));
  detail::maybe_scan("tanh", out);
  Tensor<S> yd = out.detached();
  detail::record_op<S>(out, "tanh",
                       {{&x, [yd](const Tensor<S>& g) {
                           auto gbuf = detail::make_buffer<S>(g.size());
                           ArrMap<S>(gbuf->data(), g.size()) =
                               ConstArrMap<S>(g.data(), g.size()) *
                               (S(1) - ConstArrMap<S>(yd.data(), yd.size()).square());
                           return Tensor<S>::wrap(g.shape(), std::move(gbuf));
                         }}});
  return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw ValidationError("reshape: " + shape_str(x.shape()) + " has " +
                          std::to_string(x.size()) + " elements, target " +
                          shape_str(new_shape) + " has " +
                          std::to_string(shape_numel(new_shape)));
  Tensor<S> out = Tensor<S>::wrap(std::move(new_shape), x.buffer());
  Shape old = x.shape();
  detail::record_op<S>(out, "reshape",
                       {{&x, [old](const Tensor<S>& g) { return reshape(g, old); }}});
  return out;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& x) {
  if (x.rank() != 2)
    throw ValidationError("transpose2d requires rank-2 tensor, got " +
                          shape_str(x.shape()));
  const Index m = x.dim(0), n = x.dim(1);
  auto buf = detail::make_buffer<S>(x.size());
  MatMap<S>(buf->data(), n, m) = ConstMatMap<S>(x.data(), m, n).transpose();
  Tensor<S> out = Tensor<S>::wrap({n, m}, std::move(buf));
  detail::record_op<S>(out, "transpose2d",
                       {{&x, [](const Tensor<S>& g) { return transpose2d(g); }}});
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, Index axis) {
  if (xs.empty()) throw ValidationError("concat of zero tensors");
  const Index rank = xs[0].rank();
  if (axis < 0 || axis >= rank)
    throw ValidationError("concat axis " + std::to_string(axis) +
                          " out of range for rank " + std::to_string(rank));
  Shape out_shape = xs[0].shape();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i].rank() != rank)
      throw ValidationError("concat rank mismatch " + shape_str(xs[0].shape()) +
                            " vs " + shape_str(xs[i].shape()));
    for (Index d = 0; d < rank; ++d) {
      if (d == axis) continue;
      if (xs[i].dim(d) != xs[0].dim(d))
        throw ValidationError("concat: shape mismatch " + shape_str(xs[0].shape()) +
                              " vs " + shape_str(xs[i].shape()) + " on axis " +
                              std::to_string(d));
    }
    out_shape[static_cast<std::size_t>(axis)] += xs[i].dim(axis);
  }

  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= xs[0].dim(d);
  for (Index d = axis + 1; d < rank; ++d) inner *= xs[0].dim(d);

  auto buf = detail::make_buffer<S>(shape_numel(out_shape));
  S* o = buf->data();
  const Index out_block = out_shape[static_cast<std::size_t>(axis)] * inner;
  Index offset = 0;
  for (const Tensor<S>& t : xs) {
    const Index block = t.dim(axis) * inner;
    const S* p = t.data();
    for (Index u = 0; u < outer; ++u)
      std::memcpy(o + u * out_block + offset, p + u * block,
                  static_cast<std::size_t>(block) * sizeof(S));
    offset += block;
  }
  Tensor<S> out = Tensor<S>::wrap(out_shape, std::move(buf));
  detail::maybe_scan("concat", out);

  std::vector<std::pair<const Tensor<S>*, detail::GradFn<S>>> inputs;
  Index off = 0;
  for (const Tensor<S>& t : xs) {
    const Index block = t.dim(axis) * inner;
    Shape tshape = t.shape();
    Index from = off;
    inputs.push_back({&t, [tshape, from, outer, out_block, block](const Tensor<S>& g) {
                        auto gbuf = detail::make_buffer<S>(shape_numel(tshape));
                        S* gp = gbuf->data();
                        const S* gg = g.data();
                        for (Index u = 0; u < outer; ++u)
                          std::memcpy(gp + u * block, gg + u * out_block + from,
                                      static_cast<std::size_t>(block) * sizeof(S));
                        return Tensor<S>::wrap(tshape, std::move(gbuf));
                      }});
    off += block;
  }
  detail::record_op<S>(out, "concat", std::move(inputs));
  return out;
}

// Contiguous slab [start, start+len) along axis 0.
template <class S>
Tensor<S> slice0(const Tensor<S>& x, Index start, Index len) {
  if (x.rank() < 1 || start < 0 || len < 1 || start + len > x.dim(0))
    throw ValidationError("slice0 [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") out of range for " +
                          shape_str(x.shape()));
  Index inner = x.size() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = len;
  auto buf = detail::make_buffer<S>(len * inner);
  std::memcpy(buf->data(), x.data() + start * inner,
              static_cast<std::size_t>(len * inner) * sizeof(S));
  Tensor<S> out = Tensor<S>::wrap(out_shape, std::move(buf));
  Shape xshape = x.shape();
  detail::record_op<S>(out, "slice0",
                       {{&x, [xshape, start, len, inner](const Tensor<S>& g) {
                           Tensor<S> gx = Tensor<S>::zeros(xshape);
                           std::memcpy(gx.mutable_data() + start * inner, g.data(),
                                       static_cast<std::size_t>(len * inner) * sizeof(S));
                           return gx;
                         }}});
  return out;
}

// Broadcast a size-1 leading axis to `copies`; backward sums back.
template <class S>
Tensor<S> tile0(const Tensor<S>& x, Index copies) {
  if (x.rank() < 1 || x.dim(0) != 1)
    throw ValidationError("tile0 requires leading axis of size 1, got " +
                          shape_str(x.shape()));
  if (copies < 1) throw ValidationError("tile0 copies must be positive");
  const Index inner = x.size();
  Shape out_shape = x.shape();
  out_shape[0] = copies;
  auto buf = detail::make_buffer<S>(copies * inner);
  for (Index c = 0; c < copies; ++c)
    std::memcpy(buf->data() + c * inner, x.data(),
                static_cast<std::size_t>(inner) * sizeof(S));
  Tensor<S> out = Tensor<S>::wrap(out_shape, std::move(buf));
  Shape xshape = x.shape();
  detail::record_op<S>(out, "tile0",
                       {{&x, [xshape, copies, inner](const Tensor<S>& g) {
                           auto gbuf = detail::make_buffer<S>(inner);
                           ArrMap<S> acc(gbuf->data(), inner);
                           acc.setZero();
                           for (Index c = 0; c < copies; ++c)
                             acc += ConstArrMap<S>(g.data() + c * inner, inner);
                           return Tensor<S>::wrap(xshape, std::move(gbuf));
                         }}});
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  const S v = ConstArrMap<S>(x.data(), x.size()).sum() / static_cast<S>(x.size());
  Tensor<S> out = Tensor<S>::scalar(v);
  detail::maybe_scan("mean", out);
  Shape xshape = x.shape();
  Index n = x.size();
  detail::record_op<S>(out, "mean",
                       {{&x, [xshape, n](const Tensor<S>& g) {
                           return Tensor<S>::full(xshape, g.item() / static_cast<S>(n));
                         }}});
  return out;
}

template <class S>
Tensor<S> sum_abs(const Tensor<S>& x) {
  const S v = ConstArrMap<S>(x.data(), x.size()).abs().sum();
  Tensor<S> out = Tensor<S>::scalar(v);
  detail::maybe_scan("sum_abs", out);
  Tensor<S> xd = x.detached();
  detail::record_op<S>(out, "sum_abs",
                       {{&x, [xd](const Tensor<S>& g) {
                           const S gv = g.item();
                           auto gbuf = detail::make_buffer<S>(xd.size());
                           S* gp = gbuf->data();
                           const S* xp = xd.data();
                           for (Index i = 0; i < xd.size(); ++i)
                             gp[i] = xp[i] > S(0) ? gv : (xp[i] < S(0) ? -gv : S(0));
                           return Tensor<S>::wrap(xd.shape(), std::move(gbuf));
                         }}});
  return out;
}

// ---------------------------------------------------------------------------
// matmul / softmax / conv2d
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ValidationError("matmul: incompatible shapes " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  const Index m = a.dim(0), p = a.dim(1), q = b.dim(1);
  auto buf = detail::make_buffer<S>(m * q);
  MatMap<S>(buf->data(), m, q).noalias() =
      ConstMatMap<S>(a.data(), m, p) * ConstMatMap<S>(b.data(), p, q);
  Tensor<S> out = Tensor<S>::wrap({m, q}, std::move(buf));
  detail::maybe_scan("matmul", out);
  Tensor<S> ad = a.detached(), bd = b.detached();
  detail::record_op<S>(
      out, "matmul",
      {{&a, [bd](const Tensor<S>& g) { return matmul(g, transpose2d(bd)); }},
       {&b, [ad](const Tensor<S>& g) { return matmul(transpose2d(ad), g); }}});
  return out;
}

// Row softmax of x / divisor, with row-max subtraction.
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x, S divisor) {
  if (x.rank() != 2)
    throw ValidationError("softmax_rows requires rank-2 tensor, got " +
                          shape_str(x.shape()));
  if (!(divisor > S(0)))
    throw ValidationError("softmax_rows: temperature divisor must be positive");
  const Index m = x.dim(0), n = x.dim(1);
  auto buf = detail::make_buffer<S>(m * n);
  {
    using EArr = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<EArr> out_a(buf->data(), m, n);
    Eigen::Map<const EArr> x_a(x.data(), m, n);
    Eigen::Array<S, Eigen::Dynamic, 1> rmax = x_a.rowwise().maxCoeff();
    out_a = ((x_a.colwise() - rmax) / divisor).exp();
    Eigen::Array<S, Eigen::Dynamic, 1> rsum = out_a.rowwise().sum();
    out_a.colwise() /= rsum;
  }
  Tensor<S> out = Tensor<S>::wrap({m, n}, std::move(buf));
  detail::maybe_scan("softmax_rows", out);
  Tensor<S> yd = out.detached();
  detail::record_op<S>(
      out, "softmax_rows",
      {{&x, [yd, divisor, m, n](const Tensor<S>& g) {
          auto gbuf = detail::make_buffer<S>(m * n);
          S* gx = gbuf->data();
          const S* y = yd.data();
          const S* gy = g.data();
          for (Index r = 0; r < m; ++r) {
            S dot = 0;
            for (Index j = 0; j < n; ++j) dot += gy[r * n + j] * y[r * n + j];
            for (Index j = 0; j < n; ++j)
              gx[r * n + j] = y[r * n + j] * (gy[r * n + j] - dot) / divisor;
          }
          return Tensor<S>::wrap({m, n}, std::move(gbuf));
        }}});
  return out;
}

namespace detail {

struct Conv2dDims {
  Index c_in, h, w, c_out, k, stride, pad, h_out, w_out;
};

template <class S>
Conv2dDims conv2d_dims(const Tensor<S>& input, const Tensor<S>& kernel,
                       Index stride, Index pad) {
  if (input.rank() != 3)
    throw ValidationError("conv2d input must be CxHxW, got " + shape_str(input.shape()));
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
    throw ValidationError("conv2d kernel must be C_out x C_in x k x k, got " +
                          shape_str(kernel.shape()));
  Conv2dDims d;
  d.c_in = input.dim(0);
  d.h = input.dim(1);
  d.w = input.dim(2);
  d.c_out = kernel.dim(0);
  d.k = kernel.dim(2);
  d.stride = stride;
  d.pad = pad;
  if (kernel.dim(1) != d.c_in)
    throw ValidationError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                          " input channels, input has " + std::to_string(d.c_in));
  if (d.k % 2 == 0) throw ValidationError("conv2d kernel size must be odd");
  if (stride < 1) throw ValidationError("conv2d stride must be positive");
  if (pad < 0) throw ValidationError("conv2d pad must be nonnegative");
  d.h_out = (d.h + 2 * pad - d.k) / stride + 1;
  d.w_out = (d.w + 2 * pad - d.k) / stride + 1;
  if (d.h + 2 * pad < d.k || d.w + 2 * pad < d.k || d.h_out < 1 || d.w_out < 1)
    throw ValidationError("conv2d: output dimension below 1 for input " +
                          shape_str(input.shape()) + " kernel " +
                          shape_str(kernel.shape()));
  return d;
}

// Patch matrix: rows index (c_in, dy, dx), columns index output positions.
template <class S>
std::shared_ptr<std::vector<S>> im2col(const S* in, const Conv2dDims& d) {
  const Index rows = d.c_in * d.k * d.k;
  const Index cols = d.h_out * d.w_out;
  auto col = make_buffer<S>(rows * cols);
  S* cp = col->data();
  for (Index c = 0; c < d.c_in; ++c) {
    for (Index dy = 0; dy < d.k; ++dy) {
      for (Index dx = 0; dx < d.k; ++dx) {
        S* row = cp + ((c * d.k + dy) * d.k + dx) * cols;
        for (Index oy = 0; oy < d.h_out; ++oy) {
          const Index y = oy * d.stride + dy - d.pad;
          if (y < 0 || y >= d.h) {
            std::fill(row + oy * d.w_out, row + (oy + 1) * d.w_out, S(0));
            continue;
          }
          for (Index ox = 0; ox < d.w_out; ++ox) {
            const Index x = ox * d.stride + dx - d.pad;
            row[oy * d.w_out + ox] =
                (x < 0 || x >= d.w) ? S(0) : in[(c * d.h + y) * d.w + x];
          }
        }
      }
    }
  }
  return col;
}

// Transpose of im2col: scatter-adds patch-matrix values back onto the image.
template <class S>
void col2im(const S* col, const Conv2dDims& d, S* out) {
  const Index cols = d.h_out * d.w_out;
  for (Index c = 0; c < d.c_in; ++c) {
    for (Index dy = 0; dy < d.k; ++dy) {
      for (Index dx = 0; dx < d.k; ++dx) {
        const S* row = col + ((c * d.k + dy) * d.k + dx) * cols;
        for (Index oy = 0; oy < d.h_out; ++oy) {
          const Index y = oy * d.stride + dy - d.pad;
          if (y < 0 || y >= d.h) continue;
          for (Index ox = 0; ox < d.w_out; ++ox) {
            const Index x = ox * d.stride + dx - d.pad;
            if (x < 0 || x >= d.w) continue;
            out[(c * d.h + y) * d.w + x] += row[oy * d.w_out + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D cross-correlation over CxHxW with square odd kernel, bias-free.
template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, Index stride,
                 Index pad) {
  const detail::Conv2dDims d = detail::conv2d_dims(input, kernel, stride, pad);
  const Index patch = d.c_in * d.k * d.k;
  const Index cols = d.h_out * d.w_out;

  auto col = detail::im2col(input.data(), d);
  auto buf = detail::make_buffer<S>(d.c_out * cols);
  MatMap<S>(buf->data(), d.c_out, cols).noalias() =
      ConstMatMap<S>(kernel.data(), d.c_out, patch) *
      ConstMatMap<S>(col->data(), patch, cols);
  col.reset();

  Tensor<S> out = Tensor<S>::wrap({d.c_out, d.h_out, d.w_out}, std::move(buf));
  detail::maybe_scan("conv2d", out);

  Tensor<S> in_d = input.detached(), k_d = kernel.detached();
  detail::record_op<S>(
      out, "conv2d",
      {{&input,
        [in_d, k_d, d, patch, cols](const Tensor<S>& g) {
          // dInput = col2im(K^T * dOut)
          auto gcol = detail::make_buffer<S>(patch * cols);
          MatMap<S>(gcol->data(), patch, cols).noalias() =
              ConstMatMap<S>(k_d.data(), d.c_out, patch).transpose() *
              ConstMatMap<S>(g.data(), d.c_out, cols);
          Tensor<S> gin = Tensor<S>::zeros(in_d.shape());
          detail::col2im(gcol->data(), d, gin.mutable_data());
          return gin;
        }},
       {&kernel, [in_d, k_d, d, patch, cols](const Tensor<S>& g) {
          // dKernel = dOut * col^T (patch matrix recomputed)
          auto col = detail::im2col(in_d.data(), d);
          auto gk = detail::make_buffer<S>(d.c_out * patch);
          MatMap<S>(gk->data(), d.c_out, patch).noalias() =
              ConstMatMap<S>(g.data(), d.c_out, cols) *
              ConstMatMap<S>(col->data(), patch, cols).transpose();
          return Tensor<S>::wrap(k_d.shape(), std::move(gk));
        }}});
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling (half-pixel-centers convention, edge clamp)
// ---------------------------------------------------------------------------

namespace detail {

struct UpTap {
  Index i0, i1;
  double w;  // weight of i1
};

inline std::vector<UpTap> upsample_taps(Index in_size) {
  std::vector<UpTap> taps(static_cast<std::size_t>(2 * in_size));
  for (Index o = 0; o < 2 * in_size; ++o) {
    double f = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    f = std::min(std::max(f, 0.0), static_cast<double>(in_size - 1));
    Index i0 = static_cast<Index>(std::floor(f));
    Index i1 = std::min(i0 + 1, in_size - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, f - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <class S>
Tensor<S> upsample2x(const Tensor<S>& x) {
  if (x.rank() != 3)
    throw ValidationError("upsample2x requires CxHxW tensor, got " +
                          shape_str(x.shape()));
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ty = detail::upsample_taps(h);
  const auto tx = detail::upsample_taps(w);
  auto buf = detail::make_buffer<S>(c * 4 * h * w);
  S* o = buf->data();
  const S* p = x.data();
  for (Index ch = 0; ch < c; ++ch) {
    const S* plane = p + ch * h * w;
    for (Index oy = 0; oy < 2 * h; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      const S wy = static_cast<S>(a.w);
      for (Index ox = 0; ox < 2 * w; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        const S wx = static_cast<S>(b.w);
        const S v00 = plane[a.i0 * w + b.i0], v01 = plane[a.i0 * w + b.i1];
        const S v10 = plane[a.i1 * w + b.i0], v11 = plane[a.i1 * w + b.i1];
        o[(ch * 2 * h + oy) * 2 * w + ox] = (S(1) - wy) * ((S(1) - wx) * v00 + wx * v01) +
                                            wy * ((S(1) - wx) * v10 + wx * v11);
      }
    }
  }
  Tensor<S> out = Tensor<S>::wrap({c, 2 * h, 2 * w}, std::move(buf));
  detail::maybe_scan("upsample2x", out);
  Shape xshape = x.shape();
  detail::record_op<S>(
      out, "upsample2x",
      {{&x, [xshape, c, h, w, ty, tx](const Tensor<S>& g) {
          Tensor<S> gx = Tensor<S>::zeros(xshape);
          S* gp = gx.mutable_data();
          const S* gg = g.data();
          for (Index ch = 0; ch < c; ++ch) {
            S* plane = gp + ch * h * w;
            for (Index oy = 0; oy < 2 * h; ++oy) {
              const auto& a = ty[static_cast<std::size_t>(oy)];
              const S wy = static_cast<S>(a.w);
              for (Index ox = 0; ox < 2 * w; ++ox) {
                const auto& b = tx[static_cast<std::size_t>(ox)];
                const S wx = static_cast<S>(b.w);
                const S gv = gg[(ch * 2 * h + oy) * 2 * w + ox];
                plane[a.i0 * w + b.i0] += (S(1) - wy) * (S(1) - wx) * gv;
                plane[a.i0 * w + b.i1] += (S(1) - wy) * wx * gv;
                plane[a.i1 * w + b.i0] += wy * (S(1) - wx) * gv;
                plane[a.i1 * w + b.i1] += wy * wx * gv;
              }
            }
          }
          return gx;
        }}});
  return out;
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Gradients of `loss` w.r.t. every tracked ancestor. Nodes the sweep never
// reaches are absent from the map.
template <class S>
std::unordered_map<Index, Tensor<S>> backward(const Tensor<S>& loss) {
  if (loss.size() != 1)
    throw ValidationError("backward: loss must be scalar, got " +
                          shape_str(loss.shape()));
  if (!loss.tracked())
    throw ValidationError("backward: loss is not tracked in any graph");
  Graph<S>& g = *loss.graph();
  std::vector<Tensor<S>> grad(static_cast<std::size_t>(g.size()));
  grad[static_cast<std::size_t>(loss.node())] = Tensor<S>::scalar(S(1));

  for (Index id = loss.node(); id >= 0; --id) {
    Tensor<S>& gt = grad[static_cast<std::size_t>(id)];
    if (!gt.valid()) continue;
    const auto& node = g.node(id);
    if (!node.backward) continue;
    std::vector<Tensor<S>> pgrads = node.backward(gt);
    if (pgrads.size() != node.parents.size())
      throw ValidationError(std::string("backward of op '") + node.op +
                            "' returned wrong gradient count");
    for (std::size_t i = 0; i < pgrads.size(); ++i) {
      Tensor<S>& slot = grad[static_cast<std::size_t>(node.parents[i])];
      slot = slot.valid() ? detail::add_data(slot, pgrads[i]) : pgrads[i];
    }
  }

  std::unordered_map<Index, Tensor<S>> result;
  for (Index id = 0; id < g.size(); ++id)
    if (grad[static_cast<std::size_t>(id)].valid())
      result.emplace(id, grad[static_cast<std::size_t>(id)]);
  return result;
}

// ---------------------------------------------------------------------------
// Random tensors
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> uniform_tensor(SeededRng& rng, Shape shape, S lo, S hi) {
  auto buf = detail::make_buffer<S>(shape_numel(shape));
  for (S& v : *buf) v = static_cast<S>(rng.uniform(lo, hi));
  return Tensor<S>::wrap(std::move(shape), std::move(buf));
}

// Uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)]; the artifact-wide kernel init.
template <class S>
Tensor<S> init_kernel(SeededRng& rng, Shape shape, Index fan_in) {
  const S a = static_cast<S>(std::sqrt(1.0 / static_cast<double>(fan_in)));
  return uniform_tensor<S>(rng, std::move(shape), -a, a);
}

}  // namespace warpattn
