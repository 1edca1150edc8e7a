#include "nmt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "nmt/errors.hpp"

namespace nmt {

namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<void(Node&)>;

Var make_node(Tensor value, std::initializer_list<Var> inputs, const char* op, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(fn);
    }
  }
  return Var(std::move(node));
}

Var make_node_n(Tensor value, const std::vector<Var>& inputs, const char* op, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(fn);
    }
  }
  return Var(std::move(node));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Output shape for a broadcasting binary op, or a DimensionError.
Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1 || is_suffix(b.shape(), a.shape())) return a.shape();
  if (a.size() == 1 || is_suffix(a.shape(), b.shape())) return b.shape();
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

template <typename F>
void for_broadcast(std::size_t n, std::size_t na, std::size_t nb, F&& f) {
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (na == n) {
    for (std::size_t o = 0; o < n; o += nb)
      for (std::size_t j = 0; j < nb; ++j) f(o + j, o + j, j);
  } else {
    for (std::size_t o = 0; o < n; o += na)
      for (std::size_t j = 0; j < na; ++j) f(o + j, j, o + j);
  }
}

template <typename Fwd, typename Dfa, typename Dfb>
Var binary(const Var& a, const Var& b, const char* op, Fwd fwd, Dfa dfa, Dfb dfb) {
  const Shape out_shape = broadcast_shape(a.value(), b.value(), op);
  Tensor out(out_shape);
  const std::size_t n = out.size(), na = a.size(), nb = b.size();
  const double* pa = a.value().data().data();
  const double* pb = b.value().data().data();
  double* po = out.data().data();
  for_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = fwd(pa[ia], pb[ib]); });
  return make_node(std::move(out), {a, b}, op, [n, na, nb, dfa, dfb](Node& self) {
    Node& na_node = *self.parents[0];
    Node& nb_node = *self.parents[1];
    const double* g = self.grad.data();
    const double* xa = na_node.value.data().data();
    const double* xb = nb_node.value.data().data();
    if (na_node.requires_grad) {
      double* ga = na_node.grad_buffer().data();
      for_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += dfa(g[i], xa[ia], xb[ib]); });
    }
    if (nb_node.requires_grad) {
      double* gb = nb_node.grad_buffer().data();
      for_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += dfb(g[i], xa[ia], xb[ib]); });
    }
  });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Df>
Var unary(const Var& a, const char* op, Fwd fwd, Df df) {
  Tensor out(a.shape());
  const double* pa = a.value().data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = fwd(pa[i]);
  return make_node(std::move(out), {a}, op, [df](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    const double* g = self.grad.data();
    const double* x = in.value.data().data();
    const double* y = self.value.data().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) gi[i] += df(g[i], x[i], y[i]);
  });
}

std::size_t last_extent(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->grad.size() != node_->value.size()) return Tensor(node_->value.shape());
  return Tensor(node_->value.shape(), node_->grad);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  Node* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* node : order) node->grad.assign(node->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// --- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var scale(const Var& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; },
      [factor](double g, double, double) { return g * factor; });
}

Var add_scalar(const Var& a, double value) {
  return unary(
      a, "add_scalar", [value](double x) { return x + value; }, [](double g, double, double) { return g; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var tanh(const Var& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double g, double, double y) { return g * (1.0 - y * y); });
}

Var sigmoid(const Var& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Var relu(const Var& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Var exp(const Var& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double g, double, double y) { return g * y; });
}

Var square(const Var& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double g, double x, double) { return 2.0 * g * x; });
}

Var elementwise(Elementwise kind, const Var& a, const Var& b) {
  switch (kind) {
    case Elementwise::kTanh: return tanh(a);
    case Elementwise::kSigmoid: return sigmoid(a);
    case Elementwise::kRelu: return relu(a);
    case Elementwise::kAdd: return add(a, b);
    case Elementwise::kMul: return mul(a, b);
  }
  throw ContractError("unknown elementwise kind");
}

Var scale_rows(const Var& x, const Var& weights) {
  const std::size_t d = last_extent(x.value());
  const std::size_t rows = x.size() / d;
  if (weights.size() != rows) {
    throw DimensionError("scale_rows: weights " + shape_string(weights.shape()) + " do not match rows of " +
                         shape_string(x.shape()));
  }
  Tensor out(x.shape());
  const double* px = x.value().data().data();
  const double* pw = weights.value().data().data();
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] * pw[r];
  return make_node(std::move(out), {x, weights}, "scale_rows", [rows, d](Node& self) {
    Node& nx = *self.parents[0];
    Node& nw = *self.parents[1];
    const double* g = self.grad.data();
    if (nx.requires_grad) {
      double* gx = nx.grad_buffer().data();
      const double* pw = nw.value.data().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * pw[r];
    }
    if (nw.requires_grad) {
      double* gw = nw.grad_buffer().data();
      const double* px = nx.value.data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += g[r * d + j] * px[r * d + j];
        gw[r] += acc;
      }
    }
  });
}

// --- linear algebra --------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool transpose_b) {
  if (b.value().rank() != 2 || a.value().rank() < 1) {
    throw DimensionError("matmul: expected [..., k] x [k, m], got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t k = transpose_b ? b.shape()[1] : b.shape()[0];
  const std::size_t m = transpose_b ? b.shape()[0] : b.shape()[1];
  if (a.shape().back() != k) {
    throw DimensionError("matmul: inner extents differ for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t rows = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = m;
  Tensor out(out_shape);
  gemm(a.value().data().data(), b.value().data().data(), out.data().data(), rows, k, m, false, transpose_b, false);
  return make_node(std::move(out), {a, b}, "matmul", [rows, k, m, transpose_b](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double* g = self.grad.data();
    if (na.requires_grad) {
      gemm(g, nb.value.data().data(), na.grad_buffer().data(), rows, m, k, false, !transpose_b, true);
    }
    if (nb.requires_grad) {
      if (!transpose_b) {
        gemm(na.value.data().data(), g, nb.grad_buffer().data(), k, rows, m, true, false, true);
      } else {
        gemm(g, na.value.data().data(), nb.grad_buffer().data(), m, rows, k, true, false, true);
      }
    }
  });
}

Var bmm(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw DimensionError("bmm: batch shapes differ for " + shape_string(sa) + " and " + shape_string(sb));
  }
  const std::size_t ra = sa[sa.size() - 2], ca = sa.back();
  const std::size_t rb = sb[sb.size() - 2], cb = sb.back();
  const std::size_t n = transpose_a ? ca : ra;
  const std::size_t k = transpose_a ? ra : ca;
  const std::size_t kb = transpose_b ? cb : rb;
  const std::size_t m = transpose_b ? rb : cb;
  if (k != kb) {
    throw DimensionError("bmm: inner extents differ for " + shape_string(sa) + " and " + shape_string(sb));
  }
  const std::size_t batches = a.size() / (ra * ca);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(n);
  out_shape.push_back(m);
  Tensor out(out_shape);
  const double* pa = a.value().data().data();
  const double* pb = b.value().data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < batches; ++i) {
    gemm(pa + i * n * k, pb + i * k * m, po + i * n * m, n, k, m, transpose_a, transpose_b, false);
  }
  return make_node(std::move(out), {a, b}, "bmm", [batches, n, k, m, transpose_a, transpose_b](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double* g = self.grad.data();
    const double* pa = na.value.data().data();
    const double* pb = nb.value.data().data();
    if (na.requires_grad) {
      double* ga = na.grad_buffer().data();
      for (std::size_t i = 0; i < batches; ++i) {
        const double* gi = g + i * n * m;
        const double* bi = pb + i * k * m;
        double* gai = ga + i * n * k;
        if (!transpose_a) {
          gemm(gi, bi, gai, n, m, k, false, !transpose_b, true);
        } else {
          gemm(bi, gi, gai, k, m, n, transpose_b, true, true);
        }
      }
    }
    if (nb.requires_grad) {
      double* gb = nb.grad_buffer().data();
      for (std::size_t i = 0; i < batches; ++i) {
        const double* gi = g + i * n * m;
        const double* ai = pa + i * n * k;
        double* gbi = gb + i * k * m;
        if (!transpose_b) {
          gemm(ai, gi, gbi, k, n, m, !transpose_a, false, true);
        } else {
          gemm(gi, ai, gbi, m, n, k, true, transpose_a, true);
        }
      }
    }
  });
}

// --- reductions and shape --------------------------------------------------

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return make_node(Tensor::scalar(total), {a}, "sum", [](Node& self) {
    Node& in = *self.parents[0];
    const double g = self.grad[0];
    for (double& gi : in.grad_buffer()) gi += g;
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_node(std::move(out), {a}, "reshape", [](Node& self) {
    Node& in = *self.parents[0];
    auto& gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

namespace {

// Maps every output flat index of a permutation to its input flat index.
std::vector<std::size_t> permutation_sources(const Shape& in_shape, const std::vector<std::size_t>& axes) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> stride_of_out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride_of_out[i] = in_strides[axes[i]];
  }
  const std::size_t n = shape_size(in_shape);
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      offset += stride_of_out[d];
      if (++counter[d] < out_shape[d]) break;
      offset -= stride_of_out[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  return src;
}

}  // namespace

Var permute(const Var& a, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = a.shape();
  if (axes.size() != in_shape.size()) throw DimensionError("permute: axis count does not match " + shape_string(in_shape));
  std::vector<bool> seen(axes.size(), false);
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= axes.size() || seen[axes[i]]) throw DimensionError("permute: invalid axis order");
    seen[axes[i]] = true;
    out_shape[i] = in_shape[axes[i]];
  }
  auto src = std::make_shared<std::vector<std::size_t>>(permutation_sources(in_shape, axes));
  Tensor out(out_shape);
  const double* pa = a.value().data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < src->size(); ++i) po[i] = pa[(*src)[i]];
  return make_node(std::move(out), {a}, "permute", [src](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    for (std::size_t i = 0; i < src->size(); ++i) gi[(*src)[i]] += self.grad[i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: shape " + shape_string(s) + " incompatible with " + shape_string(first));
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit split = split_at(out_shape, axis);
  Tensor out(out_shape);
  double* po = out.data().data();
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const double* src = parts[p].value().data().data();
    const std::size_t block = extents[p] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block, po + (o * split.extent + offset) * split.inner);
    }
    offset += extents[p];
  }
  return make_node_n(std::move(out), parts, "concat", [split, extents](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      Node& in = *self.parents[p];
      const std::size_t block = extents[p] * split.inner;
      if (in.requires_grad) {
        double* gi = in.grad_buffer().data();
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* g = self.grad.data() + (o * split.extent + offset) * split.inner;
          for (std::size_t j = 0; j < block; ++j) gi[o * block + j] += g[j];
        }
      }
      offset += extents[p];
    }
  });
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& in_shape = a.shape();
  if (axis >= in_shape.size() || length == 0 || start + length > in_shape[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_string(in_shape));
  }
  const AxisSplit split = split_at(in_shape, axis);
  Shape out_shape = in_shape;
  out_shape[axis] = length;
  Tensor out(out_shape);
  const double* pa = a.value().data().data();
  double* po = out.data().data();
  const std::size_t block = length * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) {
    const double* src = pa + (o * split.extent + start) * split.inner;
    std::copy(src, src + block, po + o * block);
  }
  return make_node(std::move(out), {a}, "slice", [split, start, block](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      double* dst = gi + (o * split.extent + start) * split.inner;
      const double* g = self.grad.data() + o * block;
      for (std::size_t j = 0; j < block; ++j) dst[j] += g[j];
    }
  });
}

Var shift(const Var& a, std::size_t axis, long offset) {
  const Shape& shape = a.shape();
  if (axis >= shape.size()) throw DimensionError("shift: axis out of range for " + shape_string(shape));
  const AxisSplit split = split_at(shape, axis);
  const long extent = static_cast<long>(split.extent);
  Tensor out(shape);
  const double* pa = a.value().data().data();
  double* po = out.data().data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (long i = 0; i < extent; ++i) {
      const long j = i - offset;
      if (j < 0 || j >= extent) continue;
      const double* src = pa + (o * split.extent + static_cast<std::size_t>(j)) * split.inner;
      std::copy(src, src + split.inner, po + (o * split.extent + static_cast<std::size_t>(i)) * split.inner);
    }
  }
  return make_node(std::move(out), {a}, "shift", [split, offset, extent](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (long i = 0; i < extent; ++i) {
        const long j = i - offset;
        if (j < 0 || j >= extent) continue;
        const double* g = self.grad.data() + (o * split.extent + static_cast<std::size_t>(i)) * split.inner;
        double* dst = gi + (o * split.extent + static_cast<std::size_t>(j)) * split.inner;
        for (std::size_t k = 0; k < split.inner; ++k) dst[k] += g[k];
      }
    }
  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  if (table.value().rank() != 2) throw DimensionError("gather_rows: table must be a matrix, got " + shape_string(table.shape()));
  const std::size_t rows = table.shape()[0], e = table.shape()[1];
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("id " + std::to_string(id) + " out of range for table with " + std::to_string(rows) + " rows");
    }
  }
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  Tensor out(Shape{ids.size(), e});
  const double* pt = table.value().data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    std::copy(pt + (*idx)[i] * e, pt + ((*idx)[i] + 1) * e, po + i * e);
  }
  return make_node(std::move(out), {table}, "gather_rows", [idx, e](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    for (std::size_t i = 0; i < idx->size(); ++i) {
      double* dst = gi + static_cast<std::size_t>((*idx)[i]) * e;
      const double* g = self.grad.data() + i * e;
      for (std::size_t j = 0; j < e; ++j) dst[j] += g[j];
    }
  });
}

// --- normalization and probabilities ---------------------------------------

Var softmax(const Var& x, const std::vector<std::uint8_t>* mask) {
  const std::size_t d = last_extent(x.value());
  const std::size_t rows = x.size() / d;
  if (mask && mask->size() != x.size()) {
    throw DimensionError("softmax: mask has " + std::to_string(mask->size()) + " entries for input " +
                         shape_string(x.shape()));
  }
  Tensor out(x.shape());
  const double* px = x.value().data().data();
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double* yr = po + r * d;
    const std::uint8_t* mr = mask ? mask->data() + r * d : nullptr;
    double max = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < d; ++j) {
      if (mr && !mr[j]) continue;
      any = true;
      max = std::max(max, xr[j]);
    }
    if (!any) throw InvalidMaskError("softmax: row " + std::to_string(r) + " is fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (mr && !mr[j]) {
        yr[j] = 0.0;
        continue;
      }
      yr[j] = std::exp(xr[j] - max);
      total += yr[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < d; ++j) yr[j] *= inv;
  }
  return make_node(std::move(out), {x}, "softmax", [rows, d](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    const double* y = self.value.data().data();
    const double* g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gi[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

Var softmax_rows(const Var& x, const std::vector<std::uint8_t>* mask) {
  if (x.value().rank() != 2) throw DimensionError("softmax_rows: expected a matrix, got " + shape_string(x.shape()));
  return softmax(x, mask);
}

Var log_softmax(const Var& x) {
  const std::size_t d = last_extent(x.value());
  const std::size_t rows = x.size() / d;
  Tensor out(x.shape());
  const double* px = x.value().data().data();
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    const double max = *std::max_element(xr, xr + d);
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) total += std::exp(xr[j] - max);
    const double lse = max + std::log(total);
    for (std::size_t j = 0; j < d; ++j) po[r * d + j] = xr[j] - lse;
  }
  return make_node(std::move(out), {x}, "log_softmax", [rows, d](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    const double* y = self.value.data().data();
    const double* g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < d; ++j) gsum += g[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gi[r * d + j] += g[r * d + j] - std::exp(y[r * d + j]) * gsum;
    }
  });
}

Var layer_normalize(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t d = last_extent(x.value());
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_normalize: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                         " do not match input " + shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* px = x.value().data().data();
  const double* pg = gain.value().data().data();
  const double* pb = bias.value().data().data();
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * inv;
      (*xhat)[r * d + j] = h;
      po[r * d + j] = pg[j] * h + pb[j];
    }
  }
  return make_node(std::move(out), {x, gain, bias}, "layer_normalize", [rows, d, xhat, inv_std](Node& self) {
    Node& nx = *self.parents[0];
    Node& ng = *self.parents[1];
    Node& nb = *self.parents[2];
    const double* g = self.grad.data();
    const double* h = xhat->data();
    if (nb.requires_grad) {
      double* gb = nb.grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
    }
    if (ng.requires_grad) {
      double* gg = ng.grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * h[r * d + j];
    }
    if (nx.requires_grad) {
      double* gx = nx.grad_buffer().data();
      const double* pg = ng.value.data().data();
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_gh = 0.0, mean_ghh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double gh = g[r * d + j] * pg[j];
          mean_gh += gh;
          mean_ghh += gh * h[r * d + j];
        }
        mean_gh *= inv_d;
        mean_ghh *= inv_d;
        const double inv = (*inv_std)[r];
        for (std::size_t j = 0; j < d; ++j) {
          const double gh = g[r * d + j] * pg[j];
          gx[r * d + j] += inv * (gh - mean_gh - h[r * d + j] * mean_ghh);
        }
      }
    }
  });
}

Var weight_normalize(const Var& v, const Var& g) {
  const Tensor& tv = v.value();
  if (tv.rank() != 1 && tv.rank() != 2) throw DimensionError("weight_normalize: v must be a vector or matrix");
  const std::size_t in = tv.dim(0);
  const std::size_t units = tv.rank() == 2 ? tv.dim(1) : 1;
  if (g.size() != units) {
    throw DimensionError("weight_normalize: g " + shape_string(g.shape()) + " does not match " + std::to_string(units) +
                         " output units");
  }
  auto norms = std::make_shared<std::vector<double>>(units, 0.0);
  const double* pv = tv.data().data();
  const double* pg = g.value().data().data();
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < units; ++j) (*norms)[j] += pv[i * units + j] * pv[i * units + j];
  for (std::size_t j = 0; j < units; ++j) {
    (*norms)[j] = std::sqrt((*norms)[j]);
    if (!((*norms)[j] > 0.0)) throw NumericalError("weight_normalize: direction vector of unit " + std::to_string(j) + " has zero norm");
  }
  Tensor out(tv.shape());
  double* po = out.data().data();
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < units; ++j) po[i * units + j] = pg[j] * pv[i * units + j] / (*norms)[j];
  return make_node(std::move(out), {v, g}, "weight_normalize", [in, units, norms](Node& self) {
    Node& nv = *self.parents[0];
    Node& ng = *self.parents[1];
    const double* G = self.grad.data();
    const double* pv = nv.value.data().data();
    const double* pg = ng.value.data().data();
    std::vector<double> proj(units, 0.0);
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t j = 0; j < units; ++j) proj[j] += G[i * units + j] * pv[i * units + j];
    if (ng.requires_grad) {
      double* gg = ng.grad_buffer().data();
      for (std::size_t j = 0; j < units; ++j) gg[j] += proj[j] / (*norms)[j];
    }
    if (nv.requires_grad) {
      double* gv = nv.grad_buffer().data();
      for (std::size_t i = 0; i < in; ++i) {
        for (std::size_t j = 0; j < units; ++j) {
          const double n = (*norms)[j];
          gv[i * units + j] += pg[j] / n * (G[i * units + j] - proj[j] * pv[i * units + j] / (n * n));
        }
      }
    }
  });
}

Var dropout(const Var& x, double p, Mode mode, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::kInfer || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::bernoulli_distribution keep(1.0 - p);
  for (double& m : *mask) m = keep(rng) ? keep_scale : 0.0;
  Tensor out(x.shape());
  const double* px = x.value().data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * (*mask)[i];
  return make_node(std::move(out), {x}, "dropout", [mask](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    for (std::size_t i = 0; i < mask->size(); ++i) gi[i] += self.grad[i] * (*mask)[i];
  });
}

Var cross_entropy_label_smoothed(const Var& logits, std::span<const int> targets, double epsilon, int pad_id,
                                 TokenStats* stats) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("label smoothing must be in [0, 1), got " + std::to_string(epsilon));
  const std::size_t vocab = last_extent(logits.value());
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  if (epsilon > 0.0 && vocab < 2) throw ConfigError("label smoothing needs at least two classes");
  const double off = vocab > 1 ? epsilon / static_cast<double>(vocab - 1) : 0.0;
  const double on = 1.0 - epsilon;
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  const double* px = logits.value().data().data();
  double total = 0.0;
  TokenStats local;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = (*tgt)[r];
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("target id " + std::to_string(t) + " out of range for vocabulary of " + std::to_string(vocab));
    }
    const double* xr = px + r * vocab;
    std::size_t argmax = 0;
    double sum_x = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      if (xr[j] > xr[argmax]) argmax = j;
      sum_x += xr[j];
    }
    const double max = xr[argmax];
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(xr[j] - max);
    const double lse = max + std::log(z);
    const double gold = xr[t];
    total += lse - (on * gold + off * (sum_x - gold));
    local.nll += lse - gold;
    local.tokens += 1;
    local.correct += argmax == static_cast<std::size_t>(t) ? 1 : 0;
  }
  if (stats) *stats = local;
  return make_node(Tensor::scalar(total), {logits}, "cross_entropy", [tgt, rows, vocab, pad_id, on, off](Node& self) {
    Node& in = *self.parents[0];
    double* gi = in.grad_buffer().data();
    const double* px = in.value.data().data();
    const double g = self.grad[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const int t = (*tgt)[r];
      if (t == pad_id) continue;
      const double* xr = px + r * vocab;
      const double max = *std::max_element(xr, xr + vocab);
      double z = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) z += std::exp(xr[j] - max);
      for (std::size_t j = 0; j < vocab; ++j) {
        const double p = std::exp(xr[j] - max) / z;
        const double q = static_cast<int>(j) == t ? on : off;
        gi[r * vocab + j] += g * (p - q);
      }
    }
  });
}

// --- gradient checking -----------------------------------------------------

GradCheckReport finite_difference_check(const std::function<Var()>& f,
                                        const std::vector<std::pair<std::string, Var>>& params,
                                        const GradCheckOptions& options) {
  for (const auto& [name, p] : params) {
    if (p.node()->grad.size() == p.size()) p.node()->grad.assign(p.size(), 0.0);
  }
  const Var loss = f();
  backward(loss);
  std::vector<Tensor> analytic;
  for (const auto& [name, p] : params) {
    analytic.push_back(p.grad());
    if (options.tamper) options.tamper(name, analytic.back());
  }

  auto evaluate = [&]() {
    NoGradGuard guard;
    const double v = f().value().item();
    if (!std::isfinite(v)) throw NumericalError("finite_difference_check: objective is not finite");
    return v;
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var p = params[k].second;
    GradCheckEntry entry;
    entry.name = params[k].first;
    auto& values = p.mutable_value().storage();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double up = evaluate();
      values[i] = saved - options.step;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      entry.max_relative_error = std::max(entry.max_relative_error, std::abs(a - numeric) / denom);
    }
    entry.passed = entry.max_relative_error <= options.tolerance;
    report.max_relative_error = std::max(report.max_relative_error, entry.max_relative_error);
    report.passed = report.passed && entry.passed;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace nmt
