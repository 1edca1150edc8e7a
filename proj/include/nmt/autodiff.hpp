#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nmt/tensor.hpp"

namespace nmt {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the computation graph. Leaves (parameters, constants) have no
// parents and no backward function.
struct Node {
  Tensor value;
  std::vector<double> grad;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  const char* op = "leaf";

  std::vector<double>& grad_buffer();
};

// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  // Only meaningful on leaves: optimizers and tests mutate parameters in place.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  // Gradient after backward(); zeros if the node was not reached.
  Tensor grad() const;
  const NodePtr& node() const { return node_; }
  bool same_storage(const Var& other) const { return node_ == other.node_; }

 private:
  NodePtr node_;
};

inline Var constant(Tensor value) { return Var(std::move(value), false); }
inline Var parameter(Tensor value) { return Var(std::move(value), true); }

// While alive, new nodes record no backward closures on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

using GradientMap = std::map<std::string, Tensor>;

// Reverse-mode sweep from a scalar loss. Every node reachable from `loss` has
// its gradient reset before accumulation, so repeated calls are idempotent.
void backward(const Var& loss);

// --- elementwise -----------------------------------------------------------
// Binary ops broadcast when one operand is a scalar or its shape is a suffix
// of the other operand's shape (row broadcast).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);
Var neg(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var square(const Var& a);

enum class Elementwise { kTanh, kSigmoid, kRelu, kAdd, kMul };
Var elementwise(Elementwise kind, const Var& a, const Var& b = {});

// Multiplies every row of `x` (last axis) by the matching entry of `weights`,
// whose shape is x's shape without the last axis.
Var scale_rows(const Var& x, const Var& weights);

// --- linear algebra --------------------------------------------------------
// [..., k] x [k, m] -> [..., m]; with transpose_b, b is [m, k].
Var matmul(const Var& a, const Var& b, bool transpose_b = false);
// Batched product over equal leading axes: [..., n, k] x [..., k, m].
Var bmm(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);

// --- reductions and shape --------------------------------------------------
Var sum(const Var& a);
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& axes);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);
// out[..., i, ...] = a[..., i - offset, ...] along `axis`, zero where out of range.
Var shift(const Var& a, std::size_t axis, long offset);
// Rows of `table` ([rows, e]) selected by `ids`; result [ids.size(), e].
Var gather_rows(const Var& table, std::span<const int> ids);

// --- normalization and probabilities ---------------------------------------
// Softmax over the last axis. `mask` (same element count, nonzero = keep)
// zeroes entries exactly; a row without any kept entry is an InvalidMaskError.
Var softmax(const Var& x, const std::vector<std::uint8_t>* mask = nullptr);
Var softmax_rows(const Var& x, const std::vector<std::uint8_t>* mask = nullptr);
Var log_softmax(const Var& x);
Var layer_normalize(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6);
// Column-wise w = g * v / ||v|| for v [in, out], g [out]. A rank-1 v is one unit.
Var weight_normalize(const Var& v, const Var& g);

enum class Mode { kTrain, kInfer };
// Inverted dropout; identity in inference mode or when p == 0.
Var dropout(const Var& x, double p, Mode mode, std::mt19937_64& rng);

struct TokenStats {
  double nll = 0.0;       // unsmoothed negative log-likelihood, summed
  std::size_t tokens = 0;  // non-PAD targets
  std::size_t correct = 0;  // argmax hits
};

// Summed label-smoothed cross-entropy over rows of `logits` whose target is
// not `pad_id`. The gold id gets 1 - epsilon; every other id epsilon/(V-1).
Var cross_entropy_label_smoothed(const Var& logits, std::span<const int> targets, double epsilon, int pad_id,
                                 TokenStats* stats = nullptr);

// --- gradient checking -----------------------------------------------------
struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  double denominator_floor = 1e-8;
  // Optional hook to alter analytic gradients before comparison (negative controls).
  std::function<void(const std::string&, Tensor&)> tamper;
};

// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h for
// every element of every named parameter.
GradCheckReport finite_difference_check(const std::function<Var()>& f,
                                        const std::vector<std::pair<std::string, Var>>& params,
                                        const GradCheckOptions& options = {});

}  // namespace nmt
