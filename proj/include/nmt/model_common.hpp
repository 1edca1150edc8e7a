#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nmt/autodiff.hpp"

namespace nmt {

// Named learned tensors of a model, in creation order. Tied parameters are a
// single entry used in several places.
class ParameterStore {
 public:
  Var add(const std::string& name, Tensor init);
  Var get(const std::string& name) const;
  bool contains(const std::string& name) const;
  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::size_t scalar_count() const;

  void zero_grad();
  GradientMap gradients() const;
  // Overwrites values from `source`; names and shapes must match exactly.
  void assign(const std::vector<std::pair<std::string, Tensor>>& source);
  std::vector<std::pair<std::string, Tensor>> snapshot() const;

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

// Zeroes every parameter gradient, then runs backward(loss). Unused
// parameters therefore report zero gradients.
GradientMap backward(const Var& loss, ParameterStore& params);

// Seeded parameter initialization: uniform Glorot for matrices, zeros for biases.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor glorot(std::size_t rows, std::size_t cols);
  Tensor uniform(Shape shape, double limit);

 private:
  std::mt19937_64 rng_;
};

// x W + b with W stored [in, out]. With weight normalization W = g * v / ||v||
// per output column.
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, Initializer& init, const std::string& name, std::size_t in, std::size_t out,
         bool bias = true, bool weight_norm = false);

  Var operator()(const Var& x) const;
  Var weight() const;
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }

 private:
  Var weight_;
  Var gain_;
  Var bias_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

// Rows of the embedding table ([|V|, e], one row per id), optionally scaled.
Var embed(std::span<const int> ids, const Var& table, std::optional<double> scale = std::nullopt);

enum class PositionalKind { kFixed, kLearned };
PositionalKind parse_positional_kind(const std::string& name);

// Sinusoidal table [n, d]: (pos, 2i) = sin(pos / 10000^(2i/d)), (pos, 2i+1) = cos(...).
Tensor sinusoidal_table(std::size_t n, std::size_t d);
// First n rows of a learned table [n_max, d]; n > n_max is a LengthError.
Var learned_positions(const Var& table, std::size_t n);

// hidden [..., d] x W_o^T + b_o with W_o stored [|V|, d].
Var output_logits(const Var& hidden, const Var& output_weight, const Var& output_bias);

double perplexity(double total_loss, std::size_t token_count);

}  // namespace nmt
