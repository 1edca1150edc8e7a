#include "nmt/model_common.hpp"

#include <cmath>

#include "nmt/errors.hpp"

namespace nmt {

Var ParameterStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  Var p = parameter(std::move(init));
  entries_.emplace_back(name, p);
  return p;
}

Var ParameterStore::get(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw ConfigError("unknown parameter " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return true;
  return false;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t total = 0;
  for (const auto& [n, v] : entries_) total += v.size();
  return total;
}

void ParameterStore::zero_grad() {
  for (auto& [n, v] : entries_) v.node()->grad.assign(v.size(), 0.0);
}

GradientMap ParameterStore::gradients() const {
  GradientMap out;
  for (const auto& [n, v] : entries_) out.emplace(n, v.grad());
  return out;
}

void ParameterStore::assign(const std::vector<std::pair<std::string, Tensor>>& source) {
  if (source.size() != entries_.size()) {
    throw FormatError("parameter count mismatch: expected " + std::to_string(entries_.size()) + ", got " +
                      std::to_string(source.size()));
  }
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto& [name, value] = source[i];
    auto& [own_name, var] = entries_[i];
    if (name != own_name) throw FormatError("parameter " + std::to_string(i) + " is " + name + ", expected " + own_name);
    if (value.shape() != var.shape()) {
      throw FormatError("parameter " + name + " has shape " + shape_string(value.shape()) + ", expected " +
                        shape_string(var.shape()));
    }
    var.mutable_value() = value;
  }
}

std::vector<std::pair<std::string, Tensor>> ParameterStore::snapshot() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [n, v] : entries_) out.emplace_back(n, v.value());
  return out;
}

GradientMap backward(const Var& loss, ParameterStore& params) {
  params.zero_grad();
  backward(loss);
  return params.gradients();
}

Tensor Initializer::glorot(std::size_t rows, std::size_t cols) {
  return uniform({rows, cols}, std::sqrt(6.0 / static_cast<double>(rows + cols)));
}

Tensor Initializer::uniform(Shape shape, double limit) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = dist(rng_);
  return t;
}

Linear::Linear(ParameterStore& store, Initializer& init, const std::string& name, std::size_t in, std::size_t out,
               bool bias, bool weight_norm)
    : in_(in), out_(out) {
  Tensor w = init.glorot(in, out);
  if (weight_norm) {
    Tensor g(Shape{out});
    for (std::size_t j = 0; j < out; ++j) {
      double norm = 0.0;
      for (std::size_t i = 0; i < in; ++i) norm += w[i * out + j] * w[i * out + j];
      g[j] = std::sqrt(norm);
      // unit-length directions; w itself is unchanged
      if (g[j] > 0.0)
        for (std::size_t i = 0; i < in; ++i) w[i * out + j] /= g[j];
    }
    weight_ = store.add(name + ".v", std::move(w));
    gain_ = store.add(name + ".g", std::move(g));
  } else {
    weight_ = store.add(name + ".weight", std::move(w));
  }
  if (bias) bias_ = store.add(name + ".bias", Tensor(Shape{out}));
}

Var Linear::weight() const { return gain_.defined() ? weight_normalize(weight_, gain_) : weight_; }

Var Linear::operator()(const Var& x) const {
  Var y = matmul(x, weight());
  return bias_.defined() ? add(y, bias_) : y;
}

Var embed(std::span<const int> ids, const Var& table, std::optional<double> scale) {
  Var rows = gather_rows(table, ids);
  return scale ? nmt::scale(rows, *scale) : rows;
}

PositionalKind parse_positional_kind(const std::string& name) {
  if (name == "fixed") return PositionalKind::kFixed;
  if (name == "learned") return PositionalKind::kLearned;
  throw ConfigError("positional encoding must be 'fixed' or 'learned', got '" + name + "'");
}

Tensor sinusoidal_table(std::size_t n, std::size_t d) {
  if (d % 2 != 0) throw DimensionError("sinusoidal positions need an even dimension, got " + std::to_string(d));
  Tensor table(Shape{n, d});
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
      table.at(pos, 2 * i) = std::sin(angle);
      table.at(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return table;
}

Var learned_positions(const Var& table, std::size_t n) {
  if (n > table.shape()[0]) {
    throw LengthError("sequence length " + std::to_string(n) + " exceeds " + std::to_string(table.shape()[0]) +
                      " learned positions");
  }
  return slice(table, 0, 0, n);
}

Var output_logits(const Var& hidden, const Var& output_weight, const Var& output_bias) {
  if (hidden.shape().back() != output_weight.shape()[1]) {
    throw DimensionError("output layer expects hidden size " + std::to_string(output_weight.shape()[1]) + ", got " +
                         shape_string(hidden.shape()));
  }
  return add(matmul(hidden, output_weight, true), output_bias);
}

double perplexity(double total_loss, std::size_t token_count) {
  if (token_count == 0) throw InputError("perplexity of zero tokens is undefined");
  return std::exp(total_loss / static_cast<double>(token_count));
}

}  // namespace nmt
