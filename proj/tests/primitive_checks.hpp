#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nmt/autodiff.hpp"

namespace nmt::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

// Weighted sum so that every output element receives a distinct upstream gradient.
inline Var probe(const Var& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, constant(random_tensor(out.shape(), rng))));
}

using NamedReport = std::pair<std::string, GradCheckReport>;

// Every primitive against central differences on random shapes up to 8x8.
inline std::vector<NamedReport> primitive_gradchecks(std::uint64_t seed) {
  std::vector<NamedReport> out;
  const auto check = [&](const std::string& name, const std::function<Var()>& f,
                         const std::vector<std::pair<std::string, Var>>& params) {
    out.emplace_back(name, finite_difference_check(f, params));
  };

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> ext(1, 8);
  const std::size_t n = ext(rng), k = ext(rng), m = ext(rng);

  Var a = parameter(random_tensor({n, k}, rng));
  Var b = parameter(random_tensor({k, m}, rng));
  Var bt = parameter(random_tensor({m, k}, rng));
  Var c = parameter(random_tensor({n, k}, rng));
  Var row = parameter(random_tensor({k}, rng));
  Var s = parameter(random_tensor({}, rng));
  Var rw = parameter(random_tensor({n}, rng));

  check("matmul", [&] { return probe(matmul(a, b), 1); }, {{"a", a}, {"b", b}});
  check("matmul_transposed", [&] { return probe(matmul(a, bt, true), 2); }, {{"a", a}, {"bt", bt}});
  check("add_broadcast", [&] { return probe(add(a, row), 3); }, {{"a", a}, {"row", row}});
  check("sub_broadcast", [&] { return probe(sub(row, a), 4); }, {{"a", a}, {"row", row}});
  check("mul", [&] { return probe(mul(a, c), 5); }, {{"a", a}, {"c", c}});
  check("mul_scalar", [&] { return probe(mul(s, a), 6); }, {{"a", a}, {"s", s}});
  check("tanh", [&] { return probe(tanh(a), 7); }, {{"a", a}});
  check("sigmoid", [&] { return probe(sigmoid(a), 8); }, {{"a", a}});
  check("exp", [&] { return probe(exp(a), 9); }, {{"a", a}});
  check("scale_rows", [&] { return probe(scale_rows(a, rw), 10); }, {{"a", a}, {"rw", rw}});
  check("softmax_rows", [&] { return probe(softmax_rows(a), 11); }, {{"a", a}});
  check("log_softmax", [&] { return probe(log_softmax(a), 12); }, {{"a", a}});
  check("permute2", [&] { return probe(permute(a, {1, 0}), 13); }, {{"a", a}});
  check("concat_cols", [&] { return probe(concat({a, c}, 1), 14); }, {{"a", a}, {"c", c}});
  check("concat_rows", [&] { return probe(concat({a, c}, 0), 15); }, {{"a", a}, {"c", c}});
  check("slice", [&] { return probe(slice(a, 1, k / 2, k - k / 2), 16); }, {{"a", a}});
  check("shift_forward", [&] { return probe(shift(a, 0, 1), 17); }, {{"a", a}});
  check("shift_backward", [&] { return probe(shift(a, 1, -1), 18); }, {{"a", a}});

  Var gain = parameter(random_tensor({k}, rng, 0.5, 1.5));
  Var bias = parameter(random_tensor({k}, rng));
  // Central differences need h well below the row spread, so draw from a wider range.
  Var spread = parameter(random_tensor({n, k}, rng, -3.0, 3.0));
  if (k > 1) {
    check("layer_normalize", [&] { return probe(layer_normalize(spread, gain, bias), 19); },
          {{"x", spread}, {"gain", gain}, {"bias", bias}});
  }

  Var v = parameter(random_tensor({k, m}, rng));
  Var g = parameter(random_tensor({m}, rng, 0.5, 2.0));
  check("weight_normalize", [&] { return probe(weight_normalize(v, g), 20); }, {{"v", v}, {"g", g}});

  const std::vector<int> ids{0, static_cast<int>(n - 1), 0};
  check("gather_rows", [&] { return probe(gather_rows(a, ids), 21); }, {{"a", a}});

  Var x3 = parameter(random_tensor({2, n, k}, rng));
  Var y3 = parameter(random_tensor({2, m, k}, rng));
  Var z3 = parameter(random_tensor({2, k, n}, rng));
  check("bmm_nt", [&] { return probe(bmm(x3, y3, false, true), 22); }, {{"x3", x3}, {"y3", y3}});
  check("bmm_tt", [&] { return probe(bmm(z3, y3, true, true), 23); }, {{"z3", z3}, {"y3", y3}});
  check("bmm_nn", [&] { return probe(bmm(z3, x3, false, false), 24); }, {{"z3", z3}, {"x3", x3}});
  check("bmm_tn_shared", [&] { return probe(bmm(x3, x3, true, false), 25); }, {{"x3", x3}});
  check("permute3", [&] { return probe(permute(x3, {1, 2, 0}), 26); }, {{"x3", x3}});
  check("reshape", [&] { return probe(reshape(x3, {2 * n, k}), 27); }, {{"x3", x3}});

  std::vector<std::uint8_t> mask(n * k, 1);
  for (std::size_t r = 0; r < n; ++r)
    if (k > 1) mask[r * k + (r % k)] = 0;
  check("softmax_rows_masked", [&] { return probe(softmax_rows(a, &mask), 28); }, {{"a", a}});

  // relu away from the kink
  Var r = parameter(random_tensor({n, k}, rng));
  for (double& val : r.mutable_value().storage()) val += val > 0 ? 0.1 : -0.1;
  check("relu", [&] { return probe(relu(r), 29); }, {{"r", r}});

  std::vector<int> targets(n);
  for (std::size_t i = 0; i < n; ++i) targets[i] = static_cast<int>(i % k);
  if (n > 1) targets[1] = -1;  // treated as padding
  if (k > 1) {
    check("cross_entropy_label_smoothed", [&] { return cross_entropy_label_smoothed(a, targets, 0.1, -1); },
          {{"a", a}});
  }
  return out;
}

}  // namespace nmt::testing
