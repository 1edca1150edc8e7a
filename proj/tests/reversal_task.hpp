#pragma once

#include <random>
#include <vector>

#include "nmt/data.hpp"

namespace nmt::testing {

// Source: random symbols; target: the same symbols reversed, then EOS.
inline std::vector<SentencePair> reversal_pairs(std::size_t count, std::size_t symbols, std::size_t min_len,
                                                std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> sym(static_cast<int>(kNumSpecials), static_cast<int>(kNumSpecials + symbols) - 1);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::vector<SentencePair> pairs(count);
  for (auto& p : pairs) {
    for (std::size_t i = len(rng); i > 0; --i) p.source.push_back(sym(rng));
    p.target.assign(p.source.rbegin(), p.source.rend());
    p.target.push_back(kEosId);
  }
  return pairs;
}

}  // namespace nmt::testing
