#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "nmt/data.hpp"

namespace nmt {

struct BleuReport {
  double score = 0.0;  // 0..100
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::array<double, 4> precisions{};  // as used in the geometric mean
  double brevity_penalty = 1.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
  bool smoothed = false;
};

struct BleuOptions {
  bool case_sensitive = true;
  // Replaces zero match counts with this value for training-time monitoring; 0 disables.
  double zero_count_smoothing = 0.0;
};

// Corpus BLEU up to 4-grams against one reference per hypothesis.
BleuReport corpus_bleu(const std::vector<TokenSequence>& hypotheses, const std::vector<TokenSequence>& references,
                       const BleuOptions& options = {});

// "BLEU = 53.73 83.3/60.0/50.0/33.3 (BP=1.000, hyp_len=6, ref_len=6)"
std::string format_bleu(const BleuReport& report);

}  // namespace nmt
