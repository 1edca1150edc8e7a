#include "nmt/bleu.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>

#include "nmt/errors.hpp"

namespace nmt {

namespace {

constexpr std::size_t kMaxOrder = 4;

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const TokenSequence& tokens, std::size_t order) {
  NgramCounts counts;
  for (std::size_t i = 0; i + order <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<long>(i),
                                      tokens.begin() + static_cast<long>(i + order))];
  return counts;
}

TokenSequence lowercased(const TokenSequence& tokens) {
  TokenSequence out = tokens;
  for (auto& t : out)
    std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<TokenSequence>& hypotheses, const std::vector<TokenSequence>& references,
                       const BleuOptions& options) {
  if (hypotheses.size() != references.size()) {
    throw InputError("BLEU needs one reference per hypothesis: " + std::to_string(hypotheses.size()) +
                     " hypotheses, " + std::to_string(references.size()) + " references");
  }
  if (hypotheses.empty()) throw InputError("BLEU of an empty corpus is undefined");

  BleuReport report;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const TokenSequence hyp = options.case_sensitive ? hypotheses[s] : lowercased(hypotheses[s]);
    const TokenSequence ref = options.case_sensitive ? references[s] : lowercased(references[s]);
    report.hypothesis_length += hyp.size();
    report.reference_length += ref.size();
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      const NgramCounts h = count_ngrams(hyp, n), r = count_ngrams(ref, n);
      for (const auto& [gram, count] : h) {
        const auto it = r.find(gram);
        if (it != r.end()) report.matches[n - 1] += std::min(count, it->second);
      }
      if (hyp.size() >= n) report.totals[n - 1] += hyp.size() - n + 1;
    }
  }

  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    double matches = static_cast<double>(report.matches[n]);
    const double total = static_cast<double>(report.totals[n]);
    if (matches == 0.0 && options.zero_count_smoothing > 0.0 && total > 0.0) {
      matches = options.zero_count_smoothing;
      report.smoothed = true;
    }
    report.precisions[n] = total > 0.0 ? matches / total : 0.0;
    if (report.precisions[n] <= 0.0) {
      zero = true;
    } else {
      log_sum += std::log(report.precisions[n]);
    }
  }
  const double h = static_cast<double>(report.hypothesis_length), r = static_cast<double>(report.reference_length);
  report.brevity_penalty = h == 0.0 ? 0.0 : std::min(1.0, std::exp(1.0 - r / h));
  report.score = zero ? 0.0 : 100.0 * report.brevity_penalty * std::exp(log_sum / kMaxOrder);
  // exp(log) round-off would otherwise leave a perfect match at 99.99999...
  if (!zero && report.brevity_penalty == 1.0 && report.matches == report.totals) report.score = 100.0;
  return report;
}

std::string format_bleu(const BleuReport& report) {
  char buffer[256];
  std::snprintf(buffer, sizeof(buffer), "BLEU = %.2f %.1f/%.1f/%.1f/%.1f (BP=%.3f, hyp_len=%zu, ref_len=%zu)",
                report.score, 100.0 * report.precisions[0], 100.0 * report.precisions[1],
                100.0 * report.precisions[2], 100.0 * report.precisions[3], report.brevity_penalty,
                report.hypothesis_length, report.reference_length);
  return buffer;
}

}  // namespace nmt
