#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nmt/data.hpp"
#include "nmt/model.hpp"

namespace nmt {

// ((5 + length) / 6)^alpha
double length_penalty(std::size_t length, double alpha);

enum class EnsembleMode { kLinear, kLogLinear };
EnsembleMode parse_ensemble_mode(const std::string& name);

// Weighted arithmetic (linear) or geometric (log-linear) mean of distributions, renormalized.
// Empty weights mean uniform.
std::vector<double> ensemble_combine(const std::vector<std::vector<double>>& distributions, EnsembleMode mode,
                                     const std::vector<double>& weights = {});

class Ensemble {
 public:
  // Members must agree on the target vocabulary size; weights are normalized to sum to one.
  Ensemble(std::vector<const Seq2SeqModel*> models, EnsembleMode mode = EnsembleMode::kLinear,
           std::vector<double> weights = {});

  std::size_t size() const { return models_.size(); }
  const Seq2SeqModel& model(std::size_t i) const { return *models_[i]; }
  std::size_t target_vocab_size() const { return models_.front()->config().target_vocab_size; }
  // First member exposing attention, or -1.
  int attention_member() const;
  // Longest output every member can position; RNN members impose no limit.
  std::size_t max_target_positions() const;

  std::vector<std::unique_ptr<DecoderState>> start(const SourceBatch& sources) const;
  // Combined log-probabilities [rows x V'] for the next token.
  Tensor step(std::vector<std::unique_ptr<DecoderState>>& states, std::span<const int> previous,
              const std::vector<int>* subset) const;

 private:
  std::vector<const Seq2SeqModel*> models_;
  EnsembleMode mode_;
  std::vector<double> weights_;
};

// source id -> (target id, probability), sorted by probability descending.
struct LexicalTable {
  std::map<int, std::vector<std::pair<int, double>>> entries;
};

// Lines "source<TAB>target<TAB>probability"; tokens missing from either vocabulary are skipped.
LexicalTable load_lexical_table(const std::string& path, const Vocabulary& source_vocab,
                                const Vocabulary& target_vocab);
// Sorted union of the top-K targets of every source id, plus the specials.
std::vector<int> select_vocabulary(std::span<const int> source, const LexicalTable& table, std::size_t k);

struct DecodeOptions {
  std::size_t beam_size = 5;
  double length_penalty_alpha = 1.0;
  std::size_t max_length_factor = 2;
  std::size_t max_length_constant = 10;
  std::size_t max_output_length = 0;  // overrides the factor rule when nonzero
  std::size_t nbest = 1;
  bool attention = false;
  const LexicalTable* lexical_table = nullptr;
  std::size_t lexical_top_k = 0;

  std::size_t max_length(std::size_t source_length) const;
};

struct Translation {
  std::vector<int> tokens;  // ends with EOS
  double score = 0.0;       // log-probability over the length penalty
  double log_probability = 0.0;
  std::vector<std::vector<double>> attention;  // one row per token in `tokens`
};

// Beam search for one source; returns up to nbest completed hypotheses, best first.
std::vector<Translation> beam_search(const Ensemble& ensemble, std::span<const int> source,
                                     const DecodeOptions& options);

// Translates in batches of sentences of similar length; results come back in input order
// and match sentence-by-sentence decoding.
std::vector<std::vector<Translation>> batch_translate(const Ensemble& ensemble,
                                                     const std::vector<std::vector<int>>& sources,
                                                     std::size_t batch_size, const DecodeOptions& options);

// Argmax decoding with the same length limit; ties go to the lowest id.
std::vector<std::vector<int>> greedy_translate(const Ensemble& ensemble, const std::vector<std::vector<int>>& sources,
                                               std::size_t batch_size, const DecodeOptions& options);

// Tokens up to (not including) EOS.
std::vector<int> strip_eos(const std::vector<int>& tokens);

// "index ||| tokens ||| normalized_score ||| raw_logprob"
std::string format_nbest(std::size_t index, const std::string& tokens, const Translation& translation);

// First line "m n", then m rows of n six-decimal values.
void write_attention(const std::filesystem::path& path, const std::vector<std::vector<double>>& rows);

}  // namespace nmt
