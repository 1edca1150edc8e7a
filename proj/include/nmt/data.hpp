#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nmt {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr std::array<std::string_view, 4> kSpecialTokens{"<pad>", "<unk>", "<s>", "</s>"};
inline constexpr std::size_t kNumSpecials = kSpecialTokens.size();

using TokenSequence = std::vector<std::string>;

TokenSequence tokenize(std::string_view line);
std::string join_tokens(const TokenSequence& tokens);
// One whitespace-tokenized sentence per line.
std::vector<TokenSequence> read_corpus(const std::string& path);
std::vector<std::string> read_lines(const std::string& path);

class Vocabulary {
 public:
  // Specials only.
  Vocabulary();

  // Tokens ordered by descending frequency, ties broken lexicographically;
  // max_size counts the specials.
  static Vocabulary build(const std::vector<TokenSequence>& corpus, std::optional<std::size_t> max_size = std::nullopt,
                          std::optional<std::size_t> min_count = std::nullopt);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void append(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

std::vector<int> encode(const TokenSequence& tokens, const Vocabulary& vocab, bool append_eos);
// Stops at EOS; skips PAD and BOS.
TokenSequence decode(std::span<const int> ids, const Vocabulary& vocab);

struct SentencePair {
  std::vector<int> source;  // no EOS
  std::vector<int> target;  // EOS-terminated
};

// Reads two line-aligned files; a line-count mismatch is an InputError.
std::vector<SentencePair> read_parallel(const std::string& source_path, const std::string& target_path,
                                        const Vocabulary& source_vocab, const Vocabulary& target_vocab);

// PAD-padded id matrices, row-major.
struct Batch {
  std::size_t size = 0;
  std::size_t source_len = 0;
  std::size_t target_len = 0;
  std::vector<int> source;  // [size x source_len]
  std::vector<int> target;  // [size x target_len]
  std::vector<std::size_t> source_lengths;
  std::vector<std::size_t> target_lengths;
  std::vector<std::size_t> indices;  // positions in the corpus

  std::size_t target_tokens() const;
  int source_at(std::size_t row, std::size_t t) const { return source[row * source_len + t]; }
  int target_at(std::size_t row, std::size_t t) const { return target[row * target_len + t]; }
};

// Sources that are empty are given a single EOS so every encoder sees one position.
Batch make_batch(const std::vector<SentencePair>& pairs, std::span<const std::size_t> indices);

struct BatchingConfig {
  std::size_t word_budget = 4096;
  std::size_t bucket_width = 8;
  std::size_t max_length = 100;
};

struct IteratorState {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t position = 0;

  bool operator==(const IteratorState&) const = default;
};

std::vector<std::uint8_t> iterator_save(const IteratorState& state);
IteratorState iterator_restore(std::span<const std::uint8_t> bytes);

// Indices of pairs within the length limit (target length counted without EOS).
std::vector<std::size_t> filter_by_length(const std::vector<SentencePair>& pairs, std::size_t max_length);

// The batch plan of one epoch: a pure function of (pairs, config, seed, epoch).
std::vector<std::vector<std::size_t>> make_batches(const std::vector<SentencePair>& pairs, const BatchingConfig& config,
                                                   std::uint64_t seed, std::uint64_t epoch);

class BatchIterator {
 public:
  BatchIterator(const std::vector<SentencePair>& pairs, BatchingConfig config, IteratorState state);

  // Next batch; rolls over into the next epoch when the current one is exhausted.
  Batch next();
  const IteratorState& state() const { return state_; }
  // True when the next call to next() starts a new epoch.
  bool at_epoch_end() const { return state_.position >= plan_.size(); }
  std::size_t batches_per_epoch() const { return plan_.size(); }

 private:
  const std::vector<SentencePair>& pairs_;
  BatchingConfig config_;
  IteratorState state_;
  std::vector<std::vector<std::size_t>> plan_;
};

}  // namespace nmt
