#include "nmt/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "nmt/errors.hpp"

namespace nmt {

TokenSequence tokenize(std::string_view line) {
  TokenSequence tokens;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f'; };
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) tokens.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return tokens;
}

std::string join_tokens(const TokenSequence& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<TokenSequence> read_corpus(const std::string& path) {
  std::vector<TokenSequence> corpus;
  for (const auto& line : read_lines(path)) corpus.push_back(tokenize(line));
  return corpus;
}

Vocabulary::Vocabulary() {
  for (auto special : kSpecialTokens) append(std::string(special));
}

void Vocabulary::append(std::string token) {
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(const std::vector<TokenSequence>& corpus, std::optional<std::size_t> max_size,
                             std::optional<std::size_t> min_count) {
  if (corpus.empty()) throw InputError("cannot build a vocabulary from an empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& sentence : corpus)
    for (const auto& token : sentence) ++counts[token];

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [token, count] : counts) {
    bool special = false;
    for (auto s : kSpecialTokens) special = special || token == s;
    if (special) continue;
    if (min_count && count < *min_count) continue;
    ranked.emplace_back(token, count);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  for (const auto& [token, count] : ranked) {
    if (max_size && vocab.size() >= *max_size) break;
    vocab.append(token);
  }
  return vocab;
}

Vocabulary Vocabulary::load(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.size() < kNumSpecials) throw FormatError(path + ": vocabulary is missing the special tokens");
  for (std::size_t i = 0; i < kNumSpecials; ++i) {
    if (lines[i] != kSpecialTokens[i]) {
      throw FormatError(path + ": line " + std::to_string(i + 1) + " must be " + std::string(kSpecialTokens[i]));
    }
  }
  Vocabulary vocab;
  for (std::size_t i = kNumSpecials; i < lines.size(); ++i) {
    if (vocab.contains(lines[i])) throw FormatError(path + ": duplicate token '" + lines[i] + "'");
    vocab.append(lines[i]);
  }
  return vocab;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& token : tokens_) out << token << '\n';
  if (!out) throw IoError("failed writing " + path);
}

int Vocabulary::id(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " + std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

std::vector<int> encode(const TokenSequence& tokens, const Vocabulary& vocab, bool append_eos) {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 1);
  for (const auto& token : tokens) ids.push_back(vocab.id(token));
  if (append_eos) ids.push_back(kEosId);
  return ids;
}

TokenSequence decode(std::span<const int> ids, const Vocabulary& vocab) {
  TokenSequence tokens;
  for (int id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kBosId) continue;
    tokens.push_back(vocab.token(id));
  }
  return tokens;
}

std::vector<SentencePair> read_parallel(const std::string& source_path, const std::string& target_path,
                                        const Vocabulary& source_vocab, const Vocabulary& target_vocab) {
  const auto source = read_corpus(source_path);
  const auto target = read_corpus(target_path);
  if (source.size() != target.size()) {
    throw InputError("parallel corpora are misaligned: " + source_path + " has " + std::to_string(source.size()) +
                     " lines, " + target_path + " has " + std::to_string(target.size()));
  }
  std::vector<SentencePair> pairs;
  pairs.reserve(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) {
    pairs.push_back({encode(source[i], source_vocab, false), encode(target[i], target_vocab, true)});
  }
  return pairs;
}

std::size_t Batch::target_tokens() const {
  std::size_t total = 0;
  for (auto n : target_lengths) total += n;
  return total;
}

Batch make_batch(const std::vector<SentencePair>& pairs, std::span<const std::size_t> indices) {
  Batch batch;
  batch.size = indices.size();
  batch.indices.assign(indices.begin(), indices.end());
  for (auto i : indices) {
    const auto& p = pairs.at(i);
    batch.source_lengths.push_back(std::max<std::size_t>(1, p.source.size()));
    batch.target_lengths.push_back(p.target.size());
    batch.source_len = std::max(batch.source_len, batch.source_lengths.back());
    batch.target_len = std::max(batch.target_len, p.target.size());
  }
  batch.source.assign(batch.size * batch.source_len, kPadId);
  batch.target.assign(batch.size * batch.target_len, kPadId);
  for (std::size_t r = 0; r < batch.size; ++r) {
    const auto& p = pairs[indices[r]];
    if (p.source.empty()) {
      batch.source[r * batch.source_len] = kEosId;
    } else {
      std::copy(p.source.begin(), p.source.end(), batch.source.begin() + r * batch.source_len);
    }
    std::copy(p.target.begin(), p.target.end(), batch.target.begin() + r * batch.target_len);
  }
  return batch;
}

namespace {

constexpr char kIteratorMagic[4] = {'N', 'M', 'T', 'I'};
constexpr std::uint32_t kIteratorVersion = 1;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[offset + i]) << (8 * i);
  return v;
}

std::size_t target_words(const SentencePair& p) { return p.target.size(); }

// Unbiased-enough Fisher-Yates on a 64-bit engine; independent of the standard
// library's distribution implementations.
template <typename T>
void shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace

std::vector<std::uint8_t> iterator_save(const IteratorState& state) {
  std::vector<std::uint8_t> out(kIteratorMagic, kIteratorMagic + 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(kIteratorVersion >> (8 * i)));
  put_u64(out, state.seed);
  put_u64(out, state.epoch);
  put_u64(out, state.position);
  return out;
}

IteratorState iterator_restore(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != 32 || std::memcmp(bytes.data(), kIteratorMagic, 4) != 0) {
    throw FormatError("iterator state: expected 32 bytes with NMTI header, got " + std::to_string(bytes.size()) + " bytes");
  }
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
  if (version != kIteratorVersion) throw VersionError("iterator state version " + std::to_string(version) + " unsupported");
  return {get_u64(bytes, 8), get_u64(bytes, 16), get_u64(bytes, 24)};
}

std::vector<std::size_t> filter_by_length(const std::vector<SentencePair>& pairs, std::size_t max_length) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::size_t target_len = pairs[i].target.empty() ? 0 : pairs[i].target.size() - 1;
    if (pairs[i].source.size() <= max_length && target_len <= max_length) kept.push_back(i);
  }
  return kept;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<SentencePair>& pairs, const BatchingConfig& config,
                                                   std::uint64_t seed, std::uint64_t epoch) {
  if (config.bucket_width == 0) throw ConfigError("bucket width must be positive");
  const auto kept = filter_by_length(pairs, config.max_length);
  const std::size_t last_bucket = (config.max_length + config.bucket_width - 1) / config.bucket_width;
  auto bucket_of = [&](std::size_t len) {
    return std::min(last_bucket, (len + config.bucket_width - 1) / config.bucket_width);
  };

  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> buckets;
  for (auto i : kept) {
    if (target_words(pairs[i]) > config.word_budget) {
      throw ConfigError("word budget " + std::to_string(config.word_budget) + " is smaller than sentence " +
                        std::to_string(i + 1) + " (" + std::to_string(target_words(pairs[i])) + " target tokens)");
    }
    buckets[{bucket_of(pairs[i].source.size()), bucket_of(pairs[i].target.size())}].push_back(i);
  }

  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<std::vector<std::size_t>> plan;
  for (auto& [key, members] : buckets) {
    shuffle(members, rng);
    std::vector<std::size_t> current;
    std::size_t words = 0;
    for (auto i : members) {
      const std::size_t w = target_words(pairs[i]);
      if (!current.empty() && words + w > config.word_budget) {
        plan.push_back(std::move(current));
        current.clear();
        words = 0;
      }
      current.push_back(i);
      words += w;
    }
    if (!current.empty()) plan.push_back(std::move(current));
  }
  shuffle(plan, rng);
  return plan;
}

BatchIterator::BatchIterator(const std::vector<SentencePair>& pairs, BatchingConfig config, IteratorState state)
    : pairs_(pairs), config_(config), state_(state) {
  plan_ = make_batches(pairs_, config_, state_.seed, state_.epoch);
  if (plan_.empty()) throw InputError("no training pairs survive length filtering");
  if (state_.position > plan_.size()) {
    throw FormatError("iterator position " + std::to_string(state_.position) + " beyond epoch of " +
                      std::to_string(plan_.size()) + " batches");
  }
}

Batch BatchIterator::next() {
  if (at_epoch_end()) {
    state_.epoch += 1;
    state_.position = 0;
    plan_ = make_batches(pairs_, config_, state_.seed, state_.epoch);
  }
  const auto& indices = plan_[state_.position];
  state_.position += 1;
  return make_batch(pairs_, indices);
}

}  // namespace nmt
