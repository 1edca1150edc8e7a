#pragma once

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nmt/model.hpp"

namespace nmt {

// Allowed (query, key) pairs per batch row: values[(r * queries + q) * keys + k].
// A batch of 1 applies to every row.
struct AttentionMask {
  std::size_t batch = 1;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> values;

  bool allowed(std::size_t row, std::size_t q, std::size_t k) const {
    return values[((batch == 1 ? 0 : row) * queries + q) * keys + k] != 0;
  }
};

AttentionMask causal_mask(std::size_t m);
// Every query of row r may attend the keys where key_mask[r * keys + k] is set.
AttentionMask key_padding_mask(const std::vector<std::uint8_t>& key_mask, std::size_t batch, std::size_t queries,
                               std::size_t keys);
AttentionMask full_mask(std::size_t queries, std::size_t keys);

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, Initializer& init, const std::string& name, std::size_t model_size,
                     std::size_t heads, bool weight_norm = false);

  // [b, len, d] -> per-head projections [b, h, len, d_u].
  Var queries(const Var& x) const { return split(query_proj_(x)); }
  Var keys(const Var& x) const { return split(key_proj_(x)); }
  Var values(const Var& x) const { return split(value_proj_(x)); }
  // softmax(q k^T / sqrt(d_u) + mask) v, heads concatenated and projected: [b, q, d].
  // `weights`, when given, receives the attention probabilities [b, h, q, k].
  Var attend(const Var& q, const Var& k, const Var& v, const AttentionMask& mask, Var* weights = nullptr) const;
  Var operator()(const Var& queries_in, const Var& keys_in, const Var& values_in, const AttentionMask& mask) const;

  std::size_t heads() const { return heads_; }

 private:
  Var split(const Var& x) const;

  std::size_t model_size_ = 0;
  std::size_t heads_ = 1;
  Linear query_proj_;
  Linear key_proj_;
  Linear value_proj_;
  Linear output_proj_;
};

// max(0, x W1 + b1) W2 + b2, row by row.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore& store, Initializer& init, const std::string& name, std::size_t model_size,
              std::size_t hidden, bool weight_norm = false);
  Var operator()(const Var& x) const { return out_(relu(in_(x))); }

 private:
  Linear in_;
  Linear out_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t size);
  Var operator()(const Var& x) const { return layer_normalize(x, gain_, bias_); }

 private:
  Var gain_;
  Var bias_;
};

enum class SublayerStructure { kPostNorm, kPreNorm };
SublayerStructure parse_sublayer_structure(const std::string& name);

// post_norm: LayerNorm(x + Dropout(f(x))); pre_norm: x + Dropout(f(LayerNorm(x))).
Var sublayer_apply(const Var& x, const std::function<Var(const Var&)>& sublayer, const LayerNorm& norm,
                   SublayerStructure structure, const Regularization& reg);

struct TransformerEncoderBlock {
  MultiHeadAttention self_attention;
  FeedForward feed_forward;
  LayerNorm norm_attention;
  LayerNorm norm_ffn;
};

struct TransformerDecoderBlock {
  MultiHeadAttention self_attention;
  MultiHeadAttention source_attention;
  FeedForward feed_forward;
  LayerNorm norm_self;
  LayerNorm norm_source;
  LayerNorm norm_ffn;
};

class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(ParameterStore& store, Initializer& init, const std::string& name, std::size_t model_size,
                     std::size_t heads, std::size_t ffn_size, std::size_t layers, SublayerStructure structure,
                     bool weight_norm = false);
  // [b, n, d] with a key padding mask [b x n].
  Var operator()(const Var& input, const std::vector<std::uint8_t>& source_mask, const Regularization& reg = {}) const;

 private:
  SublayerStructure structure_ = SublayerStructure::kPostNorm;
  std::vector<TransformerEncoderBlock> blocks_;
  LayerNorm final_norm_;
};

struct TransformerBlockCache {
  Var self_keys;    // [b, h, t, d_u]
  Var self_values;
  Var source_keys;  // [b, h, n, d_u]
  Var source_values;
};

class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(ParameterStore& store, Initializer& init, const std::string& name, std::size_t model_size,
                     std::size_t heads, std::size_t ffn_size, std::size_t layers, SublayerStructure structure,
                     bool weight_norm = false);

  // Teacher-forced: target [b, m, d], encoded [b, n, d], source mask [b x n].
  Var operator()(const Var& target, const Var& encoded, const std::vector<std::uint8_t>& source_mask,
                 const Regularization& reg = {}) const;
  std::vector<TransformerBlockCache> start(const Var& encoded) const;
  // One position [b, 1, d], appending its keys and values to the caches.
  Var step(const Var& input, std::vector<TransformerBlockCache>& caches,
           const std::vector<std::uint8_t>& source_mask) const;

 private:
  SublayerStructure structure_ = SublayerStructure::kPostNorm;
  std::vector<TransformerDecoderBlock> blocks_;
  LayerNorm final_norm_;
};

class TransformerDecoderState : public DecoderState {
 public:
  std::size_t rows() const override { return rows_; }
  std::unique_ptr<DecoderState> select(std::span<const int> rows) const override;

  std::size_t rows_ = 0;
  std::size_t source_len = 0;
  std::size_t position = 0;
  std::vector<std::uint8_t> source_mask;
  std::vector<TransformerBlockCache> caches;
};

class TransformerModel : public Seq2SeqModel {
 public:
  TransformerModel(const ModelConfig& config, Initializer& init);

  Var forward(const Batch& batch, Mode mode, std::mt19937_64& rng) const override;
  std::unique_ptr<DecoderState> start_decoding(const SourceBatch& sources) const override;
  Tensor step(DecoderState& state, std::span<const int> previous,
              const std::vector<int>* vocab_subset = nullptr) const override;

  // Scaled embeddings plus positions starting at `offset`: [b, len, d].
  Var embed_with_positions(std::span<const int> ids, const Var& table, const Var& positions, std::size_t batch,
                           std::size_t len, std::size_t offset = 0) const;
  Var encode(const SourceBatch& sources, const Regularization& reg) const;

 private:
  Var source_positions_;
  Var target_positions_;
  TransformerEncoder encoder_;
  TransformerDecoder decoder_;
};

}  // namespace nmt
