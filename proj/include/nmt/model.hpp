#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nmt/autodiff.hpp"
#include "nmt/data.hpp"
#include "nmt/model_common.hpp"

namespace nmt {

struct ModelConfig {
  std::string architecture = "transformer";  // rnn | transformer | cnn
  std::size_t source_vocab_size = 0;
  std::size_t target_vocab_size = 0;
  std::size_t embed_size = 64;
  std::size_t model_size = 64;
  std::size_t encoder_layers = 0;  // 0: architecture default (rnn 1, transformer 2, cnn 4)
  std::size_t decoder_layers = 0;
  double dropout = 0.0;
  bool tie_source_target_embeddings = false;
  bool tie_output_embeddings = false;
  bool weight_normalization = false;
  std::string positional_encoding;  // fixed | learned; empty picks the architecture default
  std::size_t max_positions = 512;

  std::string rnn_cell = "lstm";       // lstm | gru
  std::string rnn_attention = "mlp";   // mlp | dot | bilinear | multihead | location
  std::size_t rnn_attention_size = 0;  // 0: model_size
  std::size_t rnn_attention_heads = 4;
  std::string rnn_coverage = "none";   // none | count | gru
  std::size_t rnn_coverage_size = 8;
  bool rnn_context_gate = false;
  bool rnn_attention_in_first_layer = false;

  std::size_t transformer_heads = 4;
  std::size_t transformer_ffn_size = 0;  // 0: 4 * model_size
  std::string transformer_structure = "post_norm";  // post_norm | pre_norm

  std::size_t cnn_kernel_width = 3;

  bool operator==(const ModelConfig&) const = default;
};

// Fills architecture defaults (layer counts, positional encoding kind).
ModelConfig resolved(ModelConfig config);
// Throws ConfigError naming the offending field. Expects a resolved config.
void validate(const ModelConfig& config);

// PAD-padded sources for encoding. Empty sources become a single EOS.
struct SourceBatch {
  std::size_t size = 0;
  std::size_t len = 0;
  std::vector<int> ids;  // [size x len]
  std::vector<std::size_t> lengths;
  std::vector<std::uint8_t> mask;  // [size x len], 1 = real token

  static SourceBatch from(const Batch& batch);
  static SourceBatch from(const std::vector<std::vector<int>>& sources);
};

// Per-model decoding state covering a set of rows (hypotheses).
class DecoderState {
 public:
  virtual ~DecoderState() = default;
  virtual std::size_t rows() const = 0;
  // Row i of the result is row `rows[i]` of this state.
  virtual std::unique_ptr<DecoderState> select(std::span<const int> rows) const = 0;
  // Attention weights [rows x source_len] of the most recent step, when exposed.
  virtual std::optional<Tensor> last_attention() const { return std::nullopt; }
};

// Dropout settings threaded through a forward pass; no rng means no dropout.
struct Regularization {
  double dropout = 0.0;
  Mode mode = Mode::kInfer;
  std::mt19937_64* rng = nullptr;

  Var apply(const Var& x) const { return rng == nullptr ? x : nmt::dropout(x, dropout, mode, *rng); }
};

struct LossOutput {
  Var loss;  // summed label-smoothed cross-entropy
  TokenStats stats;
};

class Seq2SeqModel {
 public:
  Seq2SeqModel(ModelConfig config, Initializer& init);
  virtual ~Seq2SeqModel() = default;
  Seq2SeqModel(const Seq2SeqModel&) = delete;
  Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  // Teacher-forced logits [batch, target_len, |V_trg|].
  virtual Var forward(const Batch& batch, Mode mode, std::mt19937_64& rng) const = 0;
  LossOutput loss(const Batch& batch, double label_smoothing, Mode mode, std::mt19937_64& rng) const;

  virtual std::unique_ptr<DecoderState> start_decoding(const SourceBatch& sources) const = 0;
  // Feeds one previous token per row; returns next-token logits [rows x V'] where
  // V' is `vocab_subset` (sorted ids) or the full target vocabulary.
  virtual Tensor step(DecoderState& state, std::span<const int> previous,
                      const std::vector<int>* vocab_subset = nullptr) const = 0;
  virtual bool exposes_attention() const { return false; }

  const Var& source_embedding() const { return source_embedding_; }
  const Var& target_embedding() const { return target_embedding_; }
  const Var& output_weight() const { return output_weight_; }
  const Var& output_bias() const { return output_bias_; }

 protected:
  // Decoder inputs: BOS followed by the target shifted right, [batch x target_len].
  static std::vector<int> decoder_inputs(const Batch& batch);
  Var project_output(const Var& hidden) const;
  Tensor project_output_subset(const Var& hidden, const std::vector<int>* subset) const;

  ModelConfig config_;
  ParameterStore params_;
  Var source_embedding_;
  Var target_embedding_;
  Var output_weight_;
  Var output_bias_;
};

// Rows of a decoding-state tensor picked along `axis`, detached from the graph.
Var select_along(const Var& value, std::size_t axis, std::span<const int> rows);
std::vector<std::uint8_t> select_mask(const std::vector<std::uint8_t>& mask, std::size_t width, std::span<const int> rows);

std::unique_ptr<Seq2SeqModel> make_model(const ModelConfig& config, std::uint64_t seed);

}  // namespace nmt
