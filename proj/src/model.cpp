#include "nmt/model.hpp"

#include <algorithm>
#include <cmath>

#include "nmt/cnn.hpp"
#include "nmt/errors.hpp"
#include "nmt/rnn.hpp"
#include "nmt/transformer.hpp"

namespace nmt {

namespace {

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field + ": " + message);
}

bool one_of(const std::string& value, std::initializer_list<const char*> options) {
  return std::any_of(options.begin(), options.end(), [&](const char* o) { return value == o; });
}

}  // namespace

ModelConfig resolved(ModelConfig config) {
  std::size_t layers = 0;
  if (config.architecture == "rnn") layers = 1;
  if (config.architecture == "transformer") layers = 2;
  if (config.architecture == "cnn") layers = 4;
  if (config.encoder_layers == 0) config.encoder_layers = layers;
  if (config.decoder_layers == 0) config.decoder_layers = layers;
  if (config.positional_encoding.empty()) config.positional_encoding = config.architecture == "cnn" ? "learned" : "fixed";
  if (config.rnn_attention_size == 0) config.rnn_attention_size = config.model_size;
  if (config.transformer_ffn_size == 0) config.transformer_ffn_size = 4 * config.model_size;
  return config;
}

void validate(const ModelConfig& c) {
  require(one_of(c.architecture, {"rnn", "transformer", "cnn"}), "architecture",
          "must be rnn, transformer or cnn, got '" + c.architecture + "'");
  require(c.source_vocab_size >= kNumSpecials, "source_vocab_size", "must include the special tokens");
  require(c.target_vocab_size >= kNumSpecials, "target_vocab_size", "must include the special tokens");
  require(c.embed_size > 0, "embed_size", "must be positive");
  require(c.model_size > 0, "model_size", "must be positive");
  require(c.encoder_layers > 0, "encoder_layers", "must be positive");
  require(c.decoder_layers > 0, "decoder_layers", "must be positive");
  require(c.dropout >= 0.0 && c.dropout < 1.0, "dropout", "must be in [0, 1)");
  require(c.max_positions > 0, "max_positions", "must be positive");
  require(one_of(c.positional_encoding, {"fixed", "learned"}), "positional_encoding",
          "must be fixed or learned, got '" + c.positional_encoding + "'");
  if (c.tie_source_target_embeddings) {
    require(c.source_vocab_size == c.target_vocab_size, "tie_source_target_embeddings",
            "needs a joint vocabulary (equal source and target vocabulary sizes)");
  }
  if (c.tie_output_embeddings) {
    require(c.embed_size == c.model_size, "tie_output_embeddings", "needs embed_size == model_size");
  }
  if (c.architecture == "rnn") {
    require(one_of(c.rnn_cell, {"lstm", "gru"}), "rnn_cell", "must be lstm or gru, got '" + c.rnn_cell + "'");
    require(one_of(c.rnn_attention, {"mlp", "dot", "bilinear", "multihead", "location"}), "rnn_attention",
            "unknown attention type '" + c.rnn_attention + "'");
    require(one_of(c.rnn_coverage, {"none", "count", "gru"}), "rnn_coverage",
            "must be none, count or gru, got '" + c.rnn_coverage + "'");
    require(c.model_size % 2 == 0, "model_size", "must be even for the bidirectional encoder");
    require(c.rnn_attention_size > 0, "rnn_attention_size", "must be positive");
    if (c.rnn_attention == "multihead") {
      require(c.rnn_attention_heads > 0 && c.rnn_attention_size % c.rnn_attention_heads == 0, "rnn_attention_heads",
              "must divide rnn_attention_size");
    }
    if (c.rnn_coverage != "none") {
      require(c.rnn_attention == "mlp", "rnn_coverage", "is only supported with mlp attention");
      require(c.rnn_coverage_size > 0, "rnn_coverage_size", "must be positive");
    }
  } else {
    require(c.embed_size == c.model_size, "embed_size", "must equal model_size for " + c.architecture);
  }
  if (c.architecture == "transformer") {
    require(c.transformer_heads > 0 && c.model_size % c.transformer_heads == 0, "transformer_heads",
            "must divide model_size");
    require(c.transformer_ffn_size > 0, "transformer_ffn_size", "must be positive");
    require(one_of(c.transformer_structure, {"post_norm", "pre_norm"}), "transformer_structure",
            "must be post_norm or pre_norm, got '" + c.transformer_structure + "'");
    if (c.positional_encoding == "fixed") require(c.model_size % 2 == 0, "model_size", "must be even for fixed positions");
  }
  if (c.architecture == "cnn") {
    require(c.cnn_kernel_width % 2 == 1, "cnn_kernel_width", "must be odd");
    if (c.positional_encoding == "fixed") require(c.model_size % 2 == 0, "model_size", "must be even for fixed positions");
  }
}

SourceBatch SourceBatch::from(const Batch& batch) {
  SourceBatch out;
  out.size = batch.size;
  out.len = batch.source_len;
  out.ids = batch.source;
  out.lengths = batch.source_lengths;
  out.mask.assign(out.size * out.len, 0);
  for (std::size_t r = 0; r < out.size; ++r)
    for (std::size_t t = 0; t < out.lengths[r]; ++t) out.mask[r * out.len + t] = 1;
  return out;
}

SourceBatch SourceBatch::from(const std::vector<std::vector<int>>& sources) {
  SourceBatch out;
  out.size = sources.size();
  for (const auto& s : sources) out.len = std::max(out.len, std::max<std::size_t>(s.size(), 1));
  out.ids.assign(out.size * out.len, kPadId);
  out.mask.assign(out.size * out.len, 0);
  for (std::size_t r = 0; r < out.size; ++r) {
    const auto& s = sources[r];
    if (s.empty()) {
      out.ids[r * out.len] = kEosId;
      out.lengths.push_back(1);
    } else {
      std::copy(s.begin(), s.end(), out.ids.begin() + static_cast<long>(r * out.len));
      out.lengths.push_back(s.size());
    }
    for (std::size_t t = 0; t < out.lengths[r]; ++t) out.mask[r * out.len + t] = 1;
  }
  return out;
}

Seq2SeqModel::Seq2SeqModel(ModelConfig config, Initializer& init) : config_(std::move(config)) {
  const auto& c = config_;
  source_embedding_ = params_.add("source_embedding", init.glorot(c.source_vocab_size, c.embed_size));
  target_embedding_ = c.tie_source_target_embeddings
                          ? source_embedding_
                          : params_.add("target_embedding", init.glorot(c.target_vocab_size, c.embed_size));
  output_weight_ = c.tie_output_embeddings ? target_embedding_
                                           : params_.add("output.weight", init.glorot(c.target_vocab_size, c.model_size));
  output_bias_ = params_.add("output.bias", Tensor(Shape{c.target_vocab_size}));
}

LossOutput Seq2SeqModel::loss(const Batch& batch, double label_smoothing, Mode mode, std::mt19937_64& rng) const {
  LossOutput out;
  const Var logits = forward(batch, mode, rng);
  out.loss = cross_entropy_label_smoothed(logits, batch.target, label_smoothing, kPadId, &out.stats);
  return out;
}

std::vector<int> Seq2SeqModel::decoder_inputs(const Batch& batch) {
  std::vector<int> ids(batch.size * batch.target_len, kPadId);
  for (std::size_t r = 0; r < batch.size; ++r) {
    ids[r * batch.target_len] = kBosId;
    for (std::size_t t = 1; t < batch.target_lengths[r]; ++t) ids[r * batch.target_len + t] = batch.target_at(r, t - 1);
  }
  return ids;
}

Var Seq2SeqModel::project_output(const Var& hidden) const {
  return output_logits(hidden, output_weight_, output_bias_);
}

Tensor Seq2SeqModel::project_output_subset(const Var& hidden, const std::vector<int>* subset) const {
  if (subset == nullptr) return project_output(hidden).value();
  const Var weight = gather_rows(output_weight_, *subset);
  const Var bias = reshape(gather_rows(reshape(output_bias_, {config_.target_vocab_size, 1}), *subset), {subset->size()});
  return output_logits(hidden, weight, bias).value();
}

Var select_along(const Var& value, std::size_t axis, std::span<const int> rows) {
  if (!value.defined()) return value;
  return constant(value.value().gather(axis, rows));
}

std::vector<std::uint8_t> select_mask(const std::vector<std::uint8_t>& mask, std::size_t width,
                                      std::span<const int> rows) {
  std::vector<std::uint8_t> out;
  out.reserve(rows.size() * width);
  for (int r : rows) {
    const auto begin = mask.begin() + static_cast<long>(static_cast<std::size_t>(r) * width);
    out.insert(out.end(), begin, begin + static_cast<long>(width));
  }
  return out;
}

std::unique_ptr<Seq2SeqModel> make_model(const ModelConfig& config, std::uint64_t seed) {
  const ModelConfig c = resolved(config);
  validate(c);
  Initializer init(seed);
  if (c.architecture == "rnn") return std::make_unique<RnnModel>(c, init);
  if (c.architecture == "transformer") return std::make_unique<TransformerModel>(c, init);
  return std::make_unique<CnnModel>(c, init);
}

}  // namespace nmt
