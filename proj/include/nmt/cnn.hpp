#pragma once

#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nmt/model.hpp"
#include "nmt/transformer.hpp"

namespace nmt {

// h_A * sigmoid(h_B) over the two halves of the last axis.
Var glu(const Var& h);

// Rows of the zero-padded window [h_{i-k/2}; ...; h_{i+k/2}] for every position: [b, n, k*d].
Var centered_windows(const Var& h, std::size_t width);
// Causal window [h_{t-k+1}; ...; h_t]: [b, m, k*d].
Var causal_windows(const Var& h, std::size_t width);

class ConvEncoderLayer {
 public:
  ConvEncoderLayer() = default;
  ConvEncoderLayer(ParameterStore& store, Initializer& init, const std::string& name, std::size_t model_size,
                   std::size_t width, bool weight_norm = false);
  // h [b, n, d] with positions beyond each length already zero; the result is
  // zeroed there too. `mask` is [b, n].
  Var operator()(const Var& h, const Var& mask) const;

 private:
  std::size_t width_ = 3;
  Linear conv_;
};

class ConvDecoderLayer {
 public:
  ConvDecoderLayer() = default;
  ConvDecoderLayer(ParameterStore& store, Initializer& init, const std::string& name, std::size_t model_size,
                   std::size_t width, bool weight_norm = false);

  // Teacher-forced over s [b, m, d]; `weights` receives attention [b, 1, m, n].
  Var operator()(const Var& s, const Var& encoded, const AttentionMask& source_mask, Var* weights = nullptr) const;
  // One position given the window [b, k, d] ending at it and projected source keys/values.
  Var step(const Var& window, const Var& keys, const Var& values, const AttentionMask& source_mask,
           Var* weights = nullptr) const;

  const MultiHeadAttention& attention() const { return attention_; }
  std::size_t width() const { return width_; }

 private:
  std::size_t width_ = 3;
  std::size_t model_size_ = 0;
  Linear conv_;
  MultiHeadAttention attention_;
};

class CnnDecoderState : public DecoderState {
 public:
  std::size_t rows() const override { return rows_; }
  std::unique_ptr<DecoderState> select(std::span<const int> rows) const override;
  std::optional<Tensor> last_attention() const override;

  std::size_t rows_ = 0;
  std::size_t source_len = 0;
  std::size_t position = 0;
  std::vector<std::uint8_t> source_mask;
  std::vector<Var> windows;  // per layer, the last k-1 inputs [b, k-1, d]
  std::vector<Var> keys;
  std::vector<Var> values;
  Var weights;  // [b, n], last layer
};

class CnnModel : public Seq2SeqModel {
 public:
  CnnModel(const ModelConfig& config, Initializer& init);

  Var forward(const Batch& batch, Mode mode, std::mt19937_64& rng) const override;
  std::unique_ptr<DecoderState> start_decoding(const SourceBatch& sources) const override;
  Tensor step(DecoderState& state, std::span<const int> previous,
              const std::vector<int>* vocab_subset = nullptr) const override;
  bool exposes_attention() const override { return true; }

  Var encode(const SourceBatch& sources, const Regularization& reg) const;
  // Decoder stack over embedded targets [b, m, d]; `weights` receives last-layer attention [b, m, n].
  Var decode(const Var& target, const Var& encoded, const std::vector<std::uint8_t>& source_mask,
             Var* weights = nullptr) const;

 private:
  Var embed_with_positions(std::span<const int> ids, const Var& table, const Var& positions, std::size_t batch,
                           std::size_t len, std::size_t offset = 0) const;

  Var source_positions_;
  Var target_positions_;
  std::vector<ConvEncoderLayer> encoder_;
  std::vector<ConvDecoderLayer> decoder_;
};

}  // namespace nmt
