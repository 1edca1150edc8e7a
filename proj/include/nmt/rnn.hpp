#pragma once

#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nmt/model.hpp"

namespace nmt {

enum class CellKind { kLstm, kGru };
CellKind parse_cell_kind(const std::string& name);

struct RnnState {
  Var hidden;  // [b, d]
  Var cell;    // LSTM only
};

// LSTM gates i, f, g, o (forget bias starts at 1). GRU gates z, r, n with
// h' = (1 - z) * h + z * tanh(x W_n + (r * h) U_n + b_n).
class RnnCell {
 public:
  RnnCell() = default;
  RnnCell(ParameterStore& store, Initializer& init, const std::string& name, CellKind kind, std::size_t input,
          std::size_t hidden, bool weight_norm = false);

  RnnState step(const Var& x, const RnnState& state) const;
  RnnState zero_state(std::size_t batch) const;
  CellKind kind() const { return kind_; }
  std::size_t input_size() const { return input_; }
  std::size_t hidden_size() const { return hidden_; }

 private:
  CellKind kind_ = CellKind::kLstm;
  std::size_t input_ = 0;
  std::size_t hidden_ = 0;
  Linear input_proj_;
  Linear state_proj_;
  Linear candidate_proj_;
};

// state' = state + mask * (next - state) per row; mask is [b].
Var blend_rows(const Var& next, const Var& state, const Var& mask);
RnnState blend_state(const RnnState& next, const RnnState& state, const Var& mask);

// Bidirectional first layer (each direction d/2 wide), residual unidirectional
// layers above. Input and output are time-major: [n, b, e] -> [n, b, d].
class RnnEncoder {
 public:
  RnnEncoder() = default;
  RnnEncoder(ParameterStore& store, Initializer& init, const std::string& name, CellKind kind, std::size_t input,
             std::size_t output, std::size_t layers, bool weight_norm = false);

  Var operator()(const Var& embedded, std::span<const std::size_t> lengths) const;
  std::size_t output_size() const { return output_; }

 private:
  std::size_t output_ = 0;
  RnnCell forward_;
  RnnCell backward_;
  std::vector<RnnCell> upper_;
};

enum class AttentionKind { kMlp, kDot, kBilinear, kMultiHead, kLocation };
AttentionKind parse_attention_kind(const std::string& name);

// Encoder states prepared for repeated attention queries.
struct AttentionMemory {
  std::size_t batch = 0;
  std::size_t length = 0;
  Var states;     // [b, n, d]
  Var states_tm;  // [n, b, d]
  Var keys;       // mlp: W_v h as [n, b, a]; multihead: [b, h, n, d_u]
  Var values;     // multihead: [b, h, n, d_u]
  std::vector<std::uint8_t> mask;  // [b x n]

  AttentionMemory select(std::span<const int> rows) const;
};

struct AttentionResult {
  Var weights;  // [b, n]
  Var context;  // [b, d]
};

// alpha = masked softmax(scores), c = sum_i alpha_i h_i. scores [b, n], states [b, n, d].
AttentionResult attention_context(const Var& scores, const Var& states, const std::vector<std::uint8_t>& mask);

class RnnAttention {
 public:
  RnnAttention() = default;
  RnnAttention(ParameterStore& store, Initializer& init, const std::string& name, AttentionKind kind,
               std::size_t query_size, std::size_t memory_size, std::size_t attention_size, std::size_t heads,
               std::size_t coverage_size, std::size_t max_length, bool weight_norm = false);

  AttentionMemory prepare(const Var& states_tm, const std::vector<std::uint8_t>& mask) const;
  // Scores [b, n]; multihead returns the head-averaged scaled scores.
  Var scores(const Var& query, const AttentionMemory& memory, const Var& coverage = {}) const;
  AttentionResult operator()(const Var& query, const AttentionMemory& memory, const Var& coverage = {}) const;
  AttentionKind kind() const { return kind_; }

 private:
  AttentionKind kind_ = AttentionKind::kMlp;
  std::size_t heads_ = 1;
  std::size_t attention_size_ = 0;
  std::size_t max_length_ = 0;
  Linear query_proj_;     // mlp W_u, bilinear W, multihead W^Q, location scorer
  Linear memory_proj_;    // mlp W_v, multihead W^K
  Linear value_proj_;     // multihead W^V
  Linear output_proj_;    // multihead W^O
  Linear coverage_proj_;  // mlp W_c
  Var v_a_;               // mlp [a, 1]
};

enum class CoverageKind { kNone, kCount, kGru };
CoverageKind parse_coverage_kind(const std::string& name);

// Per-source-position coverage, time-major [n, b, c] (c = 1 for count).
class Coverage {
 public:
  Coverage() = default;
  Coverage(ParameterStore& store, Initializer& init, const std::string& name, CoverageKind kind, std::size_t size,
           std::size_t memory_size, std::size_t state_size);

  Var initial(std::size_t length, std::size_t batch) const;
  Var update(const Var& coverage, const Var& weights, const Var& state, const AttentionMemory& memory) const;
  CoverageKind kind() const { return kind_; }
  std::size_t size() const { return size_; }

 private:
  CoverageKind kind_ = CoverageKind::kNone;
  std::size_t size_ = 0;
  Linear input_proj_;      // [alpha; h] -> 3c
  Linear state_proj_;      // s -> 3c
  Linear recurrent_proj_;  // cov -> 2c (z, r)
  Linear candidate_proj_;  // r * cov -> c
};

// z = sigmoid(W_z y_prev + U_z s_prev + C_z c).
class ContextGate {
 public:
  ContextGate() = default;
  ContextGate(ParameterStore& store, Initializer& init, const std::string& name, std::size_t embed_size,
              std::size_t state_size, std::size_t context_size, bool weight_norm = false);
  Var operator()(const Var& previous_embedding, const Var& previous_state, const Var& context) const;

 private:
  Linear embed_proj_;
  Linear state_proj_;
  Linear context_proj_;
};

class RnnDecoderState : public DecoderState {
 public:
  std::size_t rows() const override { return rows_; }
  std::unique_ptr<DecoderState> select(std::span<const int> rows) const override;
  std::optional<Tensor> last_attention() const override;

  std::size_t rows_ = 0;
  std::vector<RnnState> layers;
  Var top;          // s_{t-1}
  Var attentional;  // s-bar_{t-1}
  Var coverage;
  Var weights;      // alpha_{t-1}
  AttentionMemory memory;
};

class RnnModel : public Seq2SeqModel {
 public:
  RnnModel(const ModelConfig& config, Initializer& init);

  Var forward(const Batch& batch, Mode mode, std::mt19937_64& rng) const override;
  std::unique_ptr<DecoderState> start_decoding(const SourceBatch& sources) const override;
  Tensor step(DecoderState& state, std::span<const int> previous,
              const std::vector<int>* vocab_subset = nullptr) const override;
  bool exposes_attention() const override { return true; }

  // Encoder states, time-major [n, b, d].
  Var encode(const SourceBatch& sources, Mode mode, std::mt19937_64* rng) const;
  RnnDecoderState initial_state(const Var& encoded, const SourceBatch& sources) const;
  // Advances the state by one target embedding [b, e]; returns s-bar_t.
  Var decode_step(RnnDecoderState& state, const Var& embedding) const;

  const RnnAttention& attention() const { return attention_; }

 private:
  RnnEncoder encoder_;
  Linear init_proj_;
  std::vector<RnnCell> decoder_;
  RnnAttention attention_;
  Coverage coverage_;
  ContextGate gate_;
  Linear attentional_proj_;
};

}  // namespace nmt
