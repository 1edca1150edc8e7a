#include "nmt/rnn.hpp"

#include <cmath>

#include "nmt/errors.hpp"

namespace nmt {

namespace {

Var row_mask(std::span<const std::size_t> lengths, std::size_t t) {
  Tensor m(Shape{lengths.size()});
  for (std::size_t r = 0; r < lengths.size(); ++r) m[r] = t < lengths[r] ? 1.0 : 0.0;
  return constant(std::move(m));
}

Var one_minus(const Var& x) { return add_scalar(neg(x), 1.0); }

// Time-major [n, b] view of batch-major weights [b, n], with a trailing unit axis.
Var weights_time_major(const Var& weights) {
  const Shape& s = weights.shape();
  return reshape(permute(weights, {1, 0}), {s[1], s[0], 1});
}

}  // namespace

CellKind parse_cell_kind(const std::string& name) {
  if (name == "lstm") return CellKind::kLstm;
  if (name == "gru") return CellKind::kGru;
  throw ConfigError("rnn_cell: must be lstm or gru, got '" + name + "'");
}

RnnCell::RnnCell(ParameterStore& store, Initializer& init, const std::string& name, CellKind kind, std::size_t input,
                 std::size_t hidden, bool weight_norm)
    : kind_(kind), input_(input), hidden_(hidden) {
  const std::size_t gates = kind == CellKind::kLstm ? 4 : 3;
  input_proj_ = Linear(store, init, name + ".input", input, gates * hidden, true, weight_norm);
  if (kind == CellKind::kLstm) {
    state_proj_ = Linear(store, init, name + ".state", hidden, 4 * hidden, false, weight_norm);
    Tensor& bias = store.get(name + ".input.bias").mutable_value();
    for (std::size_t j = hidden; j < 2 * hidden; ++j) bias[j] = 1.0;
  } else {
    state_proj_ = Linear(store, init, name + ".state", hidden, 2 * hidden, false, weight_norm);
    candidate_proj_ = Linear(store, init, name + ".candidate", hidden, hidden, false, weight_norm);
  }
}

RnnState RnnCell::zero_state(std::size_t batch) const {
  RnnState s;
  s.hidden = constant(Tensor({batch, hidden_}));
  if (kind_ == CellKind::kLstm) s.cell = constant(Tensor({batch, hidden_}));
  return s;
}

RnnState RnnCell::step(const Var& x, const RnnState& state) const {
  if (x.value().rank() != 2 || x.shape()[1] != input_) {
    throw DimensionError("rnn cell expects input [b, " + std::to_string(input_) + "], got " + shape_string(x.shape()));
  }
  const std::size_t d = hidden_;
  const Var& h = state.hidden;
  if (kind_ == CellKind::kLstm) {
    const Var gates = add(input_proj_(x), state_proj_(h));
    const Var i = sigmoid(slice(gates, 1, 0, d));
    const Var f = sigmoid(slice(gates, 1, d, d));
    const Var g = tanh(slice(gates, 1, 2 * d, d));
    const Var o = sigmoid(slice(gates, 1, 3 * d, d));
    RnnState next;
    next.cell = add(mul(f, state.cell), mul(i, g));
    next.hidden = mul(o, tanh(next.cell));
    return next;
  }
  const Var xi = input_proj_(x);
  const Var hs = state_proj_(h);
  const Var z = sigmoid(add(slice(xi, 1, 0, d), slice(hs, 1, 0, d)));
  const Var r = sigmoid(add(slice(xi, 1, d, d), slice(hs, 1, d, d)));
  const Var n = tanh(add(slice(xi, 1, 2 * d, d), candidate_proj_(mul(r, h))));
  return {add(h, mul(z, sub(n, h))), {}};
}

Var blend_rows(const Var& next, const Var& state, const Var& mask) {
  return add(state, scale_rows(sub(next, state), mask));
}

RnnState blend_state(const RnnState& next, const RnnState& state, const Var& mask) {
  RnnState out;
  out.hidden = blend_rows(next.hidden, state.hidden, mask);
  if (next.cell.defined()) out.cell = blend_rows(next.cell, state.cell, mask);
  return out;
}

RnnEncoder::RnnEncoder(ParameterStore& store, Initializer& init, const std::string& name, CellKind kind,
                       std::size_t input, std::size_t output, std::size_t layers, bool weight_norm)
    : output_(output) {
  if (output % 2 != 0) throw ConfigError("model_size: must be even for the bidirectional encoder");
  forward_ = RnnCell(store, init, name + ".l0.forward", kind, input, output / 2, weight_norm);
  backward_ = RnnCell(store, init, name + ".l0.backward", kind, input, output / 2, weight_norm);
  for (std::size_t l = 1; l < layers; ++l) {
    upper_.emplace_back(store, init, name + ".l" + std::to_string(l), kind, output, output, weight_norm);
  }
}

Var RnnEncoder::operator()(const Var& embedded, std::span<const std::size_t> lengths) const {
  const std::size_t n = embedded.shape()[0], b = embedded.shape()[1], e = embedded.shape()[2];
  std::vector<Var> masks(n), inputs(n), fw(n), bw(n), layer(n);
  for (std::size_t t = 0; t < n; ++t) {
    masks[t] = row_mask(lengths, t);
    inputs[t] = reshape(slice(embedded, 0, t, 1), {b, e});
  }
  RnnState state = forward_.zero_state(b);
  for (std::size_t t = 0; t < n; ++t) {
    state = blend_state(forward_.step(inputs[t], state), state, masks[t]);
    fw[t] = state.hidden;
  }
  state = backward_.zero_state(b);
  for (std::size_t t = n; t-- > 0;) {
    state = blend_state(backward_.step(inputs[t], state), state, masks[t]);
    bw[t] = state.hidden;
  }
  for (std::size_t t = 0; t < n; ++t) layer[t] = concat({fw[t], bw[t]}, 1);
  for (const RnnCell& cell : upper_) {
    state = cell.zero_state(b);
    for (std::size_t t = 0; t < n; ++t) {
      state = blend_state(cell.step(layer[t], state), state, masks[t]);
      layer[t] = add(layer[t], state.hidden);
    }
  }
  std::vector<Var> rows(n);
  for (std::size_t t = 0; t < n; ++t) rows[t] = reshape(scale_rows(layer[t], masks[t]), {1, b, output_});
  return concat(rows, 0);
}

AttentionKind parse_attention_kind(const std::string& name) {
  if (name == "mlp") return AttentionKind::kMlp;
  if (name == "dot") return AttentionKind::kDot;
  if (name == "bilinear") return AttentionKind::kBilinear;
  if (name == "multihead") return AttentionKind::kMultiHead;
  if (name == "location") return AttentionKind::kLocation;
  throw ConfigError("rnn_attention: unknown attention type '" + name + "'");
}

AttentionMemory AttentionMemory::select(std::span<const int> rows) const {
  AttentionMemory out;
  out.batch = rows.size();
  out.length = length;
  out.states = select_along(states, 0, rows);
  out.states_tm = select_along(states_tm, 1, rows);
  // mlp keys are time-major, multihead keys batch-major
  out.keys = keys.defined() ? select_along(keys, keys.value().rank() == 3 ? 1 : 0, rows) : keys;
  out.values = select_along(values, 0, rows);
  out.mask = select_mask(mask, length, rows);
  return out;
}

AttentionResult attention_context(const Var& scores, const Var& states, const std::vector<std::uint8_t>& mask) {
  const std::size_t b = states.shape()[0], n = states.shape()[1], d = states.shape()[2];
  if (scores.shape() != Shape{b, n}) {
    throw DimensionError("attention scores " + shape_string(scores.shape()) + " do not match states " +
                         shape_string(states.shape()));
  }
  AttentionResult out;
  out.weights = softmax(scores, &mask);
  out.context = reshape(bmm(reshape(out.weights, {b, 1, n}), states), {b, d});
  return out;
}

RnnAttention::RnnAttention(ParameterStore& store, Initializer& init, const std::string& name, AttentionKind kind,
                           std::size_t query_size, std::size_t memory_size, std::size_t attention_size,
                           std::size_t heads, std::size_t coverage_size, std::size_t max_length, bool weight_norm)
    : kind_(kind), heads_(heads), attention_size_(attention_size), max_length_(max_length) {
  switch (kind) {
    case AttentionKind::kMlp:
      query_proj_ = Linear(store, init, name + ".query", query_size, attention_size, false, weight_norm);
      memory_proj_ = Linear(store, init, name + ".memory", memory_size, attention_size, false, weight_norm);
      if (coverage_size > 0) {
        coverage_proj_ = Linear(store, init, name + ".coverage", coverage_size, attention_size, false, weight_norm);
      }
      v_a_ = store.add(name + ".v", init.glorot(attention_size, 1));
      break;
    case AttentionKind::kDot:
      if (query_size != memory_size) {
        throw ConfigError("rnn_attention: dot attention needs equal query and memory sizes, got " +
                          std::to_string(query_size) + " and " + std::to_string(memory_size));
      }
      break;
    case AttentionKind::kBilinear:
      query_proj_ = Linear(store, init, name + ".bilinear", query_size, memory_size, false, weight_norm);
      break;
    case AttentionKind::kMultiHead:
      if (heads == 0 || attention_size % heads != 0) {
        throw ConfigError("rnn_attention_heads: must divide rnn_attention_size");
      }
      query_proj_ = Linear(store, init, name + ".query", query_size, attention_size, false, weight_norm);
      memory_proj_ = Linear(store, init, name + ".key", memory_size, attention_size, false, weight_norm);
      value_proj_ = Linear(store, init, name + ".value", memory_size, attention_size, false, weight_norm);
      output_proj_ = Linear(store, init, name + ".output", attention_size, memory_size, false, weight_norm);
      break;
    case AttentionKind::kLocation:
      query_proj_ = Linear(store, init, name + ".location", query_size, max_length, true, weight_norm);
      break;
  }
}

AttentionMemory RnnAttention::prepare(const Var& states_tm, const std::vector<std::uint8_t>& mask) const {
  AttentionMemory m;
  m.length = states_tm.shape()[0];
  m.batch = states_tm.shape()[1];
  if (mask.size() != m.batch * m.length) throw DimensionError("attention mask does not match encoder states");
  if (kind_ == AttentionKind::kLocation && m.length > max_length_) {
    throw LengthError("source length " + std::to_string(m.length) + " exceeds " + std::to_string(max_length_) +
                      " location attention positions");
  }
  m.states_tm = states_tm;
  m.states = permute(states_tm, {1, 0, 2});
  m.mask = mask;
  if (kind_ == AttentionKind::kMlp) m.keys = memory_proj_(states_tm);
  if (kind_ == AttentionKind::kMultiHead) {
    const std::size_t du = attention_size_ / heads_;
    const auto split = [&](const Var& x) {
      return permute(reshape(x, {m.batch, m.length, heads_, du}), {0, 2, 1, 3});
    };
    m.keys = split(memory_proj_(m.states));
    m.values = split(value_proj_(m.states));
  }
  return m;
}

Var RnnAttention::scores(const Var& query, const AttentionMemory& memory, const Var& coverage) const {
  const std::size_t b = memory.batch, n = memory.length;
  const auto dot_scores = [&](const Var& q) {
    return reshape(bmm(memory.states, reshape(q, {b, q.shape()[1], 1})), {b, n});
  };
  switch (kind_) {
    case AttentionKind::kMlp: {
      Var pre = add(memory.keys, query_proj_(query));
      if (coverage.defined()) pre = add(pre, coverage_proj_(coverage));
      return permute(reshape(matmul(tanh(pre), v_a_), {n, b}), {1, 0});
    }
    case AttentionKind::kDot:
      return dot_scores(query);
    case AttentionKind::kBilinear:
      return dot_scores(query_proj_(query));
    case AttentionKind::kLocation:
      return slice(query_proj_(query), 1, 0, n);
    case AttentionKind::kMultiHead: {
      const std::size_t du = attention_size_ / heads_;
      const Var q = reshape(query_proj_(query), {b, heads_, 1, du});
      const Var s = scale(bmm(q, memory.keys, false, true), 1.0 / std::sqrt(static_cast<double>(du)));
      const Var mean = constant(Tensor({heads_, 1}, 1.0 / static_cast<double>(heads_)));
      return reshape(matmul(permute(reshape(s, {b, heads_, n}), {0, 2, 1}), mean), {b, n});
    }
  }
  throw ContractError("unhandled attention kind");
}

AttentionResult RnnAttention::operator()(const Var& query, const AttentionMemory& memory, const Var& coverage) const {
  if (kind_ != AttentionKind::kMultiHead) return attention_context(scores(query, memory, coverage), memory.states, memory.mask);
  const std::size_t b = memory.batch, n = memory.length, du = attention_size_ / heads_;
  const Var q = reshape(query_proj_(query), {b, heads_, 1, du});
  const Var s = scale(bmm(q, memory.keys, false, true), 1.0 / std::sqrt(static_cast<double>(du)));
  std::vector<std::uint8_t> mask;
  mask.reserve(b * heads_ * n);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t h = 0; h < heads_; ++h)
      mask.insert(mask.end(), memory.mask.begin() + static_cast<long>(r * n),
                  memory.mask.begin() + static_cast<long>((r + 1) * n));
  const Var alpha = softmax(s, &mask);
  AttentionResult out;
  out.context = output_proj_(reshape(bmm(alpha, memory.values), {b, attention_size_}));
  const Var mean = constant(Tensor({heads_, 1}, 1.0 / static_cast<double>(heads_)));
  out.weights = reshape(matmul(permute(reshape(alpha, {b, heads_, n}), {0, 2, 1}), mean), {b, n});
  return out;
}

CoverageKind parse_coverage_kind(const std::string& name) {
  if (name == "none") return CoverageKind::kNone;
  if (name == "count") return CoverageKind::kCount;
  if (name == "gru") return CoverageKind::kGru;
  throw ConfigError("rnn_coverage: must be none, count or gru, got '" + name + "'");
}

Coverage::Coverage(ParameterStore& store, Initializer& init, const std::string& name, CoverageKind kind,
                   std::size_t size, std::size_t memory_size, std::size_t state_size)
    : kind_(kind), size_(kind == CoverageKind::kCount ? 1 : size) {
  if (kind != CoverageKind::kGru) return;
  input_proj_ = Linear(store, init, name + ".input", 1 + memory_size, 3 * size_, true);
  state_proj_ = Linear(store, init, name + ".state", state_size, 3 * size_, false);
  recurrent_proj_ = Linear(store, init, name + ".recurrent", size_, 2 * size_, false);
  candidate_proj_ = Linear(store, init, name + ".candidate", size_, size_, false);
}

Var Coverage::initial(std::size_t length, std::size_t batch) const { return constant(Tensor({length, batch, size_})); }

Var Coverage::update(const Var& coverage, const Var& weights, const Var& state, const AttentionMemory& memory) const {
  const Var alpha = weights_time_major(weights);
  if (kind_ == CoverageKind::kCount) return add(coverage, alpha);
  const std::size_t c = size_;
  const Var xi = add(input_proj_(concat({alpha, memory.states_tm}, 2)), state_proj_(state));
  const Var hs = recurrent_proj_(coverage);
  const Var z = sigmoid(add(slice(xi, 2, 0, c), slice(hs, 2, 0, c)));
  const Var r = sigmoid(add(slice(xi, 2, c, c), slice(hs, 2, c, c)));
  const Var n = tanh(add(slice(xi, 2, 2 * c, c), candidate_proj_(mul(r, coverage))));
  return add(coverage, mul(z, sub(n, coverage)));
}

ContextGate::ContextGate(ParameterStore& store, Initializer& init, const std::string& name, std::size_t embed_size,
                         std::size_t state_size, std::size_t context_size, bool weight_norm)
    : embed_proj_(store, init, name + ".embed", embed_size, state_size, false, weight_norm),
      state_proj_(store, init, name + ".state", state_size, state_size, false, weight_norm),
      context_proj_(store, init, name + ".context", context_size, state_size, false, weight_norm) {}

Var ContextGate::operator()(const Var& previous_embedding, const Var& previous_state, const Var& context) const {
  return sigmoid(add(add(embed_proj_(previous_embedding), state_proj_(previous_state)), context_proj_(context)));
}

std::unique_ptr<DecoderState> RnnDecoderState::select(std::span<const int> rows) const {
  auto out = std::make_unique<RnnDecoderState>();
  out->rows_ = rows.size();
  for (const RnnState& s : layers) out->layers.push_back({select_along(s.hidden, 0, rows), select_along(s.cell, 0, rows)});
  out->top = select_along(top, 0, rows);
  out->attentional = select_along(attentional, 0, rows);
  out->coverage = select_along(coverage, 1, rows);
  out->weights = select_along(weights, 0, rows);
  out->memory = memory.select(rows);
  return out;
}

std::optional<Tensor> RnnDecoderState::last_attention() const {
  if (!weights.defined()) return std::nullopt;
  return weights.value();
}

RnnModel::RnnModel(const ModelConfig& config, Initializer& init) : Seq2SeqModel(config, init) {
  const auto& c = config_;
  const std::size_t d = c.model_size, e = c.embed_size;
  const bool wn = c.weight_normalization;
  const CellKind cell = parse_cell_kind(c.rnn_cell);
  const CoverageKind coverage = parse_coverage_kind(c.rnn_coverage);
  encoder_ = RnnEncoder(params_, init, "encoder", cell, e, d, c.encoder_layers, wn);
  init_proj_ = Linear(params_, init, "decoder.init", d, d, true, wn);
  decoder_.emplace_back(params_, init, "decoder.l0", cell, e + d, d, wn);
  for (std::size_t l = 1; l < c.decoder_layers; ++l) {
    decoder_.emplace_back(params_, init, "decoder.l" + std::to_string(l), cell,
                          c.rnn_attention_in_first_layer ? 2 * d : d, d, wn);
  }
  const std::size_t coverage_size =
      coverage == CoverageKind::kNone ? 0 : (coverage == CoverageKind::kCount ? 1 : c.rnn_coverage_size);
  attention_ = RnnAttention(params_, init, "attention", parse_attention_kind(c.rnn_attention), d, d,
                            c.rnn_attention_size, c.rnn_attention_heads, coverage_size, c.max_positions, wn);
  if (coverage != CoverageKind::kNone) coverage_ = Coverage(params_, init, "coverage", coverage, c.rnn_coverage_size, d, d);
  if (c.rnn_context_gate) gate_ = ContextGate(params_, init, "gate", e, d, d, wn);
  attentional_proj_ = Linear(params_, init, "decoder.attentional", 2 * d, d, false, wn);
}

Var RnnModel::encode(const SourceBatch& sources, Mode mode, std::mt19937_64* rng) const {
  const std::size_t b = sources.size, n = sources.len;
  std::vector<int> ids(n * b);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t r = 0; r < b; ++r) ids[t * b + r] = sources.ids[r * n + t];
  Var x = reshape(embed(ids, source_embedding_), {n, b, config_.embed_size});
  if (rng != nullptr) x = dropout(x, config_.dropout, mode, *rng);
  return encoder_(x, sources.lengths);
}

RnnDecoderState RnnModel::initial_state(const Var& encoded, const SourceBatch& sources) const {
  RnnDecoderState state;
  const std::size_t b = sources.size, n = sources.len, d = config_.model_size;
  state.rows_ = b;
  state.memory = attention_.prepare(encoded, sources.mask);
  std::vector<int> last(b);
  for (std::size_t r = 0; r < b; ++r) last[r] = static_cast<int>(r * n + sources.lengths[r] - 1);
  const Var h_last = gather_rows(reshape(state.memory.states, {b * n, d}), last);
  const Var s0 = tanh(init_proj_(h_last));
  for (const RnnCell& cell : decoder_) {
    RnnState s = cell.zero_state(b);
    s.hidden = s0;
    state.layers.push_back(s);
  }
  state.top = s0;
  state.attentional = constant(Tensor({b, d}));
  if (coverage_.kind() != CoverageKind::kNone) state.coverage = coverage_.initial(n, b);
  return state;
}

Var RnnModel::decode_step(RnnDecoderState& state, const Var& embedding) const {
  if (state.layers.size() != decoder_.size() || !state.attentional.defined()) {
    throw ContractError("rnn decoder state is not initialized");
  }
  const bool first_layer_attention = config_.rnn_attention_in_first_layer;
  state.layers[0] = decoder_[0].step(concat({embedding, state.attentional}, 1), state.layers[0]);
  Var out = state.layers[0].hidden;
  AttentionResult att;
  if (first_layer_attention) att = attention_(out, state.memory, state.coverage);
  for (std::size_t l = 1; l < decoder_.size(); ++l) {
    const Var input = first_layer_attention ? concat({out, att.context}, 1) : out;
    state.layers[l] = decoder_[l].step(input, state.layers[l]);
    out = add(out, state.layers[l].hidden);
  }
  if (!first_layer_attention) att = attention_(out, state.memory, state.coverage);
  Var s = out, c = att.context;
  if (config_.rnn_context_gate) {
    const Var z = gate_(embedding, state.top, att.context);
    s = mul(z, out);
    c = mul(one_minus(z), att.context);
  }
  const Var attentional = tanh(attentional_proj_(concat({s, c}, 1)));
  if (state.coverage.defined()) state.coverage = coverage_.update(state.coverage, att.weights, out, state.memory);
  state.top = out;
  state.attentional = attentional;
  state.weights = att.weights;
  return attentional;
}

Var RnnModel::forward(const Batch& batch, Mode mode, std::mt19937_64& rng) const {
  const SourceBatch sources = SourceBatch::from(batch);
  RnnDecoderState state = initial_state(encode(sources, mode, &rng), sources);
  const std::size_t b = batch.size, m = batch.target_len, e = config_.embed_size, d = config_.model_size;
  const std::vector<int> inputs = decoder_inputs(batch);
  Var embedded = dropout(reshape(embed(inputs, target_embedding_), {b, m, e}), config_.dropout, mode, rng);
  embedded = permute(embedded, {1, 0, 2});
  std::vector<Var> outputs(m);
  for (std::size_t t = 0; t < m; ++t) {
    const Var s = decode_step(state, reshape(slice(embedded, 0, t, 1), {b, e}));
    outputs[t] = reshape(s, {b, 1, d});
  }
  return project_output(dropout(concat(outputs, 1), config_.dropout, mode, rng));
}

std::unique_ptr<DecoderState> RnnModel::start_decoding(const SourceBatch& sources) const {
  NoGradGuard guard;
  return std::make_unique<RnnDecoderState>(initial_state(encode(sources, Mode::kInfer, nullptr), sources));
}

Tensor RnnModel::step(DecoderState& state, std::span<const int> previous, const std::vector<int>* vocab_subset) const {
  NoGradGuard guard;
  auto& s = dynamic_cast<RnnDecoderState&>(state);
  if (previous.size() != s.rows()) throw DimensionError("one previous token per decoder row is required");
  return project_output_subset(decode_step(s, embed(previous, target_embedding_)), vocab_subset);
}

}  // namespace nmt
