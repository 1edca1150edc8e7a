#include "nmt/cnn.hpp"

#include "nmt/errors.hpp"

namespace nmt {

namespace {

Var mask_var(const std::vector<std::uint8_t>& mask, std::size_t b, std::size_t n) {
  Tensor t({b, n});
  for (std::size_t i = 0; i < mask.size(); ++i) t[i] = mask[i] ? 1.0 : 0.0;
  return constant(std::move(t));
}

}  // namespace

Var glu(const Var& h) {
  const std::size_t axis = h.value().rank() - 1, width = h.shape()[axis];
  if (width % 2 != 0) throw DimensionError("glu needs an even last dimension, got " + shape_string(h.shape()));
  return mul(slice(h, axis, 0, width / 2), sigmoid(slice(h, axis, width / 2, width / 2)));
}

Var centered_windows(const Var& h, std::size_t width) {
  const long half = static_cast<long>(width / 2);
  std::vector<Var> parts;
  for (long j = 0; j < static_cast<long>(width); ++j) parts.push_back(shift(h, 1, half - j));
  return parts.size() == 1 ? parts[0] : concat(parts, 2);
}

Var causal_windows(const Var& h, std::size_t width) {
  std::vector<Var> parts;
  for (long j = static_cast<long>(width) - 1; j >= 0; --j) parts.push_back(shift(h, 1, j));
  return parts.size() == 1 ? parts[0] : concat(parts, 2);
}

ConvEncoderLayer::ConvEncoderLayer(ParameterStore& store, Initializer& init, const std::string& name,
                                   std::size_t model_size, std::size_t width, bool weight_norm)
    : width_(width) {
  if (width % 2 == 0) throw ConfigError("cnn_kernel_width: encoder kernels must be odd, got " + std::to_string(width));
  conv_ = Linear(store, init, name + ".conv", width * model_size, 2 * model_size, true, weight_norm);
}

Var ConvEncoderLayer::operator()(const Var& h, const Var& mask) const {
  return scale_rows(add(glu(conv_(centered_windows(h, width_))), h), mask);
}

ConvDecoderLayer::ConvDecoderLayer(ParameterStore& store, Initializer& init, const std::string& name,
                                   std::size_t model_size, std::size_t width, bool weight_norm)
    : width_(width),
      model_size_(model_size),
      conv_(store, init, name + ".conv", width * model_size, 2 * model_size, true, weight_norm),
      attention_(store, init, name + ".attention", model_size, 1, weight_norm) {
  if (width == 0) throw ConfigError("cnn_kernel_width: must be positive");
}

Var ConvDecoderLayer::operator()(const Var& s, const Var& encoded, const AttentionMask& source_mask,
                                 Var* weights) const {
  const Var conv = glu(conv_(causal_windows(s, width_)));
  const Var context = attention_.attend(attention_.queries(conv), attention_.keys(encoded), attention_.values(encoded),
                                        source_mask, weights);
  return add(add(conv, context), s);
}

Var ConvDecoderLayer::step(const Var& window, const Var& keys, const Var& values, const AttentionMask& source_mask,
                           Var* weights) const {
  const std::size_t b = window.shape()[0];
  const Var conv = glu(conv_(reshape(window, {b, 1, width_ * model_size_})));
  const Var context = attention_.attend(attention_.queries(conv), keys, values, source_mask, weights);
  const Var current = slice(window, 1, width_ - 1, 1);
  return add(add(conv, context), current);
}

std::unique_ptr<DecoderState> CnnDecoderState::select(std::span<const int> rows) const {
  auto out = std::make_unique<CnnDecoderState>();
  out->rows_ = rows.size();
  out->source_len = source_len;
  out->position = position;
  out->source_mask = select_mask(source_mask, source_len, rows);
  for (const Var& w : windows) out->windows.push_back(select_along(w, 0, rows));
  for (const Var& k : keys) out->keys.push_back(select_along(k, 0, rows));
  for (const Var& v : values) out->values.push_back(select_along(v, 0, rows));
  out->weights = select_along(weights, 0, rows);
  return out;
}

std::optional<Tensor> CnnDecoderState::last_attention() const {
  if (!weights.defined()) return std::nullopt;
  return weights.value();
}

CnnModel::CnnModel(const ModelConfig& config, Initializer& init) : Seq2SeqModel(config, init) {
  const auto& c = config_;
  const std::size_t d = c.model_size;
  if (parse_positional_kind(c.positional_encoding) == PositionalKind::kFixed) {
    source_positions_ = target_positions_ = constant(sinusoidal_table(c.max_positions, d));
  } else {
    source_positions_ = params_.add("source_positions", init.glorot(c.max_positions, d));
    target_positions_ = params_.add("target_positions", init.glorot(c.max_positions, d));
  }
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    encoder_.emplace_back(params_, init, "encoder.l" + std::to_string(l), d, c.cnn_kernel_width,
                          c.weight_normalization);
  }
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    decoder_.emplace_back(params_, init, "decoder.l" + std::to_string(l), d, c.cnn_kernel_width,
                          c.weight_normalization);
  }
}

Var CnnModel::embed_with_positions(std::span<const int> ids, const Var& table, const Var& positions,
                                   std::size_t batch, std::size_t len, std::size_t offset) const {
  const std::size_t d = config_.model_size;
  if (offset + len > positions.shape()[0]) {
    throw LengthError("position " + std::to_string(offset + len - 1) + " exceeds the " +
                      std::to_string(positions.shape()[0]) + " available positions");
  }
  return add(reshape(embed(ids, table), {batch, len, d}), slice(positions, 0, offset, len));
}

Var CnnModel::encode(const SourceBatch& sources, const Regularization& reg) const {
  const Var mask = mask_var(sources.mask, sources.size, sources.len);
  Var h = embed_with_positions(sources.ids, source_embedding_, source_positions_, sources.size, sources.len);
  h = scale_rows(reg.apply(h), mask);
  for (const auto& layer : encoder_) h = layer(h, mask);
  return h;
}

Var CnnModel::decode(const Var& target, const Var& encoded, const std::vector<std::uint8_t>& source_mask,
                     Var* weights) const {
  const std::size_t b = target.shape()[0], m = target.shape()[1], n = encoded.shape()[1];
  const AttentionMask mask = key_padding_mask(source_mask, b, m, n);
  Var s = target;
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    Var alpha;
    s = decoder_[l](s, encoded, mask, &alpha);
    if (weights != nullptr && l + 1 == decoder_.size()) *weights = reshape(alpha, {b, m, n});
  }
  return s;
}

Var CnnModel::forward(const Batch& batch, Mode mode, std::mt19937_64& rng) const {
  const Regularization reg{config_.dropout, mode, &rng};
  const SourceBatch sources = SourceBatch::from(batch);
  const Var encoded = encode(sources, reg);
  const std::vector<int> inputs = decoder_inputs(batch);
  const Var target = embed_with_positions(inputs, target_embedding_, target_positions_, batch.size, batch.target_len);
  return project_output(reg.apply(decode(reg.apply(target), encoded, sources.mask)));
}

std::unique_ptr<DecoderState> CnnModel::start_decoding(const SourceBatch& sources) const {
  NoGradGuard guard;
  auto state = std::make_unique<CnnDecoderState>();
  const std::size_t b = sources.size, d = config_.model_size, k = config_.cnn_kernel_width;
  state->rows_ = b;
  state->source_len = sources.len;
  state->source_mask = sources.mask;
  const Var encoded = encode(sources, {});
  for (const auto& layer : decoder_) {
    if (k > 1) state->windows.push_back(constant(Tensor({b, k - 1, d})));
    state->keys.push_back(layer.attention().keys(encoded));
    state->values.push_back(layer.attention().values(encoded));
  }
  return state;
}

Tensor CnnModel::step(DecoderState& state, std::span<const int> previous, const std::vector<int>* vocab_subset) const {
  NoGradGuard guard;
  auto& s = dynamic_cast<CnnDecoderState&>(state);
  if (previous.size() != s.rows()) throw DimensionError("one previous token per decoder row is required");
  const std::size_t b = s.rows(), d = config_.model_size, k = config_.cnn_kernel_width;
  const AttentionMask mask = key_padding_mask(s.source_mask, b, 1, s.source_len);
  Var x = embed_with_positions(previous, target_embedding_, target_positions_, b, 1, s.position);
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const Var window = k > 1 ? concat({s.windows[l], x}, 1) : x;
    if (k > 1) s.windows[l] = slice(window, 1, 1, k - 1);
    Var alpha;
    x = decoder_[l].step(window, s.keys[l], s.values[l], mask, &alpha);
    if (l + 1 == decoder_.size()) s.weights = reshape(alpha, {b, s.source_len});
  }
  ++s.position;
  return project_output_subset(reshape(x, {b, d}), vocab_subset);
}

}  // namespace nmt
