#include "nmt/transformer.hpp"

#include <cmath>

#include "nmt/errors.hpp"

namespace nmt {

namespace {

std::vector<std::uint8_t> expand_mask(const AttentionMask& mask, std::size_t batch, std::size_t heads,
                                      std::size_t queries, std::size_t keys) {
  if (mask.queries != queries || mask.keys != keys || (mask.batch != 1 && mask.batch != batch)) {
    throw DimensionError("attention mask [" + std::to_string(mask.batch) + "x" + std::to_string(mask.queries) + "x" +
                         std::to_string(mask.keys) + "] does not fit scores [" + std::to_string(batch) + "x" +
                         std::to_string(queries) + "x" + std::to_string(keys) + "]");
  }
  std::vector<std::uint8_t> out;
  out.reserve(batch * heads * queries * keys);
  const std::size_t block = queries * keys;
  for (std::size_t r = 0; r < batch; ++r) {
    const auto begin = mask.values.begin() + static_cast<long>((mask.batch == 1 ? 0 : r) * block);
    for (std::size_t h = 0; h < heads; ++h) out.insert(out.end(), begin, begin + static_cast<long>(block));
  }
  return out;
}

Var positions_slice(const Var& table, std::size_t offset, std::size_t len) {
  if (offset + len > table.shape()[0]) {
    throw LengthError("position " + std::to_string(offset + len - 1) + " exceeds the " +
                      std::to_string(table.shape()[0]) + " available positions");
  }
  return slice(table, 0, offset, len);
}

}  // namespace

AttentionMask causal_mask(std::size_t m) {
  AttentionMask mask{1, m, m, std::vector<std::uint8_t>(m * m, 0)};
  for (std::size_t t = 0; t < m; ++t)
    for (std::size_t u = 0; u <= t; ++u) mask.values[t * m + u] = 1;
  return mask;
}

AttentionMask key_padding_mask(const std::vector<std::uint8_t>& key_mask, std::size_t batch, std::size_t queries,
                               std::size_t keys) {
  AttentionMask mask{batch, queries, keys, {}};
  mask.values.reserve(batch * queries * keys);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t q = 0; q < queries; ++q)
      mask.values.insert(mask.values.end(), key_mask.begin() + static_cast<long>(r * keys),
                         key_mask.begin() + static_cast<long>((r + 1) * keys));
  return mask;
}

AttentionMask full_mask(std::size_t queries, std::size_t keys) {
  return {1, queries, keys, std::vector<std::uint8_t>(queries * keys, 1)};
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, Initializer& init, const std::string& name,
                                       std::size_t model_size, std::size_t heads, bool weight_norm)
    : model_size_(model_size), heads_(heads) {
  if (heads == 0 || model_size % heads != 0) {
    throw ConfigError("transformer_heads: " + std::to_string(heads) + " heads do not divide model size " +
                      std::to_string(model_size));
  }
  query_proj_ = Linear(store, init, name + ".query", model_size, model_size, false, weight_norm);
  key_proj_ = Linear(store, init, name + ".key", model_size, model_size, false, weight_norm);
  value_proj_ = Linear(store, init, name + ".value", model_size, model_size, false, weight_norm);
  output_proj_ = Linear(store, init, name + ".output", model_size, model_size, false, weight_norm);
}

Var MultiHeadAttention::split(const Var& x) const {
  const std::size_t b = x.shape()[0], len = x.shape()[1];
  return permute(reshape(x, {b, len, heads_, model_size_ / heads_}), {0, 2, 1, 3});
}

Var MultiHeadAttention::attend(const Var& q, const Var& k, const Var& v, const AttentionMask& mask,
                               Var* weights) const {
  const std::size_t b = q.shape()[0], nq = q.shape()[2], nk = k.shape()[2], du = model_size_ / heads_;
  const Var scores = scale(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(du)));
  const auto allowed = expand_mask(mask, b, heads_, nq, nk);
  const Var alpha = softmax(scores, &allowed);
  if (weights != nullptr) *weights = alpha;
  const Var context = reshape(permute(bmm(alpha, v), {0, 2, 1, 3}), {b, nq, model_size_});
  return output_proj_(context);
}

Var MultiHeadAttention::operator()(const Var& queries_in, const Var& keys_in, const Var& values_in,
                                   const AttentionMask& mask) const {
  return attend(queries(queries_in), keys(keys_in), values(values_in), mask);
}

FeedForward::FeedForward(ParameterStore& store, Initializer& init, const std::string& name, std::size_t model_size,
                         std::size_t hidden, bool weight_norm)
    : in_(store, init, name + ".in", model_size, hidden, true, weight_norm),
      out_(store, init, name + ".out", hidden, model_size, true, weight_norm) {}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::size_t size)
    : gain_(store.add(name + ".gain", Tensor(Shape{size}, 1.0))), bias_(store.add(name + ".bias", Tensor(Shape{size}))) {}

SublayerStructure parse_sublayer_structure(const std::string& name) {
  if (name == "post_norm") return SublayerStructure::kPostNorm;
  if (name == "pre_norm") return SublayerStructure::kPreNorm;
  throw ConfigError("transformer_structure: must be post_norm or pre_norm, got '" + name + "'");
}

Var sublayer_apply(const Var& x, const std::function<Var(const Var&)>& sublayer, const LayerNorm& norm,
                   SublayerStructure structure, const Regularization& reg) {
  const Var y = sublayer(structure == SublayerStructure::kPreNorm ? norm(x) : x);
  if (y.shape() != x.shape()) {
    throw ContractError("sublayer changed shape " + shape_string(x.shape()) + " to " + shape_string(y.shape()));
  }
  const Var sum = add(x, reg.apply(y));
  return structure == SublayerStructure::kPostNorm ? norm(sum) : sum;
}

TransformerEncoder::TransformerEncoder(ParameterStore& store, Initializer& init, const std::string& name,
                                       std::size_t model_size, std::size_t heads, std::size_t ffn_size,
                                       std::size_t layers, SublayerStructure structure, bool weight_norm)
    : structure_(structure) {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string p = name + ".l" + std::to_string(l);
    blocks_.push_back({MultiHeadAttention(store, init, p + ".self", model_size, heads, weight_norm),
                       FeedForward(store, init, p + ".ffn", model_size, ffn_size, weight_norm),
                       LayerNorm(store, p + ".norm_self", model_size), LayerNorm(store, p + ".norm_ffn", model_size)});
  }
  if (structure == SublayerStructure::kPreNorm) final_norm_ = LayerNorm(store, name + ".norm_final", model_size);
}

Var TransformerEncoder::operator()(const Var& input, const std::vector<std::uint8_t>& source_mask,
                                   const Regularization& reg) const {
  const std::size_t b = input.shape()[0], n = input.shape()[1];
  const AttentionMask mask = key_padding_mask(source_mask, b, n, n);
  Var h = input;
  for (const auto& block : blocks_) {
    h = sublayer_apply(h, [&](const Var& y) { return block.self_attention(y, y, y, mask); }, block.norm_attention,
                       structure_, reg);
    h = sublayer_apply(h, [&](const Var& y) { return block.feed_forward(y); }, block.norm_ffn, structure_, reg);
  }
  return structure_ == SublayerStructure::kPreNorm && !blocks_.empty() ? final_norm_(h) : h;
}

TransformerDecoder::TransformerDecoder(ParameterStore& store, Initializer& init, const std::string& name,
                                       std::size_t model_size, std::size_t heads, std::size_t ffn_size,
                                       std::size_t layers, SublayerStructure structure, bool weight_norm)
    : structure_(structure) {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string p = name + ".l" + std::to_string(l);
    blocks_.push_back({MultiHeadAttention(store, init, p + ".self", model_size, heads, weight_norm),
                       MultiHeadAttention(store, init, p + ".source", model_size, heads, weight_norm),
                       FeedForward(store, init, p + ".ffn", model_size, ffn_size, weight_norm),
                       LayerNorm(store, p + ".norm_self", model_size), LayerNorm(store, p + ".norm_source", model_size),
                       LayerNorm(store, p + ".norm_ffn", model_size)});
  }
  if (structure == SublayerStructure::kPreNorm) final_norm_ = LayerNorm(store, name + ".norm_final", model_size);
}

Var TransformerDecoder::operator()(const Var& target, const Var& encoded, const std::vector<std::uint8_t>& source_mask,
                                   const Regularization& reg) const {
  const std::size_t b = target.shape()[0], m = target.shape()[1], n = encoded.shape()[1];
  const AttentionMask self_mask = causal_mask(m);
  const AttentionMask source = key_padding_mask(source_mask, b, m, n);
  Var s = target;
  for (const auto& block : blocks_) {
    s = sublayer_apply(s, [&](const Var& y) { return block.self_attention(y, y, y, self_mask); }, block.norm_self,
                       structure_, reg);
    s = sublayer_apply(s, [&](const Var& y) { return block.source_attention(y, encoded, encoded, source); },
                       block.norm_source, structure_, reg);
    s = sublayer_apply(s, [&](const Var& y) { return block.feed_forward(y); }, block.norm_ffn, structure_, reg);
  }
  return structure_ == SublayerStructure::kPreNorm && !blocks_.empty() ? final_norm_(s) : s;
}

std::vector<TransformerBlockCache> TransformerDecoder::start(const Var& encoded) const {
  std::vector<TransformerBlockCache> caches(blocks_.size());
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    caches[i].source_keys = blocks_[i].source_attention.keys(encoded);
    caches[i].source_values = blocks_[i].source_attention.values(encoded);
  }
  return caches;
}

Var TransformerDecoder::step(const Var& input, std::vector<TransformerBlockCache>& caches,
                             const std::vector<std::uint8_t>& source_mask) const {
  if (caches.size() != blocks_.size()) throw ContractError("transformer decoder caches are not initialized");
  const std::size_t b = input.shape()[0];
  Var s = input;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& block = blocks_[i];
    auto& cache = caches[i];
    const std::size_t n = cache.source_keys.shape()[2];
    s = sublayer_apply(
        s,
        [&](const Var& y) {
          const Var k = block.self_attention.keys(y), v = block.self_attention.values(y);
          cache.self_keys = cache.self_keys.defined() ? concat({cache.self_keys, k}, 2) : k;
          cache.self_values = cache.self_values.defined() ? concat({cache.self_values, v}, 2) : v;
          return block.self_attention.attend(block.self_attention.queries(y), cache.self_keys, cache.self_values,
                                             full_mask(1, cache.self_keys.shape()[2]));
        },
        block.norm_self, structure_, {});
    s = sublayer_apply(
        s,
        [&](const Var& y) {
          return block.source_attention.attend(block.source_attention.queries(y), cache.source_keys,
                                               cache.source_values, key_padding_mask(source_mask, b, 1, n));
        },
        block.norm_source, structure_, {});
    s = sublayer_apply(s, [&](const Var& y) { return block.feed_forward(y); }, block.norm_ffn, structure_, {});
  }
  return structure_ == SublayerStructure::kPreNorm && !blocks_.empty() ? final_norm_(s) : s;
}

std::unique_ptr<DecoderState> TransformerDecoderState::select(std::span<const int> rows) const {
  auto out = std::make_unique<TransformerDecoderState>();
  out->rows_ = rows.size();
  out->source_len = source_len;
  out->position = position;
  out->source_mask = select_mask(source_mask, source_len, rows);
  for (const auto& c : caches) {
    out->caches.push_back({select_along(c.self_keys, 0, rows), select_along(c.self_values, 0, rows),
                           select_along(c.source_keys, 0, rows), select_along(c.source_values, 0, rows)});
  }
  return out;
}

TransformerModel::TransformerModel(const ModelConfig& config, Initializer& init) : Seq2SeqModel(config, init) {
  const auto& c = config_;
  const std::size_t d = c.model_size;
  const SublayerStructure structure = parse_sublayer_structure(c.transformer_structure);
  if (parse_positional_kind(c.positional_encoding) == PositionalKind::kFixed) {
    source_positions_ = target_positions_ = constant(sinusoidal_table(c.max_positions, d));
  } else {
    source_positions_ = params_.add("source_positions", init.glorot(c.max_positions, d));
    target_positions_ = params_.add("target_positions", init.glorot(c.max_positions, d));
  }
  encoder_ = TransformerEncoder(params_, init, "encoder", d, c.transformer_heads, c.transformer_ffn_size,
                                c.encoder_layers, structure, c.weight_normalization);
  decoder_ = TransformerDecoder(params_, init, "decoder", d, c.transformer_heads, c.transformer_ffn_size,
                                c.decoder_layers, structure, c.weight_normalization);
}

Var TransformerModel::embed_with_positions(std::span<const int> ids, const Var& table, const Var& positions,
                                           std::size_t batch, std::size_t len, std::size_t offset) const {
  const std::size_t d = config_.model_size;
  const Var x = reshape(embed(ids, table, std::sqrt(static_cast<double>(d))), {batch, len, d});
  return add(x, positions_slice(positions, offset, len));
}

Var TransformerModel::encode(const SourceBatch& sources, const Regularization& reg) const {
  const Var x = embed_with_positions(sources.ids, source_embedding_, source_positions_, sources.size, sources.len);
  return encoder_(reg.apply(x), sources.mask, reg);
}

Var TransformerModel::forward(const Batch& batch, Mode mode, std::mt19937_64& rng) const {
  const Regularization reg{config_.dropout, mode, &rng};
  const SourceBatch sources = SourceBatch::from(batch);
  const Var encoded = encode(sources, reg);
  const std::vector<int> inputs = decoder_inputs(batch);
  const Var target = embed_with_positions(inputs, target_embedding_, target_positions_, batch.size, batch.target_len);
  return project_output(decoder_(reg.apply(target), encoded, sources.mask, reg));
}

std::unique_ptr<DecoderState> TransformerModel::start_decoding(const SourceBatch& sources) const {
  NoGradGuard guard;
  auto state = std::make_unique<TransformerDecoderState>();
  state->rows_ = sources.size;
  state->source_len = sources.len;
  state->source_mask = sources.mask;
  state->caches = decoder_.start(encode(sources, {}));
  return state;
}

Tensor TransformerModel::step(DecoderState& state, std::span<const int> previous,
                              const std::vector<int>* vocab_subset) const {
  NoGradGuard guard;
  auto& s = dynamic_cast<TransformerDecoderState&>(state);
  if (previous.size() != s.rows()) throw DimensionError("one previous token per decoder row is required");
  const std::size_t rows = s.rows(), d = config_.model_size;
  const Var x = embed_with_positions(previous, target_embedding_, target_positions_, rows, 1, s.position);
  const Var out = decoder_.step(x, s.caches, s.source_mask);
  ++s.position;
  return project_output_subset(reshape(out, {rows, d}), vocab_subset);
}

}  // namespace nmt
