#include "nmt/config.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <type_traits>

#include "nmt/errors.hpp"

namespace nmt {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

template <typename T>
T parse_text(const std::string& key, const std::string& text) {
  const auto fail = [&]() -> T { throw ConfigError(key + ": cannot parse '" + text + "'"); };
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text.empty() || text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    return fail();
  } else {
    std::size_t used = 0;
    try {
      if constexpr (std::is_floating_point_v<T>) {
        const T v = static_cast<T>(std::stod(text, &used));
        if (used == text.size()) return v;
      } else {
        if (!text.empty() && text.front() != '-') {
          const auto v = std::stoull(text, &used);
          if (used == text.size() && v <= std::numeric_limits<T>::max()) return static_cast<T>(v);
        }
      }
    } catch (const std::exception&) {
    }
    return fail();
  }
}

template <typename T>
T from_value(const std::string& key, const json& value) {
  const auto fail = [&]() -> T { throw ConfigError(key + ": expected " + [] {
                                  if constexpr (std::is_same_v<T, std::string>) return "a string";
                                  else if constexpr (std::is_same_v<T, bool>) return "true or false";
                                  else if constexpr (std::is_floating_point_v<T>) return "a number";
                                  else return "a nonnegative integer";
                                }() + ", got " + value.dump()); };
  if constexpr (std::is_same_v<T, std::string>) {
    return value.is_string() ? value.get<std::string>() : fail();
  } else if constexpr (std::is_same_v<T, bool>) {
    return value.is_boolean() ? value.get<bool>() : fail();
  } else if constexpr (std::is_floating_point_v<T>) {
    return value.is_number() ? value.get<T>() : fail();
  } else {
    return value.is_number_unsigned() ? value.get<T>() : fail();
  }
}

std::string flag_of(const std::string& key) {
  std::string flag = "--" + key;
  std::replace(flag.begin(), flag.end(), '_', '-');
  return flag;
}

template <typename T, typename Access>
ConfigField field(std::string key, std::string help, Access access) {
  ConfigField f;
  f.flag = flag_of(key);
  f.key = key;
  f.help = std::move(help);
  f.get = [access](const RunConfig& c) { return json(access(const_cast<RunConfig&>(c))); };
  f.set = [access, key](RunConfig& c, const json& v) { access(c) = from_value<T>(key, v); };
  f.set_text = [access, key](RunConfig& c, const std::string& text) { access(c) = parse_text<T>(key, text); };
  return f;
}

#define NMT_FIELD(type, key, member, help) \
  field<type>(key, help, [](RunConfig& c) -> type& { return c.member; })

std::vector<ConfigField> build_fields() {
  using std::size_t;
  using std::string;
  using u64 = std::uint64_t;
  return {
      // data and vocabularies
      NMT_FIELD(string, "train_source", train_source, "training source file"),
      NMT_FIELD(string, "train_target", train_target, "training target file"),
      NMT_FIELD(string, "validation_source", validation_source, "validation source file"),
      NMT_FIELD(string, "validation_target", validation_target, "validation target file"),
      NMT_FIELD(string, "output", output, "model directory"),
      NMT_FIELD(string, "source_vocab", source_vocab, "prebuilt source vocabulary"),
      NMT_FIELD(string, "target_vocab", target_vocab, "prebuilt target vocabulary"),
      NMT_FIELD(bool, "joint_vocab", joint_vocab, "one vocabulary built over both sides"),
      NMT_FIELD(size_t, "vocab_max_size", vocab_max_size, "vocabulary size cap including specials (0: none)"),
      NMT_FIELD(size_t, "vocab_min_count", vocab_min_count, "minimum token frequency"),
      // model
      NMT_FIELD(string, "architecture", model.architecture, "rnn | transformer | cnn"),
      NMT_FIELD(size_t, "source_vocab_size", model.source_vocab_size, "set from the source vocabulary"),
      NMT_FIELD(size_t, "target_vocab_size", model.target_vocab_size, "set from the target vocabulary"),
      NMT_FIELD(size_t, "embed_size", model.embed_size, "embedding width"),
      NMT_FIELD(size_t, "model_size", model.model_size, "hidden width"),
      NMT_FIELD(size_t, "encoder_layers", model.encoder_layers, "0: architecture default"),
      NMT_FIELD(size_t, "decoder_layers", model.decoder_layers, "0: architecture default"),
      NMT_FIELD(double, "dropout", model.dropout, "dropout probability"),
      NMT_FIELD(bool, "tie_source_target_embeddings", model.tie_source_target_embeddings,
                "share source and target embeddings (needs a joint vocabulary)"),
      NMT_FIELD(bool, "tie_output_embeddings", model.tie_output_embeddings, "output layer reuses target embeddings"),
      NMT_FIELD(bool, "weight_normalization", model.weight_normalization, "weight-normalized projections"),
      NMT_FIELD(string, "positional_encoding", model.positional_encoding, "fixed | learned (empty: default)"),
      NMT_FIELD(size_t, "max_positions", model.max_positions, "longest sequence the position tables cover"),
      NMT_FIELD(string, "rnn_cell", model.rnn_cell, "lstm | gru"),
      NMT_FIELD(string, "rnn_attention", model.rnn_attention, "mlp | dot | bilinear | multihead | location"),
      NMT_FIELD(size_t, "rnn_attention_size", model.rnn_attention_size, "0: model_size"),
      NMT_FIELD(size_t, "rnn_attention_heads", model.rnn_attention_heads, "heads for multihead attention"),
      NMT_FIELD(string, "rnn_coverage", model.rnn_coverage, "none | count | gru"),
      NMT_FIELD(size_t, "rnn_coverage_size", model.rnn_coverage_size, "coverage vector width"),
      NMT_FIELD(bool, "rnn_context_gate", model.rnn_context_gate, "gate source context against decoder state"),
      NMT_FIELD(bool, "rnn_attention_in_first_layer", model.rnn_attention_in_first_layer,
                "feed attention from the first decoder layer"),
      NMT_FIELD(size_t, "transformer_heads", model.transformer_heads, "attention heads"),
      NMT_FIELD(size_t, "transformer_ffn_size", model.transformer_ffn_size, "0: 4 * model_size"),
      NMT_FIELD(string, "transformer_structure", model.transformer_structure, "post_norm | pre_norm"),
      NMT_FIELD(size_t, "cnn_kernel_width", model.cnn_kernel_width, "odd convolution width"),
      // optimization
      NMT_FIELD(string, "optimizer", training.optimizer.kind, "sgd | adam | eve"),
      NMT_FIELD(double, "learning_rate", training.optimizer.learning_rate, "initial learning rate"),
      NMT_FIELD(double, "beta1", training.optimizer.beta1, "first-moment decay"),
      NMT_FIELD(double, "beta2", training.optimizer.beta2, "second-moment decay"),
      NMT_FIELD(double, "beta3", training.optimizer.beta3, "Eve smoothing of d"),
      NMT_FIELD(double, "eve_clip", training.optimizer.eve_clip, "Eve clip constant c"),
      NMT_FIELD(double, "epsilon", training.optimizer.epsilon, "optimizer epsilon"),
      NMT_FIELD(bool, "eve_fixed_d", training.optimizer.eve_fixed_d, "pin Eve's d to 1"),
      NMT_FIELD(string, "clip_mode", training.clip_mode, "none | norm | absolute"),
      NMT_FIELD(double, "clip_threshold", training.clip_threshold, "gradient clipping threshold"),
      NMT_FIELD(double, "label_smoothing", training.label_smoothing, "label smoothing epsilon"),
      NMT_FIELD(size_t, "word_budget", training.batching.word_budget, "target tokens per batch"),
      NMT_FIELD(size_t, "bucket_width", training.batching.bucket_width, "length bucket width"),
      NMT_FIELD(size_t, "max_train_length", training.batching.max_length, "longer training pairs are dropped"),
      NMT_FIELD(string, "scheduler", training.scheduler, "plateau_reduce | fixed_step"),
      NMT_FIELD(double, "plateau_factor", training.plateau_factor, "rate multiplier on a plateau"),
      NMT_FIELD(u64, "plateau_patience", training.plateau_patience, "stalled checkpoints before a reduction"),
      NMT_FIELD(bool, "reset_to_best", training.reset_to_best, "restore the best checkpoint on each reduction"),
      NMT_FIELD(string, "fixed_schedule", training.fixed_schedule, "rate:updates,... for fixed_step"),
      NMT_FIELD(u64, "stop_patience", training.stopping.patience, "stalled checkpoints before stopping"),
      NMT_FIELD(u64, "min_updates", training.stopping.min_updates, "no early stop before this many updates"),
      NMT_FIELD(u64, "max_updates", training.stopping.max_updates, "0: unbounded"),
      NMT_FIELD(u64, "min_epochs", training.stopping.min_epochs, "no early stop before this many epochs"),
      NMT_FIELD(u64, "max_epochs", training.stopping.max_epochs, "0: unbounded"),
      NMT_FIELD(string, "metric", training.metric, "perplexity | accuracy | bleu"),
      NMT_FIELD(u64, "checkpoint_interval", training.checkpoint_interval, "updates between checkpoints"),
      NMT_FIELD(bool, "monitor_bleu", training.monitor_bleu, "report approximate validation BLEU"),
      NMT_FIELD(bool, "metrics_wallclock", training.metrics_wallclock, "record elapsed seconds in metrics"),
      NMT_FIELD(u64, "seed", training.seed, "random seed"),
      NMT_FIELD(size_t, "max_output_factor", training.max_output_factor, "validation decoding length factor"),
      NMT_FIELD(u64, "stop_after_updates", training.stop_after_updates,
                "leave after this many updates without a final checkpoint"),
  };
}

#undef NMT_FIELD

}  // namespace

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = build_fields();
  return fields;
}

json to_json(const RunConfig& config) {
  json out = json::object();
  for (const auto& f : config_fields()) out[f.key] = f.get(config);
  return out;
}

RunConfig from_json(const json& in, RunConfig base) {
  if (!in.is_object()) throw ConfigError("configuration must be a JSON object");
  for (const auto& [key, value] : in.items()) {
    const auto& fields = config_fields();
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const ConfigField& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError(key + ": unknown configuration field");
    it->set(base, value);
  }
  return base;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read configuration " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return from_json(j);
}

void save_run_config(const RunConfig& config, const fs::path& path) {
  write_file_atomic(path, to_json(config).dump(2) + "\n");
}

LoadedModel load_model(const fs::path& directory) {
  LoadedModel out;
  const fs::path config_path = directory / "config.json";
  if (!fs::exists(config_path)) throw FormatError(config_path.string() + ": missing");
  out.config = load_run_config(config_path);
  out.source_vocab = Vocabulary::load((directory / "vocab.src").string());
  out.target_vocab = Vocabulary::load((directory / "vocab.trg").string());
  const ModelConfig model = resolved(out.config.model);
  validate(model);
  if (model.source_vocab_size != out.source_vocab.size() || model.target_vocab_size != out.target_vocab.size())
    throw FormatError(directory.string() + ": vocabulary sizes disagree with config.json");
  out.model = make_model(model, out.config.training.seed);
  const fs::path params = directory / ("params." + std::to_string(best_checkpoint(directory)));
  out.model->parameters().assign(load_tensors(params));
  return out;
}

}  // namespace nmt
