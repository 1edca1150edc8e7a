#include "nmt/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nmt/bleu.hpp"
#include "nmt/errors.hpp"
#include "nmt/inference.hpp"

namespace nmt {

static_assert(std::endian::native == std::endian::little, "tensor files are written in host byte order");

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kParamsMagic[4] = {'N', 'M', 'T', 'P'};
constexpr char kStateMagic[4] = {'N', 'M', 'T', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string file) : bytes_(bytes), file_(std::move(file)) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }
  std::string get_string(std::size_t n) { return {take(n), n}; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  const char* take(std::size_t n) {
    if (n > remaining()) throw FormatError(file_ + ": truncated file");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  const std::string& bytes_;
  std::string file_;
  std::size_t pos_ = 0;
};

std::string encode_tensors(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::string out;
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.storage().data()), t.size() * sizeof(double));
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> decode_tensors(Reader& in, const std::string& file) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name = in.get_string(name_len);
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw FormatError(file + ": implausible rank for tensor " + name);
    Shape shape(rank);
    std::size_t size = 1;
    for (auto& d : shape) {
      d = in.get<std::uint64_t>();
      size *= d;
    }
    if (size * sizeof(double) > in.remaining()) throw FormatError(file + ": truncated file");
    std::vector<double> values(size);
    const std::string raw = in.get_string(size * sizeof(double));
    std::memcpy(values.data(), raw.data(), raw.size());
    tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return tensors;
}

void check_header(Reader& in, const char (&magic)[4], const std::string& file) {
  if (in.remaining() < 8 || in.get_string(4) != std::string(magic, 4)) throw FormatError(file + ": bad magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw VersionError(file + ": format version " + std::to_string(version) + ", expected " +
                       std::to_string(kFormatVersion));
  }
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

std::uint64_t read_index_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": expected a checkpoint index");
  }
}

fs::path params_path(const fs::path& dir, std::uint64_t k) { return dir / ("params." + std::to_string(k)); }
fs::path state_path(const fs::path& dir, std::uint64_t k) { return dir / ("state." + std::to_string(k)); }

}  // namespace

// --- optimizers ----------------------------------------------------------------

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "eve") return OptimizerKind::kEve;
  throw ConfigError("optimizer: expected sgd, adam or eve, got '" + name + "'");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(std::move(config)), kind_(parse_optimizer_kind(config_.kind)) {}

void Optimizer::update_eve_d(double objective) {
  if (config_.eve_fixed_d) {
    state_.eve_d = 1.0;
    return;
  }
  if (!state_.best_objective) {
    state_.eve_d = 1.0;
    state_.best_objective = objective;
    return;
  }
  const double best = *state_.best_objective;
  const double denom = std::max(std::min(std::abs(objective), std::abs(best)), 1e-12);
  const double c = config_.eve_clip;
  const double change = std::clamp(std::abs(objective - best) / denom, 1.0 / c, c);
  state_.eve_d = config_.beta3 * state_.eve_d + (1.0 - config_.beta3) * change;
  state_.best_objective = std::min(best, objective);
}

void Optimizer::step(ParameterStore& params, const GradientMap& grads, double learning_rate, double objective) {
  for (const auto& [name, g] : grads) {
    for (double x : g.storage())
      if (!std::isfinite(x)) throw NumericalError("non-finite gradient for " + name + "; update skipped");
  }
  if (kind_ == OptimizerKind::kEve && !std::isfinite(objective))
    throw NumericalError("non-finite objective; update skipped");

  ++state_.step;
  if (kind_ == OptimizerKind::kEve) update_eve_d(objective);
  const double d = kind_ == OptimizerKind::kEve ? state_.eve_d : 1.0;
  const double t = static_cast<double>(state_.step);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);

  for (const auto& [name, var] : params.entries()) {
    const auto it = grads.find(name);
    if (it == grads.end()) continue;
    const auto& g = it->second.storage();
    Var p = var;
    auto& theta = p.mutable_value().storage();
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= learning_rate * g[i];
      continue;
    }
    auto [m_it, m_new] = state_.first_moment.try_emplace(name, Tensor(var.shape()));
    auto [v_it, v_new] = state_.second_moment.try_emplace(name, Tensor(var.shape()));
    auto& m = m_it->second.storage();
    auto& v = v_it->second.storage();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      theta[i] -= learning_rate * m_hat / (d * std::sqrt(v_hat) + config_.epsilon);
    }
  }
}

// --- clipping ------------------------------------------------------------------

ClipMode parse_clip_mode(const std::string& name) {
  if (name == "none" || name.empty()) return ClipMode::kNone;
  if (name == "norm") return ClipMode::kNorm;
  if (name == "absolute") return ClipMode::kAbsolute;
  throw ConfigError("clip_mode: expected none, norm or absolute, got '" + name + "'");
}

double global_norm(const GradientMap& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double x : g.storage()) sq += x * x;
  return std::sqrt(sq);
}

void clip_gradients(GradientMap& grads, ClipMode mode, double threshold) {
  if (mode == ClipMode::kNone) return;
  if (!(threshold > 0.0)) throw ConfigError("clip_threshold: must be positive");
  if (mode == ClipMode::kAbsolute) {
    for (auto& [name, g] : grads)
      for (double& x : g.storage()) x = std::clamp(x, -threshold, threshold);
    return;
  }
  const double norm = global_norm(grads);
  if (norm <= threshold) return;
  const double factor = threshold / norm;
  for (auto& [name, g] : grads)
    for (double& x : g.storage()) x *= factor;
}

// --- schedules -----------------------------------------------------------------

MetricKind parse_metric_kind(const std::string& name) {
  if (name == "perplexity") return MetricKind::kPerplexity;
  if (name == "accuracy") return MetricKind::kAccuracy;
  if (name == "bleu") return MetricKind::kBleu;
  throw ConfigError("metric: expected perplexity, accuracy or bleu, got '" + name + "'");
}

std::string metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::kPerplexity: return "perplexity";
    case MetricKind::kAccuracy: return "accuracy";
    case MetricKind::kBleu: return "bleu";
  }
  return "";
}

bool improves(MetricKind kind, double candidate, double best) {
  return kind == MetricKind::kPerplexity ? candidate < best : candidate > best;
}

PlateauAction PlateauScheduler::on_checkpoint(std::uint64_t checkpoint, double value) {
  PlateauAction action;
  if (!state_.best || improves(metric_, value, *state_.best)) {
    state_.best = value;
    state_.best_checkpoint = checkpoint;
    state_.stalls = 0;
    action.improved = true;
    return action;
  }
  if (++state_.stalls >= patience_) {
    state_.multiplier *= factor_;
    state_.stalls = 0;
    action.reduced = true;
    action.reset_to_best = reset_;
  }
  return action;
}

double FixedStepSchedule::rate_at(std::uint64_t update) const {
  if (intervals.empty()) throw ConfigError("fixed_schedule: no intervals");
  std::uint64_t end = 0;
  for (const auto& [rate, duration] : intervals) {
    end += duration;
    if (update < end) return rate;
  }
  return intervals.back().first;
}

FixedStepSchedule parse_fixed_schedule(const std::string& text) {
  FixedStepSchedule schedule;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto colon = item.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(item);
      schedule.intervals.emplace_back(std::stod(item.substr(0, colon)), std::stoull(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw ConfigError("fixed_schedule: expected rate:updates pairs, got '" + item + "'");
    }
  }
  if (schedule.intervals.empty()) throw ConfigError("fixed_schedule: no intervals");
  return schedule;
}

std::string format_fixed_schedule(const FixedStepSchedule& schedule) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < schedule.intervals.size(); ++i)
    out << (i ? "," : "") << schedule.intervals[i].first << ':' << schedule.intervals[i].second;
  return out.str();
}

bool StoppingCriterion::record(double value) {
  if (!state_.best || improves(metric_, value, *state_.best)) {
    state_.best = value;
    state_.streak = 0;
    return true;
  }
  ++state_.streak;
  return false;
}

bool StoppingCriterion::bound_reached(std::uint64_t updates, std::uint64_t epochs) const {
  return (config_.max_updates > 0 && updates >= config_.max_updates) ||
         (config_.max_epochs > 0 && epochs >= config_.max_epochs);
}

bool StoppingCriterion::should_stop(std::uint64_t updates, std::uint64_t epochs) const {
  if (bound_reached(updates, epochs)) return true;
  return state_.streak >= config_.patience && updates >= config_.min_updates && epochs >= config_.min_epochs;
}

// --- files ---------------------------------------------------------------------

void write_file_atomic(const fs::path& path, const std::string& contents) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": missing or unreadable");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void save_tensors(const fs::path& path, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::string out(kParamsMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  out += encode_tensors(tensors);
  write_file_atomic(path, out);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const fs::path& path) {
  const std::string bytes = read_file(path);
  Reader in(bytes, path.string());
  check_header(in, kParamsMagic, path.string());
  auto tensors = decode_tensors(in, path.string());
  if (in.remaining() != 0) throw FormatError(path.string() + ": trailing bytes");
  return tensors;
}

std::string format_metrics_line(std::uint64_t checkpoint, const std::vector<std::pair<std::string, double>>& fields) {
  std::string line = std::to_string(checkpoint);
  char value[64];
  for (const auto& [name, v] : fields) {
    std::snprintf(value, sizeof(value), "%.6f", v);
    line += "\t" + name + "=" + value;
  }
  return line;
}

void write_metrics(std::uint64_t checkpoint, const std::vector<std::pair<std::string, double>>& fields,
                   const fs::path& path) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to metrics file " + path.string());
  out << format_metrics_line(checkpoint, fields) << '\n';
  if (!out) throw IoError("failed writing metrics file " + path.string());
}

std::optional<std::uint64_t> latest_checkpoint(const fs::path& directory) {
  const fs::path p = directory / "latest";
  if (!fs::exists(p)) return std::nullopt;
  return read_index_file(p);
}

std::uint64_t best_checkpoint(const fs::path& directory) { return read_index_file(directory / "params.best"); }

// --- training ------------------------------------------------------------------

void validate(const TrainingConfig& c) {
  parse_optimizer_kind(c.optimizer.kind);
  if (!(c.optimizer.learning_rate > 0.0)) throw ConfigError("learning_rate: must be positive");
  for (auto [name, beta] : {std::pair{"beta1", c.optimizer.beta1}, std::pair{"beta2", c.optimizer.beta2},
                            std::pair{"beta3", c.optimizer.beta3}}) {
    if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError(std::string(name) + ": must lie in [0, 1)");
  }
  if (!(c.optimizer.eve_clip > 1.0)) throw ConfigError("eve_clip: must exceed 1");
  parse_clip_mode(c.clip_mode);
  if (!(c.clip_threshold > 0.0)) throw ConfigError("clip_threshold: must be positive");
  if (!(c.label_smoothing >= 0.0 && c.label_smoothing < 1.0))
    throw ConfigError("label_smoothing: must lie in [0, 1)");
  parse_metric_kind(c.metric);
  if (c.checkpoint_interval == 0) throw ConfigError("checkpoint_interval: must be positive");
  if (c.batching.word_budget == 0) throw ConfigError("word_budget: must be positive");
  if (c.scheduler == "plateau_reduce") {
    if (!(c.plateau_factor > 0.0 && c.plateau_factor < 1.0))
      throw ConfigError("plateau_factor: must lie in (0, 1)");
    if (c.plateau_patience == 0) throw ConfigError("plateau_patience: must be positive");
    if (c.stopping.patience <= c.plateau_patience)
      throw ConfigError("stop_patience: must exceed plateau_patience");
  } else if (c.scheduler == "fixed_step") {
    parse_fixed_schedule(c.fixed_schedule);
  } else {
    throw ConfigError("scheduler: expected plateau_reduce or fixed_step, got '" + c.scheduler + "'");
  }
}

EvaluationResult evaluate(const Seq2SeqModel& model, const std::vector<SentencePair>& pairs,
                          const BatchingConfig& batching) {
  NoGradGuard guard;
  BatchingConfig all = batching;
  all.max_length = std::numeric_limits<std::size_t>::max() / 4;
  std::mt19937_64 rng(0);
  TokenStats total;
  for (const auto& indices : make_batches(pairs, all, 0, 0)) {
    const LossOutput out = model.loss(make_batch(pairs, indices), 0.0, Mode::kInfer, rng);
    total.nll += out.stats.nll;
    total.tokens += out.stats.tokens;
    total.correct += out.stats.correct;
  }
  EvaluationResult r;
  r.tokens = total.tokens;
  r.perplexity = perplexity(total.nll, total.tokens);
  r.accuracy = static_cast<double>(total.correct) / static_cast<double>(total.tokens);
  return r;
}

Trainer::Trainer(Seq2SeqModel& model, TrainingConfig config, fs::path directory)
    : model_(model),
      config_(std::move(config)),
      dir_(std::move(directory)),
      metric_(parse_metric_kind(config_.metric)),
      clip_(parse_clip_mode(config_.clip_mode)),
      optimizer_(config_.optimizer),
      plateau_(metric_, config_.plateau_factor, config_.plateau_patience, config_.reset_to_best),
      stopping_(metric_, config_.stopping),
      rng_(config_.seed) {
  validate(config_);
  if (config_.scheduler == "fixed_step") fixed_ = parse_fixed_schedule(config_.fixed_schedule);
}

double Trainer::learning_rate() const {
  if (config_.scheduler == "fixed_step") return fixed_.rate_at(updates_);
  return config_.optimizer.learning_rate * plateau_.multiplier();
}

double Trainer::metric_value(const EvaluationResult& eval, std::optional<double> bleu) const {
  switch (metric_) {
    case MetricKind::kPerplexity: return eval.perplexity;
    case MetricKind::kAccuracy: return eval.accuracy;
    case MetricKind::kBleu: return bleu.value_or(0.0);
  }
  return eval.perplexity;
}

std::optional<double> Trainer::validation_bleu(const std::vector<SentencePair>& validation) const {
  if (!config_.monitor_bleu && metric_ != MetricKind::kBleu) return std::nullopt;
  std::vector<std::vector<int>> sources;
  for (const auto& p : validation) sources.push_back(p.source);
  DecodeOptions options;
  options.max_length_factor = config_.max_output_factor;
  const Ensemble ensemble({&model_});
  const auto outputs = greedy_translate(ensemble, sources, 64, options);
  const auto as_tokens = [](const std::vector<int>& ids) {
    TokenSequence out;
    for (int id : strip_eos(ids)) out.push_back(std::to_string(id));
    return out;
  };
  std::vector<TokenSequence> hyps, refs;
  for (std::size_t i = 0; i < validation.size(); ++i) {
    hyps.push_back(as_tokens(outputs[i]));
    refs.push_back(as_tokens(validation[i].target));
  }
  BleuOptions approx;
  approx.zero_count_smoothing = 0.01;
  return corpus_bleu(hyps, refs, approx).score;
}

void Trainer::save_state(std::uint64_t index, const IteratorState& iterator, std::uint64_t params_index) const {
  std::ostringstream rng;
  rng << rng_;
  const auto& opt = optimizer_.state();
  const auto& plateau = plateau_.state();
  const auto& stop = stopping_.state();
  const json header = {
      {"checkpoint", index},
      {"params", params_index},
      {"best", best_index_},
      {"updates", updates_},
      {"epochs", epochs_},
      {"elapsed", elapsed_},
      {"rng", rng.str()},
      {"iterator", {{"seed", iterator.seed}, {"epoch", iterator.epoch}, {"position", iterator.position}}},
      {"optimizer",
       {{"step", opt.step}, {"eve_d", opt.eve_d}, {"best_objective", optional_json(opt.best_objective)}}},
      {"plateau",
       {{"best", optional_json(plateau.best)},
        {"best_checkpoint", plateau.best_checkpoint},
        {"stalls", plateau.stalls},
        {"multiplier", plateau.multiplier}}},
      {"stopping", {{"best", optional_json(stop.best)}, {"streak", stop.streak}}},
  };
  std::vector<std::pair<std::string, Tensor>> moments;
  for (const auto& [name, t] : opt.first_moment) moments.emplace_back("m/" + name, t);
  for (const auto& [name, t] : opt.second_moment) moments.emplace_back("v/" + name, t);

  const std::string text = header.dump();
  std::string out(kStateMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  out += encode_tensors(moments);
  write_file_atomic(state_path(dir_, index), out);
}

namespace {

struct StateFile {
  json header;
  std::vector<std::pair<std::string, Tensor>> moments;
};

StateFile read_state(const fs::path& path) {
  const std::string bytes = read_file(path);
  Reader in(bytes, path.string());
  check_header(in, kStateMagic, path.string());
  StateFile s;
  const auto len = in.get<std::uint64_t>();
  try {
    s.header = json::parse(in.get_string(len));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": corrupt header: " + e.what());
  }
  s.moments = decode_tensors(in, path.string());
  return s;
}

void restore_optimizer(OptimizerState& opt, const StateFile& s) {
  const json& o = s.header.at("optimizer");
  opt.step = o.at("step").get<std::uint64_t>();
  opt.eve_d = o.at("eve_d").get<double>();
  opt.best_objective = optional_from(o.at("best_objective"));
  opt.first_moment.clear();
  opt.second_moment.clear();
  for (const auto& [name, t] : s.moments) {
    if (name.rfind("m/", 0) == 0) opt.first_moment.emplace(name.substr(2), t);
    if (name.rfind("v/", 0) == 0) opt.second_moment.emplace(name.substr(2), t);
  }
}

}  // namespace

std::pair<IteratorState, std::uint64_t> Trainer::load_state(std::uint64_t index) {
  const fs::path path = state_path(dir_, index);
  const StateFile s = read_state(path);
  try {
    const json& h = s.header;
    updates_ = h.at("updates").get<std::uint64_t>();
    epochs_ = h.at("epochs").get<std::uint64_t>();
    checkpoint_ = h.at("checkpoint").get<std::uint64_t>();
    best_index_ = h.at("best").get<std::uint64_t>();
    elapsed_ = h.at("elapsed").get<double>();
    std::istringstream rng(h.at("rng").get<std::string>());
    rng >> rng_;
    restore_optimizer(optimizer_.state(), s);
    auto& plateau = plateau_.state();
    plateau.best = optional_from(h.at("plateau").at("best"));
    plateau.best_checkpoint = h.at("plateau").at("best_checkpoint").get<std::uint64_t>();
    plateau.stalls = h.at("plateau").at("stalls").get<std::uint64_t>();
    plateau.multiplier = h.at("plateau").at("multiplier").get<double>();
    stopping_.state().best = optional_from(h.at("stopping").at("best"));
    stopping_.state().streak = h.at("stopping").at("streak").get<std::uint64_t>();
    IteratorState it;
    it.seed = h.at("iterator").at("seed").get<std::uint64_t>();
    it.epoch = h.at("iterator").at("epoch").get<std::uint64_t>();
    it.position = h.at("iterator").at("position").get<std::uint64_t>();
    return {it, h.at("params").get<std::uint64_t>()};
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": incomplete state: " + e.what());
  }
}

void Trainer::restore_best() {
  model_.parameters().assign(load_tensors(params_path(dir_, best_index_)));
  restore_optimizer(optimizer_.state(), read_state(state_path(dir_, best_index_)));
}

void Trainer::checkpoint(const std::vector<SentencePair>& validation, const IteratorState& iterator) {
  ++checkpoint_;
  const EvaluationResult eval = evaluate(model_, validation, config_.batching);
  const std::optional<double> bleu = validation_bleu(validation);
  const double value = metric_value(eval, bleu);

  const bool improved = stopping_.record(value);
  PlateauAction action;
  if (config_.scheduler == "plateau_reduce") action = plateau_.on_checkpoint(checkpoint_, value);

  save_tensors(params_path(dir_, checkpoint_), model_.parameters().snapshot());
  if (improved) {
    best_index_ = checkpoint_;
    write_file_atomic(dir_ / "params.best", std::to_string(checkpoint_) + "\n");
  }
  std::uint64_t params_index = checkpoint_;
  if (action.reset_to_best && best_index_ != checkpoint_) {
    restore_best();
    params_index = best_index_;
  }

  std::vector<std::pair<std::string, double>> fields{
      {"ppl-train", train_stats_.tokens ? perplexity(train_stats_.nll, train_stats_.tokens) : 0.0},
      {"ppl-val", eval.perplexity},
      {"acc-val", eval.accuracy},
  };
  if (bleu) fields.emplace_back("bleu-val-approx", *bleu);
  fields.emplace_back("learning-rate", learning_rate());
  fields.emplace_back("updates", static_cast<double>(updates_));
  fields.emplace_back("epochs", static_cast<double>(epochs_));
  if (config_.metrics_wallclock) fields.emplace_back("elapsed-seconds", elapsed_);
  train_stats_ = {};

  save_state(checkpoint_, iterator, params_index);
  write_metrics(checkpoint_, fields, dir_ / "metrics");
  write_file_atomic(dir_ / "latest", std::to_string(checkpoint_) + "\n");
}

TrainingSummary Trainer::run(const std::vector<SentencePair>& train, const std::vector<SentencePair>& validation,
                             bool resume) {
  if (train.empty()) throw InputError("training corpus is empty");
  if (validation.empty()) throw InputError("validation corpus is empty");
  fs::create_directories(dir_);

  IteratorState start{config_.seed, 0, 0};
  const auto latest = resume ? latest_checkpoint(dir_) : std::nullopt;
  if (resume && !latest) throw FormatError((dir_ / "latest").string() + ": no checkpoint to resume from");
  if (latest) {
    const auto [iterator, params_index] = load_state(*latest);
    start = iterator;
    model_.parameters().assign(load_tensors(params_path(dir_, params_index)));
    // Drop metrics lines written after the checkpoint being resumed.
    std::istringstream lines(fs::exists(dir_ / "metrics") ? read_file(dir_ / "metrics") : "");
    std::string kept, line;
    while (std::getline(lines, line))
      if (!line.empty() && std::stoull(line) <= *latest) kept += line + "\n";
    write_file_atomic(dir_ / "metrics", kept);
  } else {
    for (const char* name : {"metrics", "latest", "params.best"}) fs::remove(dir_ / name);
  }

  BatchIterator iterator(train, config_.batching, start);
  TrainingSummary summary;
  std::uint64_t local_updates = 0;
  auto clock = std::chrono::steady_clock::now();

  while (true) {
    if (stopping_.bound_reached(updates_, epochs_)) {
      summary.stopped = true;
      break;
    }
    if (config_.stop_after_updates > 0 && local_updates >= config_.stop_after_updates) {
      summary.interrupted = true;
      break;
    }
    const Batch batch = iterator.next();
    const LossOutput out = model_.loss(batch, config_.label_smoothing, Mode::kTrain, rng_);
    const double tokens = static_cast<double>(out.stats.tokens);
    const Var objective = scale(out.loss, 1.0 / tokens);
    GradientMap grads = backward(objective, model_.parameters());
    clip_gradients(grads, clip_, config_.clip_threshold);
    optimizer_.step(model_.parameters(), grads, learning_rate(), objective.value()[0]);
    train_stats_.nll += out.stats.nll;
    train_stats_.tokens += out.stats.tokens;
    ++updates_;
    ++local_updates;
    epochs_ = iterator.state().epoch + (iterator.at_epoch_end() ? 1 : 0);

    const bool bound = stopping_.bound_reached(updates_, epochs_);
    if (updates_ % config_.checkpoint_interval == 0 || bound) {
      const auto now = std::chrono::steady_clock::now();
      elapsed_ += std::chrono::duration<double>(now - clock).count();
      clock = now;
      checkpoint(validation, iterator.state());
      if (stopping_.should_stop(updates_, epochs_)) {
        summary.stopped = true;
        break;
      }
    }
  }

  summary.updates = updates_;
  summary.epochs = epochs_;
  summary.checkpoints = checkpoint_;
  summary.best_checkpoint = best_index_;
  return summary;
}

}  // namespace nmt
