#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nmt/data.hpp"
#include "nmt/model.hpp"

namespace nmt {

// --- optimizers --------------------------------------------------------------

enum class OptimizerKind { kSgd, kAdam, kEve };
OptimizerKind parse_optimizer_kind(const std::string& name);

struct OptimizerConfig {
  std::string kind = "adam";     // sgd | adam | eve
  double learning_rate = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double beta3 = 0.999;  // smoothing of Eve's d
  double eve_clip = 10.0;
  double epsilon = 1e-8;
  bool eve_fixed_d = false;  // pin d to 1
};

struct OptimizerState {
  std::uint64_t step = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  double eve_d = 1.0;
  std::optional<double> best_objective;  // lowest objective seen, the reference for Eve's relative change
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  // One update at the given learning rate. `objective` feeds Eve and is ignored otherwise.
  // Non-finite gradients or objective throw NumericalError before anything changes.
  void step(ParameterStore& params, const GradientMap& grads, double learning_rate, double objective = 0.0);

  const OptimizerConfig& config() const { return config_; }
  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }

 private:
  void update_eve_d(double objective);

  OptimizerConfig config_;
  OptimizerKind kind_;
  OptimizerState state_;
};

// --- gradient clipping -------------------------------------------------------

enum class ClipMode { kNone, kNorm, kAbsolute };
ClipMode parse_clip_mode(const std::string& name);
double global_norm(const GradientMap& grads);
void clip_gradients(GradientMap& grads, ClipMode mode, double threshold);

// --- schedules and stopping ------------------------------------------------

enum class MetricKind { kPerplexity, kAccuracy, kBleu };
MetricKind parse_metric_kind(const std::string& name);
std::string metric_name(MetricKind kind);
bool improves(MetricKind kind, double candidate, double best);

struct PlateauState {
  std::optional<double> best;
  std::uint64_t best_checkpoint = 0;
  std::uint64_t stalls = 0;
  double multiplier = 1.0;
};

struct PlateauAction {
  bool improved = false;
  bool reduced = false;
  bool reset_to_best = false;
};

class PlateauScheduler {
 public:
  PlateauScheduler(MetricKind metric, double factor = 0.7, std::uint64_t patience = 8, bool reset_to_best = false)
      : metric_(metric), factor_(factor), patience_(patience), reset_(reset_to_best) {}

  PlateauAction on_checkpoint(std::uint64_t checkpoint, double value);
  double multiplier() const { return state_.multiplier; }
  const PlateauState& state() const { return state_; }
  PlateauState& state() { return state_; }

 private:
  MetricKind metric_;
  double factor_;
  std::uint64_t patience_;
  bool reset_;
  PlateauState state_;
};

// Piecewise-constant rates: each (rate, updates) interval in turn; the last rate persists.
struct FixedStepSchedule {
  std::vector<std::pair<double, std::uint64_t>> intervals;
  double rate_at(std::uint64_t update) const;
};
// "rate:updates,rate:updates"
FixedStepSchedule parse_fixed_schedule(const std::string& text);
std::string format_fixed_schedule(const FixedStepSchedule& schedule);

struct StoppingConfig {
  std::uint64_t patience = 32;
  std::uint64_t min_updates = 0;
  std::uint64_t max_updates = 0;  // 0: unbounded
  std::uint64_t min_epochs = 0;
  std::uint64_t max_epochs = 0;
};

struct StoppingState {
  std::optional<double> best;
  std::uint64_t streak = 0;
};

class StoppingCriterion {
 public:
  StoppingCriterion(MetricKind metric, StoppingConfig config) : metric_(metric), config_(config) {}

  // True when `value` improves on the best so far.
  bool record(double value);
  bool should_stop(std::uint64_t updates, std::uint64_t epochs) const;
  bool bound_reached(std::uint64_t updates, std::uint64_t epochs) const;
  const StoppingState& state() const { return state_; }
  StoppingState& state() { return state_; }

 private:
  MetricKind metric_;
  StoppingConfig config_;
  StoppingState state_;
};

// --- files -------------------------------------------------------------------

// Named tensors: magic "NMTP", version, count, then per tensor name, shape and
// little-endian doubles. Written to a temporary file and renamed into place.
void save_tensors(const std::filesystem::path& path, const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::filesystem::path& path);

void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

// "index\tname=value\t..." with six decimals.
std::string format_metrics_line(std::uint64_t checkpoint, const std::vector<std::pair<std::string, double>>& fields);
void write_metrics(std::uint64_t checkpoint, const std::vector<std::pair<std::string, double>>& fields,
                   const std::filesystem::path& path);

// --- training ----------------------------------------------------------------

struct TrainingConfig {
  OptimizerConfig optimizer;
  std::string clip_mode = "none";  // none | norm | absolute
  double clip_threshold = 1.0;
  double label_smoothing = 0.1;
  BatchingConfig batching;
  std::string scheduler = "plateau_reduce";  // plateau_reduce | fixed_step
  double plateau_factor = 0.7;
  std::uint64_t plateau_patience = 8;
  bool reset_to_best = false;
  std::string fixed_schedule;  // for fixed_step
  StoppingConfig stopping;
  std::string metric = "perplexity";  // perplexity | accuracy | bleu
  std::uint64_t checkpoint_interval = 4000;
  bool monitor_bleu = false;
  bool metrics_wallclock = true;
  std::uint64_t seed = 1;
  std::size_t max_output_factor = 2;
  // Returns as if killed after this many updates in this process, without a checkpoint.
  std::uint64_t stop_after_updates = 0;
};

// Validates fields that are not covered by model validation.
void validate(const TrainingConfig& config);

struct EvaluationResult {
  double perplexity = 0.0;
  double accuracy = 0.0;
  std::size_t tokens = 0;
};

EvaluationResult evaluate(const Seq2SeqModel& model, const std::vector<SentencePair>& pairs,
                          const BatchingConfig& batching);

struct TrainingSummary {
  std::uint64_t updates = 0;
  std::uint64_t epochs = 0;
  std::uint64_t checkpoints = 0;
  std::uint64_t best_checkpoint = 0;
  bool stopped = false;      // a stopping rule fired
  bool interrupted = false;  // stop_after_updates fired
};

// Owns one training run inside a model directory: params.<k>, state.<k>,
// metrics and the params.best pointer. The caller writes config.json and vocabularies.
class Trainer {
 public:
  Trainer(Seq2SeqModel& model, TrainingConfig config, std::filesystem::path directory);

  // With `resume`, continues from the newest checkpoint; FormatError when there is none.
  TrainingSummary run(const std::vector<SentencePair>& train, const std::vector<SentencePair>& validation,
                      bool resume);

  std::uint64_t checkpoint_index() const { return checkpoint_; }

 private:
  struct Accumulator {
    double nll = 0.0;
    std::size_t tokens = 0;
  };

  double metric_value(const EvaluationResult& eval, std::optional<double> bleu) const;
  std::optional<double> validation_bleu(const std::vector<SentencePair>& validation) const;
  double learning_rate() const;
  void checkpoint(const std::vector<SentencePair>& validation, const IteratorState& iterator);
  void save_state(std::uint64_t index, const IteratorState& iterator, std::uint64_t params_index) const;
  // Restores everything from state.<index>; returns the iterator state and the params file to load.
  std::pair<IteratorState, std::uint64_t> load_state(std::uint64_t index);
  void restore_best();

  Seq2SeqModel& model_;
  TrainingConfig config_;
  std::filesystem::path dir_;
  MetricKind metric_;
  ClipMode clip_;
  Optimizer optimizer_;
  PlateauScheduler plateau_;
  FixedStepSchedule fixed_;
  StoppingCriterion stopping_;
  std::mt19937_64 rng_;
  std::uint64_t updates_ = 0;
  std::uint64_t epochs_ = 0;
  std::uint64_t checkpoint_ = 0;
  Accumulator train_stats_;
  std::uint64_t best_index_ = 0;
  double elapsed_ = 0.0;
};

// Newest checkpoint index recorded in `directory`, if any.
std::optional<std::uint64_t> latest_checkpoint(const std::filesystem::path& directory);
// Index named by params.best.
std::uint64_t best_checkpoint(const std::filesystem::path& directory);

}  // namespace nmt
