// Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero if any fail.
// Arguments select a subset of criteria by number; no arguments runs all of them.

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "model_fixtures.hpp"
#include "nmt/bleu.hpp"
#include "nmt/cnn.hpp"
#include "nmt/errors.hpp"
#include "nmt/inference.hpp"
#include "nmt/training.hpp"
#include "nmt/transformer.hpp"
#include "primitive_checks.hpp"
#include "reversal_task.hpp"
#include "scripted_model.hpp"

namespace {

using namespace nmt;
using namespace nmt::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects sub-check results into one outcome.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      if (!failures_.empty()) failures_ += "; ";
      failures_ += what;
    }
  }
  void note(const std::string& text) {
    if (!notes_.empty()) notes_ += ", ";
    notes_ += text;
  }
  Outcome outcome() const { return {pass_, notes_ + (failures_.empty() ? "" : " | failed: " + failures_)}; }

 private:
  bool pass_ = true;
  std::string notes_, failures_;
};

std::string fmt(const char* pattern, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, value);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "nmt_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// --- 1. gradient fidelity ---------------------------------------------------------

Outcome gradient_fidelity() {
  Checks c;
  const auto start = Clock::now();
  std::size_t primitive_checks = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (const auto& [name, report] : primitive_gradchecks(seed)) {
      ++primitive_checks;
      worst = std::max(worst, report.max_relative_error);
      c.expect(report.passed, name + " seed " + std::to_string(seed));
    }
  }

  struct Case {
    std::string name;
    ModelConfig config;
    std::uint64_t seed;
  };
  std::vector<Case> cases;
  for (const auto& v : rnn_variants()) cases.push_back({"rnn/" + v, rnn_variant(v), rnn_gradcheck_seed(v)});
  for (const auto& [structure, seed] : {std::pair<std::string, std::uint64_t>{"post_norm", 7}, {"pre_norm", 1}}) {
    ModelConfig m = toy_config("transformer");
    m.transformer_structure = structure;
    cases.push_back({"transformer/" + structure, m, seed});
  }
  ModelConfig cnn = toy_config("cnn");
  cases.push_back({"cnn/learned_positions", cnn, 3});
  cnn.positional_encoding = "fixed";
  cases.push_back({"cnn/fixed_positions", cnn, 3});

  const Batch batch = toy_batch();
  for (const auto& k : cases) {
    const ModelConfig r = resolved(k.config);
    c.expect(r.model_size <= 16 && r.embed_size <= 16 && r.encoder_layers <= 2 && r.decoder_layers <= 2,
             k.name + " exceeds toy size");
    auto model = make_model(k.config, k.seed);
    const auto report = model_gradcheck(*model, batch);
    worst = std::max(worst, report.max_relative_error);
    c.expect(report.passed, k.name + ": " + failing_entries(report));
  }
  const double elapsed = seconds_since(start);
  c.expect(elapsed < 120.0, "runtime " + fmt("%.1f s", elapsed));
  c.note(std::to_string(primitive_checks) + " primitive checks, " + std::to_string(cases.size()) +
         " model losses on a " + std::to_string(batch.size) + "-sentence batch");
  c.note("max relative error " + fmt("%.2e", worst) + " (tol 1e-4)");
  c.note(fmt("%.1f s", elapsed));
  return c.outcome();
}

// --- 2. convergence on the reversal task -------------------------------------------

constexpr std::size_t kSymbols = 20;

struct ReversalData {
  std::vector<SentencePair> train = reversal_pairs(10000, kSymbols, 3, 12, 1);
  std::vector<SentencePair> dev = reversal_pairs(500, kSymbols, 3, 12, 2);
  std::vector<SentencePair> test = reversal_pairs(500, kSymbols, 3, 12, 3);
};

const ReversalData& reversal_data() {
  static const ReversalData data;
  return data;
}

struct ConvergenceRun {
  std::unique_ptr<Seq2SeqModel> model;
  TrainingSummary summary;
  double bleu = 0.0;
  double accuracy = 0.0;
  double seconds = 0.0;
};

ModelConfig reversal_config(const std::string& architecture) {
  ModelConfig m;
  m.architecture = architecture;
  m.source_vocab_size = m.target_vocab_size = kNumSpecials + kSymbols;
  m.embed_size = m.model_size = 64;
  m.encoder_layers = m.decoder_layers = architecture == "rnn" ? 1 : architecture == "transformer" ? 2 : 4;
  m.transformer_heads = 4;
  m.cnn_kernel_width = 3;
  return m;
}

TrainingConfig reversal_training(const std::string& architecture) {
  TrainingConfig t;
  t.optimizer.learning_rate = architecture == "rnn" ? 0.002 : 0.001;
  t.label_smoothing = 0.0;
  t.batching.word_budget = 1024;
  t.checkpoint_interval = 100;
  t.plateau_patience = 3;
  t.stopping.patience = 6;
  t.stopping.max_epochs = 20;
  t.seed = 1;
  return t;
}

std::vector<TokenSequence> as_words(const std::vector<std::vector<int>>& sequences) {
  std::vector<TokenSequence> out;
  for (const auto& s : sequences) {
    TokenSequence w;
    for (int id : s) w.push_back(std::to_string(id));
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<std::vector<int>> sources_of(const std::vector<SentencePair>& pairs) {
  std::vector<std::vector<int>> out;
  for (const auto& p : pairs) out.push_back(p.source);
  return out;
}

std::vector<std::vector<int>> references_of(const std::vector<SentencePair>& pairs) {
  std::vector<std::vector<int>> out;
  for (const auto& p : pairs) out.push_back(strip_eos(p.target));
  return out;
}

double beam_bleu(const Ensemble& ensemble, const std::vector<SentencePair>& pairs) {
  const auto translations = batch_translate(ensemble, sources_of(pairs), 32, DecodeOptions{});
  std::vector<std::vector<int>> hyps;
  for (const auto& t : translations) hyps.push_back(strip_eos(t.front().tokens));
  return corpus_bleu(as_words(hyps), as_words(references_of(pairs))).score;
}

std::map<std::string, ConvergenceRun>& convergence_runs() {
  static std::map<std::string, ConvergenceRun> runs;
  return runs;
}

const ConvergenceRun& reversal_run(const std::string& architecture) {
  auto& runs = convergence_runs();
  if (auto it = runs.find(architecture); it != runs.end()) return it->second;
  const auto& data = reversal_data();
  const fs::path dir = scratch("reversal_" + architecture);
  ConvergenceRun run;
  const auto start = Clock::now();
  run.model = make_model(reversal_config(architecture), 1);
  const TrainingConfig config = reversal_training(architecture);
  run.summary = Trainer(*run.model, config, dir).run(data.train, data.dev, false);
  run.model->parameters().assign(load_tensors(dir / ("params." + std::to_string(best_checkpoint(dir)))));
  run.accuracy = evaluate(*run.model, data.test, config.batching).accuracy;
  run.bleu = beam_bleu(Ensemble({run.model.get()}), data.test);
  run.seconds = seconds_since(start);
  return runs.emplace(architecture, std::move(run)).first->second;
}

Outcome convergence() {
  Checks c;
  for (const std::string arch : {"rnn", "transformer", "cnn"}) {
    const auto& run = reversal_run(arch);
    c.expect(run.bleu >= 95.0, arch + " BLEU " + fmt("%.2f", run.bleu));
    c.expect(run.accuracy >= 0.99, arch + " accuracy " + fmt("%.4f", run.accuracy));
    c.expect(run.summary.epochs <= 20, arch + " epochs " + std::to_string(run.summary.epochs));
    c.expect(run.seconds < 1800.0, arch + " runtime " + fmt("%.0f s", run.seconds));
    c.note(arch + ": BLEU " + fmt("%.2f", run.bleu) + " acc " + fmt("%.2f%%", 100.0 * run.accuracy) + " in " +
           std::to_string(run.summary.epochs) + " epochs, " + fmt("%.0f s", run.seconds));
  }
  return c.outcome();
}

// --- 3. beam properties ----------------------------------------------------------

std::size_t compare_with_enumeration(const Script& script, std::size_t vocab, double alpha, Checks& c,
                                     const std::string& label) {
  ScriptedModel model(vocab, script);
  DecodeOptions opt;
  opt.length_penalty_alpha = alpha;
  opt.max_output_length = 3;
  opt.beam_size = 16;
  opt.nbest = 16;
  const auto expected = enumerate_all(script, vocab, 3, alpha);
  const auto got = beam_search(Ensemble({&model}), std::vector<int>{4}, opt);
  c.expect(got.size() == expected.size(), label + " n-best size " + std::to_string(got.size()) + " vs " +
                                              std::to_string(expected.size()));
  for (std::size_t i = 0; i < std::min(got.size(), expected.size()); ++i) {
    c.expect(got[i].tokens == expected[i].tokens, label + " rank " + std::to_string(i) + " tokens");
    c.expect(std::abs(got[i].log_probability - expected[i].log_probability) <= 1e-12,
             label + " rank " + std::to_string(i) + " log-probability");
    c.expect(std::abs(got[i].score - expected[i].score) <= 1e-12, label + " rank " + std::to_string(i) + " score");
  }
  return expected.size();
}

Outcome beam_properties() {
  Checks c;
  for (const std::string arch : {"rnn", "transformer", "cnn"}) {
    auto m = make_model(toy_config(arch), 11);
    const Ensemble e({m.get()});
    DecodeOptions opt;
    opt.beam_size = 1;
    const auto sources = random_sources(100, 10, 5, 8);
    const auto greedy = greedy_translate(e, sources, 16, opt);
    std::size_t same = 0;
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const auto beam = beam_search(e, sources[i], opt);
      same += !beam.empty() && beam.front().tokens == greedy[i];
    }
    c.expect(same == sources.size(), arch + " beam-1 matches greedy on " + std::to_string(same) + "/100");
    c.note(arch + " beam-1 == greedy " + std::to_string(same) + "/100");
  }

  // One symbol a: p(a) = 0.6 and p(EOS) = 0.4 at every step.
  const Script one_symbol = [](const std::vector<int>&, const std::vector<int>&) {
    return std::vector<double>{0.0, 0.0, 0.0, 0.4, 0.6};
  };
  // Symbols a (4) and b (5); the distribution depends on the last emitted symbol.
  const Script two_symbols = [](const std::vector<int>&, const std::vector<int>& prefix) {
    if (prefix.empty()) return std::vector<double>{0.0, 0.0, 0.0, 0.2, 0.5, 0.3};
    if (prefix.back() == 4) return std::vector<double>{0.0, 0.0, 0.0, 0.3, 0.2, 0.5};
    return std::vector<double>{0.0, 0.0, 0.0, 0.45, 0.35, 0.2};
  };
  std::size_t sequences = 0;
  for (double alpha : {0.0, 1.0}) {
    sequences += compare_with_enumeration(one_symbol, 5, alpha, c, "{a} alpha " + fmt("%.0f", alpha));
    sequences += compare_with_enumeration(two_symbols, 6, alpha, c, "{a,b} alpha " + fmt("%.0f", alpha));
  }
  c.note("n-best equals enumeration over " + std::to_string(sequences) + " sequences of length <= 3");
  return c.outcome();
}

// --- 4. ensembles ------------------------------------------------------------------

bool valid_output(const std::vector<int>& tokens, std::size_t limit, std::size_t vocab) {
  if (tokens.empty() || tokens.back() != kEosId || tokens.size() > limit) return false;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i)
    if (tokens[i] < static_cast<int>(kNumSpecials) || tokens[i] >= static_cast<int>(vocab)) return false;
  return true;
}

Outcome ensembles() {
  Checks c;
  for (const std::string arch : {"rnn", "transformer", "cnn"}) {
    auto m = make_model(toy_config(arch), 12);
    const auto sources = random_sources(100, 10, 6, 8);
    const auto single = batch_translate(Ensemble({m.get()}), sources, 16, DecodeOptions{});
    for (auto mode : {EnsembleMode::kLinear, EnsembleMode::kLogLinear}) {
      const auto twice = batch_translate(Ensemble({m.get(), m.get()}, mode), sources, 16, DecodeOptions{});
      std::size_t same = 0;
      for (std::size_t i = 0; i < sources.size(); ++i)
        same += twice[i].front().tokens == single[i].front().tokens &&
                std::abs(twice[i].front().score - single[i].front().score) <= 1e-9;
      const std::string label = arch + (mode == EnsembleMode::kLinear ? " linear" : " log-linear");
      c.expect(same == sources.size(), label + " self-ensemble " + std::to_string(same) + "/100");
    }
  }
  c.note("self-ensembles keep the 1-best on 100/100 for 3 architectures x 2 modes");

  const auto& rnn = reversal_run("rnn");
  const auto& transformer = reversal_run("transformer");
  const auto& test = reversal_data().test;
  const auto sources = sources_of(test);
  for (auto mode : {EnsembleMode::kLinear, EnsembleMode::kLogLinear}) {
    const std::string label = mode == EnsembleMode::kLinear ? "linear" : "log-linear";
    const Ensemble e({rnn.model.get(), transformer.model.get()}, mode);
    const DecodeOptions opt;
    const auto out = batch_translate(e, sources, 32, opt);
    std::size_t valid = 0;
    std::vector<std::vector<int>> hyps;
    for (std::size_t i = 0; i < sources.size(); ++i) {
      valid += valid_output(out[i].front().tokens, opt.max_length(sources[i].size()), e.target_vocab_size());
      hyps.push_back(strip_eos(out[i].front().tokens));
    }
    c.expect(valid == sources.size(), label + " rnn+transformer valid " + std::to_string(valid));
    const double bleu = corpus_bleu(as_words(hyps), as_words(references_of(test))).score;
    c.note("rnn+transformer " + label + ": " + std::to_string(valid) + "/" + std::to_string(sources.size()) +
           " valid, BLEU " + fmt("%.2f", bleu));
  }
  return c.outcome();
}

// --- 5. vocabulary selection ---------------------------------------------------------

Outcome vocabulary_selection() {
  Checks c;
  for (const std::string arch : {"rnn", "transformer", "cnn"}) {
    const ModelConfig config = toy_config(arch);
    auto m = make_model(config, 14);
    const Ensemble e({m.get()});
    LexicalTable table;
    for (int s = 0; s < static_cast<int>(config.source_vocab_size); ++s)
      for (int t = 0; t < static_cast<int>(config.target_vocab_size); ++t)
        table.entries[s].emplace_back(t, 1.0 / static_cast<double>(config.target_vocab_size));
    DecodeOptions plain, restricted;
    restricted.lexical_table = &table;
    restricted.lexical_top_k = config.target_vocab_size;
    std::size_t same = 0;
    const auto sources = random_sources(100, config.source_vocab_size, 8, 8);
    for (const auto& src : sources) {
      const auto a = beam_search(e, src, plain), b = beam_search(e, src, restricted);
      same += a.front().tokens == b.front().tokens && std::abs(a.front().score - b.front().score) <= 1e-12;
    }
    c.expect(same == sources.size(), arch + " full-K restriction identical on " + std::to_string(same) + "/100");
  }
  c.note("full-K restriction identical on 100/100 for 3 architectures");

  LexicalTable table;
  table.entries[4] = {{5, 0.5}, {6, 0.3}, {7, 0.2}};
  table.entries[5] = {{6, 0.6}, {8, 0.3}, {4, 0.1}};
  table.entries[6] = {{5, 0.4}, {4, 0.35}, {8, 0.25}};
  const std::vector<int> source{4, 5, 6};
  const std::set<int> top2_union{5, 6, 8, 4};
  const auto subset = select_vocabulary(source, table, 2);
  std::vector<int> expected(kNumSpecials);
  for (std::size_t i = 0; i < kNumSpecials; ++i) expected[i] = static_cast<int>(i);
  expected.insert(expected.end(), top2_union.begin(), top2_union.end());
  c.expect(subset == expected, "selected ids differ from specials + top-2 union");
  for (const std::string arch : {"rnn", "transformer", "cnn"}) {
    auto m = make_model(toy_config(arch), 15);
    auto state = m->start_decoding(SourceBatch::from(std::vector<std::vector<int>>{source}));
    const Tensor logits = m->step(*state, std::vector<int>{kBosId}, &subset);
    c.expect(logits.dim(1) == kNumSpecials + top2_union.size(),
             arch + " restricted layer has " + std::to_string(logits.dim(1)) + " rows");
    DecodeOptions opt;
    opt.lexical_table = &table;
    opt.lexical_top_k = 2;
    const auto best = beam_search(Ensemble({m.get()}), source, opt);
    for (int id : best.front().tokens)
      c.expect(std::binary_search(subset.begin(), subset.end(), id), arch + " emitted unselected id");
  }
  c.note("K=2 output layer rows " + std::to_string(subset.size()) + " = " + std::to_string(kNumSpecials) +
         " specials + " + std::to_string(top2_union.size()) + " union");
  return c.outcome();
}

// --- 6. fault tolerance ----------------------------------------------------------------

TrainingConfig fault_run(std::uint64_t max_updates) {
  TrainingConfig t;
  t.batching.word_budget = 40;
  t.checkpoint_interval = 4;
  t.stopping.max_updates = max_updates;
  t.stopping.patience = 1000;
  t.plateau_patience = 2;
  t.optimizer.learning_rate = 0.01;
  t.monitor_bleu = true;
  t.metrics_wallclock = false;
  return t;
}

ModelConfig fault_model() {
  ModelConfig m = toy_config("rnn");
  m.source_vocab_size = m.target_vocab_size = kNumSpecials + 6;
  m.dropout = 0.1;
  return m;
}

struct FaultData {
  std::vector<SentencePair> train = reversal_pairs(60, 6, 2, 5, 1);
  std::vector<SentencePair> valid = reversal_pairs(10, 6, 2, 5, 2);
};

std::vector<std::map<std::string, double>> parse_metrics(const std::string& text) {
  std::vector<std::map<std::string, double>> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    std::map<std::string, double> fields;
    std::istringstream parts(line);
    std::string part;
    std::getline(parts, part, '\t');
    fields["checkpoint"] = std::stod(part);
    while (std::getline(parts, part, '\t')) {
      const auto eq = part.find('=');
      fields[part.substr(0, eq)] = std::stod(part.substr(eq + 1));
    }
    out.push_back(std::move(fields));
  }
  return out;
}

void compare_runs(const fs::path& reference, const fs::path& resumed, std::uint64_t checkpoints, Checks& c,
                  const std::string& label) {
  const std::string a = read_file(reference / "metrics"), b = read_file(resumed / "metrics");
  const auto ma = parse_metrics(a), mb = parse_metrics(b);
  c.expect(ma.size() == checkpoints && mb.size() == checkpoints,
           label + " metrics lines " + std::to_string(ma.size()) + "/" + std::to_string(mb.size()));
  double gap = 0.0;
  for (std::size_t k = 0; k < std::min(ma.size(), mb.size()); ++k) {
    c.expect(ma[k].size() == mb[k].size(), label + " field sets differ at " + std::to_string(k + 1));
    for (const auto& [key, value] : ma[k]) {
      const auto it = mb[k].find(key);
      if (it == mb[k].end()) continue;
      gap = std::max(gap, std::abs(value - it->second));
    }
  }
  c.expect(gap <= 1e-6, label + " metric gap " + fmt("%.2e", gap));
  c.expect(a == b, label + " metrics files differ");
  for (std::uint64_t k = 1; k <= checkpoints; ++k) {
    const std::string name = "params." + std::to_string(k);
    c.expect(read_file(reference / name) == read_file(resumed / name), label + " " + name + " differs");
  }
  c.note(label + ": " + std::to_string(checkpoints) + " checkpoints, max metric gap " + fmt("%.1e", gap) +
         (a == b ? ", metrics byte-identical" : ""));
}

Outcome fault_tolerance() {
  Checks c;
  const FaultData data;

  // Stops two updates past checkpoint 2 without writing anything further, then resumes.
  {
    const fs::path full = scratch("fault_full"), killed = scratch("fault_stopped");
    {
      auto model = make_model(fault_model(), 1);
      Trainer(*model, fault_run(24), full).run(data.train, data.valid, false);
    }
    {
      auto model = make_model(fault_model(), 1);
      auto config = fault_run(24);
      config.stop_after_updates = 10;
      const auto summary = Trainer(*model, config, killed).run(data.train, data.valid, false);
      c.expect(summary.interrupted && latest_checkpoint(killed) == 2u, "stop between checkpoints 2 and 3");
    }
    {
      auto model = make_model(fault_model(), 99);
      Trainer(*model, fault_run(24), killed).run(data.train, data.valid, true);
    }
    compare_runs(full, killed, 6, c, "stop at update 10");
  }

  // A child process is SIGKILLed at an arbitrary point after checkpoint 3.
  {
    const std::uint64_t updates = 400, checkpoints = updates / 4;
    const fs::path full = scratch("fault_full_long"), killed = scratch("fault_sigkill");
    {
      auto model = make_model(fault_model(), 1);
      Trainer(*model, fault_run(updates), full).run(data.train, data.valid, false);
    }
    std::fflush(nullptr);
    const pid_t child = fork();
    if (child == 0) {
      try {
        auto model = make_model(fault_model(), 1);
        Trainer(*model, fault_run(updates), killed).run(data.train, data.valid, false);
      } catch (...) {
        _exit(3);
      }
      _exit(0);
    }
    c.expect(child > 0, "fork failed");
    if (child > 0) {
      const auto start = Clock::now();
      std::uint64_t seen = 0;
      while (seconds_since(start) < 120.0) {
        try {
          seen = latest_checkpoint(killed).value_or(0);
        } catch (const Error&) {
        }
        if (seen >= 3) break;
        std::this_thread::sleep_for(std::chrono::microseconds(200));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(7));
      kill(child, SIGKILL);
      int status = 0;
      waitpid(child, &status, 0);
      const bool was_killed = WIFSIGNALED(status) && WTERMSIG(status) == SIGKILL;
      const std::uint64_t at = latest_checkpoint(killed).value_or(0);
      c.expect(was_killed && at < checkpoints, "child finished before the kill landed");
      c.note("SIGKILL after checkpoint " + std::to_string(at) + " of " + std::to_string(checkpoints));
      auto model = make_model(fault_model(), 99);
      Trainer(*model, fault_run(updates), killed).run(data.train, data.valid, true);
      compare_runs(full, killed, checkpoints, c, "SIGKILL");
    }
  }
  return c.outcome();
}

// --- 7. optimizer equivalence -------------------------------------------------------

Outcome optimizer_equivalence() {
  Checks c;
  double gap = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    const std::size_t n = 6;
    std::vector<double> curvature(n), center(n), start(n);
    for (std::size_t i = 0; i < n; ++i) {
      curvature[i] = std::abs(normal(rng)) + 0.1;
      center[i] = normal(rng);
      start[i] = normal(rng);
    }
    ParameterStore adam_store, eve_store;
    adam_store.add("w", Tensor(Shape{n}, start));
    eve_store.add("w", Tensor(Shape{n}, start));
    OptimizerConfig adam_config, eve_config;
    eve_config.kind = "eve";
    eve_config.eve_fixed_d = true;
    Optimizer adam(adam_config), eve(eve_config);
    const auto gradient = [&](const ParameterStore& s, double& objective) {
      const auto& w = s.get("w").value().storage();
      std::vector<double> g(n);
      objective = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        g[i] = curvature[i] * (w[i] - center[i]);
        objective += 0.5 * curvature[i] * (w[i] - center[i]) * (w[i] - center[i]);
      }
      return GradientMap{{"w", Tensor(Shape{n}, std::move(g))}};
    };
    for (int step = 0; step < 100; ++step) {
      double fa = 0.0, fe = 0.0;
      adam.step(adam_store, gradient(adam_store, fa), 0.01, fa);
      eve.step(eve_store, gradient(eve_store, fe), 0.01, fe);
      const auto &a = adam_store.get("w").value().storage(), &e = eve_store.get("w").value().storage();
      for (std::size_t i = 0; i < n; ++i) gap = std::max(gap, std::abs(a[i] - e[i]));
    }
  }
  c.expect(gap <= 1e-12, "trajectory gap " + fmt("%.2e", gap));
  c.note("10 quadratics x 100 steps, max parameter gap " + fmt("%.1e", gap) + " (tol 1e-12)");
  return c.outcome();
}

// --- 8. scheduler and stopping ------------------------------------------------------------

Outcome scheduler_and_stopping() {
  Checks c;
  std::size_t decisions = 0;

  // Noisy, slowly improving perplexities against a hand simulation of both rules at the defaults.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PlateauScheduler plateau(MetricKind::kPerplexity);
    StoppingCriterion stop(MetricKind::kPerplexity, StoppingConfig{});
    double level = 50.0, best = 1e300, rate = 1.0;
    int stalls = 0, streak = 0;
    for (std::uint64_t k = 1; k <= 400; ++k) {
      level *= u(rng) < 0.15 ? 0.97 : 1.0;
      const double ppl = level + (u(rng) < 0.5 ? 0.5 : 0.0);
      bool reduced = false;
      if (ppl < best) {
        best = ppl;
        stalls = streak = 0;
      } else {
        ++streak;
        if (++stalls == 8) {
          rate *= 0.7;
          stalls = 0;
          reduced = true;
        }
      }
      stop.record(ppl);
      const bool stopped = stop.should_stop(k * 4000, 0);
      c.expect(plateau.on_checkpoint(k, ppl).reduced == reduced,
               "seed " + std::to_string(seed) + " reduction at " + std::to_string(k));
      c.expect(std::abs(plateau.multiplier() - rate) <= 1e-15, "multiplier at " + std::to_string(k));
      c.expect(stopped == (streak >= 32), "seed " + std::to_string(seed) + " stop at " + std::to_string(k));
      decisions += 2;
      if (stopped) break;
    }
  }

  // Stall forever after the first checkpoint: reductions at 9, 17, 25, 33 and a stop at 33.
  PlateauScheduler plateau(MetricKind::kPerplexity);
  StoppingCriterion stop(MetricKind::kPerplexity, StoppingConfig{});
  std::vector<std::uint64_t> reductions;
  std::uint64_t stopped_at = 0;
  for (std::uint64_t k = 1; k <= 60 && stopped_at == 0; ++k) {
    const double ppl = k == 1 ? 4.0 : 4.5;
    stop.record(ppl);
    if (plateau.on_checkpoint(k, ppl).reduced) reductions.push_back(k);
    if (stop.should_stop(k * 4000, 0)) stopped_at = k;
  }
  c.expect(reductions == std::vector<std::uint64_t>{9, 17, 25, 33}, "default reductions");
  c.expect(stopped_at == 33, "default stop at " + std::to_string(stopped_at));
  c.expect(std::abs(plateau.multiplier() - std::pow(0.7, 4)) <= 1e-15, "multiplier after four reductions");
  c.note(std::to_string(decisions) + " scripted decisions match; constant stall reduces at 9,17,25,33 and stops at " +
         std::to_string(stopped_at));
  return c.outcome();
}

// --- 9. BLEU ----------------------------------------------------------------------

Outcome bleu_oracle() {
  Checks c;
  const std::vector<TokenSequence> corpus{tokenize("a b c d e"), tokenize("the quick brown fox jumps over"),
                                          tokenize("x y z w v")};
  const BleuReport same = corpus_bleu(corpus, corpus);
  c.expect(same.score == 100.0, "identical corpora score " + fmt("%.17g", same.score));

  const BleuReport r = corpus_bleu({tokenize("the cat sat on the mat")}, {tokenize("the cat sat on a mat")});
  c.expect(r.matches == std::array<std::size_t, 4>{5, 3, 2, 1}, "match counts");
  c.expect(r.totals == std::array<std::size_t, 4>{6, 5, 4, 3}, "n-gram totals");
  c.expect(r.precisions == std::array<double, 4>{5.0 / 6.0, 3.0 / 5.0, 2.0 / 4.0, 1.0 / 3.0}, "precisions");
  c.expect(std::abs(r.score - 53.7) <= 0.1, "hand example " + fmt("%.4f", r.score));
  c.note("identical = " + fmt("%.1f", same.score) + ", hand example " + format_bleu(r));
  return c.outcome();
}

// --- 10. architecture contracts ------------------------------------------------------

Tensor random_tensor3(std::size_t b, std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({b, n, d}, rng);
}

// Teacher-forced logits must not move in rows at or before a perturbation of later target tokens.
double causality_gap(const std::string& arch, Checks& c) {
  ModelConfig config = toy_config(arch);
  config.model_size = config.embed_size = 16;
  auto model = make_model(config, 21);
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> tok(static_cast<int>(kNumSpecials), static_cast<int>(config.target_vocab_size) - 1);
  std::vector<SentencePair> pairs{{{4, 5, 6, 7}, {}}, {{8, 9, 5}, {}}};
  for (auto& p : pairs) {
    for (int i = 0; i < 9; ++i) p.target.push_back(tok(rng));
    p.target.push_back(kEosId);
  }
  const std::vector<std::size_t> rows{0, 1};
  const auto logits = [&](const std::vector<SentencePair>& ps) {
    NoGradGuard guard;
    std::mt19937_64 r(0);
    return model->forward(make_batch(ps, rows), Mode::kInfer, r).value();
  };
  const Tensor base = logits(pairs);
  const std::size_t m = pairs[0].target.size(), v = config.target_vocab_size;
  double gap = 0.0, later = 0.0;
  for (std::size_t p = 1; p + 1 < m; ++p) {
    auto changed = pairs;
    for (auto& pair : changed)
      for (std::size_t t = p; t + 1 < m; ++t) {
        const int shifted = (pair.target[t] - static_cast<int>(kNumSpecials) + 1) % static_cast<int>(v - kNumSpecials);
        pair.target[t] = static_cast<int>(kNumSpecials) + shifted;
      }
    const Tensor out = logits(changed);
    // Row t is predicted from targets before t, so rows 0..p cannot see the change.
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t t = 0; t < m; ++t)
        for (std::size_t j = 0; j < v; ++j) {
          const double d = std::abs(out[(r * m + t) * v + j] - base[(r * m + t) * v + j]);
          if (t <= p) {
            gap = std::max(gap, d);
          } else {
            later = std::max(later, d);
          }
        }
  }
  c.expect(later > 1e-6, arch + " perturbations never reached later rows");
  return gap;
}

Outcome architecture_contracts() {
  Checks c;
  for (const std::string arch : {"transformer", "cnn"}) {
    const double gap = causality_gap(arch, c);
    c.expect(gap <= 1e-12, arch + " decoder causality gap " + fmt("%.2e", gap));
    c.note(arch + " causality gap " + fmt("%.1e", gap));
  }

  // The encoder module adds no positions, which is the zeroed-encoding case.
  for (auto structure : {SublayerStructure::kPostNorm, SublayerStructure::kPreNorm}) {
    ParameterStore store;
    Initializer init(2);
    const std::size_t n = 7, d = 64;
    TransformerEncoder enc(store, init, "enc", d, 4, 4 * d, 2, structure);
    const Tensor x = random_tensor3(1, n, d, 3);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = (3 * i + 2) % n;
    Tensor xp({1, n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) xp[i * d + j] = x[perm[i] * d + j];
    const std::vector<std::uint8_t> mask(n, 1);
    const Tensor out = enc(constant(x), mask).value(), out_perm = enc(constant(xp), mask).value();
    double gap = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) gap = std::max(gap, std::abs(out_perm[i * d + j] - out[perm[i] * d + j]));
    const std::string label = structure == SublayerStructure::kPostNorm ? "post-norm" : "pre-norm";
    c.expect(gap <= 1e-10, label + " encoder permutation gap " + fmt("%.2e", gap));
    c.note(label + " encoder permutation gap " + fmt("%.1e", gap));
  }

  {
    ParameterStore store;
    Initializer init(7);
    const std::size_t layers = 4, k = 3, d = 64, n = 17, j = 8, reach = layers * (k / 2);
    std::vector<ConvEncoderLayer> stack;
    for (std::size_t l = 0; l < layers; ++l) stack.emplace_back(store, init, "enc.l" + std::to_string(l), d, k);
    const Var mask = constant(Tensor({1, n}, 1.0));
    const auto run = [&](const Tensor& x) {
      Var h = constant(x);
      for (const auto& layer : stack) h = layer(h, mask);
      return h.value();
    };
    const Tensor x = random_tensor3(1, n, d, 8);
    Tensor bumped = x;
    for (std::size_t q = 0; q < d; ++q) bumped[j * d + q] += 0.5;
    const Tensor a = run(x), b = run(bumped);
    std::size_t widest = 0;
    bool outside_clean = true;
    for (std::size_t i = 0; i < n; ++i) {
      double diff = 0.0;
      for (std::size_t q = 0; q < d; ++q) diff += std::abs(a[i * d + q] - b[i * d + q]);
      const std::size_t dist = i > j ? i - j : j - i;
      if (diff > 0.0) widest = std::max(widest, dist);
      if (dist > reach && diff != 0.0) outside_clean = false;
    }
    c.expect(outside_clean, "CNN outputs beyond the receptive field moved");
    c.expect(widest == reach, "CNN receptive field " + std::to_string(widest) + " vs " + std::to_string(reach));
    c.note("CNN L=4 k=3 receptive field " + std::to_string(widest) + " = L*floor(k/2)");
  }
  return c.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int number;
    const char* title;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient fidelity", gradient_fidelity},
      {2, "reversal-task convergence", convergence},
      {3, "beam search properties", beam_properties},
      {4, "ensemble properties", ensembles},
      {5, "vocabulary selection", vocabulary_selection},
      {6, "fault tolerance", fault_tolerance},
      {7, "Eve with fixed d equals Adam", optimizer_equivalence},
      {8, "plateau scheduler and stopping", scheduler_and_stopping},
      {9, "BLEU oracle", bleu_oracle},
      {10, "architecture contracts", architecture_contracts},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& criterion : criteria) {
    if (!selected.empty() && !selected.count(criterion.number)) continue;
    Outcome outcome;
    const auto start = Clock::now();
    try {
      outcome = criterion.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    failures += !outcome.pass;
    std::printf("[%s] %2d %s (%.1f s): %s\n", outcome.pass ? "PASS" : "FAIL", criterion.number, criterion.title,
                seconds_since(start), outcome.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(fs::temp_directory_path() / "nmt_acceptance");
  return failures == 0 ? 0 : 1;
}
