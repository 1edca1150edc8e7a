#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "nmt/bleu.hpp"
#include "nmt/config.hpp"
#include "nmt/errors.hpp"
#include "nmt/inference.hpp"
#include "nmt/training.hpp"

namespace fs = std::filesystem;
using namespace nmt;

namespace {

std::vector<TokenSequence> read_tokenized(const std::string& path) { return read_corpus(path); }

class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_.open(path);
      if (!file_) throw IoError("cannot write " + path);
    }
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }
  void close() {
    stream().flush();
    if (!stream()) throw IoError("failed writing output");
  }

 private:
  std::ofstream file_;
};

// --- build-vocab -------------------------------------------------------------

struct VocabArgs {
  std::vector<std::string> inputs;
  std::string output;
  std::size_t max_size = 0;
  std::size_t min_count = 1;
  bool joint = false;
};

void add_build_vocab(CLI::App& app, VocabArgs& a) {
  auto* cmd = app.add_subcommand("build-vocab", "Build a vocabulary from tokenized text");
  cmd->add_option("--input", a.inputs, "tokenized text files, one sentence per line")->required();
  cmd->add_option("--output", a.output, "vocabulary file to write")->required();
  cmd->add_option("--max-size", a.max_size, "size cap including the special tokens (0: none)");
  cmd->add_option("--min-count", a.min_count, "minimum token frequency");
  cmd->add_flag("--joint", a.joint, "one vocabulary over several files, e.g. both sides of a corpus");
}

void build_vocab(const VocabArgs& a) {
  if (a.inputs.size() > 1 && !a.joint) throw ConfigError("input: several files build a joint vocabulary; pass --joint");
  std::vector<TokenSequence> corpus;
  for (const auto& path : a.inputs) {
    auto lines = read_tokenized(path);
    corpus.insert(corpus.end(), std::make_move_iterator(lines.begin()), std::make_move_iterator(lines.end()));
  }
  const auto max_size = a.max_size ? std::optional<std::size_t>(a.max_size) : std::nullopt;
  Vocabulary::build(corpus, max_size, a.min_count).save(a.output);
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  bool resume = false;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* cmd = app.add_subcommand("train", "Train a model; flags override the configuration file");
  cmd->add_option("--config", a.config, "flat JSON configuration");
  cmd->add_flag("--resume", a.resume, "continue from the newest checkpoint in the output directory");
  for (const auto& f : config_fields()) {
    auto* opt = cmd->add_option(f.flag, a.values[f.key], f.help);
    const auto kind = f.get(RunConfig{});
    if (kind.is_boolean()) opt->expected(0, 1)->type_name("[BOOL]");
    else if (kind.is_number_float()) opt->type_name("FLOAT");
    else if (kind.is_number()) opt->type_name("UINT");
    a.options[f.key] = opt;
  }
}

RunConfig apply_flags(RunConfig config, const TrainArgs& a) {
  for (const auto& f : config_fields())
    if (a.options.at(f.key)->count() > 0) f.set_text(config, a.values.at(f.key));
  return config;
}

void require(const std::string& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string(key) + ": required");
}

Vocabulary vocabulary_for(const RunConfig& c, const std::string& prebuilt, const std::vector<std::string>& files) {
  if (!prebuilt.empty()) return Vocabulary::load(prebuilt);
  std::vector<TokenSequence> corpus;
  for (const auto& path : files) {
    auto lines = read_tokenized(path);
    corpus.insert(corpus.end(), std::make_move_iterator(lines.begin()), std::make_move_iterator(lines.end()));
  }
  const auto max_size = c.vocab_max_size ? std::optional<std::size_t>(c.vocab_max_size) : std::nullopt;
  return Vocabulary::build(corpus, max_size, c.vocab_min_count);
}

void train(const TrainArgs& a) {
  RunConfig config = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  config = apply_flags(config, a);
  require(config.output, "output");
  const fs::path dir = config.output;
  if (a.resume && a.config.empty() && fs::exists(dir / "config.json"))
    config = apply_flags(load_run_config(dir / "config.json"), a);
  for (auto [value, key] : {std::pair{&config.train_source, "train_source"}, {&config.train_target, "train_target"},
                            {&config.validation_source, "validation_source"},
                            {&config.validation_target, "validation_target"}})
    require(*value, key);

  Vocabulary source_vocab, target_vocab;
  if (a.resume && fs::exists(dir / "vocab.src")) {
    source_vocab = Vocabulary::load((dir / "vocab.src").string());
    target_vocab = Vocabulary::load((dir / "vocab.trg").string());
  } else if (config.joint_vocab) {
    source_vocab = target_vocab = vocabulary_for(config, config.source_vocab, {config.train_source, config.train_target});
  } else {
    source_vocab = vocabulary_for(config, config.source_vocab, {config.train_source});
    target_vocab = vocabulary_for(config, config.target_vocab, {config.train_target});
  }
  config.model.source_vocab_size = source_vocab.size();
  config.model.target_vocab_size = target_vocab.size();
  const ModelConfig model_config = resolved(config.model);
  validate(model_config);
  validate(config.training);

  const auto train_pairs = read_parallel(config.train_source, config.train_target, source_vocab, target_vocab);
  const auto valid_pairs =
      read_parallel(config.validation_source, config.validation_target, source_vocab, target_vocab);

  fs::create_directories(dir);
  save_run_config(config, dir / "config.json");
  source_vocab.save((dir / "vocab.src").string());
  target_vocab.save((dir / "vocab.trg").string());

  auto model = make_model(model_config, config.training.seed);
  Trainer trainer(*model, config.training, dir);
  const auto summary = trainer.run(train_pairs, valid_pairs, a.resume);
  std::fprintf(stderr, "%s after %llu updates (%llu epochs), %llu checkpoints, best %llu\n",
               summary.interrupted ? "interrupted" : "finished", static_cast<unsigned long long>(summary.updates),
               static_cast<unsigned long long>(summary.epochs), static_cast<unsigned long long>(summary.checkpoints),
               static_cast<unsigned long long>(summary.best_checkpoint));
}

// --- translate ---------------------------------------------------------------

struct TranslateArgs {
  std::vector<std::string> models;
  std::string input, output;
  std::size_t beam = 5;
  double length_penalty = 1.0;
  std::size_t batch_size = 16;
  std::string ensemble_mode = "linear";
  std::vector<double> ensemble_weights;
  std::string restrict_lexicon;
  std::size_t restrict_topk = 0;
  std::string dump_attention;
  std::size_t nbest = 1;
  std::size_t max_output_length = 0;
};

void add_translate(CLI::App& app, TranslateArgs& a) {
  auto* cmd = app.add_subcommand("translate", "Translate tokenized text with one model or an ensemble");
  cmd->add_option("--models", a.models, "model directories; several form an ensemble")->required();
  cmd->add_option("--input", a.input, "tokenized source text")->required();
  cmd->add_option("--output", a.output, "translations (default: standard output)");
  cmd->add_option("--beam", a.beam, "beam size");
  cmd->add_option("--length-penalty", a.length_penalty, "length penalty alpha");
  cmd->add_option("--batch-size", a.batch_size, "sentences decoded together");
  cmd->add_option("--ensemble-mode", a.ensemble_mode, "linear | log_linear");
  cmd->add_option("--ensemble-weights", a.ensemble_weights, "one nonnegative weight per model");
  cmd->add_option("--restrict-lexicon", a.restrict_lexicon, "lexical table: source<TAB>target<TAB>probability");
  cmd->add_option("--restrict-topk", a.restrict_topk, "translations kept per source token");
  cmd->add_option("--dump-attention", a.dump_attention, "directory for one attention matrix per sentence");
  cmd->add_option("--nbest", a.nbest, "hypotheses per sentence; above 1 switches to n-best output");
  cmd->add_option("--max-output-length", a.max_output_length, "overrides 2 * source length + 10");
}

void translate(const TranslateArgs& a) {
  if (a.nbest == 0) throw ConfigError("nbest: must be at least 1");
  if (a.nbest > a.beam) throw ConfigError("nbest: cannot exceed the beam size");
  if (!a.restrict_lexicon.empty() && a.restrict_topk == 0)
    throw ConfigError("restrict_topk: required with --restrict-lexicon");

  std::vector<LoadedModel> loaded;
  for (const auto& dir : a.models) loaded.push_back(load_model(dir));
  for (const auto& m : loaded) {
    if (!(m.target_vocab == loaded.front().target_vocab))
      throw ConfigError("models: ensemble members must share the target vocabulary");
    if (!(m.source_vocab == loaded.front().source_vocab))
      throw ConfigError("models: ensemble members must share the source vocabulary");
  }
  std::vector<const Seq2SeqModel*> members;
  for (const auto& m : loaded) members.push_back(m.model.get());
  const Ensemble ensemble(members, parse_ensemble_mode(a.ensemble_mode), a.ensemble_weights);
  const Vocabulary& source_vocab = loaded.front().source_vocab;
  const Vocabulary& target_vocab = loaded.front().target_vocab;

  DecodeOptions options;
  options.beam_size = a.beam;
  options.length_penalty_alpha = a.length_penalty;
  options.nbest = a.nbest;
  options.max_output_length = a.max_output_length;
  options.attention = !a.dump_attention.empty();
  LexicalTable table;
  if (!a.restrict_lexicon.empty()) {
    table = load_lexical_table(a.restrict_lexicon, source_vocab, target_vocab);
    options.lexical_table = &table;
    options.lexical_top_k = a.restrict_topk;
  }

  std::vector<std::vector<int>> sources;
  for (const auto& tokens : read_tokenized(a.input)) sources.push_back(encode(tokens, source_vocab, false));
  const auto results = batch_translate(ensemble, sources, a.batch_size, options);

  if (options.attention) fs::create_directories(a.dump_attention);
  Output out(a.output);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto text = [&](const Translation& t) { return join_tokens(decode(t.tokens, target_vocab)); };
    if (a.nbest > 1) {
      for (const auto& t : results[i]) out.stream() << format_nbest(i, text(t), t) << '\n';
    } else {
      out.stream() << (results[i].empty() ? std::string() : text(results[i].front())) << '\n';
    }
    if (options.attention && !results[i].empty())
      write_attention(fs::path(a.dump_attention) / (std::to_string(i) + ".txt"), results[i].front().attention);
  }
  out.close();
}

// --- score-bleu --------------------------------------------------------------

struct BleuArgs {
  std::string hypotheses, references;
  bool lowercase = false;
};

void add_score_bleu(CLI::App& app, BleuArgs& a) {
  auto* cmd = app.add_subcommand("score-bleu", "Corpus BLEU of tokenized hypotheses against references");
  cmd->add_option("--hypotheses", a.hypotheses, "one hypothesis per line")->required();
  cmd->add_option("--references", a.references, "one reference per line")->required();
  cmd->add_flag("--lowercase", a.lowercase, "compare case-insensitively");
}

void score_bleu(const BleuArgs& a) {
  BleuOptions options;
  options.case_sensitive = !a.lowercase;
  std::cout << format_bleu(corpus_bleu(read_tokenized(a.hypotheses), read_tokenized(a.references), options)) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural machine translation toolkit"};
  app.require_subcommand(1);
  VocabArgs vocab_args;
  TrainArgs train_args;
  TranslateArgs translate_args;
  BleuArgs bleu_args;
  add_build_vocab(app, vocab_args);
  add_train(app, train_args);
  add_translate(app, translate_args);
  add_score_bleu(app, bleu_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "build-vocab") build_vocab(vocab_args);
    if (name == "train") train(train_args);
    if (name == "translate") translate(translate_args);
    if (name == "score-bleu") score_bleu(bleu_args);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
