#include "nmt/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "nmt/errors.hpp"

namespace nmt {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(const double* x, std::size_t n) {
  double m = kNegInf;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i]);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

void log_normalize_rows(Tensor& t) {
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = t.storage().data() + r * cols;
    const double z = log_sum_exp(row, cols);
    for (std::size_t j = 0; j < cols; ++j) row[j] -= z;
  }
}

bool generatable(int id) { return id != kPadId && id != kBosId; }

std::vector<double> attention_row(const Tensor& weights, std::size_t row, std::size_t length) {
  const std::size_t width = weights.dim(1);
  const double* begin = weights.storage().data() + row * width;
  return {begin, begin + length};
}

struct Hypothesis {
  std::vector<int> tokens;
  double log_probability = 0.0;
  std::vector<std::vector<double>> attention;
  std::size_t row = 0;
};

struct Candidate {
  std::size_t parent = 0;  // global row
  int token = 0;
  double score = 0.0;
};

struct Search {
  std::vector<Hypothesis> active;
  std::vector<Translation> completed;
  std::size_t max_length = 0;
  std::size_t source_length = 1;  // attention columns
};

bool translation_before(const Translation& a, const Translation& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

double best_reachable(const Hypothesis& h, std::size_t max_length, double alpha) {
  const double penalty = std::max(length_penalty(h.tokens.size() + 1, alpha), length_penalty(max_length, alpha));
  return h.log_probability / penalty;
}

std::size_t output_limit(const Ensemble& ensemble, const DecodeOptions& options, std::size_t source_length) {
  return std::max<std::size_t>(1, std::min(options.max_length(source_length), ensemble.max_target_positions()));
}

// Decodes a group of sentences together; `subset` restricts the output layer for all of them.
std::vector<std::vector<Translation>> decode_group(const Ensemble& ensemble,
                                                   const std::vector<std::vector<int>>& sources,
                                                   const DecodeOptions& options, const std::vector<int>* subset) {
  if (options.beam_size == 0) throw ConfigError("beam_size: must be at least 1");
  const int att_member = ensemble.attention_member();
  if (options.attention && att_member < 0) throw CapabilityError("no ensemble member exposes attention weights");

  const SourceBatch batch = SourceBatch::from(sources);
  auto states = ensemble.start(batch);
  std::vector<Search> searches(sources.size());
  for (std::size_t s = 0; s < sources.size(); ++s) {
    searches[s].max_length = output_limit(ensemble, options, sources[s].size());
    searches[s].source_length = batch.lengths[s];
    searches[s].active.push_back(Hypothesis{{}, 0.0, {}, s});
  }

  const std::size_t vocab = subset ? subset->size() : ensemble.target_vocab_size();
  const auto token_at = [&](std::size_t j) { return subset ? (*subset)[j] : static_cast<int>(j); };

  while (true) {
    std::vector<int> rows, previous;
    for (const auto& search : searches) {
      for (const auto& h : search.active) {
        rows.push_back(static_cast<int>(h.row));
        previous.push_back(h.tokens.empty() ? kBosId : h.tokens.back());
      }
    }
    if (rows.empty()) break;
    for (auto& state : states) state = state->select(rows);
    const Tensor log_probs = ensemble.step(states, previous, subset);
    std::optional<Tensor> weights;
    if (options.attention) weights = states[static_cast<std::size_t>(att_member)]->last_attention();

    std::size_t offset = 0;
    for (auto& search : searches) {
      const std::size_t count = search.active.size();
      if (count == 0) continue;
      const std::size_t length = search.active.front().tokens.size() + 1;
      const bool force_eos = length >= search.max_length;

      std::vector<Candidate> candidates;
      candidates.reserve(count * vocab);
      for (std::size_t p = 0; p < count; ++p) {
        const double base = search.active[p].log_probability;
        for (std::size_t j = 0; j < vocab; ++j) {
          const int token = token_at(j);
          if (!generatable(token) || (force_eos && token != kEosId)) continue;
          const double lp = log_probs.at(offset + p, j);
          if (lp == kNegInf) continue;
          candidates.push_back({offset + p, token, base + lp});
        }
      }
      const auto before = [&](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        const auto& ta = search.active[a.parent - offset].tokens;
        const auto& tb = search.active[b.parent - offset].tokens;
        if (ta != tb) return ta < tb;
        return a.token < b.token;
      };
      const std::size_t keep = std::min(options.beam_size, candidates.size());
      std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(keep), candidates.end(), before);

      std::vector<Hypothesis> next;
      for (std::size_t c = 0; c < keep; ++c) {
        const Candidate& cand = candidates[c];
        const Hypothesis& parent = search.active[cand.parent - offset];
        Hypothesis h{parent.tokens, cand.score, parent.attention, cand.parent};
        h.tokens.push_back(cand.token);
        if (weights) h.attention.push_back(attention_row(*weights, cand.parent, search.source_length));
        if (cand.token == kEosId) {
          const double norm = cand.score / length_penalty(h.tokens.size(), options.length_penalty_alpha);
          search.completed.push_back({std::move(h.tokens), norm, cand.score, std::move(h.attention)});
        } else {
          next.push_back(std::move(h));
        }
      }
      offset += count;
      search.active = std::move(next);

      // Stop once the nbest-th completed hypothesis beats anything the beam can still reach.
      if (!search.active.empty() && search.completed.size() >= options.nbest) {
        std::vector<double> scores;
        for (const auto& t : search.completed) scores.push_back(t.score);
        std::nth_element(scores.begin(), scores.begin() + static_cast<long>(options.nbest - 1), scores.end(),
                         std::greater<>());
        const double threshold = scores[options.nbest - 1];
        bool beatable = false;
        for (const auto& h : search.active)
          beatable = beatable || best_reachable(h, search.max_length, options.length_penalty_alpha) >= threshold;
        if (!beatable) search.active.clear();
      }
    }
  }

  std::vector<std::vector<Translation>> out;
  for (auto& search : searches) {
    std::sort(search.completed.begin(), search.completed.end(), translation_before);
    if (search.completed.size() > options.nbest) search.completed.resize(options.nbest);
    out.push_back(std::move(search.completed));
  }
  return out;
}

std::vector<std::size_t> length_order(const std::vector<std::vector<int>>& sources) {
  std::vector<std::size_t> order(sources.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sources[a].size() < sources[b].size(); });
  return order;
}

}  // namespace

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

EnsembleMode parse_ensemble_mode(const std::string& name) {
  if (name == "linear") return EnsembleMode::kLinear;
  if (name == "log_linear") return EnsembleMode::kLogLinear;
  throw ConfigError("ensemble_mode: expected linear or log_linear, got '" + name + "'");
}

std::vector<double> ensemble_combine(const std::vector<std::vector<double>>& distributions, EnsembleMode mode,
                                     const std::vector<double>& weights) {
  if (distributions.empty()) throw DimensionError("ensemble_combine needs at least one distribution");
  const std::size_t v = distributions.front().size();
  for (const auto& d : distributions)
    if (d.size() != v) throw DimensionError("ensemble members disagree on the vocabulary size");
  std::vector<double> w = weights;
  if (w.empty()) w.assign(distributions.size(), 1.0);
  if (w.size() != distributions.size()) throw DimensionError("one weight per distribution is required");
  const double total_weight = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total_weight;

  std::vector<double> out(v, 0.0);
  for (std::size_t j = 0; j < v; ++j) {
    if (mode == EnsembleMode::kLinear) {
      for (std::size_t i = 0; i < distributions.size(); ++i) out[j] += w[i] * distributions[i][j];
    } else {
      double log_p = 0.0;
      for (std::size_t i = 0; i < distributions.size(); ++i)
        log_p += distributions[i][j] > 0.0 ? w[i] * std::log(distributions[i][j]) : kNegInf;
      out[j] = std::exp(log_p);
    }
  }
  const double z = std::accumulate(out.begin(), out.end(), 0.0);
  for (double& x : out) x /= z;
  return out;
}

Ensemble::Ensemble(std::vector<const Seq2SeqModel*> models, EnsembleMode mode, std::vector<double> weights)
    : models_(std::move(models)), mode_(mode), weights_(std::move(weights)) {
  if (models_.empty()) throw ConfigError("models: an ensemble needs at least one model");
  for (const auto* m : models_) {
    if (m->config().target_vocab_size != models_.front()->config().target_vocab_size)
      throw ConfigError("models: ensemble members must share the target vocabulary");
  }
  if (weights_.empty()) weights_.assign(models_.size(), 1.0);
  if (weights_.size() != models_.size()) throw ConfigError("ensemble_weights: one weight per model is required");
  double total = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0)) throw ConfigError("ensemble_weights: weights must be nonnegative");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("ensemble_weights: weights must not all be zero");
  for (double& w : weights_) w /= total;
}

int Ensemble::attention_member() const {
  for (std::size_t i = 0; i < models_.size(); ++i)
    if (models_[i]->exposes_attention()) return static_cast<int>(i);
  return -1;
}

std::size_t Ensemble::max_target_positions() const {
  std::size_t limit = std::numeric_limits<std::size_t>::max();
  for (const auto* m : models_)
    if (m->config().architecture != "rnn") limit = std::min(limit, m->config().max_positions);
  return limit;
}

std::vector<std::unique_ptr<DecoderState>> Ensemble::start(const SourceBatch& sources) const {
  std::vector<std::unique_ptr<DecoderState>> states;
  for (const auto* m : models_) states.push_back(m->start_decoding(sources));
  return states;
}

Tensor Ensemble::step(std::vector<std::unique_ptr<DecoderState>>& states, std::span<const int> previous,
                      const std::vector<int>* subset) const {
  std::vector<Tensor> members;
  for (std::size_t i = 0; i < models_.size(); ++i) {
    members.push_back(models_[i]->step(*states[i], previous, subset));
    log_normalize_rows(members.back());
  }
  if (members.size() == 1) return std::move(members.front());

  Tensor out(members.front().shape());
  const std::size_t n = out.size();
  if (mode_ == EnsembleMode::kLogLinear) {
    for (std::size_t i = 0; i < members.size(); ++i)
      for (std::size_t k = 0; k < n; ++k) out[k] += weights_[i] * members[i][k];
  } else {
    std::vector<double> terms(members.size());
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < members.size(); ++i) terms[i] = std::log(weights_[i]) + members[i][k];
      out[k] = log_sum_exp(terms.data(), terms.size());
    }
  }
  log_normalize_rows(out);
  return out;
}

LexicalTable load_lexical_table(const std::string& path, const Vocabulary& source_vocab,
                                const Vocabulary& target_vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read lexical table " + path);
  LexicalTable table;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string source, target, prob;
    if (!std::getline(fields, source, '\t') || !std::getline(fields, target, '\t') || !std::getline(fields, prob)) {
      throw FormatError(path + ":" + std::to_string(number) + ": expected source<TAB>target<TAB>probability");
    }
    double p = 0.0;
    try {
      p = std::stod(prob);
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(number) + ": bad probability '" + prob + "'");
    }
    if (!source_vocab.contains(source) || !target_vocab.contains(target)) continue;
    table.entries[source_vocab.id(source)].emplace_back(target_vocab.id(target), p);
  }
  for (auto& [id, list] : table.entries) {
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
  }
  return table;
}

std::vector<int> select_vocabulary(std::span<const int> source, const LexicalTable& table, std::size_t k) {
  if (k == 0) throw ConfigError("restrict_topk: must be at least 1");
  std::set<int> ids;
  for (std::size_t i = 0; i < kNumSpecials; ++i) ids.insert(static_cast<int>(i));
  for (int s : source) {
    const auto it = table.entries.find(s);
    if (it == table.entries.end()) continue;
    for (std::size_t j = 0; j < std::min(k, it->second.size()); ++j) ids.insert(it->second[j].first);
  }
  return {ids.begin(), ids.end()};
}

std::size_t DecodeOptions::max_length(std::size_t source_length) const {
  return max_output_length > 0 ? max_output_length : max_length_factor * source_length + max_length_constant;
}

std::vector<Translation> beam_search(const Ensemble& ensemble, std::span<const int> source,
                                     const DecodeOptions& options) {
  const std::vector<std::vector<int>> sources{{source.begin(), source.end()}};
  std::vector<int> subset;
  if (options.lexical_table) subset = select_vocabulary(source, *options.lexical_table, options.lexical_top_k);
  return decode_group(ensemble, sources, options, options.lexical_table ? &subset : nullptr).front();
}

std::vector<std::vector<Translation>> batch_translate(const Ensemble& ensemble,
                                                     const std::vector<std::vector<int>>& sources,
                                                     std::size_t batch_size, const DecodeOptions& options) {
  if (batch_size == 0) throw ConfigError("batch_size: must be at least 1");
  std::vector<std::vector<Translation>> out(sources.size());
  // Restricted vocabularies differ per sentence, so those decode one at a time.
  if (options.lexical_table) {
    for (std::size_t i = 0; i < sources.size(); ++i) out[i] = beam_search(ensemble, sources[i], options);
    return out;
  }
  const auto order = length_order(sources);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<std::vector<int>> group;
    for (std::size_t i = start; i < end; ++i) group.push_back(sources[order[i]]);
    auto results = decode_group(ensemble, group, options, nullptr);
    for (std::size_t i = start; i < end; ++i) out[order[i]] = std::move(results[i - start]);
  }
  return out;
}

std::vector<std::vector<int>> greedy_translate(const Ensemble& ensemble, const std::vector<std::vector<int>>& sources,
                                               std::size_t batch_size, const DecodeOptions& options) {
  if (batch_size == 0) throw ConfigError("batch_size: must be at least 1");
  std::vector<std::vector<int>> out(sources.size());
  const auto order = length_order(sources);
  const std::size_t vocab = ensemble.target_vocab_size();
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<std::vector<int>> group;
    for (std::size_t i = start; i < end; ++i) group.push_back(sources[order[i]]);
    auto states = ensemble.start(SourceBatch::from(group));
    std::vector<std::size_t> active(group.size());
    std::iota(active.begin(), active.end(), 0);
    std::vector<std::vector<int>> outputs(group.size());
    std::vector<int> rows(group.size());
    std::iota(rows.begin(), rows.end(), 0);
    while (!active.empty()) {
      for (auto& state : states) state = state->select(rows);
      std::vector<int> previous;
      for (std::size_t a : active) previous.push_back(outputs[a].empty() ? kBosId : outputs[a].back());
      const Tensor log_probs = ensemble.step(states, previous, nullptr);
      std::vector<std::size_t> still;
      rows.clear();
      for (std::size_t r = 0; r < active.size(); ++r) {
        auto& tokens = outputs[active[r]];
        int best = kEosId;
        if (tokens.size() + 1 < output_limit(ensemble, options, group[active[r]].size())) {
          double best_score = kNegInf;
          for (std::size_t j = 0; j < vocab; ++j) {
            if (!generatable(static_cast<int>(j))) continue;
            if (log_probs.at(r, j) > best_score) {
              best_score = log_probs.at(r, j);
              best = static_cast<int>(j);
            }
          }
        }
        tokens.push_back(best);
        if (best != kEosId) {
          still.push_back(active[r]);
          rows.push_back(static_cast<int>(r));
        }
      }
      active = std::move(still);
    }
    for (std::size_t i = start; i < end; ++i) out[order[i]] = std::move(outputs[i - start]);
  }
  return out;
}

std::vector<int> strip_eos(const std::vector<int>& tokens) {
  std::vector<int> out;
  for (int t : tokens) {
    if (t == kEosId) break;
    out.push_back(t);
  }
  return out;
}

std::string format_nbest(std::size_t index, const std::string& tokens, const Translation& translation) {
  char scores[96];
  std::snprintf(scores, sizeof(scores), " ||| %.6f ||| %.6f", translation.score, translation.log_probability);
  return std::to_string(index) + " ||| " + tokens + scores;
}

void write_attention(const std::filesystem::path& path, const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write attention file " + path.string());
  const std::size_t n = rows.empty() ? 0 : rows.front().size();
  out << rows.size() << ' ' << n << '\n';
  char cell[32];
  for (const auto& row : rows) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(cell, sizeof(cell), "%.6f", row[j]);
      out << (j ? " " : "") << cell;
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing attention file " + path.string());
}

}  // namespace nmt
