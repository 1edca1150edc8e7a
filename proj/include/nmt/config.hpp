#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmt/data.hpp"
#include "nmt/model.hpp"
#include "nmt/training.hpp"

namespace nmt {

// Everything needed to reproduce a training run.
struct RunConfig {
  ModelConfig model;
  TrainingConfig training;
  std::string train_source, train_target;
  std::string validation_source, validation_target;
  std::string output;  // model directory
  std::string source_vocab, target_vocab;  // prebuilt vocabularies; built from the training data when empty
  bool joint_vocab = false;
  std::size_t vocab_max_size = 0;  // 0: unlimited
  std::size_t vocab_min_count = 1;
};

// One configuration field: the JSON key, its flag spelling and typed accessors.
struct ConfigField {
  std::string key;   // learning_rate
  std::string flag;  // --learning-rate
  std::string help;
  std::function<nlohmann::json(const RunConfig&)> get;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<void(RunConfig&, const std::string&)> set_text;
};

const std::vector<ConfigField>& config_fields();

// Flat JSON with one key per field. Unknown keys and ill-typed values are ConfigErrors naming the key.
nlohmann::json to_json(const RunConfig& config);
RunConfig from_json(const nlohmann::json& json, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

// A trained model directory: config.json, vocab.src, vocab.trg and checkpoints.
struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Seq2SeqModel> model;
  Vocabulary source_vocab, target_vocab;
};

// Loads the parameters named by params.best.
LoadedModel load_model(const std::filesystem::path& directory);

}  // namespace nmt
