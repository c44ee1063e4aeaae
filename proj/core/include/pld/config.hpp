#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "pld/model.hpp"

namespace pld {

struct ScheduleConfig {
  bool enabled{true};
  double theta_limit{0.5};
  std::optional<double> gamma;  // defaults to 100 / total_steps
};

struct AdamConfig {
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-6};
  double weight_decay{0.01};
  double clip_norm{1.0};
};

struct LrConfig {
  double peak{3e-4};
  double warmup_ratio{0.02};
  double decay_rate{0.99};
  double decay_step{1000.0};
};

struct TrainConfig {
  ModelConfig model;  // model.vocab == 0 means "size of the corpus alphabet"
  ScheduleConfig schedule;
  AdamConfig adam;
  LrConfig lr;
  std::size_t batch_size{16};
  std::uint64_t total_steps{5000};
  std::uint64_t seed{1234};
  double mask_prob{0.15};
  std::string corpus_path{"data/corpus.txt"};
  double validation_fraction{0.1};
  std::uint64_t eval_interval{250};
  std::size_t eval_batches{8};
  std::uint64_t checkpoint_interval{1000};
  std::uint64_t log_interval{500};

  void validate() const;
};

TrainConfig default_train_config();

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& base = {});

nlohmann::json to_json(const TrainConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);
// Relative corpus paths are resolved against the config file's directory.
TrainConfig load_train_config(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace pld
