#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "pld/config.hpp"
#include "pld/data.hpp"
#include "pld/model.hpp"
#include "pld/schedule.hpp"

namespace pld {

// Corpus plus the fixed validation batches implied by a TrainConfig. The
// batcher keeps a pointer to the corpus, so this object must not be copied
// while a batcher built from it is alive.
struct EvalData {
  Corpus corpus;
  std::vector<MlmBatch> batches;

  static EvalData from_config(const TrainConfig& config);
};

// Model config with vocab resolved against the corpus. Throws ConfigError if
// an explicit vocab is too small for the corpus alphabet.
ModelConfig resolve_model_config(const TrainConfig& config, const Corpus& corpus);

// Schedule implied by the config; nullopt when layer dropping is disabled.
std::optional<DropSchedule> drop_schedule(const TrainConfig& config);

struct TrainSummary {
  std::uint64_t steps{0};
  double initial_val_loss{0.0};
  double final_val_loss{0.0};
  double final_train_loss{0.0};
  double mean_kept_final{0.0};       // mean kept blocks over the last 10 % of steps
  double expected_kept_final{0.0};   // sum of p_l(t) averaged over the same steps
  double kept_variance_final{0.0};   // sum of p_l(1 - p_l) averaged over the same steps
  double block_flops_fraction{1.0};  // blocks run / (L * steps), whole run
  double mean_ms_final{0.0};         // wall clock per step over the last 10 %
  std::filesystem::path metrics_csv;
  std::filesystem::path timing_csv;
  std::filesystem::path final_checkpoint;
};

struct TrainHooks {
  // Called after every optimizer step with the weights just updated.
  std::function<void(std::uint64_t step, const ModelWeights<float>&)> after_step;
};

// Runs the masked-LM loop for config.total_steps steps and writes into
// out_dir:
//   metrics.csv     one row per step and one per validation; a pure function
//                   of the config, so reruns compare equal byte for byte
//   timing.csv      wall-clock milliseconds per step
//   checkpoints/    step_<t>/ at every checkpoint interval, and final/
// A non-finite loss or gradient throws DivergenceError; checkpoints written
// before that point are left in place.
TrainSummary train(const TrainConfig& config, const std::filesystem::path& out_dir, const TrainHooks& hooks = {});

// Mean masked cross-entropy at full depth with dropout off.
double evaluate(const ModelWeights<float>& weights, std::span<const MlmBatch> batches);

// Loads a checkpoint written by train() and evaluates it on the validation
// batches of the config stored alongside it.
double evaluate_checkpoint(const std::filesystem::path& dir);
TrainConfig checkpoint_train_config(const std::filesystem::path& dir);

inline constexpr const char* kMetricsHeader =
    "step,kind,train_loss,val_loss,lr,theta,kept_blocks,block_flops_fraction";

}  // namespace pld
