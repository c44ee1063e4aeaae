#include "pld/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <spdlog/spdlog.h>

#include "pld/analysis.hpp"
#include "pld/checkpoint.hpp"
#include "pld/errors.hpp"
#include "pld/optim.hpp"

namespace pld {
namespace {

namespace fs = std::filesystem;

std::string fmt_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Block index of a parameter name, and whether it belongs to the FFN half.
struct ParamOwner {
  std::optional<std::size_t> block;
  bool ffn{false};
};

ParamOwner owner_of(const std::string& name) {
  static const std::string prefix = "blocks.";
  if (name.rfind(prefix, 0) != 0) return {};
  const auto dot = name.find('.', prefix.size());
  ParamOwner o;
  o.block = std::stoul(name.substr(prefix.size(), dot - prefix.size()));
  o.ffn = name.compare(dot + 1, 3, "ffn") == 0;
  return o;
}

// Activations are a few MB each and are freed every step. With glibc's
// defaults they are served by fresh mmap calls, and the resulting page faults
// cost more than the arithmetic; keeping them on the heap avoids that.
void keep_large_buffers_on_heap() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

nlohmann::json checkpoint_extra(const TrainConfig& config, std::uint64_t step, double val_loss) {
  TrainConfig stored = config;
  stored.corpus_path = fs::absolute(config.corpus_path).string();
  return {{"step", step}, {"val_loss", val_loss}, {"train_config", to_json(stored)}};
}

}  // namespace

EvalData EvalData::from_config(const TrainConfig& config) {
  EvalData d{Corpus::load(config.corpus_path, config.validation_fraction), {}};
  MlmBatcher batcher(d.corpus, MlmOptions{config.batch_size, config.model.max_seq, config.mask_prob, config.seed});
  d.batches = batcher.validation_batches(config.eval_batches);
  return d;
}

ModelConfig resolve_model_config(const TrainConfig& config, const Corpus& corpus) {
  ModelConfig m = config.model;
  const std::size_t needed = corpus.tokenizer.vocab_size();
  if (m.vocab == 0) {
    m.vocab = needed;
  } else if (m.vocab < needed) {
    throw ConfigError("model.vocab = " + std::to_string(m.vocab) + " but the corpus needs " + std::to_string(needed));
  }
  m.validate();
  return m;
}

std::optional<DropSchedule> drop_schedule(const TrainConfig& config) {
  if (!config.schedule.enabled) return std::nullopt;
  DropSchedule s{config.schedule.theta_limit, config.schedule.gamma.value_or(default_gamma(config.total_steps)),
                 config.total_steps, config.model.layers};
  s.validate();
  return s;
}

double evaluate(const ModelWeights<float>& weights, std::span<const MlmBatch> batches) {
  const auto gates = full_depth(weights.config.layers);
  return masked_lm_loss(weights, batches, std::span<const BlockGate>(gates));
}

TrainConfig checkpoint_train_config(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  const auto extra = manifest.value("extra", nlohmann::json::object());
  if (!extra.contains("train_config")) {
    throw ConfigError("checkpoint " + dir.string() + " carries no training config");
  }
  return train_config_from_json(extra.at("train_config"));
}

double evaluate_checkpoint(const fs::path& dir) {
  const auto config = checkpoint_train_config(dir);
  const auto weights = load_checkpoint<float>(dir);
  const auto data = EvalData::from_config(config);
  if (weights.config != resolve_model_config(config, data.corpus)) {
    throw ConfigError("checkpoint model does not match its stored training config");
  }
  return evaluate(weights, data.batches);
}

TrainSummary train(const TrainConfig& config, const fs::path& out_dir, const TrainHooks& hooks) {
  config.validate();
  keep_large_buffers_on_heap();
  const Corpus corpus = Corpus::load(config.corpus_path, config.validation_fraction);
  const MlmBatcher batcher(corpus, MlmOptions{config.batch_size, config.model.max_seq, config.mask_prob, config.seed});
  const auto val_batches = batcher.validation_batches(config.eval_batches);
  const ModelConfig model_cfg = resolve_model_config(config, corpus);
  const auto schedule = drop_schedule(config);
  const std::size_t L = model_cfg.layers;

  fs::create_directories(out_dir / "checkpoints");
  TrainSummary summary;
  summary.metrics_csv = out_dir / "metrics.csv";
  summary.timing_csv = out_dir / "timing.csv";
  std::ofstream metrics(summary.metrics_csv);
  std::ofstream timing(summary.timing_csv);
  if (!metrics || !timing) throw ConfigError("cannot write metrics into " + out_dir.string());
  metrics << kMetricsHeader << '\n';
  timing << "step,ms\n";

  auto weights = ModelWeights<float>::initialize(model_cfg, config.seed);
  const auto params = weights.parameters();
  std::vector<ParamOwner> owners;
  owners.reserve(params.size());
  for (const auto& p : params) owners.push_back(owner_of(p.name));
  AdamState<float> adam;
  std::vector<std::uint8_t> active(params.size(), 1);

  auto validate_at = [&](std::uint64_t step) {
    const double loss = evaluate(weights, val_batches);
    if (!std::isfinite(loss)) throw DivergenceError("non-finite validation loss at step " + std::to_string(step));
    metrics << step << ",val,," << fmt_value(loss) << ",,,,\n";
    return loss;
  };

  summary.initial_val_loss = validate_at(0);
  save_checkpoint(out_dir / "checkpoints" / "step_0", weights,
                  checkpoint_extra(config, 0, summary.initial_val_loss));
  spdlog::info("step 0: val_loss {:.4f} ({} blocks, variant {}, schedule {})", summary.initial_val_loss, L,
               variant_name(model_cfg.variant), schedule ? "on" : "off");

  const std::uint64_t T = config.total_steps;
  const std::uint64_t tail_start = T - std::max<std::uint64_t>(1, T / 10) + 1;
  std::uint64_t blocks_run = 0;
  std::uint64_t tail_steps = 0;
  double tail_kept = 0.0, tail_expected = 0.0, tail_var = 0.0, tail_ms = 0.0;
  double last_val = summary.initial_val_loss;

  for (std::uint64_t t = 1; t <= T; ++t) {
    const auto started = std::chrono::steady_clock::now();

    GateVector gates = GateVector::all_on(L);
    double theta = 1.0;
    if (schedule) {
      theta = keep_ratio(*schedule, static_cast<double>(t));
      gates = sample_gates(*schedule, t, config.seed, model_cfg.per_sublayer_gates);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& o = owners[i];
      if (!o.block) continue;
      const std::size_t l = *o.block;
      active[i] = (o.ffn && gates.per_sublayer()) ? gates.ffn_keep[l] : gates.keep[l];
    }

    const MlmBatch batch = batcher.train_batch(t);
    weights.zero_grad();
    Tape<float> tape;
    const auto logits =
        forward_model(tape, weights, batch.tokens, gates, ForwardOptions{Mode::kTrain, config.seed, t});
    const auto loss = tape.cross_entropy(logits, batch.targets);
    const double train_loss = loss.item();
    if (!std::isfinite(train_loss)) {
      throw DivergenceError("non-finite training loss at step " + std::to_string(t));
    }
    tape.backward(loss);
    const double lr = lr_at(t, config.lr, T);
    adam_step(std::span<const NamedTensor<float>>(params), adam, lr, config.adam, active);

    const std::size_t kept = gates.kept();
    blocks_run += kept;
    const double flops_fraction = static_cast<double>(blocks_run) / static_cast<double>(L * t);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();

    metrics << t << ",train," << fmt_value(train_loss) << ",," << fmt_value(lr) << ',' << fmt_value(theta) << ','
            << kept << ',' << fmt_value(flops_fraction) << '\n';
    timing << t << ',' << fmt_value(ms) << '\n';

    if (t >= tail_start) {
      ++tail_steps;
      tail_kept += static_cast<double>(kept);
      tail_ms += ms;
      for (double p : gates.prob) {
        tail_expected += p;
        tail_var += p * (1.0 - p);
      }
    }
    summary.final_train_loss = train_loss;
    if (hooks.after_step) hooks.after_step(t, weights);

    if (t % config.eval_interval == 0 || t == T) last_val = validate_at(t);
    if (config.checkpoint_interval > 0 && t % config.checkpoint_interval == 0 && t != T) {
      save_checkpoint(out_dir / "checkpoints" / ("step_" + std::to_string(t)), weights,
                      checkpoint_extra(config, t, last_val));
    }
    if (config.log_interval > 0 && t % config.log_interval == 0) {
      spdlog::info("step {}: train_loss {:.4f} val_loss {:.4f} lr {:.3g} theta {:.3f} block_flops {:.3f}", t,
                   train_loss, last_val, lr, theta, flops_fraction);
    }
  }

  summary.steps = T;
  summary.final_val_loss = last_val;
  summary.block_flops_fraction = static_cast<double>(blocks_run) / static_cast<double>(L * T);
  const double n = static_cast<double>(tail_steps);
  summary.mean_kept_final = tail_kept / n;
  summary.expected_kept_final = tail_expected / n;
  summary.kept_variance_final = tail_var / n;
  summary.mean_ms_final = tail_ms / n;
  summary.final_checkpoint = out_dir / "checkpoints" / "final";
  save_checkpoint(summary.final_checkpoint, weights, checkpoint_extra(config, T, last_val));
  metrics.flush();
  timing.flush();
  return summary;
}

}  // namespace pld
