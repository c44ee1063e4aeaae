#include "pld/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pld/analysis.hpp"
#include "pld/checkpoint.hpp"
#include "pld/config.hpp"
#include "pld/errors.hpp"
#include "pld/flops.hpp"
#include "pld/gradcheck.hpp"
#include "pld/schedule.hpp"
#include "pld/trainer.hpp"

namespace pld {
namespace {

namespace fs = std::filesystem;

struct CommonOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<double> theta_bar;
  std::optional<std::uint64_t> steps;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_csv(const fs::path& path, const std::string& header) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << header << '\n';
  return f;
}

TrainConfig effective_config(const CommonOptions& o, bool baseline = false) {
  TrainConfig c = o.config.empty() ? default_train_config() : load_train_config(o.config);
  if (baseline) c.schedule.enabled = false;
  if (o.seed) c.seed = *o.seed;
  if (o.variant) c.model.variant = parse_variant(*o.variant);
  if (o.steps) c.total_steps = *o.steps;
  if (o.theta_bar) {
    c.schedule.enabled = true;
    c.schedule.theta_limit = *o.theta_bar;
  }
  c.validate();
  return c;
}

fs::path prepare_out(const CommonOptions& o, const TrainConfig& c) {
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_json(dir / "effective_config.json", to_json(c));
  return dir;
}

void add_common(CLI::App* cmd, CommonOptions& o, bool needs_config) {
  auto* cfg = cmd->add_option("--config", o.config, "training config (JSON)")->check(CLI::ExistingFile);
  if (needs_config) cfg->required();
  cmd->add_option("--out", o.out, "output directory")->required();
  cmd->add_option("--seed", o.seed, "override the config seed");
  cmd->add_option("--variant", o.variant, "override the block variant")
      ->check(CLI::IsMember({"postln", "preln", "st"}, CLI::ignore_case));
  cmd->add_option("--theta-bar", o.theta_bar, "limit keep ratio; enables layer dropping")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--steps", o.steps, "override the number of training steps");
}

int cmd_train(const CommonOptions& o, bool baseline, std::ostream& out) {
  const TrainConfig c = effective_config(o, baseline);
  const auto dir = prepare_out(o, c);
  const auto s = train(c, dir);
  const nlohmann::json summary = {{"steps", s.steps},
                                  {"initial_val_loss", s.initial_val_loss},
                                  {"final_val_loss", s.final_val_loss},
                                  {"final_train_loss", s.final_train_loss},
                                  {"block_flops_fraction", s.block_flops_fraction},
                                  {"mean_kept_final", s.mean_kept_final},
                                  {"expected_kept_final", s.expected_kept_final},
                                  {"mean_ms_final", s.mean_ms_final}};
  write_json(dir / "summary.json", summary);
  out << summary.dump(2) << '\n';
  return kExitOk;
}

int cmd_schedule(const CommonOptions& o, std::size_t layers_override, std::ostream& out) {
  TrainConfig c = effective_config(o);
  if (layers_override) c.model.layers = layers_override;
  const auto dir = prepare_out(o, c);
  const DropSchedule s{c.schedule.theta_limit, c.schedule.gamma.value_or(default_gamma(c.total_steps)),
                       c.total_steps, c.model.layers};
  s.validate();
  ModelConfig model = c.model;
  if (model.vocab == 0) model.vocab = 64;

  std::string header = "step,theta";
  for (std::size_t l = 1; l <= s.layers; ++l) header += ",p_" + std::to_string(l);
  header += ",expected_depth,block_flops_fraction,flops_fraction";
  for (int k = 1; k <= 8; ++k) header += ",ref_poly_" + std::to_string(k);
  auto csv = open_csv(dir / "schedule.csv", header);
  const double T = static_cast<double>(s.total_steps);
  for (std::uint64_t t = 0; t <= s.total_steps; ++t) {
    const double td = static_cast<double>(t);
    csv << t << ',' << num(keep_ratio(s, td));
    for (double p : layer_keep_probs(s, td)) csv << ',' << num(p);
    csv << ',' << num(expected_depth(s, td)) << ',' << num(block_flops_fraction(s, td)) << ','
        << num(flops_fraction(s, model, model.max_seq, td));
    for (int k = 1; k <= 8; ++k) csv << ',' << num(std::max(s.theta_limit, 1.0 - std::pow(td / T, k)));
    csv << '\n';
  }
  out << "schedule: " << s.total_steps + 1 << " rows, steady-state depth " << num(steady_state_depth(s)) << " of "
      << s.layers << '\n';
  return kExitOk;
}

int cmd_flops(const CommonOptions& o, std::ostream& out) {
  TrainConfig c = effective_config(o);
  c.schedule.enabled = true;
  const auto dir = prepare_out(o, c);
  const DropSchedule s{c.schedule.theta_limit, c.schedule.gamma.value_or(default_gamma(c.total_steps)),
                       c.total_steps, c.model.layers};
  s.validate();
  ModelConfig model = c.model;
  if (model.vocab == 0) model.vocab = 64;
  const std::size_t seq = model.max_seq;
  const auto per_token = flops_per_token(model, seq);

  auto csv = open_csv(dir / "flops.csv",
                      "step,theta,expected_depth,block_flops_fraction,flops_fraction,train_flops_per_token");
  double block_sum = 0.0, total_sum = 0.0;
  for (std::uint64_t t = 0; t <= s.total_steps; ++t) {
    const double td = static_cast<double>(t);
    const double depth = expected_depth(s, td);
    const double bf = block_flops_fraction(s, td);
    const double ff = flops_fraction(s, model, seq, td);
    if (t > 0) {
      block_sum += bf;
      total_sum += ff;
    }
    csv << t << ',' << num(keep_ratio(s, td)) << ',' << num(depth) << ',' << num(bf) << ',' << num(ff) << ','
        << num(training_flops_per_token(model, seq, depth)) << '\n';
  }
  const double steps = static_cast<double>(s.total_steps);
  const double steady = steady_state_depth(s);
  auto summary = open_csv(dir / "flops_summary.csv", "metric,value");
  summary << "block_flops_per_token," << num(per_token.block) << '\n'
          << "fixed_flops_per_token," << num(per_token.fixed) << '\n'
          << "steady_state_depth," << num(steady) << '\n'
          << "steady_state_block_flops_fraction," << num(steady / static_cast<double>(s.layers)) << '\n'
          << "steady_state_block_flops_saving," << num(1.0 - steady / static_cast<double>(s.layers)) << '\n'
          << "mean_block_flops_fraction," << num(block_sum / steps) << '\n'
          << "mean_flops_fraction," << num(total_sum / steps) << '\n';
  out << "steady-state block FLOPS fraction " << num(steady / static_cast<double>(s.layers)) << '\n';
  return kExitOk;
}

struct LoadedModel {
  ModelWeights<float> weights;
  TrainConfig config;
  std::uint64_t step{0};
};

LoadedModel load_or_init(const CommonOptions& o, const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    nlohmann::json extra;
    auto w = load_checkpoint<float>(checkpoint, &extra);
    TrainConfig c = checkpoint_train_config(checkpoint);
    if (o.seed) c.seed = *o.seed;
    return {std::move(w), c, extra.value("step", std::uint64_t{0})};
  }
  TrainConfig c = effective_config(o);
  const Corpus corpus = Corpus::load(c.corpus_path, c.validation_fraction);
  return {ModelWeights<float>::initialize(resolve_model_config(c, corpus), c.seed), c, 0};
}

int cmd_analyze(const CommonOptions& o, const std::string& checkpoint, std::ostream& out) {
  const auto m = load_or_init(o, checkpoint);
  const auto dir = prepare_out(o, m.config);
  const auto data = EvalData::from_config(m.config);
  const MlmBatch& batch = data.batches.front();
  const std::string tail = "," + std::to_string(m.step) + "," + std::to_string(m.config.seed) + "\n";
  const std::string header = "layer,metric,value,step,seed";

  {
    auto csv = open_csv(dir / "grad_norms.csv", header);
    const auto norms = layer_grad_norms(m.weights, batch);
    for (std::size_t l = 0; l < norms.size(); ++l) csv << l << ",weight_grad_norm," << num(norms[l]) << tail;
  }
  {
    auto csv = open_csv(dir / "norm_ratio.csv", header);
    for (const auto& r : norm_preserving_ratios(m.weights, batch)) {
      csv << r.layer << ",input_grad_norm," << num(r.input_grad_norm) << tail;
      csv << r.layer << ",output_grad_norm," << num(r.output_grad_norm) << tail;
      if (r.valid) csv << r.layer << ",norm_preserving_ratio," << num(r.ratio) << tail;
    }
  }
  {
    auto csv = open_csv(dir / "io_similarity.csv", header);
    for (const auto& s : io_similarity(m.weights, batch)) {
      csv << s.layer << ",l2_distance," << num(s.l2_distance) << tail;
      csv << s.layer << ",arccos_degrees," << num(s.arccos_degrees) << tail;
      csv << s.layer << ",degenerate," << s.degenerate << tail;
    }
  }
  if (m.weights.config.variant != Variant::kPostLN) {
    auto csv = open_csv(dir / "residual_mean.csv", header);
    for (const auto& r : residual_mean(m.weights, batch)) {
      csv << r.layer << ",residual_mean_norm," << num(r.norm) << tail;
      csv << r.layer << ",residual_mean_relative," << num(r.relative) << tail;
    }
  }
  out << "analysis written to " << dir.string() << '\n';
  return kExitOk;
}

int cmd_lesion(const CommonOptions& o, const std::string& checkpoint, double keep, std::size_t seeds,
               std::ostream& out) {
  const auto m = load_or_init(o, checkpoint);
  const auto dir = prepare_out(o, m.config);
  const auto data = EvalData::from_config(m.config);
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(m.config.seed + i);
  const auto r = lesion_eval(m.weights, keep, std::span<const MlmBatch>(data.batches),
                             std::span<const std::uint64_t>(seed_list));
  auto csv = open_csv(dir / "lesion.csv", "seed,keep_ratio,full_loss,unscaled_loss,scaled_loss");
  for (std::size_t i = 0; i < seed_list.size(); ++i) {
    csv << seed_list[i] << ',' << num(keep) << ',' << num(r.full_loss) << ',' << num(r.unscaled[i]) << ','
        << num(r.scaled[i]) << '\n';
  }
  out << "full " << num(r.full_loss) << ", lesioned unscaled " << num(r.mean_unscaled) << " +- "
      << num(r.stderr_unscaled) << ", scaled " << num(r.mean_scaled) << " +- " << num(r.stderr_scaled) << '\n';
  return kExitOk;
}

int cmd_grad_check(const CommonOptions& o, std::ostream& out) {
  const auto c = effective_config(o);
  const auto dir = prepare_out(o, c);
  const auto results = run_gradcheck_suite(c.seed);
  auto csv = open_csv(dir / "gradcheck.csv", "name,max_rel_error,max_abs_error,evaluations,pass");
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.max_rel_error < kGradCheckTolerance;
    ok = ok && pass;
    csv << r.name << ',' << num(r.max_rel_error) << ',' << num(r.max_abs_error) << ',' << r.evaluations << ','
        << (pass ? 1 : 0) << '\n';
    out << (pass ? "ok   " : "FAIL ") << r.name << "  rel " << num(r.max_rel_error) << '\n';
  }
  return ok ? kExitOk : kExitDivergence;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Progressive layer dropping on a desk-scale masked-LM transformer", "pld"};
  app.require_subcommand(1);

  CommonOptions train_o, sched_o, analyze_o, lesion_o, flops_o, grad_o;
  bool baseline = false;
  std::size_t layers = 0;
  std::string analyze_ckpt, lesion_ckpt;
  double keep = 0.5;
  std::size_t seeds = 5;

  auto* train_cmd = app.add_subcommand("train", "train a model and write metrics and checkpoints");
  add_common(train_cmd, train_o, true);
  train_cmd->add_flag("--baseline", baseline, "disable layer dropping");

  auto* sched_cmd = app.add_subcommand("schedule", "export keep ratio and per-layer keep probabilities");
  add_common(sched_cmd, sched_o, false);
  sched_cmd->add_option("--layers", layers, "number of blocks (overrides the config)");

  auto* analyze_cmd = app.add_subcommand("analyze", "per-layer gradient and similarity profiles");
  add_common(analyze_cmd, analyze_o, false);
  analyze_cmd->add_option("--checkpoint", analyze_ckpt, "checkpoint directory (default: fresh init)")
      ->check(CLI::ExistingDirectory);

  auto* lesion_cmd = app.add_subcommand("lesion", "validation loss with randomly removed blocks");
  add_common(lesion_cmd, lesion_o, false);
  lesion_cmd->add_option("--checkpoint", lesion_ckpt, "checkpoint directory")
      ->check(CLI::ExistingDirectory)
      ->required();
  lesion_cmd->add_option("--keep", keep, "keep ratio")->check(CLI::Range(0.0, 1.0));
  lesion_cmd->add_option("--seeds", seeds, "number of gate seeds")->check(CLI::PositiveNumber);

  auto* flops_cmd = app.add_subcommand("flops", "FLOPS accounting over a training schedule");
  add_common(flops_cmd, flops_o, false);

  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference check of every op and small models");
  add_common(grad_cmd, grad_o, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_o, baseline, out);
    if (*sched_cmd) return cmd_schedule(sched_o, layers, out);
    if (*analyze_cmd) return cmd_analyze(analyze_o, analyze_ckpt, out);
    if (*lesion_cmd) return cmd_lesion(lesion_o, lesion_ckpt, keep, seeds, out);
    if (*flops_cmd) return cmd_flops(flops_o, out);
    if (*grad_cmd) return cmd_grad_check(grad_o, out);
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace pld
