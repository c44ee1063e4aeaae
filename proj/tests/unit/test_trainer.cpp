#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pld/checkpoint.hpp"
#include "pld/errors.hpp"
#include "pld/trainer.hpp"
#include "support.hpp"

namespace pld {
namespace {

namespace fs = std::filesystem;
using pld::testing::scratch_dir;
using pld::testing::tiny_train_config;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Trainer, RerunsProduceIdenticalMetrics) {
  auto c = tiny_train_config();
  c.model.variant = Variant::kST;
  const auto a = train(c, scratch_dir("rerun_a"));
  const auto b = train(c, scratch_dir("rerun_b"));
  const auto ma = slurp(a.metrics_csv);
  EXPECT_EQ(ma, slurp(b.metrics_csv));
  EXPECT_EQ(ma.rfind(kMetricsHeader, 0), 0u);
  EXPECT_EQ(a.final_val_loss, b.final_val_loss);
  EXPECT_EQ(a.steps, c.total_steps);
}

TEST(Trainer, DifferentSeedsDiverge) {
  auto c = tiny_train_config();
  const auto a = train(c, scratch_dir("seed_a"));
  c.seed += 1;
  const auto b = train(c, scratch_dir("seed_b"));
  EXPECT_NE(slurp(a.metrics_csv), slurp(b.metrics_csv));
}

TEST(Trainer, WritesCheckpointsAndTheyEvaluateIdentically) {
  const auto c = tiny_train_config();
  const auto out = scratch_dir("ckpt");
  const auto s = train(c, out);
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "step_0"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "step_6"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "final"));
  EXPECT_TRUE(fs::exists(s.timing_csv));
  EXPECT_EQ(evaluate_checkpoint(s.final_checkpoint), s.final_val_loss);

  const auto restored = checkpoint_train_config(s.final_checkpoint);
  EXPECT_EQ(restored.seed, c.seed);
  EXPECT_EQ(restored.total_steps, c.total_steps);
}

TEST(Trainer, UntrainedLossIsNearUniform) {
  auto c = tiny_train_config();
  c.total_steps = 1;
  c.model.variant = Variant::kPreLN;
  c.schedule.enabled = false;
  const auto s = train(c, scratch_dir("untrained"));
  const auto data = EvalData::from_config(c);
  const double uniform = std::log(static_cast<double>(data.corpus.tokenizer.vocab_size()));
  EXPECT_NEAR(s.initial_val_loss, uniform, 0.05 * uniform);
}

TEST(Trainer, StartsFromTheSameLossAsPreLn) {
  auto c = tiny_train_config();
  c.total_steps = 1;
  c.model.variant = Variant::kST;
  const auto st = train(c, scratch_dir("st0"));
  c.model.variant = Variant::kPreLN;
  c.schedule.enabled = false;
  const auto pre = train(c, scratch_dir("pre0"));
  EXPECT_EQ(st.initial_val_loss, pre.initial_val_loss);
}

TEST(Trainer, LossDecreases) {
  auto c = tiny_train_config();
  c.total_steps = 60;
  c.eval_interval = 60;
  c.checkpoint_interval = 60;
  c.lr.peak = 3e-3;
  const auto s = train(c, scratch_dir("decrease"));
  EXPECT_LT(s.final_val_loss, s.initial_val_loss);
}

TEST(Trainer, HugeLearningRateDiverges) {
  auto c = tiny_train_config();
  c.lr.peak = 1e35;
  c.adam.clip_norm = 0.0;
  c.schedule.enabled = false;
  const auto out = scratch_dir("diverge");
  EXPECT_THROW(train(c, out), DivergenceError);
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "step_0"));
}

TEST(Trainer, DroppedBlocksKeepTheirWeights) {
  auto c = tiny_train_config();
  c.model.layers = 4;
  c.total_steps = 20;
  c.schedule.theta_limit = 0.2;
  c.schedule.gamma = 1.0;
  c.model.dropout = 0.0;

  std::vector<std::vector<std::vector<float>>> previous;
  std::size_t unchanged_blocks = 0;
  std::size_t changed_blocks = 0;
  TrainHooks hooks;
  hooks.after_step = [&](std::uint64_t, const ModelWeights<float>& w) {
    std::vector<std::vector<float>> now;
    for (std::size_t l = 0; l < w.blocks.size(); ++l) {
      std::vector<float> flat;
      for (const auto& p : w.block_parameters(l)) flat.insert(flat.end(), p.tensor.data().begin(), p.tensor.data().end());
      now.push_back(std::move(flat));
    }
    if (!previous.empty()) {
      for (std::size_t l = 0; l < now.size(); ++l) (now[l] == previous.back()[l] ? unchanged_blocks : changed_blocks)++;
    }
    previous.push_back(std::move(now));
  };
  train(c, scratch_dir("frozen"), hooks);
  // Block 0 always runs; with theta near 0.2 deep blocks are skipped often.
  EXPECT_GT(unchanged_blocks, 0u);
  EXPECT_GT(changed_blocks, 0u);
}

TEST(Trainer, SummaryTracksDepth) {
  auto c = tiny_train_config();
  c.model.layers = 4;
  c.total_steps = 40;
  c.schedule.gamma = 1.0;
  c.schedule.theta_limit = 0.5;
  const auto s = train(c, scratch_dir("depth"));
  EXPECT_LT(s.block_flops_fraction, 1.0);
  EXPECT_GT(s.block_flops_fraction, 0.25);
  EXPECT_NEAR(s.expected_kept_final, 4.0 - 0.5 * 3.0 / 2.0, 1e-3);

  c.schedule.enabled = false;
  const auto dense = train(c, scratch_dir("dense"));
  EXPECT_EQ(dense.block_flops_fraction, 1.0);
  EXPECT_EQ(dense.mean_kept_final, 4.0);
}

TEST(Trainer, ExplicitVocabMustCoverCorpus) {
  auto c = tiny_train_config();
  c.model.vocab = 5;
  EXPECT_THROW(train(c, scratch_dir("vocab")), ConfigError);
}

}  // namespace
}  // namespace pld
