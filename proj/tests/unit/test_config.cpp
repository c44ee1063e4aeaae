#include <gtest/gtest.h>

#include <fstream>

#include "pld/config.hpp"
#include "pld/errors.hpp"
#include "support.hpp"

namespace pld {
namespace {

TEST(Config, DefaultsMatchDeskScale) {
  const auto c = default_train_config();
  EXPECT_EQ(c.model.layers, 6u);
  EXPECT_EQ(c.model.hidden, 64u);
  EXPECT_EQ(c.model.heads, 4u);
  EXPECT_EQ(c.model.max_seq, 64u);
  EXPECT_EQ(c.total_steps, 5000u);
  EXPECT_EQ(c.schedule.theta_limit, 0.5);
  EXPECT_EQ(c.lr.warmup_ratio, 0.02);
  EXPECT_EQ(c.lr.decay_rate, 0.99);
  EXPECT_EQ(c.lr.decay_step, 1000.0);
  EXPECT_EQ(c.adam.clip_norm, 1.0);
  EXPECT_EQ(c.adam.weight_decay, 0.01);
  EXPECT_EQ(c.model.dropout, 0.1);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTrip) {
  auto c = default_train_config();
  c.seed = 77;
  c.schedule.gamma = 0.25;
  c.model.variant = Variant::kST;
  c.model.per_sublayer_gates = true;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.schedule.gamma, 0.25);
  EXPECT_EQ(back.model, c.model);
}

TEST(Config, ScheduleNoneDisablesDropping) {
  auto j = to_json(default_train_config());
  j["schedule"] = "none";
  j["model"]["variant"] = "postln";
  const auto c = train_config_from_json(j);
  EXPECT_FALSE(c.schedule.enabled);
  EXPECT_EQ(c.model.variant, Variant::kPostLN);
  j["schedule"] = "sometimes";
  EXPECT_THROW(train_config_from_json(j), ConfigError);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  auto j = to_json(default_train_config());
  j["learning_rate"] = 0.1;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = to_json(default_train_config());
  j["model"]["depth"] = 3;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = to_json(default_train_config());
  j["batch_size"] = "many";
  EXPECT_THROW(train_config_from_json(j), ConfigError);
}

TEST(Config, ValidationRules) {
  auto c = default_train_config();
  c.lr.warmup_ratio = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = default_train_config();
  c.mask_prob = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = default_train_config();
  c.lr.peak = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = default_train_config();
  c.model.variant = Variant::kPreLN;  // schedule still enabled
  EXPECT_THROW(c.validate(), ConfigError);
  c.schedule.enabled = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RelativeCorpusPathResolvesAgainstConfigFile) {
  const auto dir = pld::testing::scratch_dir("config_paths");
  auto j = to_json(default_train_config());
  j["corpus_path"] = "texts/c.txt";
  write_json(dir / "cfg.json", j);
  const auto c = load_train_config(dir / "cfg.json");
  EXPECT_EQ(std::filesystem::path(c.corpus_path), (dir / "texts" / "c.txt").lexically_normal());
  EXPECT_THROW(load_train_config(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_train_config(dir / "bad.json"), ConfigError);
}

TEST(Config, BundledConfigsLoad) {
  for (const char* name : {"default.json", "baseline_preln.json", "baseline_postln.json", "smoke.json"}) {
    EXPECT_NO_THROW(load_train_config(pld::testing::source_dir() / "configs" / name)) << name;
  }
}

}  // namespace
}  // namespace pld
