#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "pld/config.hpp"
#include "pld/model.hpp"

namespace pld::testing {

inline std::filesystem::path source_dir() { return PLD_SOURCE_DIR; }
inline std::filesystem::path corpus_path() { return source_dir() / "data" / "corpus.txt"; }

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pld_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// A few dozen steps on a 2-block model; small enough for unit tests.
inline TrainConfig tiny_train_config() {
  TrainConfig c;
  c.model.layers = 2;
  c.model.hidden = 16;
  c.model.heads = 2;
  c.model.max_seq = 16;
  c.model.vocab = 0;
  c.batch_size = 4;
  c.total_steps = 12;
  c.eval_interval = 5;
  c.eval_batches = 2;
  c.checkpoint_interval = 6;
  c.log_interval = 0;
  c.corpus_path = corpus_path().string();
  return c;
}

inline ModelConfig small_model(Variant v, std::size_t layers = 2) {
  ModelConfig m;
  m.layers = layers;
  m.hidden = 8;
  m.heads = 2;
  m.vocab = 13;
  m.max_seq = 8;
  m.variant = v;
  m.dropout = 0.1;
  return m;
}

inline TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab) - 1);
  TokenBatch tb{{batch, seq}, std::vector<std::int32_t>(batch * seq)};
  for (auto& id : tb.ids) id = pick(rng);
  return tb;
}

// Residual branches output exactly zero, so PreLN/ST blocks become identities.
template <typename T>
void zero_residual_outputs(ModelWeights<T>& w) {
  for (auto& b : w.blocks) {
    for (auto* t : {&b.wo, &b.w2, &b.b2}) {
      for (auto& v : t->data()) v = T(0);
    }
  }
}

}  // namespace pld::testing
