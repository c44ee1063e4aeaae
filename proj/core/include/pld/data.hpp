#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pld/model.hpp"
#include "pld/tape.hpp"

namespace pld {

// Character-level vocabulary over Unicode code points. Ids 0..2 are reserved.
class CharTokenizer {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kMask = 1;
  static constexpr std::int32_t kUnknown = 2;
  static constexpr std::int32_t kFirstChar = 3;

  static CharTokenizer from_text(std::string_view utf8);
  static CharTokenizer from_alphabet(std::vector<char32_t> alphabet);

  std::vector<std::int32_t> encode(std::string_view utf8) const;
  std::string decode(const std::vector<std::int32_t>& ids) const;

  std::size_t vocab_size() const noexcept { return alphabet_.size() + kFirstChar; }
  const std::vector<char32_t>& alphabet() const noexcept { return alphabet_; }

 private:
  std::vector<char32_t> alphabet_;  // sorted
};

std::vector<char32_t> decode_utf8(std::string_view utf8);

struct Corpus {
  CharTokenizer tokenizer;
  std::vector<std::int32_t> tokens;
  std::size_t train_end{0};  // tokens[0, train_end) train, the rest validation

  static Corpus from_text(std::string_view utf8, double validation_fraction);
  static Corpus load(const std::filesystem::path& path, double validation_fraction);

  std::size_t train_size() const noexcept { return train_end; }
  std::size_t validation_size() const noexcept { return tokens.size() - train_end; }
};

struct MlmBatch {
  TokenBatch tokens;
  MaskedTargets targets;
};

struct MlmOptions {
  std::size_t batch_size{32};
  std::size_t seq_len{64};
  double mask_prob{0.15};
  std::uint64_t seed{0};
};

// Masked-LM batches drawn from fixed-length windows. Every batch is a pure
// function of (seed, step): offsets and masks come from keyed Philox streams.
// Selected positions follow the 80/10/10 convention (mask / random char /
// unchanged) and always carry their original id as the label.
class MlmBatcher {
 public:
  // Throws ConfigError when either split is shorter than one sequence.
  MlmBatcher(const Corpus& corpus, MlmOptions options);

  MlmBatch train_batch(std::uint64_t step) const;
  // Consecutive windows of the validation split, masked with a fixed key.
  std::vector<MlmBatch> validation_batches(std::size_t count) const;

  const MlmOptions& options() const noexcept { return options_; }

 private:
  MlmBatch make_batch(const std::vector<std::size_t>& offsets, std::uint64_t mask_stream) const;

  const Corpus* corpus_;
  MlmOptions options_;
};

}  // namespace pld
