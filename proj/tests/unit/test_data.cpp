#include <gtest/gtest.h>

#include <cmath>

#include "pld/data.hpp"
#include "pld/errors.hpp"
#include "support.hpp"

namespace pld {
namespace {

TEST(Tokenizer, RoundTripsUtf8) {
  const std::string text = "naïve café, 東京";
  const auto tok = CharTokenizer::from_text(text);
  const auto ids = tok.encode(text);
  EXPECT_EQ(ids.size(), decode_utf8(text).size());
  EXPECT_EQ(tok.decode(ids), text);
  for (auto id : ids) EXPECT_GE(id, CharTokenizer::kFirstChar);
  EXPECT_EQ(tok.encode("?")[0], CharTokenizer::kUnknown);
}

TEST(Tokenizer, VocabularyIsSortedAlphabetPlusReserved) {
  const auto tok = CharTokenizer::from_text("cabbage");
  EXPECT_EQ(tok.vocab_size(), 5u + 3u);  // a b c e g
  EXPECT_EQ(tok.encode("a")[0], CharTokenizer::kFirstChar);
  EXPECT_EQ(tok.encode("g")[0], CharTokenizer::kFirstChar + 4);
}

TEST(Corpus, SplitAndShortCorpusError) {
  std::string text(1000, 'a');
  for (std::size_t i = 0; i < text.size(); i += 7) text[i] = 'b';
  const auto c = Corpus::from_text(text, 0.1);
  EXPECT_EQ(c.tokens.size(), 1000u);
  EXPECT_EQ(c.validation_size(), 100u);
  EXPECT_THROW(MlmBatcher(c, MlmOptions{2, 101, 0.15, 1}), ConfigError);
  EXPECT_NO_THROW(MlmBatcher(c, MlmOptions{2, 100, 0.15, 1}));
}

TEST(Corpus, LoadMissingFile) {
  EXPECT_THROW(Corpus::load("/nonexistent/corpus.txt", 0.1), ConfigError);
}

class Batches : public ::testing::Test {
 protected:
  Corpus corpus = Corpus::load(pld::testing::corpus_path(), 0.1);
};

TEST_F(Batches, SameSeedSameStream) {
  const MlmBatcher a(corpus, {8, 32, 0.15, 5}), b(corpus, {8, 32, 0.15, 5}), c(corpus, {8, 32, 0.15, 6});
  for (std::uint64_t step : {1u, 2u, 77u}) {
    EXPECT_EQ(a.train_batch(step).tokens.ids, b.train_batch(step).tokens.ids);
    EXPECT_EQ(a.train_batch(step).targets.positions, b.train_batch(step).targets.positions);
  }
  EXPECT_NE(a.train_batch(1).tokens.ids, c.train_batch(1).tokens.ids);
  EXPECT_NE(a.train_batch(1).tokens.ids, a.train_batch(2).tokens.ids);
}

TEST_F(Batches, LabelsAreOriginalCharacters) {
  const MlmBatcher m(corpus, {4, 64, 0.3, 2});
  const auto b = m.train_batch(3);
  ASSERT_EQ(b.targets.positions.size(), b.targets.labels.size());
  for (std::size_t i = 0; i < b.targets.labels.size(); ++i) {
    EXPECT_GE(b.targets.labels[i], CharTokenizer::kFirstChar);
    EXPECT_LT(b.targets.positions[i], b.tokens.ids.size());
  }
}

TEST_F(Batches, MaskingRateAndMixWithinThreeSigma) {
  const double p = 0.15;
  const MlmBatcher m(corpus, {16, 64, p, 9});
  std::size_t positions = 0, masked = 0, mask_token = 0, unchanged = 0;
  for (std::uint64_t step = 1; step <= 12; ++step) {
    const auto b = m.train_batch(step);
    positions += b.tokens.ids.size();
    masked += b.targets.positions.size();
    for (std::size_t i = 0; i < b.targets.positions.size(); ++i) {
      const auto id = b.tokens.ids[b.targets.positions[i]];
      mask_token += id == CharTokenizer::kMask;
      unchanged += id == b.targets.labels[i];
    }
  }
  ASSERT_GE(positions, 10000u);
  const double n = static_cast<double>(positions);
  EXPECT_LE(std::abs(masked / n - p), 3.0 * std::sqrt(p * (1 - p) / n));
  const double k = static_cast<double>(masked);
  EXPECT_LE(std::abs(mask_token / k - 0.8), 3.0 * std::sqrt(0.8 * 0.2 / k));
  // "unchanged" also catches random replacements that happen to hit the same character.
  EXPECT_GE(unchanged / k, 0.1 - 3.0 * std::sqrt(0.09 / k));
  EXPECT_LE(unchanged / k, 0.1 + 0.1 / 20 + 3.0 * std::sqrt(0.09 / k));
}

TEST_F(Batches, ZeroMaskProbabilityYieldsNoTargets) {
  const MlmBatcher m(corpus, {4, 32, 0.0, 1});
  const auto b = m.train_batch(1);
  EXPECT_TRUE(b.targets.positions.empty());
  Tape<float> tape(false);
  auto logits = Tensor<float>::zeros({b.tokens.ids.size(), corpus.tokenizer.vocab_size()});
  EXPECT_THROW(tape.cross_entropy(logits, b.targets), ContractError);
}

TEST_F(Batches, ValidationBatchesAreFixedAndFromHeldOutSplit) {
  const MlmBatcher m(corpus, {4, 32, 0.15, 1});
  const auto a = m.validation_batches(3);
  const auto b = m.validation_batches(3);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].tokens.ids, b[i].tokens.ids);
    EXPECT_EQ(a[i].targets.labels, b[i].targets.labels);
  }
  // Unmasked positions reproduce the validation text.
  const auto& first = a[0];
  for (std::size_t s = 0; s < 32; ++s) {
    const bool masked = std::find(first.targets.positions.begin(), first.targets.positions.end(), s) !=
                        first.targets.positions.end();
    if (!masked) EXPECT_EQ(first.tokens.ids[s], corpus.tokens[corpus.train_end + s]);
  }
}

}  // namespace
}  // namespace pld
