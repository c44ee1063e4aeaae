#include "pld/data.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

#include "pld/errors.hpp"
#include "pld/philox.hpp"

namespace pld {

std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 >> 5) == 0x6) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 >> 4) == 0xE) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 >> 3) == 0x1E) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      throw ConfigError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > s.size()) throw ConfigError("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b >> 6) != 0x2) throw ConfigError("invalid UTF-8 continuation at offset " + std::to_string(i + k));
      cp = (cp << 6) | (b & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

namespace {

void append_utf8(char32_t cp, std::string& out) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

}  // namespace

CharTokenizer CharTokenizer::from_text(std::string_view utf8) {
  const auto cps = decode_utf8(utf8);
  std::set<char32_t> unique(cps.begin(), cps.end());
  return from_alphabet(std::vector<char32_t>(unique.begin(), unique.end()));
}

CharTokenizer CharTokenizer::from_alphabet(std::vector<char32_t> alphabet) {
  std::sort(alphabet.begin(), alphabet.end());
  alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
  CharTokenizer t;
  t.alphabet_ = std::move(alphabet);
  return t;
}

std::vector<std::int32_t> CharTokenizer::encode(std::string_view utf8) const {
  const auto cps = decode_utf8(utf8);
  std::vector<std::int32_t> ids(cps.size());
  for (std::size_t i = 0; i < cps.size(); ++i) {
    auto it = std::lower_bound(alphabet_.begin(), alphabet_.end(), cps[i]);
    ids[i] = (it != alphabet_.end() && *it == cps[i])
                 ? static_cast<std::int32_t>(it - alphabet_.begin()) + kFirstChar
                 : kUnknown;
  }
  return ids;
}

std::string CharTokenizer::decode(const std::vector<std::int32_t>& ids) const {
  std::string out;
  for (std::int32_t id : ids) {
    if (id == kMask) {
      out += "[MASK]";
    } else if (id >= kFirstChar && static_cast<std::size_t>(id - kFirstChar) < alphabet_.size()) {
      append_utf8(alphabet_[static_cast<std::size_t>(id - kFirstChar)], out);
    } else if (id != kPad) {
      out += "?";
    }
  }
  return out;
}

Corpus Corpus::from_text(std::string_view utf8, double validation_fraction) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation fraction must lie in (0, 1)");
  }
  Corpus c;
  c.tokenizer = CharTokenizer::from_text(utf8);
  c.tokens = c.tokenizer.encode(utf8);
  if (c.tokens.empty()) throw ConfigError("corpus is empty");
  c.train_end = static_cast<std::size_t>(static_cast<double>(c.tokens.size()) * (1.0 - validation_fraction));
  return c;
}

Corpus Corpus::load(const std::filesystem::path& path, double validation_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open corpus " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_text(text, validation_fraction);
}

MlmBatcher::MlmBatcher(const Corpus& corpus, MlmOptions options) : corpus_(&corpus), options_(options) {
  if (options_.batch_size == 0 || options_.seq_len == 0) {
    throw ConfigError("batch size and sequence length must be positive");
  }
  if (!(options_.mask_prob >= 0.0 && options_.mask_prob < 1.0)) {
    throw ConfigError("mask probability must lie in [0, 1)");
  }
  if (corpus.train_size() < options_.seq_len || corpus.validation_size() < options_.seq_len) {
    throw ConfigError("corpus is shorter than one sequence of " + std::to_string(options_.seq_len) +
                      " tokens in its train or validation split (" + std::to_string(corpus.train_size()) +
                      " / " + std::to_string(corpus.validation_size()) + ")");
  }
}

MlmBatch MlmBatcher::make_batch(const std::vector<std::size_t>& offsets, std::uint64_t mask_stream) const {
  const std::size_t seq = options_.seq_len;
  const std::size_t vocab = corpus_->tokenizer.vocab_size();
  const auto n_chars = static_cast<std::uint64_t>(vocab - CharTokenizer::kFirstChar);
  const Philox rng(options_.seed);

  MlmBatch batch;
  batch.tokens.layout = {offsets.size(), seq};
  batch.tokens.ids.resize(offsets.size() * seq);
  for (std::size_t b = 0; b < offsets.size(); ++b) {
    for (std::size_t s = 0; s < seq; ++s) {
      const std::size_t row = b * seq + s;
      const std::int32_t original = corpus_->tokens[offsets[b] + s];
      std::int32_t id = original;
      const auto draw = rng.block(mask_stream, row);
      if (u32_to_unit(draw[0]) < options_.mask_prob) {
        const double kind = u32_to_unit(draw[1]);
        if (kind < 0.8) {
          id = CharTokenizer::kMask;
        } else if (kind < 0.9) {
          id = CharTokenizer::kFirstChar + static_cast<std::int32_t>(draw[2] % n_chars);
        }
        batch.targets.positions.push_back(row);
        batch.targets.labels.push_back(original);
      }
      batch.tokens.ids[row] = id;
    }
  }
  return batch;
}

MlmBatch MlmBatcher::train_batch(std::uint64_t step) const {
  const Philox rng(options_.seed);
  const std::uint64_t span = corpus_->train_size() - options_.seq_len + 1;
  std::vector<std::size_t> offsets(options_.batch_size);
  for (std::size_t b = 0; b < offsets.size(); ++b) {
    const auto draw = rng.block(rng_stream::make(rng_stream::kBatches, step), b);
    const std::uint64_t wide = (static_cast<std::uint64_t>(draw[0]) << 32) | draw[1];
    offsets[b] = static_cast<std::size_t>(wide % span);
  }
  return make_batch(offsets, rng_stream::make(rng_stream::kMasks, step));
}

std::vector<MlmBatch> MlmBatcher::validation_batches(std::size_t count) const {
  const std::size_t seq = options_.seq_len;
  const std::size_t windows = corpus_->validation_size() / seq;
  std::vector<MlmBatch> out;
  out.reserve(count);
  std::size_t w = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::size_t> offsets(options_.batch_size);
    for (auto& off : offsets) {
      off = corpus_->train_end + (w % windows) * seq;
      ++w;
    }
    out.push_back(make_batch(offsets, rng_stream::make(rng_stream::kValidation, i)));
  }
  return out;
}

}  // namespace pld
