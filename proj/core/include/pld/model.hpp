#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pld/gates.hpp"
#include "pld/tape.hpp"
#include "pld/tensor.hpp"

namespace pld {

enum class Variant { kPostLN, kPreLN, kST };

std::string_view variant_name(Variant v);
// Accepts "postln", "preln", "st" (case-insensitive).
Variant parse_variant(std::string_view name);

struct ModelConfig {
  std::size_t layers{6};
  std::size_t hidden{64};
  std::size_t heads{4};
  std::size_t vocab{100};
  std::size_t max_seq{64};
  Variant variant{Variant::kST};
  double dropout{0.1};
  double ln_eps{1e-5};
  double init_std{0.02};
  // Gate attention and FFN with separate draws instead of one per block.
  bool per_sublayer_gates{false};

  std::size_t ffn_hidden() const noexcept { return 4 * hidden; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class Mode { kTrain, kEval };

struct ForwardOptions {
  Mode mode{Mode::kEval};
  std::uint64_t seed{0};  // dropout key
  std::uint64_t step{0};
};

struct SequenceLayout {
  std::size_t batch{1};
  std::size_t seq{1};
  std::size_t rows() const noexcept { return batch * seq; }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool decay{false};  // subject to weight decay
};

template <typename T>
struct BlockWeights {
  Tensor<T> wq, wk, wv, wo;  // [d, d]
  Tensor<T> w1, b1;          // [d, 4d], [4d]
  Tensor<T> w2, b2;          // [4d, d], [d]
  LayerNormParams<T> attn_norm;
  LayerNormParams<T> ffn_norm;

  void append_named(const std::string& prefix, std::vector<NamedTensor<T>>& out) const;
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  Tensor<T> token_embedding;     // [V, d]; doubles as the output projection
  Tensor<T> position_embedding;  // [S, d]
  LayerNormParams<T> embedding_norm;
  std::vector<BlockWeights<T>> blocks;
  LayerNormParams<T> final_norm;  // unused by PostLN
  Tensor<T> head_bias;            // [V]

  static ModelWeights initialize(const ModelConfig& config, std::uint64_t seed);

  // Stable order; names like "blocks.3.attn.wq". final_norm is omitted for PostLN.
  std::vector<NamedTensor<T>> parameters() const;
  std::vector<NamedTensor<T>> block_parameters(std::size_t layer) const;

  ModelWeights clone() const;
  template <typename U>
  ModelWeights<U> cast() const;
  void zero_grad() const;
};

// Resolved per-block switch: which sublayers run and the factor applied to
// their residual branches.
struct BlockGate {
  bool attn{true};
  bool ffn{true};
  double scale{1.0};
};

std::vector<BlockGate> full_depth(std::size_t layers);
// ST in training scales active branches by 1/p; evaluation and the other
// variants always run unscaled.
std::vector<BlockGate> resolve_gates(const GateVector& gates, Variant variant, Mode mode);

template <typename T>
struct BlockContext {
  SequenceLayout layout;
  std::size_t heads{1};
  T ln_eps{T(1e-5)};
  double dropout{0.0};
  ForwardOptions options;
  std::size_t layer{0};
};

template <typename T>
Tensor<T> self_attention(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                         const BlockContext<T>& ctx);
template <typename T>
Tensor<T> feed_forward(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                       const BlockContext<T>& ctx);

// h = LN(x + attn(x)); out = LN(h + ffn(h))
template <typename T>
Tensor<T> postln_block(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                       const BlockContext<T>& ctx);
// h = x + attn(LN(x)); out = h + ffn(LN(h))
template <typename T>
Tensor<T> preln_block(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                      const BlockContext<T>& ctx);
// gate == 0 returns x itself without recording anything. Otherwise a PreLN
// block whose branches are scaled by 1/keep_prob in training mode.
template <typename T>
Tensor<T> st_block(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                   const BlockContext<T>& ctx, bool gate, double keep_prob);
template <typename T>
Tensor<T> gated_block(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                      const BlockContext<T>& ctx, Variant variant, const BlockGate& gate);

struct TokenBatch {
  SequenceLayout layout;
  std::vector<std::int32_t> ids;  // row-major [batch, seq]
};

template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> block_inputs;
  std::vector<Tensor<T>> block_outputs;
};

template <typename T>
Tensor<T> embed(Tape<T>& tape, const ModelWeights<T>& weights, const TokenBatch& tokens);

template <typename T>
Tensor<T> run_blocks(Tape<T>& tape, const ModelWeights<T>& weights, const Tensor<T>& x,
                     const SequenceLayout& layout, std::span<const BlockGate> gates,
                     const ForwardOptions& options, ForwardTrace<T>* trace = nullptr);

// Final norm (PreLN/ST) and the tied projection onto the vocabulary.
template <typename T>
Tensor<T> output_head(Tape<T>& tape, const ModelWeights<T>& weights, const Tensor<T>& hidden);

template <typename T>
Tensor<T> forward_model(Tape<T>& tape, const ModelWeights<T>& weights, const TokenBatch& tokens,
                        std::span<const BlockGate> gates, const ForwardOptions& options,
                        ForwardTrace<T>* trace = nullptr);

template <typename T>
Tensor<T> forward_model(Tape<T>& tape, const ModelWeights<T>& weights, const TokenBatch& tokens,
                        const GateVector& gates, const ForwardOptions& options,
                        ForwardTrace<T>* trace = nullptr);

}  // namespace pld
