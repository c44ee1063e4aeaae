#include "pld/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "pld/errors.hpp"
#include "pld/philox.hpp"

namespace pld {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kPostLN:
      return "postln";
    case Variant::kPreLN:
      return "preln";
    case Variant::kST:
      return "st";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "postln") return Variant::kPostLN;
  if (lower == "preln") return Variant::kPreLN;
  if (lower == "st") return Variant::kST;
  throw ConfigError("unknown model variant '" + std::string(name) + "' (expected postln, preln or st)");
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model.layers must be >= 1");
  if (hidden < 1 || heads < 1) throw ConfigError("model.hidden and model.heads must be >= 1");
  if (hidden % heads != 0) {
    throw ConfigError("model.hidden (" + std::to_string(hidden) + ") must be divisible by model.heads (" +
                      std::to_string(heads) + ")");
  }
  if (vocab < 2) throw ConfigError("model.vocab must be >= 2");
  if (max_seq < 1) throw ConfigError("model.max_seq must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
  if (!(ln_eps > 0.0)) throw ConfigError("model.ln_eps must be positive");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
}

namespace {

// Truncated at two standard deviations by rejection.
class TruncatedNormal {
 public:
  TruncatedNormal(std::uint64_t seed, double stddev) : engine_(seed), stddev_(stddev) {}

  template <typename T>
  Tensor<T> tensor(Shape shape) {
    Buffer<T> v(element_count(shape));
    for (auto& x : v) {
      double z = normal_(engine_);
      while (std::abs(z) > 2.0) z = normal_(engine_);
      x = static_cast<T>(z * stddev_);
    }
    return Tensor<T>(std::move(shape), std::move(v), true);
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  double stddev_;
};

template <typename T>
LayerNormParams<T> fresh_norm(std::size_t d) {
  return {Tensor<T>::filled({d}, T(1), true), Tensor<T>::zeros({d}, true)};
}

template <typename T>
Tensor<T> copy_tensor(const Tensor<T>& t) {
  return Tensor<T>(t.shape(), Buffer<T>(t.data().begin(), t.data().end()), t.requires_grad());
}

template <typename U, typename T>
Tensor<U> cast_tensor(const Tensor<T>& t) {
  std::vector<U> v(t.numel());
  std::transform(t.data().begin(), t.data().end(), v.begin(), [](T x) { return static_cast<U>(x); });
  return Tensor<U>(t.shape(), std::move(v), t.requires_grad());
}

template <typename U, typename T, typename F>
ModelWeights<U> map_weights(const ModelWeights<T>& w, F&& f) {
  ModelWeights<U> out;
  out.config = w.config;
  out.token_embedding = f(w.token_embedding);
  out.position_embedding = f(w.position_embedding);
  out.embedding_norm = {f(w.embedding_norm.gain), f(w.embedding_norm.bias)};
  for (const auto& b : w.blocks) {
    BlockWeights<U> nb;
    nb.wq = f(b.wq);
    nb.wk = f(b.wk);
    nb.wv = f(b.wv);
    nb.wo = f(b.wo);
    nb.w1 = f(b.w1);
    nb.b1 = f(b.b1);
    nb.w2 = f(b.w2);
    nb.b2 = f(b.b2);
    nb.attn_norm = {f(b.attn_norm.gain), f(b.attn_norm.bias)};
    nb.ffn_norm = {f(b.ffn_norm.gain), f(b.ffn_norm.bias)};
    out.blocks.push_back(std::move(nb));
  }
  out.final_norm = {f(w.final_norm.gain), f(w.final_norm.bias)};
  out.head_bias = f(w.head_bias);
  return out;
}

}  // namespace

template <typename T>
void BlockWeights<T>::append_named(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
  out.push_back({prefix + "attn.wq", wq, true});
  out.push_back({prefix + "attn.wk", wk, true});
  out.push_back({prefix + "attn.wv", wv, true});
  out.push_back({prefix + "attn.wo", wo, true});
  out.push_back({prefix + "attn_norm.gain", attn_norm.gain, false});
  out.push_back({prefix + "attn_norm.bias", attn_norm.bias, false});
  out.push_back({prefix + "ffn.w1", w1, true});
  out.push_back({prefix + "ffn.b1", b1, false});
  out.push_back({prefix + "ffn.w2", w2, true});
  out.push_back({prefix + "ffn.b2", b2, false});
  out.push_back({prefix + "ffn_norm.gain", ffn_norm.gain, false});
  out.push_back({prefix + "ffn_norm.bias", ffn_norm.bias, false});
}

template <typename T>
ModelWeights<T> ModelWeights<T>::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.hidden;
  const std::size_t f = config.ffn_hidden();
  TruncatedNormal init(seed, config.init_std);
  ModelWeights<T> w;
  w.config = config;
  w.token_embedding = init.tensor<T>({config.vocab, d});
  w.position_embedding = init.tensor<T>({config.max_seq, d});
  w.embedding_norm = fresh_norm<T>(d);
  for (std::size_t l = 0; l < config.layers; ++l) {
    BlockWeights<T> b;
    b.wq = init.tensor<T>({d, d});
    b.wk = init.tensor<T>({d, d});
    b.wv = init.tensor<T>({d, d});
    b.wo = init.tensor<T>({d, d});
    b.w1 = init.tensor<T>({d, f});
    b.b1 = Tensor<T>::zeros({f}, true);
    b.w2 = init.tensor<T>({f, d});
    b.b2 = Tensor<T>::zeros({d}, true);
    b.attn_norm = fresh_norm<T>(d);
    b.ffn_norm = fresh_norm<T>(d);
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = fresh_norm<T>(d);
  w.head_bias = Tensor<T>::zeros({config.vocab}, true);
  return w;
}

template <typename T>
std::vector<NamedTensor<T>> ModelWeights<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  out.push_back({"embeddings.token", token_embedding, true});
  out.push_back({"embeddings.position", position_embedding, true});
  out.push_back({"embeddings.norm.gain", embedding_norm.gain, false});
  out.push_back({"embeddings.norm.bias", embedding_norm.bias, false});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].append_named("blocks." + std::to_string(l) + ".", out);
  }
  if (config.variant != Variant::kPostLN) {
    out.push_back({"final_norm.gain", final_norm.gain, false});
    out.push_back({"final_norm.bias", final_norm.bias, false});
  }
  out.push_back({"head.bias", head_bias, false});
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> ModelWeights<T>::block_parameters(std::size_t layer) const {
  std::vector<NamedTensor<T>> out;
  blocks.at(layer).append_named("blocks." + std::to_string(layer) + ".", out);
  return out;
}

template <typename T>
ModelWeights<T> ModelWeights<T>::clone() const {
  return map_weights<T>(*this, [](const Tensor<T>& t) { return copy_tensor(t); });
}

template <typename T>
template <typename U>
ModelWeights<U> ModelWeights<T>::cast() const {
  return map_weights<U>(*this, [](const Tensor<T>& t) { return cast_tensor<U>(t); });
}

template <typename T>
void ModelWeights<T>::zero_grad() const {
  for (auto& p : parameters()) {
    auto t = p.tensor;
    t.zero_grad();
  }
  auto fg = final_norm.gain;
  auto fb = final_norm.bias;
  fg.zero_grad();
  fb.zero_grad();
}

std::vector<BlockGate> full_depth(std::size_t layers) { return std::vector<BlockGate>(layers); }

std::vector<BlockGate> resolve_gates(const GateVector& gates, Variant variant, Mode mode) {
  std::vector<BlockGate> out(gates.layers());
  for (std::size_t l = 0; l < out.size(); ++l) {
    out[l].attn = gates.keep[l] != 0;
    out[l].ffn = gates.per_sublayer() ? gates.ffn_keep[l] != 0 : out[l].attn;
    if (variant == Variant::kST && mode == Mode::kTrain) {
      const double p = l < gates.prob.size() ? gates.prob[l] : 1.0;
      if (!(p > 0.0)) throw ContractError("keep probability must be positive, got " + std::to_string(p));
      out[l].scale = 1.0 / p;
    }
  }
  return out;
}

namespace {

template <typename T>
void check_block_input(const Tensor<T>& x, const BlockWeights<T>& w, const BlockContext<T>& ctx) {
  if (x.rank() != 2 || x.dim(0) != ctx.layout.rows() || x.dim(1) != w.wq.dim(0)) {
    throw DimensionError("block input " + shape_string(x.shape()) + " does not match layout [" +
                         std::to_string(ctx.layout.rows()) + " x " + std::to_string(w.wq.dim(0)) + "]");
  }
}

template <typename T>
DropoutKey dropout_key(const BlockContext<T>& ctx, std::uint64_t site) {
  return {ctx.options.seed, rng_stream::make(rng_stream::kDropout, ctx.options.step, ctx.layer * 4 + site)};
}

template <typename T>
double active_dropout(const BlockContext<T>& ctx) {
  return ctx.options.mode == Mode::kTrain ? ctx.dropout : 0.0;
}

template <typename T>
Tensor<T> scaled(Tape<T>& tape, const Tensor<T>& branch, double scale) {
  return scale == 1.0 ? branch : tape.scale(branch, static_cast<T>(scale));
}

}  // namespace

template <typename T>
Tensor<T> self_attention(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                         const BlockContext<T>& ctx) {
  check_block_input(x, w, ctx);
  const auto [batch, seq] = ctx.layout;
  const std::size_t heads = ctx.heads;
  const std::size_t d = x.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("self_attention: hidden size " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / heads)));
  // Scaling q rather than the [b*h, s, s] scores touches s/dh times fewer elements.
  auto q = tape.split_heads(tape.scale(tape.matmul(x, w.wq), inv_sqrt), batch, seq, heads);
  auto k = tape.split_heads(tape.matmul(x, w.wk), batch, seq, heads);
  auto v = tape.split_heads(tape.matmul(x, w.wv), batch, seq, heads);
  auto scores = tape.batched_matmul(q, k, Transpose::kYes);
  auto probs = tape.softmax(scores, 2);
  probs = tape.dropout(probs, active_dropout(ctx), dropout_key(ctx, 0));
  auto context = tape.merge_heads(tape.batched_matmul(probs, v), batch, seq, heads);
  return tape.matmul(context, w.wo);
}

template <typename T>
Tensor<T> feed_forward(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                       const BlockContext<T>& ctx) {
  check_block_input(x, w, ctx);
  auto hidden = tape.gelu(tape.add_bias(tape.matmul(x, w.w1), w.b1));
  auto out = tape.add_bias(tape.matmul(hidden, w.w2), w.b2);
  return tape.dropout(out, active_dropout(ctx), dropout_key(ctx, 1));
}

template <typename T>
Tensor<T> gated_block(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                      const BlockContext<T>& ctx, Variant variant, const BlockGate& gate) {
  if (!gate.attn && !gate.ffn) return x;
  const T eps = ctx.ln_eps;
  Tensor<T> h = x;
  if (variant == Variant::kPostLN) {
    if (gate.attn) {
      h = tape.layer_norm(tape.add(x, scaled(tape, self_attention(tape, x, w, ctx), gate.scale)),
                          w.attn_norm.gain, w.attn_norm.bias, eps);
    }
    if (!gate.ffn) return h;
    return tape.layer_norm(tape.add(h, scaled(tape, feed_forward(tape, h, w, ctx), gate.scale)),
                           w.ffn_norm.gain, w.ffn_norm.bias, eps);
  }
  if (gate.attn) {
    auto normed = tape.layer_norm(x, w.attn_norm.gain, w.attn_norm.bias, eps);
    h = tape.add(x, scaled(tape, self_attention(tape, normed, w, ctx), gate.scale));
  }
  if (!gate.ffn) return h;
  auto normed = tape.layer_norm(h, w.ffn_norm.gain, w.ffn_norm.bias, eps);
  return tape.add(h, scaled(tape, feed_forward(tape, normed, w, ctx), gate.scale));
}

template <typename T>
Tensor<T> postln_block(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                       const BlockContext<T>& ctx) {
  return gated_block(tape, x, w, ctx, Variant::kPostLN, BlockGate{});
}

template <typename T>
Tensor<T> preln_block(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                      const BlockContext<T>& ctx) {
  return gated_block(tape, x, w, ctx, Variant::kPreLN, BlockGate{});
}

template <typename T>
Tensor<T> st_block(Tape<T>& tape, const Tensor<T>& x, const BlockWeights<T>& w,
                   const BlockContext<T>& ctx, bool gate, double keep_prob) {
  if (!(keep_prob > 0.0)) {
    throw ContractError("st_block: keep probability must be positive, got " + std::to_string(keep_prob));
  }
  if (!gate) return x;
  const double scale = ctx.options.mode == Mode::kTrain ? 1.0 / keep_prob : 1.0;
  return gated_block(tape, x, w, ctx, Variant::kST, BlockGate{true, true, scale});
}

template <typename T>
Tensor<T> embed(Tape<T>& tape, const ModelWeights<T>& weights, const TokenBatch& tokens) {
  const auto& cfg = weights.config;
  const auto [batch, seq] = tokens.layout;
  if (tokens.ids.size() != batch * seq) {
    throw DimensionError("token batch holds " + std::to_string(tokens.ids.size()) + " ids, layout needs " +
                         std::to_string(batch * seq));
  }
  if (seq > cfg.max_seq) {
    throw DimensionError("sequence length " + std::to_string(seq) + " exceeds max_seq " +
                         std::to_string(cfg.max_seq));
  }
  std::vector<std::int32_t> positions(batch * seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < seq; ++s) positions[b * seq + s] = static_cast<std::int32_t>(s);
  auto x = tape.add(tape.embedding(weights.token_embedding, tokens.ids),
                    tape.embedding(weights.position_embedding, positions));
  return tape.layer_norm(x, weights.embedding_norm.gain, weights.embedding_norm.bias,
                         static_cast<T>(cfg.ln_eps));
}

template <typename T>
Tensor<T> run_blocks(Tape<T>& tape, const ModelWeights<T>& weights, const Tensor<T>& x,
                     const SequenceLayout& layout, std::span<const BlockGate> gates,
                     const ForwardOptions& options, ForwardTrace<T>* trace) {
  const auto& cfg = weights.config;
  if (gates.size() != weights.blocks.size()) {
    throw DimensionError("gate vector has " + std::to_string(gates.size()) + " entries for " +
                         std::to_string(weights.blocks.size()) + " blocks");
  }
  Tensor<T> h = x;
  for (std::size_t l = 0; l < weights.blocks.size(); ++l) {
    BlockContext<T> ctx{layout, cfg.heads, static_cast<T>(cfg.ln_eps), cfg.dropout, options, l};
    if (trace) trace->block_inputs.push_back(h);
    h = gated_block(tape, h, weights.blocks[l], ctx, cfg.variant, gates[l]);
    if (trace) trace->block_outputs.push_back(h);
  }
  return h;
}

template <typename T>
Tensor<T> output_head(Tape<T>& tape, const ModelWeights<T>& weights, const Tensor<T>& hidden) {
  Tensor<T> h = hidden;
  if (weights.config.variant != Variant::kPostLN) {
    h = tape.layer_norm(h, weights.final_norm.gain, weights.final_norm.bias,
                        static_cast<T>(weights.config.ln_eps));
  }
  return tape.add_bias(tape.matmul(h, weights.token_embedding, Transpose::kYes), weights.head_bias);
}

template <typename T>
Tensor<T> forward_model(Tape<T>& tape, const ModelWeights<T>& weights, const TokenBatch& tokens,
                        std::span<const BlockGate> gates, const ForwardOptions& options,
                        ForwardTrace<T>* trace) {
  auto x = embed(tape, weights, tokens);
  auto h = run_blocks(tape, weights, x, tokens.layout, gates, options, trace);
  return output_head(tape, weights, h);
}

template <typename T>
Tensor<T> forward_model(Tape<T>& tape, const ModelWeights<T>& weights, const TokenBatch& tokens,
                        const GateVector& gates, const ForwardOptions& options, ForwardTrace<T>* trace) {
  const auto resolved = resolve_gates(gates, weights.config.variant, options.mode);
  return forward_model(tape, weights, tokens, std::span<const BlockGate>(resolved), options, trace);
}

#define PLD_INSTANTIATE_MODEL(T)                                                                        \
  template struct BlockWeights<T>;                                                                      \
  template struct ModelWeights<T>;                                                                      \
  template Tensor<T> self_attention(Tape<T>&, const Tensor<T>&, const BlockWeights<T>&,                 \
                                    const BlockContext<T>&);                                            \
  template Tensor<T> feed_forward(Tape<T>&, const Tensor<T>&, const BlockWeights<T>&,                   \
                                  const BlockContext<T>&);                                              \
  template Tensor<T> postln_block(Tape<T>&, const Tensor<T>&, const BlockWeights<T>&,                   \
                                  const BlockContext<T>&);                                              \
  template Tensor<T> preln_block(Tape<T>&, const Tensor<T>&, const BlockWeights<T>&,                    \
                                 const BlockContext<T>&);                                               \
  template Tensor<T> st_block(Tape<T>&, const Tensor<T>&, const BlockWeights<T>&,                       \
                              const BlockContext<T>&, bool, double);                                    \
  template Tensor<T> gated_block(Tape<T>&, const Tensor<T>&, const BlockWeights<T>&,                    \
                                 const BlockContext<T>&, Variant, const BlockGate&);                    \
  template Tensor<T> embed(Tape<T>&, const ModelWeights<T>&, const TokenBatch&);                        \
  template Tensor<T> run_blocks(Tape<T>&, const ModelWeights<T>&, const Tensor<T>&,                     \
                                const SequenceLayout&, std::span<const BlockGate>,                      \
                                const ForwardOptions&, ForwardTrace<T>*);                               \
  template Tensor<T> output_head(Tape<T>&, const ModelWeights<T>&, const Tensor<T>&);                   \
  template Tensor<T> forward_model(Tape<T>&, const ModelWeights<T>&, const TokenBatch&,                 \
                                   std::span<const BlockGate>, const ForwardOptions&, ForwardTrace<T>*); \
  template Tensor<T> forward_model(Tape<T>&, const ModelWeights<T>&, const TokenBatch&,                 \
                                   const GateVector&, const ForwardOptions&, ForwardTrace<T>*);

PLD_INSTANTIATE_MODEL(float)
PLD_INSTANTIATE_MODEL(double)

template ModelWeights<double> ModelWeights<float>::cast<double>() const;
template ModelWeights<float> ModelWeights<double>::cast<float>() const;
template ModelWeights<float> ModelWeights<float>::cast<float>() const;
template ModelWeights<double> ModelWeights<double>::cast<double>() const;

}  // namespace pld
