#include "pld/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pld/model.hpp"

namespace pld {

GradCheckResult check_gradients(const std::string& name, std::vector<Tensor<double>> inputs,
                                const LossBuilder& loss, double step) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    auto value = loss(tape, inputs);
    tape.backward(value);
  }
  GradCheckResult result{name, 0.0, 0.0, 1};
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      Tape<double> plus(false);
      const double fp = loss(plus, inputs).item();
      data[i] = saved - step;
      Tape<double> minus(false);
      const double fm = loss(minus, inputs).item();
      data[i] = saved;
      numeric[i] = (fp - fm) / (2.0 * step);
      result.evaluations += 2;
    }
    double max_abs = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      max_abs = std::max(max_abs, std::abs(analytic[i] - numeric[i]));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    result.max_abs_error = std::max(result.max_abs_error, max_abs);
    if (scale > 0.0) result.max_rel_error = std::max(result.max_rel_error, max_abs / scale);
  }
  return result;
}

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : engine_(seed) {}

  Tensor<double> uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(element_count(shape));
    for (auto& x : v) x = dist(engine_);
    return Tensor<double>(std::move(shape), std::move(v));
  }

  std::int32_t index(std::int32_t n) { return std::uniform_int_distribution<std::int32_t>(0, n - 1)(engine_); }

 private:
  std::mt19937_64 engine_;
};

// Contracts an output with fixed random weights so no gradient is
// structurally zero (e.g. sum of a softmax).
Tensor<double> project(Tape<double>& tape, const Tensor<double>& y, const Tensor<double>& weights) {
  return tape.sum(tape.mul(y, weights));
}

BlockWeights<double> random_block(Sampler& s, std::size_t d, double scale) {
  BlockWeights<double> w;
  w.wq = s.uniform({d, d}, -scale, scale);
  w.wk = s.uniform({d, d}, -scale, scale);
  w.wv = s.uniform({d, d}, -scale, scale);
  w.wo = s.uniform({d, d}, -scale, scale);
  w.w1 = s.uniform({d, 4 * d}, -scale, scale);
  w.b1 = s.uniform({4 * d}, -0.1, 0.1);
  w.w2 = s.uniform({4 * d, d}, -scale, scale);
  w.b2 = s.uniform({d}, -0.1, 0.1);
  w.attn_norm = {s.uniform({d}, 0.5, 1.5), s.uniform({d}, -0.1, 0.1)};
  w.ffn_norm = {s.uniform({d}, 0.5, 1.5), s.uniform({d}, -0.1, 0.1)};
  return w;
}

std::vector<Tensor<double>> flatten(const BlockWeights<double>& w) {
  return {w.wq, w.wk, w.wv, w.wo, w.w1, w.b1, w.w2, w.b2,
          w.attn_norm.gain, w.attn_norm.bias, w.ffn_norm.gain, w.ffn_norm.bias};
}

BlockWeights<double> unflatten(const std::vector<Tensor<double>>& v, std::size_t offset) {
  BlockWeights<double> w;
  w.wq = v[offset + 0];
  w.wk = v[offset + 1];
  w.wv = v[offset + 2];
  w.wo = v[offset + 3];
  w.w1 = v[offset + 4];
  w.b1 = v[offset + 5];
  w.w2 = v[offset + 6];
  w.b2 = v[offset + 7];
  w.attn_norm = {v[offset + 8], v[offset + 9]};
  w.ffn_norm = {v[offset + 10], v[offset + 11]};
  return w;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed) {
  Sampler s(seed);
  std::vector<GradCheckResult> out;

  {
    auto r = s.uniform({3, 5});
    out.push_back(check_gradients("matmul", {s.uniform({3, 4}), s.uniform({4, 5})},
                                  [r](Tape<double>& t, const auto& in) {
                                    return project(t, t.matmul(in[0], in[1]), r);
                                  }));
  }
  {
    auto r = s.uniform({3, 5});
    out.push_back(check_gradients("matmul_transposed", {s.uniform({3, 4}), s.uniform({5, 4})},
                                  [r](Tape<double>& t, const auto& in) {
                                    return project(t, t.matmul(in[0], in[1], Transpose::kYes), r);
                                  }));
  }
  {
    auto r = s.uniform({2, 3, 4});
    out.push_back(check_gradients("batched_matmul", {s.uniform({2, 3, 5}), s.uniform({2, 5, 4})},
                                  [r](Tape<double>& t, const auto& in) {
                                    return project(t, t.batched_matmul(in[0], in[1]), r);
                                  }));
    auto r2 = s.uniform({2, 3, 4});
    out.push_back(check_gradients("batched_matmul_transposed", {s.uniform({2, 3, 5}), s.uniform({2, 4, 5})},
                                  [r2](Tape<double>& t, const auto& in) {
                                    return project(t, t.batched_matmul(in[0], in[1], Transpose::kYes), r2);
                                  }));
  }
  {
    auto r = s.uniform({4, 3});
    out.push_back(check_gradients("add_mul_scale", {s.uniform({4, 3}), s.uniform({4, 3})},
                                  [r](Tape<double>& t, const auto& in) {
                                    auto y = t.add(t.mul(in[0], in[1]), t.scale(in[0], 0.7));
                                    return project(t, y, r);
                                  }));
  }
  {
    auto r = s.uniform({4, 3});
    out.push_back(check_gradients("add_bias", {s.uniform({4, 3}), s.uniform({3})},
                                  [r](Tape<double>& t, const auto& in) {
                                    return project(t, t.add_bias(in[0], in[1]), r);
                                  }));
  }
  out.push_back(check_gradients("sum", {s.uniform({3, 3})}, [](Tape<double>& t, const auto& in) {
    return t.sum(t.mul(in[0], in[0]));
  }));
  out.push_back(check_gradients("mean", {s.uniform({3, 3})}, [](Tape<double>& t, const auto& in) {
    return t.mean(t.mul(in[0], in[0]));
  }));
  {
    auto r = s.uniform({3, 6});
    out.push_back(check_gradients("layer_norm", {s.uniform({3, 6}), s.uniform({6}, 0.5, 1.5), s.uniform({6})},
                                  [r](Tape<double>& t, const auto& in) {
                                    return project(t, t.layer_norm(in[0], in[1], in[2], 1e-12), r);
                                  }));
  }
  {
    auto r = s.uniform({2, 3, 4});
    out.push_back(check_gradients("softmax_last_axis", {s.uniform({2, 3, 4}, -2.0, 2.0)},
                                  [r](Tape<double>& t, const auto& in) {
                                    return project(t, t.softmax(in[0], 2), r);
                                  }));
    auto r1 = s.uniform({2, 3, 4});
    out.push_back(check_gradients("softmax_middle_axis", {s.uniform({2, 3, 4}, -2.0, 2.0)},
                                  [r1](Tape<double>& t, const auto& in) {
                                    return project(t, t.softmax(in[0], 1), r1);
                                  }));
  }
  {
    auto r = s.uniform({5, 4});
    out.push_back(check_gradients("gelu", {s.uniform({5, 4}, -3.0, 3.0)}, [r](Tape<double>& t, const auto& in) {
      return project(t, t.gelu(in[0]), r);
    }));
  }
  {
    auto r = s.uniform({6, 3});
    out.push_back(check_gradients("dropout", {s.uniform({6, 3})}, [r](Tape<double>& t, const auto& in) {
      return project(t, t.dropout(in[0], 0.3, DropoutKey{7, 11}), r);
    }));
  }
  {
    auto r = s.uniform({4, 3});
    const std::vector<std::int32_t> ids{1, 0, 4, 1};
    out.push_back(check_gradients("embedding", {s.uniform({5, 3})}, [r, ids](Tape<double>& t, const auto& in) {
      return project(t, t.embedding(in[0], ids), r);
    }));
  }
  {
    auto r = s.uniform({2 * 3, 3, 2});
    out.push_back(check_gradients("split_merge_heads", {s.uniform({2 * 3, 6})},
                                  [r](Tape<double>& t, const auto& in) {
                                    auto split = t.split_heads(in[0], 2, 3, 3);
                                    auto merged = t.merge_heads(t.mul(split, r), 2, 3, 3);
                                    return t.sum(t.mul(merged, merged));
                                  }));
  }
  {
    MaskedTargets targets{{0, 2, 3}, {4, 1, 0}};
    out.push_back(check_gradients("cross_entropy", {s.uniform({4, 6}, -2.0, 2.0)},
                                  [targets](Tape<double>& t, const auto& in) {
                                    return t.cross_entropy(in[0], targets);
                                  }));
  }

  // Blocks at S=3, d=4, one head and two heads.
  for (std::size_t heads : {1u, 2u}) {
    const std::size_t d = 4;
    const SequenceLayout layout{1, 3};
    auto x = s.uniform({3, d});
    auto bw = random_block(s, d, 0.5);
    auto r = s.uniform({3, d});
    std::vector<Tensor<double>> inputs{x};
    for (auto& p : flatten(bw)) inputs.push_back(p);
    const std::string suffix = heads == 1 ? "" : "_2heads";
    const BlockContext<double> ctx{layout, heads, 1e-12, 0.0, ForwardOptions{}, 0};
    out.push_back(check_gradients("self_attention" + suffix, inputs, [=](Tape<double>& t, const auto& in) {
      return project(t, self_attention(t, in[0], unflatten(in, 1), ctx), r);
    }));
    out.push_back(check_gradients("feed_forward" + suffix, inputs, [=](Tape<double>& t, const auto& in) {
      return project(t, feed_forward(t, in[0], unflatten(in, 1), ctx), r);
    }));
    out.push_back(check_gradients("postln_block" + suffix, inputs, [=](Tape<double>& t, const auto& in) {
      return project(t, postln_block(t, in[0], unflatten(in, 1), ctx), r);
    }));
    out.push_back(check_gradients("preln_block" + suffix, inputs, [=](Tape<double>& t, const auto& in) {
      return project(t, preln_block(t, in[0], unflatten(in, 1), ctx), r);
    }));
    BlockContext<double> train_ctx = ctx;
    train_ctx.options.mode = Mode::kTrain;
    out.push_back(check_gradients("st_block_p0.6" + suffix, inputs, [=](Tape<double>& t, const auto& in) {
      return project(t, st_block(t, in[0], unflatten(in, 1), train_ctx, true, 0.6), r);
    }));
  }

  // Full model, every parameter, for each variant.
  for (Variant variant : {Variant::kPostLN, Variant::kPreLN, Variant::kST}) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.vocab = 11;
    cfg.max_seq = 4;
    cfg.variant = variant;
    cfg.dropout = 0.0;
    cfg.ln_eps = 1e-12;
    cfg.init_std = 0.5;
    auto weights = ModelWeights<double>::initialize(cfg, seed + 17);
    TokenBatch tokens{{1, 4}, {}};
    for (int i = 0; i < 4; ++i) tokens.ids.push_back(s.index(11));
    MaskedTargets targets{{0, 1, 2, 3}, {s.index(11), s.index(11), s.index(11), s.index(11)}};
    auto params = weights.parameters();
    std::vector<Tensor<double>> inputs;
    for (auto& p : params) inputs.push_back(p.tensor);
    GateVector gates = GateVector::all_on(cfg.layers);
    gates.prob = {1.0, 0.75};
    const ForwardOptions opts{variant == Variant::kST ? Mode::kTrain : Mode::kEval, 0, 0};
    out.push_back(check_gradients("model_" + std::string(variant_name(variant)), inputs,
                                  [&weights, tokens, targets, gates, opts](Tape<double>& t, const auto&) {
                                    auto logits = forward_model(t, weights, tokens, gates, opts);
                                    return t.cross_entropy(logits, targets);
                                  }));
  }
  return out;
}

}  // namespace pld
