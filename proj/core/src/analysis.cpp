#include "pld/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "pld/errors.hpp"
#include "pld/philox.hpp"

namespace pld {
namespace {

template <typename T>
double norm2(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <typename T>
struct TracedPass {
  ModelWeights<T> weights;
  ForwardTrace<T> trace;
  Tensor<T> loss;
};

// Forward + backward at full depth on a private copy of the weights.
template <typename T>
TracedPass<T> traced_backward(const ModelWeights<T>& weights, const MlmBatch& batch) {
  TracedPass<T> pass{weights.clone(), {}, {}};
  Tape<T> tape;
  const auto gates = full_depth(weights.config.layers);
  auto logits = forward_model(tape, pass.weights, batch.tokens, std::span<const BlockGate>(gates),
                              ForwardOptions{}, &pass.trace);
  pass.loss = tape.cross_entropy(logits, batch.targets);
  if (!std::isfinite(static_cast<double>(pass.loss.item()))) {
    throw DivergenceError("non-finite loss during analysis");
  }
  tape.backward(pass.loss);
  return pass;
}

template <typename T>
ForwardTrace<T> traced_forward(const ModelWeights<T>& weights, const TokenBatch& tokens) {
  ForwardTrace<T> trace;
  Tape<T> tape(false);
  const auto gates = full_depth(weights.config.layers);
  forward_model(tape, weights, tokens, std::span<const BlockGate>(gates), ForwardOptions{}, &trace);
  return trace;
}

// Angle between a and b in degrees, stable for nearly parallel vectors.
template <typename T>
double angle_degrees(const T* a, const T* b, std::size_t d, double na, double nb) {
  double diff = 0.0, sum = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double ua = a[j] / na, ub = b[j] / nb;
    diff += (ua - ub) * (ua - ub);
    sum += (ua + ub) * (ua + ub);
  }
  return 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum)) * 180.0 / std::numbers::pi;
}

}  // namespace

template <typename T>
std::vector<double> layer_grad_norms(const ModelWeights<T>& weights, const MlmBatch& batch) {
  auto pass = traced_backward(weights, batch);
  std::vector<double> norms(weights.config.layers);
  for (std::size_t l = 0; l < norms.size(); ++l) {
    double sq = 0.0;
    for (const auto& p : pass.weights.block_parameters(l)) {
      const double n = norm2<T>(p.tensor.grad());
      sq += n * n;
    }
    norms[l] = std::sqrt(sq);
    if (!std::isfinite(norms[l])) {
      throw DivergenceError("non-finite weight gradient in block " + std::to_string(l));
    }
  }
  return norms;
}

template <typename T>
std::vector<NormRatio> norm_preserving_ratios(const ModelWeights<T>& weights, const MlmBatch& batch) {
  auto pass = traced_backward(weights, batch);
  std::vector<NormRatio> out(weights.config.layers);
  for (std::size_t l = 0; l < out.size(); ++l) {
    auto& r = out[l];
    r.layer = l;
    r.input_grad_norm = norm2<T>(pass.trace.block_inputs[l].grad());
    r.output_grad_norm = norm2<T>(pass.trace.block_outputs[l].grad());
    if (!std::isfinite(r.input_grad_norm) || !std::isfinite(r.output_grad_norm)) {
      throw DivergenceError("non-finite activation gradient at block " + std::to_string(l));
    }
    r.valid = r.output_grad_norm > 0.0;
    r.ratio = r.valid ? r.input_grad_norm / r.output_grad_norm : 0.0;
  }
  return out;
}

template <typename T>
std::vector<Similarity> io_similarity(const ModelWeights<T>& weights, const MlmBatch& batch) {
  const auto trace = traced_forward(weights, batch.tokens);
  const auto [nseq, seq] = batch.tokens.layout;
  const std::size_t d = weights.config.hidden;
  std::vector<Similarity> out(weights.config.layers);
  for (std::size_t l = 0; l < out.size(); ++l) {
    auto& s = out[l];
    s.layer = l;
    const auto in = trace.block_inputs[l].data();
    const auto outv = trace.block_outputs[l].data();
    double l2_total = 0.0, angle_total = 0.0;
    std::size_t sequences = 0;
    for (std::size_t b = 0; b < nseq; ++b) {
      double l2_seq = 0.0, angle_seq = 0.0;
      std::size_t used = 0;
      for (std::size_t p = 0; p < seq; ++p) {
        const T* a = in.data() + (b * seq + p) * d;
        const T* c = outv.data() + (b * seq + p) * d;
        const double na = norm2<T>({a, d});
        const double nc = norm2<T>({c, d});
        double l2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = static_cast<double>(c[j]) - static_cast<double>(a[j]);
          l2 += diff * diff;
        }
        if (na == 0.0 || nc == 0.0) {
          ++s.degenerate;
          continue;
        }
        l2_seq += std::sqrt(l2);
        angle_seq += angle_degrees(a, c, d, na, nc);
        ++used;
      }
      if (used == 0) continue;
      l2_total += l2_seq / static_cast<double>(used);
      angle_total += angle_seq / static_cast<double>(used);
      ++sequences;
    }
    if (sequences > 0) {
      s.l2_distance = l2_total / static_cast<double>(sequences);
      s.arccos_degrees = angle_total / static_cast<double>(sequences);
    }
  }
  return out;
}

template <typename T>
std::vector<ResidualMean> residual_mean(const ModelWeights<T>& weights, const MlmBatch& batch) {
  if (weights.config.variant == Variant::kPostLN) {
    throw ContractError("residual_mean needs a PreLN or ST model; PostLN normalizes the skip path");
  }
  const auto trace = traced_forward(weights, batch.tokens);
  const std::size_t d = weights.config.hidden;
  const std::size_t rows = batch.tokens.layout.rows();
  std::vector<ResidualMean> out(weights.config.layers);
  for (std::size_t l = 0; l < out.size(); ++l) {
    const auto in = trace.block_inputs[l].data();
    const auto outv = trace.block_outputs[l].data();
    std::vector<double> mean(d, 0.0);
    double in_norm = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        mean[j] += static_cast<double>(outv[r * d + j]) - static_cast<double>(in[r * d + j]);
      }
      in_norm += norm2<T>({in.data() + r * d, d});
    }
    for (auto& m : mean) m /= static_cast<double>(rows);
    in_norm /= static_cast<double>(rows);
    out[l].layer = l;
    out[l].norm = norm2<double>(mean);
    out[l].relative = in_norm > 0.0 ? out[l].norm / in_norm : 0.0;
  }
  return out;
}

template <typename T>
double masked_lm_loss(const ModelWeights<T>& weights, std::span<const MlmBatch> data,
                      std::span<const BlockGate> gates) {
  if (data.empty()) throw ContractError("masked_lm_loss: no evaluation batches");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& batch : data) {
    Tape<T> tape(false);
    auto logits = forward_model(tape, weights, batch.tokens, gates, ForwardOptions{});
    const double loss = tape.cross_entropy(logits, batch.targets).item();
    total += loss * static_cast<double>(batch.targets.positions.size());
    count += batch.targets.positions.size();
  }
  return total / static_cast<double>(count);
}

std::vector<BlockGate> lesion_gates(std::size_t layers, double keep_ratio, std::uint64_t seed, bool rescale) {
  const Philox rng(seed);
  std::vector<BlockGate> gates(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const bool on = rng.uniform(rng_stream::make(rng_stream::kLesion, 0, l), 0) < keep_ratio;
    gates[l] = BlockGate{on, on, rescale && keep_ratio > 0.0 ? 1.0 / keep_ratio : 1.0};
  }
  return gates;
}

namespace {

std::pair<double, double> mean_and_stderr(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size() - 1);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

template <typename T>
LesionResult lesion_eval(const ModelWeights<T>& weights, double keep_ratio, std::span<const MlmBatch> data,
                         std::span<const std::uint64_t> seeds) {
  if (!(keep_ratio >= 0.0 && keep_ratio <= 1.0)) {
    throw ContractError("lesion keep ratio must lie in [0, 1], got " + std::to_string(keep_ratio));
  }
  if (seeds.empty()) throw ContractError("lesion_eval needs at least one seed");
  LesionResult r;
  r.keep_ratio = keep_ratio;
  const auto full = full_depth(weights.config.layers);
  r.full_loss = masked_lm_loss(weights, data, std::span<const BlockGate>(full));
  for (std::uint64_t seed : seeds) {
    const auto plain = lesion_gates(weights.config.layers, keep_ratio, seed, false);
    const auto rescaled = lesion_gates(weights.config.layers, keep_ratio, seed, true);
    r.unscaled.push_back(masked_lm_loss(weights, data, std::span<const BlockGate>(plain)));
    r.scaled.push_back(masked_lm_loss(weights, data, std::span<const BlockGate>(rescaled)));
  }
  std::tie(r.mean_unscaled, r.stderr_unscaled) = mean_and_stderr(r.unscaled);
  std::tie(r.mean_scaled, r.stderr_scaled) = mean_and_stderr(r.scaled);
  return r;
}

double identity_decomposition_check(const ModelWeights<double>& weights, std::size_t layer, const MlmBatch& batch) {
  const auto& cfg = weights.config;
  if (cfg.variant == Variant::kPostLN) {
    throw ContractError("identity decomposition holds for PreLN/ST blocks only");
  }
  if (layer >= cfg.layers) {
    throw ContractError("layer " + std::to_string(layer) + " out of range for " + std::to_string(cfg.layers) +
                        " blocks");
  }
  const std::size_t n = batch.tokens.layout.rows() * cfg.hidden;
  if (n > kMaxJacobianSize) {
    throw ContractError("identity decomposition needs a dense " + std::to_string(n) + "x" + std::to_string(n) +
                        " Jacobian; limit is " + std::to_string(kMaxJacobianSize));
  }

  auto pass = traced_backward(weights, batch);
  const auto grad_l = pass.trace.block_inputs[layer].grad();
  const auto grad_L = pass.trace.block_outputs.back().grad();

  // Residual map x_l -> x_L - x_l through blocks layer..L-1.
  const auto all = full_depth(cfg.layers);
  std::vector<BlockGate> tail(cfg.layers);
  for (std::size_t i = 0; i < cfg.layers; ++i) tail[i] = BlockGate{i >= layer, i >= layer, 1.0};
  const std::vector<double> x_l(pass.trace.block_inputs[layer].data().begin(),
                                pass.trace.block_inputs[layer].data().end());
  auto residual = [&](const std::vector<double>& x) {
    Tape<double> tape(false);
    Tensor<double> input(Shape{batch.tokens.layout.rows(), cfg.hidden}, x);
    auto y = run_blocks(tape, weights, input, batch.tokens.layout, std::span<const BlockGate>(tail),
                        ForwardOptions{});
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = y.data()[i] - x[i];
    return r;
  };

  const double h = 1e-3;
  std::vector<double> predicted(grad_L.begin(), grad_L.end());
  std::vector<double> probe = x_l;
  for (std::size_t j = 0; j < n; ++j) {
    auto at = [&](double delta) {
      probe[j] = x_l[j] + delta;
      auto r = residual(probe);
      probe[j] = x_l[j];
      return r;
    };
    const auto p2 = at(2 * h), p1 = at(h), m1 = at(-h), m2 = at(-2 * h);
    // predicted_j += sum_i grad_L[i] * J[i][j]
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double jac = (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h);
      acc += grad_L[i] * jac;
    }
    predicted[j] += acc;
  }

  double worst = 0.0;
  for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(predicted[j] - grad_l[j]));
  (void)all;
  return worst;
}

#define PLD_INSTANTIATE_ANALYSIS(T)                                                                     \
  template std::vector<double> layer_grad_norms(const ModelWeights<T>&, const MlmBatch&);                \
  template std::vector<NormRatio> norm_preserving_ratios(const ModelWeights<T>&, const MlmBatch&);       \
  template std::vector<Similarity> io_similarity(const ModelWeights<T>&, const MlmBatch&);               \
  template std::vector<ResidualMean> residual_mean(const ModelWeights<T>&, const MlmBatch&);             \
  template double masked_lm_loss(const ModelWeights<T>&, std::span<const MlmBatch>,                      \
                                 std::span<const BlockGate>);                                            \
  template LesionResult lesion_eval(const ModelWeights<T>&, double, std::span<const MlmBatch>,          \
                                    std::span<const std::uint64_t>);

PLD_INSTANTIATE_ANALYSIS(float)
PLD_INSTANTIATE_ANALYSIS(double)

}  // namespace pld
