#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pld/data.hpp"
#include "pld/model.hpp"

namespace pld {

// Per-block measurements of signal propagation. All of them run the model
// full depth in evaluation mode (no dropout) on a private copy of the
// weights, so the caller's gradients are never touched.

// 2-norm of all parameter gradients of each block, from one backward pass of
// the masked-LM loss. Throws DivergenceError naming the first non-finite layer.
template <typename T>
std::vector<double> layer_grad_norms(const ModelWeights<T>& weights, const MlmBatch& batch);

struct NormRatio {
  std::size_t layer{0};
  double input_grad_norm{0.0};
  double output_grad_norm{0.0};
  double ratio{0.0};  // input / output
  bool valid{true};   // false when the output gradient vanished
};

// |dE/dx_in| / |dE/dx_out| for every block, captured in one backward pass.
template <typename T>
std::vector<NormRatio> norm_preserving_ratios(const ModelWeights<T>& weights, const MlmBatch& batch);

struct Similarity {
  std::size_t layer{0};
  double l2_distance{0.0};     // mean |x_out - x_in| per token
  double arccos_degrees{0.0};  // mean angle between x_in and x_out per token
  std::size_t degenerate{0};   // tokens skipped because a vector had zero norm
};

// Token-level statistics averaged over positions, then over sequences.
template <typename T>
std::vector<Similarity> io_similarity(const ModelWeights<T>& weights, const MlmBatch& batch);

struct ResidualMean {
  std::size_t layer{0};
  double norm{0.0};      // |mean over tokens of (x_out - x_in)|
  double relative{0.0};  // norm / mean token |x_in|
};

// Requires PreLN or ST, where x_out - x_in is exactly the residual branch.
template <typename T>
std::vector<ResidualMean> residual_mean(const ModelWeights<T>& weights, const MlmBatch& batch);

// Token-weighted mean masked cross-entropy with explicit per-block gates.
template <typename T>
double masked_lm_loss(const ModelWeights<T>& weights, std::span<const MlmBatch> data,
                      std::span<const BlockGate> gates);

struct LesionResult {
  double keep_ratio{1.0};
  double full_loss{0.0};
  std::vector<double> unscaled;  // per seed, kept blocks run as-is
  std::vector<double> scaled;    // per seed, kept blocks' branches scaled by 1/keep_ratio
  double mean_unscaled{0.0};
  double mean_scaled{0.0};
  double stderr_unscaled{0.0};
  double stderr_scaled{0.0};
};

// Evaluates with blocks removed independently with probability 1 - keep_ratio.
// Gates for a seed are shared across models, so variants can be compared on
// identical lesions.
template <typename T>
LesionResult lesion_eval(const ModelWeights<T>& weights, double keep_ratio, std::span<const MlmBatch> data,
                         std::span<const std::uint64_t> seeds);

std::vector<BlockGate> lesion_gates(std::size_t layers, double keep_ratio, std::uint64_t seed, bool rescale);

// Computes dE/dx_l by reverse-mode autodiff and again as
// dE/dx_L (I + d/dx_l sum_{i>=l} f_RT(x_i)), with the residual Jacobian taken
// column by column from a fourth-order central difference of the forward
// pass. Returns the largest absolute disagreement. PreLN/ST only; throws
// ContractError when the dense Jacobian would exceed kMaxJacobianSize columns.
inline constexpr std::size_t kMaxJacobianSize = 4096;
double identity_decomposition_check(const ModelWeights<double>& weights, std::size_t layer, const MlmBatch& batch);

}  // namespace pld
