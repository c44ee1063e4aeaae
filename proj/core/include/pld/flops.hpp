#pragma once

#include <cstddef>

#include "pld/model.hpp"
#include "pld/schedule.hpp"

namespace pld {

// Forward FLOPs per token. Matmuls count 2mnk; the remaining elementwise work
// is charged per element with the constants below. Backward is charged at
// kBackwardFactor times forward for everything, so it cancels in ratios.
namespace flop_costs {
inline constexpr double kLayerNormPerElement = 8.0;  // mean, var, normalize, affine
inline constexpr double kSoftmaxPerElement = 5.0;    // max, sub, exp, sum, divide
inline constexpr double kGeluPerElement = 8.0;
inline constexpr double kScalePerElement = 1.0;
inline constexpr double kAddPerElement = 1.0;
inline constexpr double kBackwardFactor = 2.0;
}  // namespace flop_costs

struct FlopBreakdown {
  double block{0.0};  // one transformer block
  double fixed{0.0};  // embeddings, norms and output head
};

FlopBreakdown flops_per_token(const ModelConfig& config, std::size_t seq_len);

// Training FLOPs per token for a step that runs `active_blocks` blocks.
double training_flops_per_token(const ModelConfig& config, std::size_t seq_len, double active_blocks);

// expected_depth(t) / L
double block_flops_fraction(const DropSchedule& s, double t);
// (block * expected_depth(t) + fixed) / (block * L + fixed)
double flops_fraction(const DropSchedule& s, const ModelConfig& config, std::size_t seq_len, double t);

}  // namespace pld
