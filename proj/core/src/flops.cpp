#include "pld/flops.hpp"

namespace pld {

FlopBreakdown flops_per_token(const ModelConfig& c, std::size_t seq_len) {
  using namespace flop_costs;
  const double d = static_cast<double>(c.hidden);
  const double f = static_cast<double>(c.ffn_hidden());
  const double h = static_cast<double>(c.heads);
  const double s = static_cast<double>(seq_len);
  const double v = static_cast<double>(c.vocab);

  const double projections = 4.0 * 2.0 * d * d;
  const double attention = 2.0 * s * d + 2.0 * s * d + h * s * kSoftmaxPerElement + d * kScalePerElement;
  const double ffn = 2.0 * d * f + 2.0 * f * d + (f + d) * kAddPerElement + f * kGeluPerElement;
  const double norms = 2.0 * d * kLayerNormPerElement;
  const double residual = 2.0 * d * kAddPerElement;

  FlopBreakdown out;
  out.block = projections + attention + ffn + norms + residual;
  out.fixed = d * kAddPerElement + d * kLayerNormPerElement + 2.0 * d * v + v * kAddPerElement;
  if (c.variant != Variant::kPostLN) out.fixed += d * kLayerNormPerElement;
  return out;
}

double training_flops_per_token(const ModelConfig& c, std::size_t seq_len, double active_blocks) {
  const auto fb = flops_per_token(c, seq_len);
  return (1.0 + flop_costs::kBackwardFactor) * (fb.block * active_blocks + fb.fixed);
}

double block_flops_fraction(const DropSchedule& s, double t) {
  return expected_depth(s, t) / static_cast<double>(s.layers);
}

double flops_fraction(const DropSchedule& s, const ModelConfig& c, std::size_t seq_len, double t) {
  const auto fb = flops_per_token(c, seq_len);
  const double L = static_cast<double>(s.layers);
  return (fb.block * expected_depth(s, t) + fb.fixed) / (fb.block * L + fb.fixed);
}

}  // namespace pld
