#include "pld/schedule.hpp"

#include <cmath>
#include <string>

#include <spdlog/spdlog.h>

#include "pld/errors.hpp"
#include "pld/philox.hpp"

namespace pld {

double default_gamma(std::uint64_t total_steps) {
  if (total_steps == 0) throw ContractError("default_gamma: total steps must be positive");
  return 100.0 / static_cast<double>(total_steps);
}

DropSchedule DropSchedule::with_default_gamma(double theta_limit, std::uint64_t total_steps,
                                              std::size_t layers) {
  DropSchedule s{theta_limit, default_gamma(total_steps), total_steps, layers};
  s.validate();
  return s;
}

void DropSchedule::validate() const {
  if (!(theta_limit > 0.0 && theta_limit <= 1.0)) {
    throw ContractError("theta_limit must lie in (0, 1], got " + std::to_string(theta_limit));
  }
  if (!(gamma > 0.0)) throw ContractError("gamma must be positive, got " + std::to_string(gamma));
  if (layers == 0) throw ContractError("schedule needs at least one layer");
  if (theta_limit < 0.5 || theta_limit > 0.9) {
    spdlog::warn("theta_limit {} is outside the recommended range [0.5, 0.9]; small values may diverge",
                 theta_limit);
  }
}

double keep_ratio(const DropSchedule& s, double t) {
  if (t <= 0.0) return 1.0;
  return (1.0 - s.theta_limit) * std::exp(-s.gamma * t) + s.theta_limit;
}

std::vector<double> layer_keep_probs(const DropSchedule& s, double t) {
  const double step = (1.0 - keep_ratio(s, t)) / static_cast<double>(s.layers);
  std::vector<double> p(s.layers);
  for (std::size_t l = 0; l < s.layers; ++l) p[l] = 1.0 - static_cast<double>(l) * step;
  return p;
}

GateVector sample_gates(const DropSchedule& s, std::uint64_t t, std::uint64_t seed, bool per_sublayer) {
  GateVector g;
  g.prob = layer_keep_probs(s, static_cast<double>(t));
  g.keep.resize(s.layers);
  if (per_sublayer) g.ffn_keep.resize(s.layers);
  const Philox rng(seed);
  for (std::size_t l = 0; l < s.layers; ++l) {
    const auto block = rng.block(rng_stream::make(rng_stream::kGates, t, l), 0);
    g.keep[l] = u32_to_unit(block[0]) < g.prob[l] ? 1 : 0;
    if (per_sublayer) g.ffn_keep[l] = u32_to_unit(block[1]) < g.prob[l] ? 1 : 0;
  }
  return g;
}

double expected_depth(const DropSchedule& s, double t) {
  double total = 0.0;
  for (double p : layer_keep_probs(s, t)) total += p;
  return total;
}

double expected_depth_mean(const DropSchedule& s) {
  double total = 0.0;
  for (std::uint64_t t = 0; t <= s.total_steps; ++t) total += expected_depth(s, static_cast<double>(t));
  return total / static_cast<double>(s.total_steps + 1);
}

double steady_state_depth(const DropSchedule& s) {
  const double L = static_cast<double>(s.layers);
  return L - (1.0 - s.theta_limit) * (L - 1.0) / 2.0;
}

GateTrace trace_gates(const DropSchedule& s, std::uint64_t t, std::uint64_t seed) {
  auto g = sample_gates(s, t, seed);
  return GateTrace{t, g.prob, g.keep, g.kept()};
}

}  // namespace pld
