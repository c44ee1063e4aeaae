#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pld/gates.hpp"

namespace pld {

// Progressive drop schedule: keep ratio theta(t) = (1 - theta_limit) exp(-gamma t) + theta_limit,
// spread over depth so that block l (1-based) keeps with p_l = 1 - (l - 1)(1 - theta(t)) / L.
struct DropSchedule {
  double theta_limit{0.5};
  double gamma{1e-3};
  std::uint64_t total_steps{1000};
  std::size_t layers{12};

  // gamma = 100 / total_steps
  static DropSchedule with_default_gamma(double theta_limit, std::uint64_t total_steps, std::size_t layers);

  // Throws ContractError when theta_limit is outside (0, 1], gamma <= 0 or
  // layers == 0. Values outside [0.5, 0.9] only log a warning.
  void validate() const;
};

double default_gamma(std::uint64_t total_steps);

// theta(t); 1 at t = 0 and non-increasing towards theta_limit.
double keep_ratio(const DropSchedule& s, double t);

// p_1..p_L for step t; p_1 == 1 always.
std::vector<double> layer_keep_probs(const DropSchedule& s, double t);

// G_l ~ Bernoulli(p_l(t)) drawn from a Philox stream keyed by (seed, t, l).
GateVector sample_gates(const DropSchedule& s, std::uint64_t t, std::uint64_t seed,
                        bool per_sublayer = false);

// Sum of p_l(t): expected number of active blocks at step t.
double expected_depth(const DropSchedule& s, double t);
// Mean of expected_depth over t = 0..total_steps.
double expected_depth_mean(const DropSchedule& s);
// Limit of expected_depth as t grows: L - (1 - theta_limit)(L - 1) / 2.
double steady_state_depth(const DropSchedule& s);

struct GateTrace {
  std::uint64_t step{0};
  std::vector<double> prob;
  std::vector<std::uint8_t> gates;
  std::size_t kept{0};
};

GateTrace trace_gates(const DropSchedule& s, std::uint64_t t, std::uint64_t seed);

}  // namespace pld
