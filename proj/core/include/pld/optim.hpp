#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pld/config.hpp"
#include "pld/model.hpp"

namespace pld {

// Linear warmup from 0 to peak over warmup_ratio * total_steps steps, then
// peak * decay_rate ^ ((step - warmup_steps) / decay_step) with a continuous
// exponent.
double lr_at(std::uint64_t step, const LrConfig& lr, std::uint64_t total_steps);
double warmup_steps(const LrConfig& lr, std::uint64_t total_steps);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::vector<std::uint64_t> steps;  // per parameter, so skipped steps do not count
};

struct AdamStepInfo {
  double grad_norm{0.0};     // global norm before clipping
  double clip_factor{1.0};
};

// Global-norm clipping, bias-corrected Adam, and decoupled weight decay
// (w <- w - lr * wd * w) on parameters flagged for decay. Parameters whose
// `active` entry is 0 are left untouched, moments included. Throws
// DivergenceError if any gradient is NaN/Inf.
template <typename T>
AdamStepInfo adam_step(std::span<const NamedTensor<T>> params, AdamState<T>& state, double lr,
                       const AdamConfig& config, std::span<const std::uint8_t> active = {});

}  // namespace pld
