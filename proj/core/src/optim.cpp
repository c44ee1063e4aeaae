#include "pld/optim.hpp"

#include <cmath>

#include "pld/errors.hpp"

namespace pld {

double warmup_steps(const LrConfig& lr, std::uint64_t total_steps) {
  return lr.warmup_ratio * static_cast<double>(total_steps);
}

double lr_at(std::uint64_t step, const LrConfig& lr, std::uint64_t total_steps) {
  const double t = static_cast<double>(step);
  const double warmup = warmup_steps(lr, total_steps);
  if (t < warmup) return lr.peak * t / warmup;
  return lr.peak * std::pow(lr.decay_rate, (t - warmup) / lr.decay_step);
}

template <typename T>
AdamStepInfo adam_step(std::span<const NamedTensor<T>> params, AdamState<T>& state, double lr,
                       const AdamConfig& config, std::span<const std::uint8_t> active) {
  const std::size_t n = params.size();
  if (!active.empty() && active.size() != n) {
    throw ContractError("adam_step: active mask has " + std::to_string(active.size()) + " entries for " +
                        std::to_string(n) + " parameters");
  }
  if (state.steps.empty()) {
    state.first_moment.resize(n);
    state.second_moment.resize(n);
    state.steps.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      state.first_moment[i].assign(params[i].tensor.numel(), T(0));
      state.second_moment[i].assign(params[i].tensor.numel(), T(0));
    }
  }
  if (state.steps.size() != n) throw ContractError("adam_step: optimizer state does not match parameters");

  auto is_active = [&](std::size_t i) { return active.empty() || active[i] != 0; };

  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = params[i].tensor;
    if (!is_active(i) || !t.has_grad()) continue;
    for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  AdamStepInfo info;
  info.grad_norm = std::sqrt(sq);
  if (!std::isfinite(info.grad_norm)) throw DivergenceError("adam_step: non-finite gradient norm");
  if (config.clip_norm > 0.0 && info.grad_norm > config.clip_norm) {
    info.clip_factor = config.clip_norm / info.grad_norm;
  }

  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T eps = static_cast<T>(config.eps);
  const T clip = static_cast<T>(info.clip_factor);
  const T step_lr = static_cast<T>(lr);
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_active(i)) continue;
    Tensor<T> t = params[i].tensor;
    auto w = t.data();
    if (state.first_moment[i].size() != w.size()) {
      throw ContractError("adam_step: moment shape mismatch for " + params[i].name);
    }
    const auto g = t.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto k = ++state.steps[i];
    const T c1 = static_cast<T>(1.0 - std::pow(config.beta1, static_cast<double>(k)));
    const T c2 = static_cast<T>(1.0 - std::pow(config.beta2, static_cast<double>(k)));
    const T wd = params[i].decay ? static_cast<T>(config.weight_decay) : T(0);
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = g[j] * clip;
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      const T mhat = m[j] / c1;
      const T vhat = v[j] / c2;
      w[j] -= step_lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[j]);
    }
  }
  return info;
}

template AdamStepInfo adam_step<float>(std::span<const NamedTensor<float>>, AdamState<float>&, double,
                                       const AdamConfig&, std::span<const std::uint8_t>);
template AdamStepInfo adam_step<double>(std::span<const NamedTensor<double>>, AdamState<double>&, double,
                                        const AdamConfig&, std::span<const std::uint8_t>);

}  // namespace pld
