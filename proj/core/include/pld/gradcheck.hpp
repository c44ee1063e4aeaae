#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pld/tape.hpp"
#include "pld/tensor.hpp"

namespace pld {

struct GradCheckResult {
  std::string name;
  // max |autodiff - numeric| / max(|numeric|_inf, |autodiff|_inf), worst input
  double max_rel_error{0.0};
  double max_abs_error{0.0};
  std::size_t evaluations{0};
};

// Builds a scalar loss from `inputs` on the given tape. Must be a pure
// function of the input values.
using LossBuilder = std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>;

// Compares reverse-mode gradients of every input with central differences
// (f(x + h) - f(x - h)) / 2h, one element at a time.
GradCheckResult check_gradients(const std::string& name, std::vector<Tensor<double>> inputs,
                                const LossBuilder& loss, double step = 1e-5);

// The finite-difference suite behind `pld grad-check`: every tensor op, each
// block variant, and a full L=2, d=8, S=4, V=11 model.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed);

inline constexpr double kGradCheckTolerance = 1e-5;

}  // namespace pld
