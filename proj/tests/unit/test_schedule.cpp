#include <gtest/gtest.h>

#include <cmath>

#include "pld/errors.hpp"
#include "pld/schedule.hpp"

namespace pld {
namespace {

TEST(Schedule, KeepRatioClosedForm) {
  const auto s = DropSchedule::with_default_gamma(0.5, 1000, 12);
  EXPECT_DOUBLE_EQ(s.gamma, 0.1);
  EXPECT_EQ(keep_ratio(s, 0.0), 1.0);
  for (double t : {1.0, 10.0, 123.0, 999.0}) {
    EXPECT_NEAR(keep_ratio(s, t), 0.5 * std::exp(-0.1 * t) + 0.5, 1e-15);
  }
  EXPECT_LT(std::abs(keep_ratio(s, 1000.0) - 0.5), 1e-5);
}

TEST(Schedule, KeepRatioIsMonotone) {
  const auto s = DropSchedule::with_default_gamma(0.7, 500, 6);
  double prev = 1.0;
  for (int t = 0; t <= 500; ++t) {
    const double th = keep_ratio(s, t);
    EXPECT_LE(th, prev);
    EXPECT_GE(th, 0.7);
    prev = th;
  }
}

TEST(Schedule, LayerProbabilitiesFollowDepth) {
  const DropSchedule s{0.5, 1.0, 100, 4};
  const double theta = keep_ratio(s, 3.0);
  const auto p = layer_keep_probs(s, 3.0);
  ASSERT_EQ(p.size(), 4u);
  EXPECT_EQ(p[0], 1.0);
  for (std::size_t l = 1; l <= 4; ++l) {
    EXPECT_NEAR(p[l - 1], 1.0 - static_cast<double>(l - 1) * (1.0 - theta) / 4.0, 1e-15);
  }
}

TEST(Schedule, SteadyStateDepth) {
  const auto s = DropSchedule::with_default_gamma(0.5, 1000, 12);
  EXPECT_DOUBLE_EQ(steady_state_depth(s), 9.25);
  EXPECT_DOUBLE_EQ(steady_state_depth(s), (3.0 * 12 + 1) / 4.0);
  EXPECT_NEAR(expected_depth(s, 1e6), 9.25, 1e-12);
  EXPECT_EQ(expected_depth(s, 0), 12.0);
}

TEST(Schedule, ExpectedDepthMeanAveragesSteps) {
  const auto s = DropSchedule::with_default_gamma(0.5, 200, 6);
  double sum = 0.0;
  for (int t = 0; t <= 200; ++t) sum += expected_depth(s, t);
  EXPECT_NEAR(expected_depth_mean(s), sum / 201.0, 1e-12);
}

TEST(Schedule, Validation) {
  EXPECT_THROW(default_gamma(0), ContractError);
  EXPECT_THROW((DropSchedule{0.0, 1.0, 10, 4}.validate()), ContractError);
  EXPECT_THROW((DropSchedule{1.1, 1.0, 10, 4}.validate()), ContractError);
  EXPECT_THROW((DropSchedule{0.5, 0.0, 10, 4}.validate()), ContractError);
  EXPECT_THROW((DropSchedule{0.5, 1.0, 10, 0}.validate()), ContractError);
  EXPECT_NO_THROW((DropSchedule{0.3, 1.0, 10, 4}.validate()));
}

TEST(Schedule, GatesAreKeyedAndFirstBlockAlwaysKept) {
  const auto s = DropSchedule::with_default_gamma(0.5, 100, 8);
  const auto a = sample_gates(s, 50, 3);
  const auto b = sample_gates(s, 50, 3);
  EXPECT_EQ(a.keep, b.keep);
  EXPECT_EQ(a.prob, layer_keep_probs(s, 50));
  bool differs = false;
  for (std::uint64_t t = 51; t < 80 && !differs; ++t) differs = sample_gates(s, t, 3).keep != a.keep;
  EXPECT_TRUE(differs);
  for (std::uint64_t t = 0; t < 200; ++t) EXPECT_EQ(sample_gates(s, t, 9).keep[0], 1);
  EXPECT_TRUE(a.ffn_keep.empty());
  EXPECT_EQ(sample_gates(s, 50, 3, true).ffn_keep.size(), 8u);
}

TEST(Schedule, GateFrequenciesMatchProbabilities) {
  // Steady state: p_l fixed, so every step is an independent draw.
  const DropSchedule s{0.5, 10.0, 100, 6};
  const int n = 20000;
  std::vector<double> kept(6, 0.0);
  for (int t = 1000; t < 1000 + n; ++t) {
    const auto g = sample_gates(s, t, 17);
    for (std::size_t l = 0; l < 6; ++l) kept[l] += g.keep[l];
  }
  const auto p = layer_keep_probs(s, 1000.0);
  for (std::size_t l = 0; l < 6; ++l) {
    const double sd = std::sqrt(p[l] * (1 - p[l]) / n);
    EXPECT_LE(std::abs(kept[l] / n - p[l]), 3.0 * sd + 1e-12) << "layer " << l;
  }
}

TEST(Schedule, TraceGates) {
  const auto s = DropSchedule::with_default_gamma(0.5, 100, 5);
  const auto tr = trace_gates(s, 40, 2);
  const auto g = sample_gates(s, 40, 2);
  EXPECT_EQ(tr.step, 40u);
  EXPECT_EQ(tr.gates, g.keep);
  EXPECT_EQ(tr.kept, g.kept());
}

}  // namespace
}  // namespace pld
