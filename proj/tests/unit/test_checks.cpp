#include <gtest/gtest.h>

#include "aotp/checks.hpp"

using namespace aotp;

namespace {

void expect_passed(const checks::SuiteReport& report) {
  EXPECT_FALSE(report.checks.empty());
  for (const auto& c : report.checks) EXPECT_TRUE(c.passed) << report.name << "/" << c.name << ": " << c.detail;
}

}  // namespace

TEST(Checks, AccountingSuitePasses) { expect_passed(checks::accounting_suite()); }

TEST(Checks, IdentitySuitePassesOnFewSeeds) { expect_passed(checks::identity_suite({5, 1e-10})); }

TEST(Checks, GradientSuitePassesOnOneSeed) {
  checks::GradientSuiteOptions options;
  options.seeds = 1;
  expect_passed(checks::gradient_suite(options));
}

TEST(Checks, MultitaskSuitePassesOnFewRegistries) {
  checks::MultitaskSuiteOptions options;
  options.registries = 4;
  expect_passed(checks::multitask_suite(options));
}

TEST(Checks, GradientCheckCatchesAWrongTolerance) {
  // A perturbation step far too large for the curvature must show up as error.
  const auto coarse = checks::check_gradients(BitFitConfig{}, 0, 8, 1.0);
  const auto fine = checks::check_gradients(BitFitConfig{}, 0, 8, 1e-5);
  EXPECT_GT(coarse.max_rel_error, 1e-4);
  EXPECT_LT(fine.max_rel_error, 1e-4);
  EXPECT_GT(fine.coordinates, 0u);
}

TEST(Checks, PeakAllocationSeesTemporaryBuffers) {
  const auto peak = checks::peak_allocation([] {
    std::vector<char> big(1 << 20);
    asm volatile("" : : "r"(big.data()) : "memory");  // keep the allocation
  });
  EXPECT_GE(peak, std::size_t{1} << 20);
  EXPECT_LT(peak, (std::size_t{1} << 20) + 4096);
}
