#pragma once

// Invariant suites shared by the `selftest` subcommand and the acceptance
// binary. Each suite returns a report instead of asserting so callers decide
// how to present failures.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aotp/peft.hpp"

namespace aotp::checks {

struct CheckOutcome {
  std::string name;
  bool passed = false;
  double value = 0.0;  // the measured quantity (max error, count, ...)
  std::string detail;
};

struct SuiteReport {
  std::string name;
  std::vector<CheckOutcome> checks;
  double seconds = 0.0;

  bool passed() const;
  std::string summary() const;
};

// The model used by the gradient suite: d=32, l=2, h=2, |V|=97.
ModelConfig gradient_model();

// Small method configurations that fit gradient_model().
std::vector<PeftConfig> gradient_methods();

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // parameter name of the worst coordinate
};

// Compares the analytic gradient of the cross-entropy loss against central
// differences for every trainable tensor of one method on one seed. Full
// fine-tuning probes `full_samples` coordinates per tensor; other methods
// probe every coordinate. The relative error of one coordinate is
// |a - f| / max(|a|, |f|, floor).
GradientCheck check_gradients(const PeftConfig& method, std::uint64_t seed, std::size_t seq_len = 8,
                              double eps = 1e-5, std::size_t full_samples = 32, double floor = 1e-5);

struct GradientSuiteOptions {
  std::size_t seeds = 20;
  double tolerance = 1e-4;
  double eps = 1e-5;
  std::size_t full_samples = 32;
};
SuiteReport gradient_suite(const GradientSuiteOptions& options = {});

struct IdentitySuiteOptions {
  std::size_t seeds = 100;
  double tolerance = 1e-10;
};
SuiteReport identity_suite(const IdentitySuiteOptions& options = {});

SuiteReport accounting_suite();

struct MultitaskSuiteOptions {
  std::size_t registries = 50;
  double tolerance = 1e-10;
  std::string scratch_dir;  // where synthetic table files are written; empty = system temp
};
SuiteReport multitask_suite(const MultitaskSuiteOptions& options = {});

// Peak number of bytes obtained from the global operator new while fn runs,
// measured above the level at entry. Linking the checks library replaces the
// global allocation functions with counting versions.
std::size_t peak_allocation(const std::function<void()>& fn);

}  // namespace aotp::checks
