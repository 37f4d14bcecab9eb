#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "aotp/checks.hpp"
#include "aotp/forward.hpp"

namespace aotp::checks {

bool SuiteReport::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

std::string SuiteReport::summary() const {
  std::ostringstream out;
  std::size_t ok = 0;
  for (const auto& c : checks) ok += c.passed;
  out << name << ": " << ok << "/" << checks.size() << " checks passed in " << seconds << " s";
  for (const auto& c : checks) {
    if (!c.passed) out << "\n  FAILED " << c.name << " (" << c.value << ") " << c.detail;
  }
  return out.str();
}

ModelConfig gradient_model() {
  ModelConfig m;
  m.vocab_size = 97;
  m.hidden = 32;
  m.layers = 2;
  m.heads = 2;
  m.ffn_mult = 4;
  m.max_seq = 64;
  return m;
}

std::vector<PeftConfig> gradient_methods() {
  return {AotKronConfig{10, 10, 3},
          AotFcConfig{12, Activation::gelu},
          PTuningV1Config{3},
          PTuningV2Config{3},
          BitFitConfig{},
          LoraConfig{3, 6.0, false},
          AdapterConfig{5, Activation::gelu},
          FullConfig{}};
}

GradientCheck check_gradients(const PeftConfig& method, std::uint64_t seed, std::size_t seq_len, double eps,
                              std::size_t full_samples, double floor) {
  const ModelConfig model = gradient_model();
  const auto backbone = Backbone<double>::random(model, seed, BackboneInit{0.5, 0.2, 0.1});
  const std::size_t classes = 3;
  auto adaptation = make_adaptation<double>(method, backbone, classes, seed, 0.1);

  // Move every trainable tensor away from its (often zero) initialization so
  // that no gradient is trivially zero.
  CounterRng perturb(seed, 0x9E47);
  adaptation.for_each_param([&](const std::string&, GradPair<double>& p) {
    if (!p.trainable()) return;
    for (auto& v : p.value.flat()) v += 0.1 * perturb.normal();
  });

  CounterRng tokens_rng(seed, 0x70C5);
  std::vector<TokenId> tokens(seq_len);
  for (auto& t : tokens) t = static_cast<TokenId>(1 + tokens_rng.below(model.vocab_size - 1));
  if (seed % 2 == 1 && seq_len > 2) tokens.back() = model.pad_id;
  const std::size_t label = seed % classes;
  const ForwardOptions options{true, 0.1, seed};

  adaptation.zero_grad();
  accumulate_example_gradient<double>(tokens, label, backbone, adaptation, options, 1.0);

  auto loss = [&] { return cross_entropy(forward<double>(tokens, backbone, adaptation, options), label); };
  const bool sampled = std::holds_alternative<FullConfig>(method);
  CounterRng pick(seed, 0x5A3B);

  GradientCheck result;
  adaptation.for_each_param([&](const std::string& name, GradPair<double>& p) {
    if (!p.trainable()) return;
    std::vector<std::size_t> coords;
    if (sampled && p.value.size() > full_samples) {
      for (std::size_t k = 0; k < full_samples; ++k) coords.push_back(pick.below(p.value.size()));
    } else {
      coords.resize(p.value.size());
      for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    }
    for (std::size_t idx : coords) {
      const double analytic = (*p.grad)[idx];
      const double numeric = central_difference(p.value[idx], loss, eps);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = name + "[" + std::to_string(idx) + "]";
      }
    }
  });
  return result;
}

SuiteReport gradient_suite(const GradientSuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report{"gradient", {}, 0.0};
  for (const auto& method : gradient_methods()) {
    double worst = 0.0;
    std::string where;
    std::size_t coords = 0;
    for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
      const auto r = check_gradients(method, seed, 8, options.eps, options.full_samples);
      coords += r.coordinates;
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        where = "seed " + std::to_string(seed) + " " + r.worst;
      }
    }
    report.checks.push_back({std::string(method_name(method_of(method))) + " max relative error",
                             worst < options.tolerance, worst,
                             std::to_string(coords) + " coordinates, worst at " + where});
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace aotp::checks
