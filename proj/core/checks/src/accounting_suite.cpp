#include <chrono>

#include "aotp/adaptation.hpp"
#include "aotp/checks.hpp"
#include "aotp/taskstore.hpp"

namespace aotp::checks {

namespace {

ModelConfig large_dims() {
  ModelConfig m;
  m.vocab_size = 50265;
  m.hidden = 1024;
  m.layers = 24;
  m.heads = 16;
  return m;
}

CheckOutcome exact(std::string name, std::uint64_t got, std::uint64_t want) {
  return {std::move(name), got == want, static_cast<double>(got), "expected " + std::to_string(want)};
}

}  // namespace

SuiteReport accounting_suite() {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report{"accounting", {}, 0.0};
  const ModelConfig large = large_dims();

  report.checks.push_back(exact("kron a=256 b=200 r=20 at d=1024 l=24",
                                count_trainable(AotKronConfig{256, 200, 20}, large), 10'049'280));
  report.checks.push_back(exact("fused table bytes at |V|=50265 d=1024 l=24 fp16",
                                fused_table_bytes(large, DType::f16), 2'470'625'280));
  report.checks.push_back(exact("ptv2 p=20 at d=1024 l=24", count_trainable(PTuningV2Config{20}, large), 983'040));
  report.checks.push_back(exact("aot request bytes n=16 d=1024 l=24 fp16",
                                aot_request_bytes(16, 1024, 24, DType::f16), 786'432));
  const std::uint64_t lora_batch = fused_lora_batch_params(1024, 48, 4);
  report.checks.push_back(exact("fused lora batch params b=4 d=1024 l=48", lora_batch, 805'306'368));
  report.checks.push_back({"fused lora batch exceeds 201,326,592 parameters", lora_batch > 201'326'592,
                           static_cast<double>(lora_batch), ""});

  // Closed forms against enumeration of the instantiated tensors.
  std::size_t mismatches = 0;
  std::string first_mismatch;
  for (std::size_t variant = 0; variant < 3; ++variant) {
    ModelConfig m;
    m.vocab_size = 61 + 40 * variant;
    m.hidden = 8 * (variant + 1);
    m.layers = 1 + variant;
    m.heads = 2;
    const auto bb = Backbone<double>::random(m, variant);
    const std::vector<PeftConfig> configs = {
        AotKronConfig{8, 8 + 5 * variant, 2 + variant}, AotFcConfig{3 + variant, Activation::relu},
        PTuningV1Config{1 + variant},                   PTuningV2Config{2 + variant},
        BitFitConfig{},                                 LoraConfig{1 + variant, 2.0, variant % 2 == 1},
        AdapterConfig{2 + variant, Activation::gelu},   FullConfig{}};
    for (const auto& config : configs) {
      for (std::size_t classes : {2, 5}) {
        const auto a = make_adaptation<double>(config, bb, classes, variant);
        const bool method_ok = a.trainable_scalars(false) == count_trainable(config, m);
        const bool head_ok = a.trainable_scalars(true) == count_trainable(config, m, classes);
        if (!method_ok || !head_ok) {
          if (mismatches++ == 0) {
            first_mismatch = std::string(method_name(method_of(config))) + " variant " + std::to_string(variant);
          }
        }
      }
    }
  }
  report.checks.push_back({"count_trainable equals tensor enumeration", mismatches == 0,
                           static_cast<double>(mismatches), first_mismatch});

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace aotp::checks
