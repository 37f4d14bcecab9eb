#include <gtest/gtest.h>

#include <memory>

#include "aotp/error.hpp"
#include "aotp/forward.hpp"
#include "aotp/taskstore.hpp"
#include "scratch.hpp"

using namespace aotp;

namespace {

ModelConfig mt_model() {
  ModelConfig m;
  m.vocab_size = 36;
  m.hidden = 12;
  m.layers = 2;
  m.heads = 3;
  m.max_seq = 10;
  return m;
}

// Nonzero parameters so every method actually changes the output.
Adaptation<double> trained(const PeftConfig& config, const Backbone<double>& bb, std::size_t classes,
                           std::uint64_t seed) {
  auto a = make_adaptation<double>(config, bb, classes, seed, 0.3);
  CounterRng rng(seed, 0xF00D);
  a.for_each_param([&](const std::string&, GradPair<double>& p) { fill_normal(p.value, rng, 0.2); });
  return a;
}

}  // namespace

TEST(StructuralMode, NamesPerMethod) {
  const auto m = mt_model();
  const auto bb = Backbone<double>::random(m, 1);
  CounterRng rng(1);
  EXPECT_EQ(structural_mode(vanilla_adaptation(Head<double>::random(m.hidden, 2, rng))), "vanilla");
  EXPECT_EQ(structural_mode(make_adaptation<double>(FullConfig{}, bb, 2, 1)), "single:full");
  EXPECT_EQ(structural_mode(make_adaptation<double>(AotKronConfig{6, 6, 2}, bb, 2, 1)), "aot");
  EXPECT_EQ(structural_mode(make_adaptation<double>(AotFcConfig{4}, bb, 2, 1)), "aot");
  EXPECT_EQ(structural_mode(make_adaptation<double>(PTuningV1Config{3}, bb, 2, 1)), "ptv1:p=3");
  EXPECT_EQ(structural_mode(make_adaptation<double>(PTuningV2Config{4}, bb, 2, 1)), "ptv2:p=4");
  EXPECT_EQ(structural_mode(make_adaptation<double>(BitFitConfig{}, bb, 2, 1)), "bitfit");
  EXPECT_EQ(structural_mode(make_adaptation<double>(LoraConfig{2, 2.0, false}, bb, 2, 1)), "lora:r=2");
  EXPECT_EQ(structural_mode(make_adaptation<double>(LoraConfig{2, 2.0, true}, bb, 2, 1)), "single:lora-fused:r=2");
  EXPECT_EQ(structural_mode(make_adaptation<double>(AdapterConfig{3, Activation::relu}, bb, 2, 1)),
            "adapter:r=3:relu");
}

TEST(MultitaskForward, MixedAotTasksMatchSequentialPasses) {
  testing_support::ScratchDir dir;
  const auto m = mt_model();
  auto bb = std::make_shared<const Backbone<double>>(Backbone<double>::random(m, 2));
  TaskRegistry<double> registry(bb);
  registry.add(make_bundle("kron", trained(AotKronConfig{6, 6, 2}, *bb, 2, 1), m));
  registry.add(make_bundle("fc", trained(AotFcConfig{4}, *bb, 3, 2), m));
  const auto fused = fuse_aot(trained(AotKronConfig{6, 6, 3}, *bb, 4, 3), *bb, DType::f32);
  registry.add(make_bundle("table", fused, m));

  const std::vector<TaskRequest> batch = {
      {{1, 5, 9, 0}, "fc"}, {{1, 2, 3, 4, 5, 6}, "kron"}, {{1, 35}, "table"}, {{1, 7, 7, 7, 0, 0}, "kron"}};
  const auto got = multitask_forward(registry, batch);
  ASSERT_EQ(got.size(), batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto want = forward<double>(batch[i].tokens, *bb, registry.at(batch[i].task_id).adaptation);
    ASSERT_EQ(got[i].size(), want.size());
    EXPECT_LT(max_abs_diff(got[i], want), 1e-12) << i;
  }
}

TEST(MultitaskForward, PrefixAndBitFitTasksMatchSequentialPasses) {
  const auto m = mt_model();
  auto bb = std::make_shared<const Backbone<double>>(Backbone<double>::random(m, 3));
  for (const auto& config : std::vector<PeftConfig>{PTuningV2Config{3}, BitFitConfig{}, LoraConfig{2, 3.0, false},
                                                    AdapterConfig{2, Activation::gelu}, PTuningV1Config{2}}) {
    TaskRegistry<double> registry(bb);
    registry.add(make_bundle("a", trained(config, *bb, 2, 4), m));
    registry.add(make_bundle("b", trained(config, *bb, 5, 5), m));
    const std::vector<TaskRequest> batch = {{{1, 2, 3}, "a"}, {{1, 9, 8, 7, 0}, "b"}, {{1, 4}, "a"}};
    const auto got = multitask_forward(registry, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto want = forward<double>(batch[i].tokens, *bb, registry.at(batch[i].task_id).adaptation);
      EXPECT_LT(max_abs_diff(got[i], want), 1e-12) << method_name(method_of(config)) << " " << i;
    }
  }
}

TEST(MultitaskForward, RejectsMixedModesAndUnknownTasks) {
  const auto m = mt_model();
  auto bb = std::make_shared<const Backbone<double>>(Backbone<double>::random(m, 4));
  TaskRegistry<double> registry(bb);
  registry.add(make_bundle("aot", trained(AotKronConfig{6, 6, 2}, *bb, 2, 1), m));
  registry.add(make_bundle("bitfit", trained(BitFitConfig{}, *bb, 2, 2), m));
  registry.add(make_bundle("lora1", trained(LoraConfig{2, 2.0, true}, *bb, 2, 3), m));
  registry.add(make_bundle("lora2", trained(LoraConfig{2, 2.0, true}, *bb, 2, 4), m));

  const std::vector<TaskRequest> mixed = {{{1, 2}, "aot"}, {{1, 3}, "bitfit"}};
  EXPECT_THROW(multitask_forward(registry, mixed), BatchCompositionError);
  const std::vector<TaskRequest> two_fused = {{{1, 2}, "lora1"}, {{1, 3}, "lora2"}};
  EXPECT_THROW(multitask_forward(registry, two_fused), BatchCompositionError);
  const std::vector<TaskRequest> unknown = {{{1, 2}, "aot"}, {{1, 3}, "nope"}};
  EXPECT_THROW(multitask_forward(registry, unknown), InputError);

  const std::vector<TaskRequest> same_fused = {{{1, 2, 5}, "lora1"}, {{1, 3}, "lora1"}};
  const auto got = multitask_forward(registry, same_fused);
  for (std::size_t i = 0; i < same_fused.size(); ++i)
    EXPECT_LT(max_abs_diff(got[i], forward<double>(same_fused[i].tokens, *bb, registry.at("lora1").adaptation)),
              1e-12);
}
