#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>

#include "aotp/checks.hpp"
#include "aotp/error.hpp"
#include "aotp/forward.hpp"
#include "aotp/taskstore.hpp"

namespace aotp::checks {

namespace {

namespace fs = std::filesystem;

ModelConfig multitask_model() {
  ModelConfig m;
  m.vocab_size = 60;
  m.hidden = 16;
  m.layers = 2;
  m.heads = 2;
  m.max_seq = 32;
  return m;
}

enum class Family { aot, bitfit, ptv1, ptv2, lora, adapter, vanilla };
constexpr std::size_t kFamilies = 7;

template <typename T>
void perturb(Adaptation<T>& a, std::uint64_t seed) {
  CounterRng rng(seed, 0x3A1);
  a.for_each_param([&](const std::string&, GradPair<T>& p) {
    for (auto& v : p.value.flat()) v += static_cast<T>(0.1 * rng.normal());
  });
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& base) {
    const fs::path root = base.empty() ? fs::temp_directory_path() : fs::path(base);
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = root / ("aotp-multitask-" + std::to_string(stamp));
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

// One task of the given family. AoT tasks rotate through on-the-fly Kron,
// on-the-fly FC, an in-memory table and a table file.
Adaptation<double> make_task(Family family, std::size_t index, std::size_t shape, const Backbone<double>& bb,
                             std::size_t classes, std::uint64_t seed, const ScratchDir& scratch) {
  switch (family) {
    case Family::aot: {
      const bool kron = (index + seed) % 2 == 0;
      const PeftConfig config = kron ? PeftConfig{AotKronConfig{8, 8, 2}} : PeftConfig{AotFcConfig{5, Activation::gelu}};
      auto a = make_adaptation<double>(config, bb, classes, seed);
      perturb(a, seed);
      const std::size_t kind = (index + seed) % 4;
      if (kind == 2) return fuse_aot(a, bb);
      if (kind == 3) {
        const auto fused = fuse_aot(a, bb);
        const auto& table = dynamic_cast<const BiasTable<double>&>(*std::get<FusedAotState<double>>(fused.state).rows);
        const std::string path = scratch.file("task" + std::to_string(seed) + "_" + std::to_string(index) + ".aotp");
        write_table(table, path, DType::f32);
        auto from_file = fused;
        std::get<FusedAotState<double>>(from_file.state).rows = std::make_shared<TableReader<double>>(path);
        return from_file;
      }
      return a;
    }
    case Family::vanilla: {
      CounterRng rng(seed, 0x4EAD);
      return vanilla_adaptation(Head<double>::random(bb.config.hidden, classes, rng, 0.5));
    }
    default:
      break;
  }
  PeftConfig config;
  switch (family) {
    case Family::bitfit: config = BitFitConfig{}; break;
    case Family::ptv1: config = PTuningV1Config{1 + shape}; break;
    case Family::ptv2: config = PTuningV2Config{1 + shape}; break;
    case Family::lora: config = LoraConfig{1 + shape, 2.0, false}; break;
    default: config = AdapterConfig{2 + shape, Activation::gelu}; break;
  }
  auto a = make_adaptation<double>(config, bb, classes, seed);
  perturb(a, seed);
  return a;
}

std::vector<TokenId> random_sequence(const ModelConfig& m, CounterRng& rng) {
  std::vector<TokenId> t(1 + rng.below(10));
  for (auto& x : t) x = static_cast<TokenId>(1 + rng.below(m.vocab_size - 1));
  if (t.size() > 2 && rng.below(3) == 0) t.back() = m.pad_id;
  return t;
}

double compare(const TaskRegistry<double>& registry, const std::vector<TaskRequest>& batch) {
  const auto stacked = multitask_forward(registry, std::span<const TaskRequest>(batch));
  double worst = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& bundle = registry.at(batch[i].task_id);
    const auto single = forward<double>(batch[i].tokens, registry.backbone(), bundle.adaptation);
    if (single.size() != stacked[i].size()) return INFINITY;
    worst = std::max(worst, max_abs_diff(single, stacked[i]));
  }
  return worst;
}

template <typename E, typename F>
bool throws(F&& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

}  // namespace

SuiteReport multitask_suite(const MultitaskSuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report{"multitask", {}, 0.0};
  const ScratchDir scratch(options.scratch_dir);
  const ModelConfig model = multitask_model();

  // Random registries of three to five tasks sharing one structural mode.
  {
    double worst = 0.0;
    std::size_t requests = 0;
    for (std::uint64_t r = 0; r < options.registries; ++r) {
      CounterRng rng(r, 0x3717);
      const auto bb = std::make_shared<const Backbone<double>>(
          Backbone<double>::random(model, 500 + r, BackboneInit{0.5, 0.2, 0.1}));
      const auto family = static_cast<Family>(r % kFamilies);
      const std::size_t shape = rng.below(3);
      const std::size_t tasks = 3 + rng.below(3);
      TaskRegistry<double> registry(bb);
      for (std::size_t t = 0; t < tasks; ++t) {
        const std::size_t classes = 2 + rng.below(3);
        auto a = make_task(family, t, shape, *bb, classes, r * 16 + t, scratch);
        registry.add(make_bundle("task" + std::to_string(t), std::move(a), model));
      }
      std::vector<TaskRequest> batch;
      const std::size_t size = tasks + rng.below(6);
      for (std::size_t i = 0; i < size; ++i) {
        const std::size_t t = i < tasks ? i : rng.below(tasks);
        batch.push_back({random_sequence(model, rng), "task" + std::to_string(t)});
      }
      shuffle(batch, rng);
      worst = std::max(worst, compare(registry, batch));
      requests += batch.size();
    }
    report.checks.push_back({"batched multi-task forward equals sequential", worst < options.tolerance, worst,
                             std::to_string(options.registries) + " registries, " + std::to_string(requests) +
                                 " requests"});
  }

  // Weight-changing methods batch with their own task only.
  {
    const auto bb = std::make_shared<const Backbone<double>>(Backbone<double>::random(model, 77));
    TaskRegistry<double> registry(bb);
    auto full = make_adaptation<double>(FullConfig{}, *bb, 3, 1);
    perturb(full, 1);
    auto lora = make_adaptation<double>(LoraConfig{2, 2.0, true}, *bb, 2, 2);
    perturb(lora, 2);
    registry.add(make_bundle("full", std::move(full), model));
    registry.add(make_bundle("lora", std::move(lora), model));
    registry.add(make_bundle("bitfit", make_adaptation<double>(BitFitConfig{}, *bb, 2, 3), model));
    CounterRng rng(5, 0x3718);
    double worst = 0.0;
    for (const char* id : {"full", "lora"}) {
      std::vector<TaskRequest> batch;
      for (int i = 0; i < 4; ++i) batch.push_back({random_sequence(model, rng), id});
      worst = std::max(worst, compare(registry, batch));
    }
    report.checks.push_back({"single-task batches equal sequential", worst < options.tolerance, worst, ""});
    const std::vector<TaskRequest> mixed = {{{3, 4, 5}, "full"}, {{6, 7}, "lora"}};
    const std::vector<TaskRequest> incompatible = {{{3, 4, 5}, "bitfit"}, {{6, 7}, "lora"}};
    const std::vector<TaskRequest> unknown = {{{3, 4, 5}, "missing"}};
    const bool rejected =
        throws<BatchCompositionError>([&] { multitask_forward(registry, std::span<const TaskRequest>(mixed)); }) &&
        throws<BatchCompositionError>(
            [&] { multitask_forward(registry, std::span<const TaskRequest>(incompatible)); }) &&
        throws<InputError>([&] { multitask_forward(registry, std::span<const TaskRequest>(unknown)); });
    report.checks.push_back({"mixed modes and unknown ids are rejected", rejected, rejected ? 1.0 : 0.0, ""});
  }

  // Row lookups from a table file cost O(n d) memory regardless of |V|.
  {
    const std::size_t d = 64;
    const std::size_t layers = 2;
    const std::vector<TokenId> tokens = {1, 5, 9, 17, 33, 65, 129, 200, 3, 3, 7, 250, 11, 13, 2, 255};
    std::size_t peaks[2] = {0, 0};
    const std::size_t vocabs[2] = {256, 50265};
    for (std::size_t k = 0; k < 2; ++k) {
      std::vector<Tensor<float>> per_layer;
      CounterRng rng(k, 0x7AB);
      for (std::size_t l = 0; l < layers; ++l) {
        Tensor<float> t = Tensor<float>::zeros(vocabs[k], d);
        fill_normal(t, rng, 1.0);
        per_layer.push_back(std::move(t));
      }
      const std::string path = scratch.file(k == 0 ? "vocab_small.aotp" : "vocab_large.aotp");
      write_table(BiasTable<float>(std::move(per_layer), DType::f32), path, DType::f32);
      Tensor<float> rows;
      peaks[k] = peak_allocation([&] { rows = read_rows<float>(path, 1, tokens); });
    }
    const std::size_t output = tokens.size() * d * sizeof(float);
    const std::size_t bound = 2 * output + 4096;
    const std::size_t spread = peaks[0] > peaks[1] ? peaks[0] - peaks[1] : peaks[1] - peaks[0];
    report.checks.push_back({"row lookup memory bounded by O(n d)", std::max(peaks[0], peaks[1]) <= bound,
                             static_cast<double>(std::max(peaks[0], peaks[1])),
                             "bound " + std::to_string(bound) + " bytes for n=16 d=64"});
    report.checks.push_back({"row lookup memory independent of |V|", spread <= 64, static_cast<double>(spread),
                             "peaks " + std::to_string(peaks[0]) + " and " + std::to_string(peaks[1]) +
                                 " bytes at |V|=256 and 50265"});
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace aotp::checks
