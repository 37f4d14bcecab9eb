#include <benchmark/benchmark.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>

#include "aotp/forward.hpp"
#include "aotp/harness.hpp"
#include "aotp/taskstore.hpp"

using namespace aotp;

namespace {

Tensor<float> random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  CounterRng rng(seed);
  Tensor<float> t = Tensor<float>::zeros(rows, cols);
  fill_normal(t, rng, 1.0);
  return t;
}

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  auto c = Tensor<float>::zeros(n, n);
  for (auto _ : state) {
    gemm(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(256)->Arg(512);

ModelConfig bench_model() {
  ModelConfig m = preset_model(Preset::small);
  m.max_seq = 256;
  return m;
}

// One forward pass over a 128-token sequence for a method label.
void BM_Forward(benchmark::State& state, const std::string& label) {
  const ModelConfig m = bench_model();
  const auto bb = Backbone<float>::random(m, 3);
  const auto method = parse_bench_method(label, m, 16, 20);
  CounterRng rng(4);
  Adaptation<float> a = vanilla_adaptation(Head<float>::random(m.hidden, 2, rng));
  std::optional<Backbone<float>> merged;
  if (method.config) {
    a = make_adaptation<float>(*method.config, bb, 2, 5, 0.02);
    if (method.fuse && std::holds_alternative<LoraState<float>>(a.state)) {
      merged = merge_lora(bb, std::get<LoraState<float>>(a.state));
      a = vanilla_adaptation(a.head);
    } else if (method.fuse) {
      a = fuse_aot(a, bb, DType::f32);
    }
  }
  const Backbone<float>& backbone = merged ? *merged : bb;
  std::vector<TokenId> tokens(128);
  for (std::size_t j = 0; j < tokens.size(); ++j) tokens[j] = static_cast<TokenId>(1 + (j * 37) % (m.vocab_size - 1));
  for (auto _ : state) benchmark::DoNotOptimize(forward<float>(tokens, backbone, a));
}
BENCHMARK_CAPTURE(BM_Forward, vanilla, std::string("vanilla"));
BENCHMARK_CAPTURE(BM_Forward, aot_fused, std::string("aot-fused"));
BENCHMARK_CAPTURE(BM_Forward, aot_kron, std::string("aot-kron"));
BENCHMARK_CAPTURE(BM_Forward, aot_fc, std::string("aot-fc"));
BENCHMARK_CAPTURE(BM_Forward, bitfit, std::string("bitfit"));
BENCHMARK_CAPTURE(BM_Forward, ptv2, std::string("ptv2"));
BENCHMARK_CAPTURE(BM_Forward, lora_fused, std::string("lora-fused"));
BENCHMARK_CAPTURE(BM_Forward, lora_unfused, std::string("lora-unfused"));
BENCHMARK_CAPTURE(BM_Forward, adapter, std::string("adapter"));

// Row lookups from a table held in memory versus one read from disk.
void BM_RowLookup(benchmark::State& state, bool from_file) {
  const std::size_t vocab = 50265, d = 64;
  const BiasTable<float> table({random_matrix(vocab, d, 6)}, DType::f32);
  const std::string path = (std::filesystem::temp_directory_path() / "aotp_bench_rows.aotp").string();
  std::unique_ptr<TableReader<float>> reader;
  if (from_file) {
    write_table(table, path, DType::f16);
    reader = std::make_unique<TableReader<float>>(path);
  }
  std::vector<TokenId> tokens(static_cast<std::size_t>(state.range(0)));
  for (std::size_t j = 0; j < tokens.size(); ++j) tokens[j] = static_cast<TokenId>((j * 7919) % vocab);
  Tensor<float> out = Tensor<float>::zeros(tokens.size(), d);
  for (auto _ : state) {
    if (reader) {
      reader->gather(0, tokens, out);
    } else {
      table.gather(0, tokens, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
  reader.reset();
  if (from_file) std::remove(path.c_str());
}
BENCHMARK_CAPTURE(BM_RowLookup, memory, false)->Arg(16)->Arg(384);
BENCHMARK_CAPTURE(BM_RowLookup, file, true)->Arg(16)->Arg(384);

}  // namespace

BENCHMARK_MAIN();
