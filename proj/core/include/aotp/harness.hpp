#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "aotp/peft.hpp"

namespace aotp {

// ---------------------------------------------------------------------------
// Latency benchmark
// ---------------------------------------------------------------------------

enum class Preset { small, base_shaped, large_shaped, raw_base, raw_large };

std::string_view to_string(Preset p) noexcept;
Preset parse_preset(std::string_view name);

// small: d=64, l=2, h=2, |V|=256. base-shaped: d=192, l=6, h=3. large-shaped:
// d=256, l=12, h=4. Both shaped presets keep the reference head width of 64
// and use |V|=8192. raw-base: 768/12/12, raw-large: 1024/24/16, |V|=50265.
ModelConfig preset_model(Preset p);

// A method cell of the benchmark. Labels:
//   vanilla, full, aot-fused, aot-kron, aot-fc, bitfit,
//   ptv1[:p], ptv2[:p], lora-fused[:r], lora-unfused[:r], adapter[:r]
// aot-kron and aot-fc compute their rows on the fly; aot-fused looks them up
// in a materialized table. lora-fused runs the merged backbone.
struct BenchMethod {
  std::string label;
  std::optional<PeftConfig> config;  // empty for vanilla
  bool fuse = false;                 // aot-fused or lora-fused
};

BenchMethod parse_bench_method(std::string_view label, const ModelConfig& model, std::size_t default_rank = 32,
                               std::size_t default_prefix = 50);

struct BenchConfig {
  std::vector<std::size_t> batch_sizes = {1, 16, 64};
  std::vector<std::size_t> seq_lens = {64, 128, 384};
  std::size_t warmup = 10;
  std::optional<std::size_t> reps;  // overrides the 300 / 100 rule
  std::vector<std::string> methods = {"vanilla", "aot-fused", "aot-kron", "ptv1", "ptv2", "bitfit",
                                      "lora-fused", "lora-unfused", "adapter"};
  Preset preset = Preset::small;
  std::optional<std::size_t> hidden;  // preset overrides
  std::optional<std::size_t> layers;
  std::optional<std::size_t> heads;
  std::optional<std::size_t> vocab_size;
  std::size_t rank = 32;    // LoRA / adapter bottleneck
  std::size_t prefix = 50;  // PTv1 / PTv2 default when the label has none
  std::uint64_t seed = 0;

  ModelConfig model() const;
  void validate() const;
};

// 300 when batch == 1, else 100.
std::size_t reps_for_batch(std::size_t batch) noexcept;

struct BenchCell {
  std::string method;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double normalized = 0.0;  // mean / vanilla mean of the same (batch, seqlen)
  std::size_t reps = 0;
};

struct BenchReport {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<BenchCell> cells;

  const BenchCell* find(const std::string& method, std::size_t batch, std::size_t seq_len) const;

  // {meta: {...}, cells: [{method, batch, seqlen, mean_ms, std_ms, normalized}]}
  nlohmann::json to_json() const;
  // Header "method,batch,seqlen,mean_ms,std_ms,normalized".
  std::string to_csv() const;
};

// Times forward passes for every (batch, seqlen, method) cell. Vanilla is
// always measured since it anchors the normalization. Within one
// (batch, seqlen) group methods run round-robin, one repetition at a time
// with a rotating start, after `warmup` untimed rounds. One repetition
// evaluates `batch` sequences of length `seqlen` with a monotonic clock.
BenchReport measure(const BenchConfig& config,
                    const std::function<void(const std::string&)>& progress = {});

// ---------------------------------------------------------------------------
// Row-norm analysis
// ---------------------------------------------------------------------------

struct NormRanking {
  std::size_t layer = 0;
  std::vector<std::pair<TokenId, double>> entries;  // (token, L2 norm), norms nonincreasing

  nlohmann::json to_json() const;
};

// Rows of one layer ordered by descending L2 norm, ties by ascending id; k is
// clamped to |V|. Throws InputError for a layer outside the table.
template <typename T>
NormRanking top_tokens_by_norm(const BiasTable<T>& table, std::size_t layer, std::size_t k);

}  // namespace aotp
