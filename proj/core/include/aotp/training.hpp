#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aotp/adaptation.hpp"
#include "aotp/tasks.hpp"

namespace aotp {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;
};

// One bias-corrected Adam update over `params` (every entry must carry a
// gradient). Moments are created on the first call. Throws NumericError on a
// non-finite gradient before touching any parameter.
template <typename T>
void adam_step(std::span<GradPair<T>* const> params, AdamState<T>& state, double lr, const AdamConfig& config = {});

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 20;
  std::size_t patience = 3;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // optimizer steps; 0 = no limit
  double dropout = 0.1;
  double init_scale = 0.02;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double dev_metric = 0.0;
  double wall_ms = 0.0;
  std::string error;      // set when the epoch aborted
};

// One JSON object per line; wall_ms is written as 0 when `deterministic`.
std::string to_json_line(const EpochLog& log, bool deterministic = false);

// Applies the early-stopping rule to a metric trace: returns the 1-based epoch
// after which training halts (trace.size() when it never triggers) and the
// 1-based best epoch.
struct StopDecision {
  std::size_t halt_epoch = 0;
  std::size_t best_epoch = 0;
};
StopDecision early_stopping(std::span<const double> dev_metrics, std::size_t patience);

template <typename T>
struct TrainResult {
  Adaptation<T> best;
  double best_metric = 0.0;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  bool diverged = false;
  std::vector<EpochLog> log;
};

template <typename T>
double evaluate_accuracy(const Backbone<T>& backbone, const Adaptation<T>& adaptation,
                         std::span<const Example> examples);

// Trains the method parameters and the task head with the backbone frozen.
// `on_epoch` is called after each epoch (e.g. to stream JSON lines).
template <typename T>
TrainResult<T> train_task(const Backbone<T>& backbone, const PeftConfig& peft, const TaskSpec& task,
                          const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch = {});

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct GridSpace {
  std::vector<double> learning_rates;
  std::vector<std::size_t> batch_sizes;
  std::vector<std::size_t> ranks;  // rank r, or prefix length p for PTv1/PTv2; empty = method default

  void validate() const;
};

// Copy of `config` with its rank / prefix length replaced. BitFit and Full
// have no such axis and are returned unchanged.
PeftConfig with_rank(const PeftConfig& config, std::size_t rank);
bool has_rank_axis(const PeftConfig& config) noexcept;

std::uint64_t grid_cell_seed(std::uint64_t seed, std::size_t cell) noexcept;

struct GridCell {
  std::size_t index = 0;
  double learning_rate = 0.0;
  std::size_t batch_size = 0;
  std::optional<std::size_t> rank;
  std::uint64_t params = 0;  // trainable scalars including the head
  double dev_metric = 0.0;
  std::size_t epochs = 0;
  double wall_ms = 0.0;
  std::string error;  // non-empty when the cell failed
};

struct GridResult {
  std::vector<GridCell> cells;
  std::size_t best = 0;  // index into cells
};

std::string to_json_line(const GridCell& cell, bool deterministic = false);

// Best cell: highest dev metric, then fewer parameters, then lower learning
// rate, then earlier cell. Failed cells never win unless all failed.
std::size_t select_best(std::span<const GridCell> cells);

template <typename T>
GridResult grid_search(const GridSpace& space, const Backbone<T>& backbone, const PeftConfig& method,
                       const TaskSpec& task, const TrainConfig& base,
                       const std::function<void(const GridCell&)>& on_cell = {});

}  // namespace aotp
