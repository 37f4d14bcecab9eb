#include "aotp/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "aotp/forward.hpp"

namespace aotp {

template <typename T>
void adam_step(std::span<GradPair<T>* const> params, AdamState<T>& state, double lr, const AdamConfig& config) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->grad) throw ConfigError("adam_step: parameter without a gradient");
    if (params[i]->value.shape() != state.m[i].shape()) throw ShapeError("adam_step: parameter shape changed");
    if (!all_finite(std::span<const T>(params[i]->grad->flat()))) throw NumericError("adam_step: non-finite gradient");
  }
  ++state.t;
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i]->value.flat();
    auto grad = params[i]->grad->flat();
    auto m = state.m[i].flat();
    auto v = state.v[i].flat();
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad[k];
      const double mk = b1 * m[k] + (1.0 - b1) * g;
      const double vk = b2 * v[k] + (1.0 - b2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      value[k] -= static_cast<T>(lr * (mk / c1) / (std::sqrt(vk / c2) + config.eps));
    }
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (patience < 1 || patience > max_epochs) throw ConfigError("patience must lie in [1, max_epochs]");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

std::string to_json_line(const EpochLog& log, bool deterministic) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["train_loss"] = log.train_loss;
  j["dev_metric"] = log.dev_metric;
  j["wall_ms"] = deterministic ? 0.0 : log.wall_ms;
  if (!log.error.empty()) j["error"] = log.error;
  return j.dump();
}

StopDecision early_stopping(std::span<const double> dev_metrics, std::size_t patience) {
  StopDecision out{dev_metrics.size(), 0};
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t e = 0; e < dev_metrics.size(); ++e) {
    if (dev_metrics[e] > best) {
      best = dev_metrics[e];
      out.best_epoch = e + 1;
      stale = 0;
    } else if (++stale >= patience) {
      out.halt_epoch = e + 1;
      break;
    }
  }
  return out;
}

template <typename T>
double evaluate_accuracy(const Backbone<T>& backbone, const Adaptation<T>& adaptation,
                         std::span<const Example> examples) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const Tensor<T> logits = forward(std::span<const TokenId>(ex.tokens), backbone, adaptation);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < logits.size(); ++k) {
      if (logits[k] > logits[arg]) arg = k;
    }
    correct += arg == ex.label;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

template <typename T>
TrainResult<T> train_task(const Backbone<T>& backbone, const PeftConfig& peft, const TaskSpec& task,
                          const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (task.train.empty()) throw ConfigError("train_task: empty training split");

  TrainResult<T> result;
  Adaptation<T> current = make_adaptation<T>(peft, backbone, task.num_classes, config.seed, config.init_scale);
  result.best = current;

  std::vector<GradPair<T>*> params;
  current.for_each_param([&](const std::string&, GradPair<T>& p) {
    if (p.trainable()) params.push_back(&p);
  });
  AdamState<T> adam;

  std::vector<std::size_t> order(task.train.size());
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  bool out_of_steps = false;

  for (std::size_t epoch = 1; epoch <= config.max_epochs && !out_of_steps; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng shuffle_rng(config.seed, 0x5F1E0000 + epoch);
    shuffle(order, shuffle_rng);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    try {
      for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
        const std::size_t end = std::min(order.size(), begin + config.batch_size);
        const T scale = static_cast<T>(1.0 / static_cast<double>(end - begin));
        current.zero_grad();
        for (std::size_t b = begin; b < end; ++b) {
          const Example& ex = task.train[order[b]];
          const ForwardOptions options{true, config.dropout, mix_key(config.seed, result.steps, b - begin)};
          loss_sum += static_cast<double>(accumulate_example_gradient(std::span<const TokenId>(ex.tokens), ex.label,
                                                                      backbone, current, options, scale));
          ++seen;
        }
        adam_step<T>(params, adam, config.learning_rate);
        ++result.steps;
        if (config.max_steps > 0 && result.steps >= config.max_steps) {
          out_of_steps = true;
          break;
        }
      }
      log.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(seen, 1));
      if (!std::isfinite(log.train_loss)) throw NumericError("training loss is not finite");
      log.dev_metric = evaluate_accuracy(backbone, current, std::span<const Example>(task.dev));
    } catch (const NumericError& e) {
      log.train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
      log.error = e.what();
      result.diverged = true;
    }
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (result.diverged) break;

    if (log.dev_metric > best) {
      best = log.dev_metric;
      result.best = current;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  result.best_metric = std::isfinite(best) ? best : 0.0;
  return result;
}

void GridSpace::validate() const {
  if (learning_rates.empty()) throw ConfigError("grid: no learning rates");
  if (batch_sizes.empty()) throw ConfigError("grid: no batch sizes");
  for (double lr : learning_rates) {
    if (!(lr > 0.0)) throw ConfigError("grid: learning rates must be positive");
  }
  for (std::size_t b : batch_sizes) {
    if (b == 0) throw ConfigError("grid: batch sizes must be positive");
  }
}

bool has_rank_axis(const PeftConfig& config) noexcept {
  return !std::holds_alternative<BitFitConfig>(config) && !std::holds_alternative<FullConfig>(config);
}

PeftConfig with_rank(const PeftConfig& config, std::size_t rank) {
  return std::visit(
      [&](auto c) -> PeftConfig {
        using C = decltype(c);
        if constexpr (std::is_same_v<C, PTuningV1Config> || std::is_same_v<C, PTuningV2Config>) {
          c.p = rank;
        } else if constexpr (std::is_same_v<C, LoraConfig>) {
          // Keep alpha / r fixed so the rank axis does not also move the scale.
          c.alpha = c.alpha / static_cast<double>(c.r) * static_cast<double>(rank);
          c.r = rank;
        } else if constexpr (std::is_same_v<C, AotKronConfig> || std::is_same_v<C, AotFcConfig> ||
                             std::is_same_v<C, AdapterConfig>) {
          c.r = rank;
        }
        return c;
      },
      config);
}

std::uint64_t grid_cell_seed(std::uint64_t seed, std::size_t cell) noexcept { return mix_key(seed, 0x6121D, cell); }

std::string to_json_line(const GridCell& cell, bool deterministic) {
  nlohmann::ordered_json j;
  j["cell"] = cell.index;
  j["learning_rate"] = cell.learning_rate;
  j["batch_size"] = cell.batch_size;
  if (cell.rank) {
    j["rank"] = *cell.rank;
  } else {
    j["rank"] = nullptr;
  }
  j["params"] = cell.params;
  j["dev_metric"] = cell.dev_metric;
  j["epochs"] = cell.epochs;
  j["wall_ms"] = deterministic ? 0.0 : cell.wall_ms;
  if (!cell.error.empty()) j["error"] = cell.error;
  return j.dump();
}

std::size_t select_best(std::span<const GridCell> cells) {
  if (cells.empty()) throw ConfigError("select_best: no cells");
  auto better = [](const GridCell& a, const GridCell& b) {
    if (a.error.empty() != b.error.empty()) return a.error.empty();
    if (a.dev_metric != b.dev_metric) return a.dev_metric > b.dev_metric;
    if (a.params != b.params) return a.params < b.params;
    if (a.learning_rate != b.learning_rate) return a.learning_rate < b.learning_rate;
    return a.index < b.index;
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < cells.size(); ++i) {
    if (better(cells[i], cells[best])) best = i;
  }
  return best;
}

template <typename T>
GridResult grid_search(const GridSpace& space, const Backbone<T>& backbone, const PeftConfig& method,
                       const TaskSpec& task, const TrainConfig& base,
                       const std::function<void(const GridCell&)>& on_cell) {
  space.validate();
  std::vector<std::optional<std::size_t>> ranks;
  if (space.ranks.empty() || !has_rank_axis(method)) {
    ranks.push_back(std::nullopt);
  } else {
    ranks.assign(space.ranks.begin(), space.ranks.end());
  }

  GridResult result;
  for (double lr : space.learning_rates) {
    for (std::size_t batch : space.batch_sizes) {
      for (const auto& rank : ranks) {
        GridCell cell;
        cell.index = result.cells.size();
        cell.learning_rate = lr;
        cell.batch_size = batch;
        cell.rank = rank;
        const PeftConfig peft = rank ? with_rank(method, *rank) : method;
        TrainConfig cfg = base;
        cfg.learning_rate = lr;
        cfg.batch_size = batch;
        cfg.seed = grid_cell_seed(base.seed, cell.index);
        const auto start = std::chrono::steady_clock::now();
        try {
          cell.params = count_trainable(peft, backbone.config, task.num_classes);
          const auto trained = train_task(backbone, peft, task, cfg);
          cell.dev_metric = trained.best_metric;
          cell.epochs = trained.log.size();
          if (trained.diverged) cell.error = trained.log.back().error;
        } catch (const Error& e) {
          cell.error = e.what();
        }
        cell.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        if (on_cell) on_cell(cell);
        result.cells.push_back(std::move(cell));
      }
    }
  }
  result.best = select_best(result.cells);
  return result;
}

#define AOTP_INSTANTIATE(T)                                                                                        \
  template void adam_step(std::span<GradPair<T>* const>, AdamState<T>&, double, const AdamConfig&);                \
  template double evaluate_accuracy(const Backbone<T>&, const Adaptation<T>&, std::span<const Example>);          \
  template TrainResult<T> train_task(const Backbone<T>&, const PeftConfig&, const TaskSpec&, const TrainConfig&,  \
                                     const std::function<void(const EpochLog&)>&);                                 \
  template GridResult grid_search(const GridSpace&, const Backbone<T>&, const PeftConfig&, const TaskSpec&,        \
                                  const TrainConfig&, const std::function<void(const GridCell&)>&);

AOTP_INSTANTIATE(float)
AOTP_INSTANTIATE(double)

#undef AOTP_INSTANTIATE

}  // namespace aotp
