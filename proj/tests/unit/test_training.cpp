#include <gtest/gtest.h>

#include <cmath>

#include "aotp/error.hpp"
#include "aotp/training.hpp"

using namespace aotp;

namespace {

ModelConfig train_model() {
  ModelConfig m;
  m.vocab_size = 64;
  m.hidden = 16;
  m.layers = 1;
  m.heads = 2;
  m.max_seq = 16;
  return m;
}

TaskSizes train_sizes() {
  TaskSizes s;
  s.train = 160;
  s.dev = 40;
  s.seq_len = 8;
  s.vocab_size = 64;
  s.targets = 16;
  return s;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.learning_rate = 5e-3;
  c.batch_size = 16;
  c.max_epochs = 3;
  c.patience = 2;
  return c;
}

}  // namespace

TEST(Adam, TwoStepsMatchHandComputation) {
  GradPair<double> p(Tensor<double>::vector({1.0, -2.0}), true);
  AdamState<double> state;
  GradPair<double>* params[] = {&p};
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double g1[2] = {0.5, -3.0}, g2[2] = {-1.0, 2.0};
  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int step = 1; step <= 2; ++step) {
    const double* g = step == 1 ? g1 : g2;
    (*p.grad)[0] = g[0];
    (*p.grad)[1] = g[1];
    adam_step<double>(params, state, lr);
    for (int k = 0; k < 2; ++k) {
      m[k] = b1 * m[k] + (1 - b1) * g[k];
      v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k];
      x[k] -= lr * (m[k] / (1 - std::pow(b1, step))) / (std::sqrt(v[k] / (1 - std::pow(b2, step))) + eps);
      EXPECT_NEAR(p.value[k], x[k], 1e-15) << "step " << step;
    }
  }
}

TEST(Adam, NonFiniteGradientLeavesParametersUntouched) {
  GradPair<double> a(Tensor<double>::vector({1.0}), true);
  GradPair<double> b(Tensor<double>::vector({2.0}), true);
  (*a.grad)[0] = 1.0;
  (*b.grad)[0] = NAN;
  AdamState<double> state;
  GradPair<double>* params[] = {&a, &b};
  EXPECT_THROW(adam_step<double>(params, state, 0.1), NumericError);
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(b.value[0], 2.0);
}

TEST(EarlyStopping, HaltsAfterPatienceStaleEpochs) {
  const std::vector<double> trace = {0.5, 0.6, 0.6, 0.55, 0.7};
  const auto d = early_stopping(trace, 2);
  EXPECT_EQ(d.halt_epoch, 4u);
  EXPECT_EQ(d.best_epoch, 2u);
  const auto never = early_stopping(trace, 3);
  EXPECT_EQ(never.halt_epoch, 5u);
  EXPECT_EQ(never.best_epoch, 5u);
}

TEST(EarlyStopping, EqualMetricIsNotAnImprovement) {
  const std::vector<double> trace = {0.8, 0.8};
  const auto d = early_stopping(trace, 1);
  EXPECT_EQ(d.halt_epoch, 2u);
  EXPECT_EQ(d.best_epoch, 1u);
}

TEST(GridSelection, TieBreaks) {
  std::vector<GridCell> cells(4);
  cells[0] = {0, 1e-3, 16, std::nullopt, 500, 0.9, 3, 0, ""};
  cells[1] = {1, 1e-3, 16, std::nullopt, 400, 0.9, 3, 0, ""};  // fewer params
  cells[2] = {2, 1e-4, 16, std::nullopt, 400, 0.9, 3, 0, ""};  // lower lr
  cells[3] = {3, 1e-5, 16, std::nullopt, 100, 0.95, 3, 0, "diverged"};
  EXPECT_EQ(select_best(cells), 2u);
  cells[1].dev_metric = 0.91;
  EXPECT_EQ(select_best(cells), 1u);
  for (auto& c : cells) c.error = "failed";
  EXPECT_EQ(select_best(cells), 3u);
}

TEST(Config, TrainValidation) {
  TrainConfig c = quick_config();
  c.patience = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick_config();
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  GridSpace space;
  EXPECT_THROW(space.validate(), ConfigError);
}

TEST(Config, RankAxis) {
  EXPECT_EQ(std::get<LoraConfig>(with_rank(LoraConfig{4, 8.0, false}, 8)).alpha, 16.0);
  EXPECT_EQ(std::get<PTuningV2Config>(with_rank(PTuningV2Config{3}, 9)).p, 9u);
  EXPECT_FALSE(has_rank_axis(BitFitConfig{}));
  EXPECT_TRUE(has_rank_axis(AotKronConfig{}));
  EXPECT_NE(grid_cell_seed(1, 0), grid_cell_seed(1, 1));
  EXPECT_EQ(grid_cell_seed(1, 2), grid_cell_seed(1, 2));
}

TEST(Training, LogIsReproducibleAndBestMatchesTrace) {
  const auto bb = Backbone<float>::random(train_model(), 1);
  const auto task = make_task(TaskKind::constant_separable, 1, train_sizes());
  std::vector<std::string> first, second;
  const auto r1 = train_task<float>(bb, BitFitConfig{}, task, quick_config(),
                                    [&](const EpochLog& e) { first.push_back(to_json_line(e, true)); });
  const auto r2 = train_task<float>(bb, BitFitConfig{}, task, quick_config(),
                                    [&](const EpochLog& e) { second.push_back(to_json_line(e, true)); });
  EXPECT_EQ(first, second);
  ASSERT_FALSE(r1.log.empty());
  double best = -1.0;
  for (const auto& e : r1.log) best = std::max(best, e.dev_metric);
  EXPECT_EQ(r1.best_metric, best);
  EXPECT_EQ(r1.log[r1.best_epoch - 1].dev_metric, best);
  // The returned parameters reproduce the best dev metric.
  EXPECT_EQ(evaluate_accuracy<float>(bb, r1.best, task.dev), r1.best_metric);
}

TEST(Training, BackboneStaysFrozenAndStepCapHolds) {
  const auto bb = Backbone<float>::random(train_model(), 2);
  const auto before = bb.layers[0].wq.value;
  const auto task = make_task(TaskKind::token_identity, 2, train_sizes());
  TrainConfig c = quick_config();
  c.max_steps = 7;
  const auto r = train_task<float>(bb, AotFcConfig{8}, task, c);
  EXPECT_EQ(r.steps, 7u);
  EXPECT_EQ(bb.layers[0].wq.value, before);
}

TEST(Training, DeterministicJsonLineHasZeroWallTime) {
  EpochLog e{2, 0.25, 0.75, 123.0, ""};
  EXPECT_EQ(to_json_line(e, true), R"({"epoch":2,"train_loss":0.25,"dev_metric":0.75,"wall_ms":0.0})");
}

TEST(Grid, EveryCellIsReportedAndBestIsSelected) {
  const auto bb = Backbone<float>::random(train_model(), 3);
  const auto task = make_task(TaskKind::constant_separable, 3, train_sizes());
  GridSpace space{{1e-3, 5e-3}, {16}, {2, 4}};
  TrainConfig c = quick_config();
  c.max_epochs = 2;
  c.patience = 1;
  std::size_t seen = 0;
  const auto result = grid_search<float>(space, bb, LoraConfig{2, 2.0, false}, task, c,
                                         [&](const GridCell&) { ++seen; });
  EXPECT_EQ(result.cells.size(), 4u);
  EXPECT_EQ(seen, 4u);
  EXPECT_EQ(result.best, select_best(result.cells));
  for (const auto& cell : result.cells) EXPECT_TRUE(cell.rank.has_value());
}
