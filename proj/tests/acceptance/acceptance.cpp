// Runs the seven acceptance criteria and prints one PASS/FAIL line for each.
// Exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "aotp/checks.hpp"
#include "aotp/error.hpp"
#include "aotp/harness.hpp"
#include "aotp/taskstore.hpp"
#include "aotp/training.hpp"
#include "scratch.hpp"

using namespace aotp;

namespace {

struct Verdict {
  bool passed = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

Verdict suite_verdict(const checks::SuiteReport& report, double budget_s = 0.0) {
  Verdict v{report.passed(), report.summary()};
  if (budget_s > 0.0 && report.seconds >= budget_s) {
    v.passed = false;
    v.detail += " (over the " + std::to_string(budget_s) + " s budget)";
  }
  return v;
}

// ---------------------------------------------------------------------------

ModelConfig separation_model() {
  ModelConfig m;
  m.vocab_size = 256;
  m.hidden = 64;
  m.layers = 2;
  m.heads = 2;
  m.max_seq = 64;
  return m;
}

double train_accuracy(const PeftConfig& method, TaskKind kind, std::uint64_t seed) {
  const auto backbone = Backbone<float>::random(separation_model(), 1000 + seed);
  const auto task = make_task(kind, seed, TaskSizes{});
  TrainConfig c;
  c.learning_rate = 5e-3;
  c.batch_size = 16;
  c.max_epochs = 30;
  c.patience = 4;
  c.max_steps = 2000;
  c.seed = seed;
  return train_task<float>(backbone, method, task, c).best_metric;
}

Verdict separation() {
  const auto start = std::chrono::steady_clock::now();
  std::ostringstream detail;
  std::size_t wins = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double fc = train_accuracy(AotFcConfig{64}, TaskKind::token_identity, seed);
    const double bitfit = train_accuracy(BitFitConfig{}, TaskKind::token_identity, seed);
    const bool win = fc >= 0.90 && fc - bitfit >= 0.10;
    wins += win;
    detail << "seed " << seed << ": aot-fc " << fc << " bitfit " << bitfit << (win ? "" : " (miss)") << "; ";
  }
  const double constant = train_accuracy(BitFitConfig{}, TaskKind::constant_separable, 0);
  const double elapsed = seconds_since(start);
  detail << "bitfit on constant_separable " << constant << "; " << elapsed << " s";
  return {wins >= 4 && constant >= 0.95 && elapsed < 600.0, detail.str()};
}

// ---------------------------------------------------------------------------

Verdict latency_ordering() {
  BenchConfig c;
  c.preset = Preset::large_shaped;
  c.batch_sizes = {1};
  c.seq_lens = {384};
  c.methods = {"aot-fused", "ptv2:20", "ptv2:50", "ptv2:100", "lora-fused", "lora-unfused"};
  const auto report = measure(c);
  const auto norm = [&](const std::string& m) { return report.find(m, 1, 384)->normalized; };

  constexpr double kDrift = 0.03;
  const double aot = norm("aot-fused");
  const double p20 = norm("ptv2:20"), p50 = norm("ptv2:50"), p100 = norm("ptv2:100");
  const double lora_fused = norm("lora-fused"), lora_unfused = norm("lora-unfused");
  std::ostringstream detail;
  detail << "aot-fused " << aot << ", ptv2 p=20/50/100 " << p20 << "/" << p50 << "/" << p100 << ", lora fused "
         << lora_fused << " unfused " << lora_unfused << " (" << reps_for_batch(1) << " reps)";
  const bool ok = aot <= 1.05 && p20 > aot && p50 > aot && p100 > aot && p50 >= p20 * (1.0 - kDrift) &&
                  p100 >= p50 * (1.0 - kDrift) && lora_unfused > lora_fused;
  return {ok, detail.str()};
}

// ---------------------------------------------------------------------------

Verdict format() {
  testing_support::ScratchDir dir;
  std::ostringstream detail;
  bool ok = true;

  CounterRng rng(7);
  std::vector<Tensor<float>> layers;
  for (int l = 0; l < 3; ++l) {
    Tensor<float> t = Tensor<float>::zeros(41, 9);
    fill_normal(t, rng, 1.0);
    layers.push_back(std::move(t));
  }
  const BiasTable<float> table(layers, DType::f32);
  write_table(table, dir.file("t.aotp"), DType::f32);
  const auto back = TableReader<float>(dir.file("t.aotp")).load_all();
  bool lossless = true;
  for (std::size_t l = 0; l < 3; ++l) lossless = lossless && back.layer(l) == table.layer(l);
  ok = ok && lossless;
  detail << "32-bit round trip " << (lossless ? "lossless" : "LOSSY");

  const std::vector<unsigned char> header = {'A', 'O', 'T', 'P', 1, 0, 0, 0, 41, 0, 0, 0, 9, 0, 0, 0,
                                             3,   0,   0,   0,   0, 0, 0, 0, 0,  0, 0, 0, 0, 0, 0, 0};
  const auto bytes = testing_support::read_bytes(dir.file("t.aotp"));
  const bool exact = bytes.size() == 32 + 41 * 9 * 3 * 4 && std::equal(header.begin(), header.end(), bytes.begin());
  ok = ok && exact;
  detail << ", header " << (exact ? "byte-exact" : "MISMATCH");

  const std::string command = std::string("\"") + AOTP_TOOL_PATH + "\" selftest --scratch \"" +
                              dir.path().string() + "\" > \"" + dir.file("selftest.log") + "\" 2>&1";
  const int status = std::system(command.c_str());
  const bool selftest = status == 0;
  ok = ok && selftest;
  detail << ", selftest exit status " << status;
  if (!selftest) {
    std::ifstream log(dir.file("selftest.log"));
    detail << "\n" << log.rdbuf();
  }
  return {ok, detail.str()};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria = {
      {"1 gradient suite", [] { return suite_verdict(checks::gradient_suite(), 120.0); }},
      {"2 identity suite", [] { return suite_verdict(checks::identity_suite()); }},
      {"3 accounting", [] { return suite_verdict(checks::accounting_suite()); }},
      {"4 multi-task equivalence", [] { return suite_verdict(checks::multitask_suite()); }},
      {"5 separation experiment", separation},
      {"6 latency ordering", latency_ordering},
      {"7 format", format},
  };

  bool all = true;
  for (const auto& c : criteria) {
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all = all && v.passed;
    std::cout << (v.passed ? "PASS" : "FAIL") << " criterion " << c.name << ": " << v.detail << std::endl;
  }
  return all ? EXIT_SUCCESS : EXIT_FAILURE;
}
