#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "aotp/checks.hpp"
#include "aotp/error.hpp"
#include "aotp/harness.hpp"
#include "aotp/taskstore.hpp"
#include "aotp/training.hpp"

namespace aotp::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Settings shared by train and grid: defaults, then the config file, then flags.
struct RunSettings {
  TrainConfig train;
  TaskSizes sizes;
  Preset preset = Preset::small;
  std::uint64_t backbone_seed = 0;
  std::optional<std::size_t> rank;
};

struct RunFlags {
  std::string method = "aot-fc";
  std::string task = "token_identity";
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  bool deterministic = false;
  std::optional<std::string> preset;
  std::optional<std::uint64_t> backbone_seed;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> patience;
  std::optional<std::size_t> max_steps;
  std::optional<std::size_t> rank;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

void apply_config_file(RunSettings& s, const json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "learning_rate") s.train.learning_rate = value.get<double>();
      else if (key == "batch_size") s.train.batch_size = value.get<std::size_t>();
      else if (key == "max_epochs") s.train.max_epochs = value.get<std::size_t>();
      else if (key == "patience") s.train.patience = value.get<std::size_t>();
      else if (key == "max_steps") s.train.max_steps = value.get<std::size_t>();
      else if (key == "dropout") s.train.dropout = value.get<double>();
      else if (key == "init_scale") s.train.init_scale = value.get<double>();
      else if (key == "rank") s.rank = value.get<std::size_t>();
      else if (key == "preset") s.preset = parse_preset(value.get<std::string>());
      else if (key == "backbone_seed") s.backbone_seed = value.get<std::uint64_t>();
      else if (key == "task") {
        for (const auto& [tkey, tvalue] : value.items()) {
          if (tkey == "train") s.sizes.train = tvalue.get<std::size_t>();
          else if (tkey == "dev") s.sizes.dev = tvalue.get<std::size_t>();
          else if (tkey == "seq_len") s.sizes.seq_len = tvalue.get<std::size_t>();
          else if (tkey == "targets") s.sizes.targets = tvalue.get<std::size_t>();
          else if (tkey == "num_classes") s.sizes.num_classes = tvalue.get<std::size_t>();
          else throw ConfigError("unknown task key '" + tkey + "' in config file");
        }
      } else {
        throw ConfigError("unknown key '" + key + "' in config file");
      }
    }
  } catch (const json::type_error& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
}

RunSettings resolve_settings(const RunFlags& f) {
  RunSettings s;
  if (!f.config_path.empty()) apply_config_file(s, read_json_file(f.config_path));
  if (f.preset) s.preset = parse_preset(*f.preset);
  if (f.backbone_seed) s.backbone_seed = *f.backbone_seed;
  if (f.lr) s.train.learning_rate = *f.lr;
  if (f.batch_size) s.train.batch_size = *f.batch_size;
  if (f.epochs) s.train.max_epochs = *f.epochs;
  if (f.patience) s.train.patience = *f.patience;
  if (f.max_steps) s.train.max_steps = *f.max_steps;
  if (f.rank) s.rank = *f.rank;
  s.train.seed = f.seed;
  s.train.validate();
  return s;
}

PeftConfig method_config(const std::string& name, const ModelConfig& model, std::optional<std::size_t> rank) {
  PeftConfig config = default_config(parse_method(name), model);
  if (rank) {
    if (!has_rank_axis(config)) throw ConfigError("method '" + name + "' has no rank or prefix length");
    config = with_rank(config, *rank);
  }
  validate(config, model);
  return config;
}

struct Experiment {
  ModelConfig model;
  std::shared_ptr<const Backbone<float>> backbone;
  PeftConfig peft;
  TaskSpec task;
};

Experiment build_experiment(const RunFlags& f, RunSettings& s) {
  Experiment e;
  e.model = preset_model(s.preset);
  s.sizes.vocab_size = e.model.vocab_size;
  if (s.sizes.seq_len > e.model.max_seq) throw ConfigError("task seq_len exceeds the model's max_seq");
  e.backbone = std::make_shared<const Backbone<float>>(Backbone<float>::random(e.model, s.backbone_seed));
  e.peft = method_config(f.method, e.model, s.rank);
  e.task = make_task(parse_task_kind(f.task), f.seed, s.sizes);
  return e;
}

json train_settings_json(const RunSettings& s, const RunFlags& f) {
  return {{"task", f.task},
          {"task_seed", f.seed},
          {"backbone_seed", s.backbone_seed},
          {"preset", std::string(to_string(s.preset))},
          {"learning_rate", s.train.learning_rate},
          {"batch_size", s.train.batch_size},
          {"max_epochs", s.train.max_epochs},
          {"patience", s.train.patience},
          {"max_steps", s.train.max_steps}};
}

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--method", f.method, "aot-kron, aot-fc, ptv1, ptv2, bitfit, lora, adapter or full")
      ->capture_default_str();
  cmd->add_option("--task", f.task, "token_identity or constant_separable")->capture_default_str();
  cmd->add_option("--config", f.config_path, "JSON file with training settings");
  cmd->add_option("--seed", f.seed, "task and training seed")->capture_default_str();
  cmd->add_option("--out", f.out_dir, "output directory");
  cmd->add_flag("--deterministic-log", f.deterministic, "write wall_ms as 0 so logs are reproducible");
  cmd->add_option("--preset", f.preset, "model preset");
  cmd->add_option("--backbone-seed", f.backbone_seed, "seed of the random frozen backbone");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--batch-size", f.batch_size, "examples per optimizer step");
  cmd->add_option("--epochs", f.epochs, "maximum epochs");
  cmd->add_option("--patience", f.patience, "early-stopping patience");
  cmd->add_option("--max-steps", f.max_steps, "optimizer step cap, 0 = none");
  cmd->add_option("--rank", f.rank, "rank r, or prefix length for ptv1/ptv2");
}

std::string prepare_out_dir(const std::string& dir) {
  if (dir.empty()) return {};
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  return dir;
}

// ---------------------------------------------------------------------------

int cmd_train(const RunFlags& f, std::ostream& out) {
  RunSettings s = resolve_settings(f);
  const Experiment e = build_experiment(f, s);
  const std::string dir = prepare_out_dir(f.out_dir);

  std::ofstream log;
  if (!dir.empty()) {
    log.open((fs::path(dir) / "log.jsonl").string(), std::ios::binary);
    if (!log) throw IoError("cannot write the epoch log in '" + dir + "'");
  }
  const auto result = train_task<float>(*e.backbone, e.peft, e.task, s.train, [&](const EpochLog& epoch) {
    const std::string line = to_json_line(epoch, f.deterministic);
    out << line << "\n";
    if (log.is_open()) log << line << "\n";
  });

  const std::string task_id = f.task + "-" + f.method + "-s" + std::to_string(f.seed);
  json summary = train_settings_json(s, f);
  summary["task_id"] = task_id;
  summary["method"] = f.method;
  summary["config"] = peft_to_json(e.peft);
  summary["best_metric"] = result.best_metric;
  summary["best_epoch"] = result.best_epoch;
  summary["steps"] = result.steps;
  summary["diverged"] = result.diverged;
  summary["trainable_params"] = count_trainable(e.peft, e.model, e.task.num_classes);

  if (!dir.empty()) {
    json meta = train_settings_json(s, f);
    meta["task_id"] = task_id;
    meta["dev_metric"] = result.best_metric;
    save_adaptation((fs::path(dir) / "checkpoint.aotc").string(), result.best, e.model, meta);
    Manifest m;
    m.task_id = task_id;
    m.method = f.method;
    m.head_path = "checkpoint.aotc";
    m.num_classes = e.task.num_classes;
    m.model_dims = e.model;
    m.backbone_seed = s.backbone_seed;
    m.save((fs::path(dir) / "manifest.json").string());
    write_text_file((fs::path(dir) / "summary.json").string(), summary.dump(2) + "\n");
  }
  out << summary.dump() << "\n";
  return 0;
}

struct GridFlags {
  RunFlags run;
  std::string space_path;
};

int cmd_grid(const GridFlags& g, std::ostream& out) {
  RunSettings s = resolve_settings(g.run);
  const Experiment e = build_experiment(g.run, s);
  const json j = read_json_file(g.space_path);
  GridSpace space;
  try {
    space.learning_rates = j.at("learning_rates").get<std::vector<double>>();
    space.batch_sizes = j.value("batch_sizes", std::vector<std::size_t>{s.train.batch_size});
    space.ranks = j.value("ranks", std::vector<std::size_t>{});
  } catch (const json::exception& ex) {
    throw ConfigError("bad grid space file: " + std::string(ex.what()));
  }
  space.validate();
  const std::string dir = prepare_out_dir(g.run.out_dir);
  std::ofstream log;
  if (!dir.empty()) {
    log.open((fs::path(dir) / "grid.jsonl").string(), std::ios::binary);
    if (!log) throw IoError("cannot write the grid log in '" + dir + "'");
  }
  const auto result = grid_search<float>(space, *e.backbone, e.peft, e.task, s.train, [&](const GridCell& cell) {
    const std::string line = to_json_line(cell, g.run.deterministic);
    out << line << "\n";
    if (log.is_open()) log << line << "\n";
  });
  const GridCell& best = result.cells.at(result.best);
  json summary = {{"best_cell", best.index},
                  {"learning_rate", best.learning_rate},
                  {"batch_size", best.batch_size},
                  {"dev_metric", best.dev_metric},
                  {"params", best.params}};
  summary["rank"] = best.rank ? json(*best.rank) : json(nullptr);
  if (!dir.empty()) write_text_file((fs::path(dir) / "best.json").string(), summary.dump(2) + "\n");
  out << summary.dump() << "\n";
  return 0;
}

struct InitFlags {
  std::string method = "aot-kron";
  std::string out;
  std::string preset = "small";
  std::uint64_t backbone_seed = 0;
  std::uint64_t seed = 0;
  std::size_t num_classes = 2;
  std::optional<std::size_t> rank;
};

int cmd_init(const InitFlags& f, std::ostream& out) {
  const ModelConfig model = preset_model(parse_preset(f.preset));
  const auto backbone = Backbone<float>::random(model, f.backbone_seed);
  const PeftConfig config = method_config(f.method, model, f.rank);
  const auto a = make_adaptation<float>(config, backbone, f.num_classes, f.seed);
  const json meta = {{"backbone_seed", f.backbone_seed}, {"task_id", "init-" + f.method}};
  save_adaptation(f.out, a, model, meta);
  out << json{{"checkpoint", f.out}, {"method", f.method}, {"params", count_trainable(config, model)}}.dump()
      << "\n";
  return 0;
}

struct FuseFlags {
  std::string checkpoint;
  std::string out;
  int bits = 32;
  std::string task_id;
};

int cmd_fuse(const FuseFlags& f, std::ostream& out) {
  const DType dtype = dtype_from_bits(f.bits);
  const auto blob = read_checkpoint<float>(f.checkpoint);
  if (!blob.meta.contains("model_dims")) throw FormatError("checkpoint has no model_dims");
  const ModelConfig model = model_from_json(blob.meta.at("model_dims"));
  const std::uint64_t backbone_seed = blob.meta.value("backbone_seed", std::uint64_t{0});
  const auto backbone = Backbone<float>::random(model, backbone_seed);
  json meta;
  const auto trained = load_adaptation<float>(f.checkpoint, backbone, &meta);
  const Method method = method_of(trained.config);
  if (method != Method::aot_kron && method != Method::aot_fc) {
    throw ConfigError("fuse needs an aot-kron or aot-fc checkpoint, got " + std::string(method_name(method)));
  }
  const auto fused = fuse_aot(trained, backbone, dtype);
  const auto& table = dynamic_cast<const BiasTable<float>&>(*std::get<FusedAotState<float>>(fused.state).rows);
  write_table(table, f.out, dtype);

  const fs::path table_path(f.out);
  const fs::path stem = table_path.parent_path() / table_path.stem();
  const std::string head_path = stem.string() + ".head.aotc";
  const std::string manifest_path = stem.string() + ".json";
  save_head(head_path, fused.head);
  Manifest m;
  m.task_id = !f.task_id.empty() ? f.task_id : meta.value("task_id", table_path.stem().string());
  m.method = std::string(method_name(method));
  m.table_path = table_path.filename().string();
  m.head_path = fs::path(head_path).filename().string();
  m.num_classes = fused.head.num_classes();
  m.model_dims = model;
  m.backbone_seed = backbone_seed;
  m.save(manifest_path);
  out << json{{"table", f.out},
              {"head", head_path},
              {"manifest", manifest_path},
              {"bytes", TableHeader{static_cast<std::uint32_t>(model.vocab_size),
                                    static_cast<std::uint32_t>(model.hidden),
                                    static_cast<std::uint32_t>(model.layers), dtype}
                            .file_size()}}
             .dump()
      << "\n";
  return 0;
}

struct InspectFlags {
  std::string table;
  std::optional<std::size_t> layer;
  std::size_t top_k = 10;
};

int cmd_inspect(const InspectFlags& f, std::ostream& out) {
  const TableReader<float> reader(f.table);
  const BiasTable<float> table = reader.load_all();
  const TableHeader& h = reader.header();
  json j = {{"vocab", h.vocab}, {"dim", h.dim}, {"layers", h.layers}, {"bits", dtype_bits(h.dtype)}};
  j["rankings"] = json::array();
  if (f.layer) {
    j["rankings"].push_back(top_tokens_by_norm(table, *f.layer, f.top_k).to_json());
  } else {
    for (std::size_t l = 0; l < table.num_layers(); ++l) {
      j["rankings"].push_back(top_tokens_by_norm(table, l, f.top_k).to_json());
    }
  }
  out << j.dump(2) << "\n";
  return 0;
}

struct EvalFlags {
  std::vector<std::string> manifests;
  std::string input;
  std::string out;
  std::size_t batch = 32;
};

std::vector<TaskRequest> read_requests(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  std::vector<json> items;
  try {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '[') {
      for (const auto& item : json::parse(text)) items.push_back(item);
    } else {
      std::istringstream lines(text);
      std::string line;
      while (std::getline(lines, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        items.push_back(json::parse(line));
      }
    }
    std::vector<TaskRequest> requests;
    for (const auto& item : items) {
      requests.push_back({item.at("tokens").get<std::vector<TokenId>>(), item.at("task_id").get<std::string>()});
    }
    return requests;
  } catch (const json::exception& e) {
    throw FormatError("bad request file '" + path + "': " + e.what());
  }
}

int cmd_eval_multitask(const EvalFlags& f, std::ostream& out) {
  if (f.manifests.empty()) throw ConfigError("at least one --manifest is required");
  if (f.batch == 0) throw ConfigError("--batch must be positive");
  const Manifest first = Manifest::load(f.manifests.front());
  for (const auto& path : f.manifests) {
    const Manifest m = Manifest::load(path);
    if (m.model_dims != first.model_dims || m.backbone_seed != first.backbone_seed) {
      throw ConfigError("manifest '" + path + "' was built on a different backbone");
    }
  }
  const auto backbone =
      std::make_shared<const Backbone<float>>(Backbone<float>::random(first.model_dims, first.backbone_seed));
  TaskRegistry<float> registry(backbone);
  for (const auto& path : f.manifests) registry.add(load_bundle<float>(path, *backbone));

  const auto requests = read_requests(f.input);
  // Requests are grouped by structural mode (weight-changing modes also by
  // task) and each group runs in stacked batches; output keeps input order.
  std::map<std::string, std::vector<std::size_t>> groups;
  std::vector<std::string> modes(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    modes[i] = structural_mode(registry.at(requests[i].task_id).adaptation);
    std::string key = modes[i];
    if (key.rfind("single:", 0) == 0) key += "/" + requests[i].task_id;
    groups[key].push_back(i);
  }
  std::vector<Tensor<float>> logits(requests.size());
  for (const auto& [key, members] : groups) {
    for (std::size_t start = 0; start < members.size(); start += f.batch) {
      const std::size_t end = std::min(members.size(), start + f.batch);
      std::vector<TaskRequest> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(requests[members[i]]);
      auto result = multitask_forward(registry, std::span<const TaskRequest>(batch));
      for (std::size_t i = start; i < end; ++i) logits[members[i]] = std::move(result[i - start]);
    }
  }
  json j;
  j["results"] = json::array();
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const auto values = logits[i].flat();
    j["results"].push_back({{"task_id", requests[i].task_id},
                            {"mode", modes[i]},
                            {"logits", std::vector<float>(values.begin(), values.end())}});
  }
  MemoryBudgetOptions budget;
  if (!requests.empty()) {
    budget.seq_len = std::max_element(requests.begin(), requests.end(), [](const auto& a, const auto& b) {
                       return a.tokens.size() < b.tokens.size();
                     })->tokens.size();
  }
  j["memory"] = memory_budget(registry, budget).to_json();
  const std::string text = j.dump(2) + "\n";
  if (f.out.empty()) {
    out << text;
  } else {
    write_text_file(f.out, text);
    out << json{{"results", requests.size()}, {"out", f.out}}.dump() << "\n";
  }
  return 0;
}

struct BenchFlags {
  BenchConfig config;
  std::vector<std::string> methods;
  std::string preset = "small";
  std::string out_dir = ".";
  bool quiet = false;
};

int cmd_bench(BenchFlags& f, std::ostream& out, std::ostream& err) {
  f.config.preset = parse_preset(f.preset);
  if (!f.methods.empty()) f.config.methods = f.methods;
  f.config.validate();
  const auto progress = [&](const std::string& line) {
    if (!f.quiet) err << line << "\n";
  };
  const BenchReport report = measure(f.config, progress);
  const std::string dir = prepare_out_dir(f.out_dir);
  write_text_file((fs::path(dir) / "report.json").string(), report.to_json().dump(2) + "\n");
  write_text_file((fs::path(dir) / "report.csv").string(), report.to_csv());

  out << std::left << std::setw(16) << "method" << std::setw(7) << "batch" << std::setw(8) << "seqlen"
      << std::setw(12) << "mean_ms" << std::setw(12) << "std_ms"
      << "normalized\n";
  for (const auto& c : report.cells) {
    out << std::left << std::setw(16) << c.method << std::setw(7) << c.batch << std::setw(8) << c.seq_len
        << std::setw(12) << std::setprecision(4) << c.mean_ms << std::setw(12) << c.std_ms << c.normalized << "\n";
  }
  return 0;
}

struct SelftestFlags {
  bool quick = false;
  std::string scratch_dir;
};

int cmd_selftest(const SelftestFlags& f, std::ostream& out, std::ostream& err) {
  checks::GradientSuiteOptions gradient;
  checks::IdentitySuiteOptions identity;
  checks::MultitaskSuiteOptions multitask;
  multitask.scratch_dir = f.scratch_dir;
  if (f.quick) {
    gradient.seeds = 2;
    identity.seeds = 20;
    multitask.registries = 10;
  }
  std::vector<checks::SuiteReport> reports;
  reports.push_back(checks::gradient_suite(gradient));
  out << reports.back().summary() << "\n" << std::flush;
  reports.push_back(checks::identity_suite(identity));
  out << reports.back().summary() << "\n" << std::flush;
  reports.push_back(checks::accounting_suite());
  out << reports.back().summary() << "\n" << std::flush;
  reports.push_back(checks::multitask_suite(multitask));
  out << reports.back().summary() << "\n";
  std::vector<std::string> failed;
  for (const auto& r : reports) {
    if (!r.passed()) failed.push_back(r.name);
  }
  if (failed.empty()) return 0;
  std::string names;
  for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
  err << json{{"code", "selftest_failed"}, {"message", "failed suites: " + names}}.dump() << "\n";
  return 1;
}

void report_error(std::ostream& err, std::string_view code, const std::string& message) {
  err << json{{"code", code}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Train, fuse, benchmark and serve token-indexed bias fine-tuning", "aotp"};
  app.require_subcommand(1);

  RunFlags train;
  auto* train_cmd = app.add_subcommand("train", "train one method on a synthetic task");
  add_run_flags(train_cmd, train);

  GridFlags grid;
  auto* grid_cmd = app.add_subcommand("grid", "grid search over learning rate, batch size and rank");
  add_run_flags(grid_cmd, grid.run);
  grid_cmd->add_option("--space", grid.space_path, "JSON file {learning_rates, batch_sizes, ranks}")->required();

  InitFlags init;
  auto* init_cmd = app.add_subcommand("init", "write an untrained checkpoint");
  init_cmd->add_option("--method", init.method)->capture_default_str();
  init_cmd->add_option("--out", init.out, "checkpoint path")->required();
  init_cmd->add_option("--preset", init.preset)->capture_default_str();
  init_cmd->add_option("--backbone-seed", init.backbone_seed)->capture_default_str();
  init_cmd->add_option("--seed", init.seed)->capture_default_str();
  init_cmd->add_option("--num-classes", init.num_classes)->capture_default_str();
  init_cmd->add_option("--rank", init.rank);

  FuseFlags fuse;
  auto* fuse_cmd = app.add_subcommand("fuse", "materialize an AoT checkpoint into a table file");
  fuse_cmd->add_option("--checkpoint", fuse.checkpoint)->required();
  fuse_cmd->add_option("--out", fuse.out, "table path (.aotp)")->required();
  fuse_cmd->add_option("--bits", fuse.bits, "16 or 32")->capture_default_str();
  fuse_cmd->add_option("--task-id", fuse.task_id);

  InspectFlags inspect;
  auto* inspect_cmd = app.add_subcommand("inspect", "rank table rows by L2 norm");
  inspect_cmd->add_option("table", inspect.table, "table file")->required();
  inspect_cmd->add_option("--layer", inspect.layer, "one layer (default: all)");
  inspect_cmd->add_option("--top-k", inspect.top_k)->capture_default_str();

  EvalFlags eval;
  auto* eval_cmd = app.add_subcommand("eval-multitask", "batched inference over several task bundles");
  eval_cmd->add_option("--manifest", eval.manifests, "bundle manifest (repeatable)")->required();
  eval_cmd->add_option("--input", eval.input, "JSON array or JSON lines of {task_id, tokens}")->required();
  eval_cmd->add_option("--out", eval.out, "write logits JSON here instead of stdout");
  eval_cmd->add_option("--batch", eval.batch, "maximum stacked batch")->capture_default_str();

  BenchFlags bench;
  auto* bench_cmd = app.add_subcommand("bench", "latency benchmark");
  bench_cmd->add_option("--batch-sizes", bench.config.batch_sizes)->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--seq-lens", bench.config.seq_lens)->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--methods", bench.methods, "comma-separated method labels")->delimiter(',');
  bench_cmd->add_option("--reps", bench.config.reps, "repetitions per cell (default 300 at batch 1, else 100)");
  bench_cmd->add_option("--warmup", bench.config.warmup)->capture_default_str();
  bench_cmd->add_option("--preset", bench.preset, "small, base-shaped, large-shaped, raw-base, raw-large")
      ->capture_default_str();
  bench_cmd->add_option("--hidden", bench.config.hidden);
  bench_cmd->add_option("--layers", bench.config.layers);
  bench_cmd->add_option("--heads", bench.config.heads);
  bench_cmd->add_option("--vocab", bench.config.vocab_size);
  bench_cmd->add_option("--rank", bench.config.rank)->capture_default_str();
  bench_cmd->add_option("--prefix", bench.config.prefix)->capture_default_str();
  bench_cmd->add_option("--seed", bench.config.seed)->capture_default_str();
  bench_cmd->add_option("--out", bench.out_dir, "directory for report.json and report.csv")->capture_default_str();
  bench_cmd->add_flag("--quiet", bench.quiet, "no progress lines");

  SelftestFlags selftest;
  auto* selftest_cmd = app.add_subcommand("selftest", "run the gradient, identity, accounting and multi-task suites");
  selftest_cmd->add_flag("--quick", selftest.quick, "fewer seeds");
  selftest_cmd->add_option("--scratch", selftest.scratch_dir, "directory for temporary table files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    report_error(err, "usage", e.what());
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(train, out);
    if (*grid_cmd) return cmd_grid(grid, out);
    if (*init_cmd) return cmd_init(init, out);
    if (*fuse_cmd) return cmd_fuse(fuse, out);
    if (*inspect_cmd) return cmd_inspect(inspect, out);
    if (*eval_cmd) return cmd_eval_multitask(eval, out);
    if (*bench_cmd) return cmd_bench(bench, out, err);
    if (*selftest_cmd) return cmd_selftest(selftest, out, err);
  } catch (const Error& e) {
    report_error(err, to_string(e.code()), e.what());
    return 1;
  } catch (const json::exception& e) {
    report_error(err, "format", e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 1;
  }
  report_error(err, "usage", "no subcommand");
  return 2;
}

}  // namespace aotp::cli
