#include "aotp/harness.hpp"

#include <sys/utsname.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <memory>
#include <sstream>

#include "aotp/adaptation.hpp"
#include "aotp/forward.hpp"

namespace aotp {

std::string_view to_string(Preset p) noexcept {
  switch (p) {
    case Preset::small: return "small";
    case Preset::base_shaped: return "base-shaped";
    case Preset::large_shaped: return "large-shaped";
    case Preset::raw_base: return "raw-base";
    case Preset::raw_large: return "raw-large";
  }
  return "unknown";
}

Preset parse_preset(std::string_view name) {
  for (Preset p : {Preset::small, Preset::base_shaped, Preset::large_shaped, Preset::raw_base, Preset::raw_large}) {
    if (name == to_string(p)) return p;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

ModelConfig preset_model(Preset p) {
  ModelConfig m;
  m.max_seq = 512;
  switch (p) {
    case Preset::small: m.vocab_size = 256; m.hidden = 64; m.layers = 2; m.heads = 2; break;
    case Preset::base_shaped: m.vocab_size = 8192; m.hidden = 192; m.layers = 6; m.heads = 3; break;
    case Preset::large_shaped: m.vocab_size = 8192; m.hidden = 256; m.layers = 12; m.heads = 4; break;
    case Preset::raw_base: m.vocab_size = 50265; m.hidden = 768; m.layers = 12; m.heads = 12; break;
    case Preset::raw_large: m.vocab_size = 50265; m.hidden = 1024; m.layers = 24; m.heads = 16; break;
  }
  return m;
}

BenchMethod parse_bench_method(std::string_view label, const ModelConfig& model, std::size_t default_rank,
                               std::size_t default_prefix) {
  std::string_view name = label;
  std::optional<std::size_t> arg;
  if (const auto colon = label.find(':'); colon != std::string_view::npos) {
    name = label.substr(0, colon);
    const std::string_view digits = label.substr(colon + 1);
    std::size_t v = 0;
    const auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
    if (ec != std::errc{} || end != digits.data() + digits.size() || v == 0) {
      throw ConfigError("bad size in bench method '" + std::string(label) + "'");
    }
    arg = v;
  }
  auto no_arg = [&] {
    if (arg) throw ConfigError("bench method '" + std::string(name) + "' takes no size");
  };
  BenchMethod m;
  m.label = std::string(label);
  if (name == "vanilla") {
    no_arg();
  } else if (name == "full") {
    no_arg();
    m.config = FullConfig{};
  } else if (name == "aot-fused" || name == "aot-kron") {
    no_arg();
    m.config = default_config(Method::aot_kron, model);
    m.fuse = name == "aot-fused";
  } else if (name == "aot-fc") {
    m.config = AotFcConfig{arg.value_or(default_rank), Activation::gelu};
  } else if (name == "bitfit") {
    no_arg();
    m.config = BitFitConfig{};
  } else if (name == "ptv1") {
    m.config = PTuningV1Config{arg.value_or(default_prefix)};
  } else if (name == "ptv2") {
    m.config = PTuningV2Config{arg.value_or(default_prefix)};
  } else if (name == "lora-fused" || name == "lora-unfused") {
    const std::size_t r = arg.value_or(default_rank);
    m.config = LoraConfig{r, static_cast<double>(r), name == "lora-fused"};
    m.fuse = name == "lora-fused";
  } else if (name == "adapter") {
    m.config = AdapterConfig{arg.value_or(default_rank), Activation::gelu};
  } else {
    throw ConfigError("unknown bench method '" + std::string(label) + "'");
  }
  if (m.config) validate(*m.config, model);
  return m;
}

ModelConfig BenchConfig::model() const {
  ModelConfig m = preset_model(preset);
  if (hidden) m.hidden = *hidden;
  if (layers) m.layers = *layers;
  if (heads) m.heads = *heads;
  if (vocab_size) m.vocab_size = *vocab_size;
  std::size_t longest = 0;
  for (std::size_t n : seq_lens) longest = std::max(longest, n);
  m.max_seq = std::max(m.max_seq, longest);
  m.validate();
  return m;
}

void BenchConfig::validate() const {
  if (batch_sizes.empty() || seq_lens.empty()) throw ConfigError("bench needs at least one batch size and seqlen");
  for (std::size_t b : batch_sizes) {
    if (b == 0) throw ConfigError("batch sizes must be positive");
  }
  for (std::size_t n : seq_lens) {
    if (n == 0) throw ConfigError("sequence lengths must be positive");
  }
  if (reps && *reps == 0) throw ConfigError("reps must be at least 1");
  if (methods.empty()) throw ConfigError("bench needs at least one method");
  if (rank == 0 || prefix == 0) throw ConfigError("rank and prefix must be positive");
  const ModelConfig m = model();
  for (const auto& label : methods) parse_bench_method(label, m, rank, prefix);
}

std::size_t reps_for_batch(std::size_t batch) noexcept { return batch == 1 ? 300 : 100; }

const BenchCell* BenchReport::find(const std::string& method, std::size_t batch, std::size_t seq_len) const {
  for (const auto& c : cells) {
    if (c.method == method && c.batch == batch && c.seq_len == seq_len) return &c;
  }
  return nullptr;
}

nlohmann::json BenchReport::to_json() const {
  nlohmann::ordered_json j;
  j["meta"] = meta;
  j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : cells) {
    nlohmann::ordered_json cell;
    cell["method"] = c.method;
    cell["batch"] = c.batch;
    cell["seqlen"] = c.seq_len;
    cell["mean_ms"] = c.mean_ms;
    cell["std_ms"] = c.std_ms;
    cell["normalized"] = c.normalized;
    j["cells"].push_back(std::move(cell));
  }
  return nlohmann::json::parse(j.dump());
}

std::string BenchReport::to_csv() const {
  std::ostringstream out;
  out << "method,batch,seqlen,mean_ms,std_ms,normalized\n";
  out << std::setprecision(9);
  for (const auto& c : cells) {
    out << c.method << ',' << c.batch << ',' << c.seq_len << ',' << c.mean_ms << ',' << c.std_ms << ','
        << c.normalized << '\n';
  }
  return out.str();
}

namespace {

std::string host_descriptor() {
  utsname u{};
  std::string host = "unknown";
  if (::uname(&u) == 0) host = std::string(u.sysname) + " " + u.release + " " + u.machine;
  return host + ", " + std::to_string(::sysconf(_SC_NPROCESSORS_ONLN)) + " cpus";
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// A ready-to-run method: backbone to use plus adaptation.
struct Runner {
  std::string label;
  const Backbone<float>* backbone = nullptr;
  std::unique_ptr<Backbone<float>> own_backbone;
  Adaptation<float> adaptation;
};

Runner make_runner(const BenchMethod& m, const Backbone<float>& backbone, const Head<float>& head,
                   std::uint64_t seed) {
  Runner r;
  r.label = m.label;
  r.backbone = &backbone;
  if (!m.config) {
    r.adaptation = vanilla_adaptation(head);
    return r;
  }
  Adaptation<float> a = make_adaptation(*m.config, backbone, head.num_classes(), seed);
  // Perturb every parameter so no method runs on zero-initialized factors.
  CounterRng rng(seed, 0xBE7C);
  a.for_each_method_param([&](const std::string&, GradPair<float>& p) {
    for (auto& v : p.value.flat()) v += static_cast<float>(0.01 * rng.normal());
  });
  a.head = head;
  if (m.fuse && std::holds_alternative<KronState<float>>(a.state)) {
    r.adaptation = fuse_aot(a, backbone);
  } else if (m.fuse) {
    r.own_backbone = std::make_unique<Backbone<float>>(merge_lora(backbone, std::get<LoraState<float>>(a.state)));
    r.backbone = r.own_backbone.get();
    r.adaptation = vanilla_adaptation(head);
  } else {
    r.adaptation = std::move(a);
  }
  // Inference does not need gradient buffers.
  r.adaptation.for_each_param([](const std::string&, GradPair<float>& p) { p.set_trainable(false); });
  return r;
}

}  // namespace

BenchReport measure(const BenchConfig& config, const std::function<void(const std::string&)>& progress) {
  config.validate();
  const ModelConfig model = config.model();
  const Backbone<float> backbone = Backbone<float>::random(model, mix_key(config.seed, 0xBB));
  CounterRng head_rng(config.seed, 0x4EAD);
  const Head<float> head = Head<float>::random(model.hidden, 2, head_rng);

  std::vector<std::string> labels = config.methods;
  labels.erase(std::remove(labels.begin(), labels.end(), "vanilla"), labels.end());
  labels.insert(labels.begin(), "vanilla");
  std::vector<Runner> runners;
  for (const auto& label : labels) {
    runners.push_back(
        make_runner(parse_bench_method(label, model, config.rank, config.prefix), backbone, head, config.seed));
  }

  BenchReport report;
  report.meta = {{"precision", "fp32"},
                 {"preset", std::string(to_string(config.preset))},
                 {"model", {{"hidden", model.hidden}, {"layers", model.layers}, {"heads", model.heads},
                            {"vocab_size", model.vocab_size}}},
                 {"host", host_descriptor()},
                 {"timestamp", utc_timestamp()},
                 {"clock", "steady_clock"},
                 {"warmup", config.warmup},
                 {"reps_rule", config.reps ? "fixed " + std::to_string(*config.reps) : std::string("300 if batch == 1 else 100")},
                 {"scheduling", "round-robin"},
                 {"seed", config.seed}};

  using clock = std::chrono::steady_clock;
  volatile float sink = 0.0f;
  for (std::size_t batch : config.batch_sizes) {
    for (std::size_t seq_len : config.seq_lens) {
      CounterRng token_rng(config.seed, mix_key(batch, seq_len));
      std::vector<std::vector<TokenId>> inputs(batch, std::vector<TokenId>(seq_len));
      for (auto& seq : inputs) {
        for (auto& t : seq) t = static_cast<TokenId>(1 + token_rng.below(model.vocab_size - 1));
      }
      auto run = [&](const Runner& r) {
        for (const auto& seq : inputs) sink = sink + forward<float>(seq, *r.backbone, r.adaptation)[0];
      };
      const std::size_t reps = config.reps.value_or(reps_for_batch(batch));
      if (progress) {
        progress("batch " + std::to_string(batch) + " seqlen " + std::to_string(seq_len) + ": " +
                 std::to_string(runners.size()) + " methods x " + std::to_string(reps) + " reps");
      }
      for (std::size_t w = 0; w < config.warmup; ++w) {
        for (const auto& r : runners) run(r);
      }
      std::vector<std::vector<double>> samples(runners.size());
      for (std::size_t rep = 0; rep < reps; ++rep) {
        for (std::size_t s = 0; s < runners.size(); ++s) {
          const std::size_t m = (rep + s) % runners.size();
          const auto t0 = clock::now();
          run(runners[m]);
          samples[m].push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
        }
      }
      double vanilla_mean = 0.0;
      for (std::size_t m = 0; m < runners.size(); ++m) {
        const auto& xs = samples[m];
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
        if (m == 0) vanilla_mean = mean;
        BenchCell cell{runners[m].label, batch, seq_len, mean, sd, 0.0, reps};
        cell.normalized = m == 0 ? 1.0 : mean / vanilla_mean;
        report.cells.push_back(cell);
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

nlohmann::json NormRanking::to_json() const {
  nlohmann::json j;
  j["layer"] = layer;
  j["top"] = nlohmann::json::array();
  for (const auto& [token, norm] : entries) j["top"].push_back({{"token", token}, {"norm", norm}});
  return j;
}

template <typename T>
NormRanking top_tokens_by_norm(const BiasTable<T>& table, std::size_t layer, std::size_t k) {
  if (layer >= table.num_layers()) {
    throw InputError("layer " + std::to_string(layer) + " outside table with " + std::to_string(table.num_layers()) +
                     " layers");
  }
  const Tensor<T>& rows = table.layer(layer);
  NormRanking out;
  out.layer = layer;
  out.entries.reserve(rows.rows());
  for (std::size_t v = 0; v < rows.rows(); ++v) {
    double sum = 0.0;
    for (T x : rows.row(v)) sum += static_cast<double>(x) * static_cast<double>(x);
    out.entries.emplace_back(static_cast<TokenId>(v), std::sqrt(sum));
  }
  k = std::min(k, out.entries.size());
  std::partial_sort(out.entries.begin(), out.entries.begin() + static_cast<std::ptrdiff_t>(k), out.entries.end(),
                    [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
  out.entries.resize(k);
  return out;
}

template NormRanking top_tokens_by_norm<float>(const BiasTable<float>&, std::size_t, std::size_t);
template NormRanking top_tokens_by_norm<double>(const BiasTable<double>&, std::size_t, std::size_t);

}  // namespace aotp
