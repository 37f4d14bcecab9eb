#include "aotp/taskstore.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aotp/half.hpp"

namespace aotp {

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

// Appends one value in the file dtype.
template <typename T>
void put_value(std::vector<unsigned char>& out, T v, DType dtype) {
  if (dtype == DType::f16) {
    const std::uint16_t h = to_half(v);
    out.push_back(static_cast<unsigned char>(h));
    out.push_back(static_cast<unsigned char>(h >> 8));
  } else {
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
}

template <typename T>
T get_value(const unsigned char* p, DType dtype) {
  if (dtype == DType::f16) {
    return static_cast<T>(half_to_float(static_cast<std::uint16_t>(p[0] | (p[1] << 8))));
  }
  return static_cast<T>(std::bit_cast<float>(get_u32(p)));
}

std::string errno_text() { return std::strerror(errno); }

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

// ---------------------------------------------------------------------------

std::uint64_t TableHeader::file_size() const noexcept {
  return kTableHeaderBytes + std::uint64_t{vocab} * dim * layers * dtype_bytes(dtype);
}

std::uint64_t TableHeader::row_offset(std::size_t layer, TokenId token) const noexcept {
  return kTableHeaderBytes + (std::uint64_t{layer} * vocab + token) * dim * dtype_bytes(dtype);
}

std::array<unsigned char, kTableHeaderBytes> TableHeader::encode() const noexcept {
  std::vector<unsigned char> bytes(kTableMagic.begin(), kTableMagic.end());
  put_u32(bytes, kTableVersion);
  put_u32(bytes, vocab);
  put_u32(bytes, dim);
  put_u32(bytes, layers);
  bytes.push_back(static_cast<unsigned char>(dtype));
  std::array<unsigned char, kTableHeaderBytes> out{};
  std::copy(bytes.begin(), bytes.end(), out.begin());
  return out;
}

TableHeader TableHeader::decode(std::span<const unsigned char> bytes) {
  if (bytes.size() < kTableHeaderBytes) throw FormatError("table header is shorter than 32 bytes");
  if (!std::equal(kTableMagic.begin(), kTableMagic.end(), bytes.begin())) throw FormatError("bad table magic");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kTableVersion) throw FormatError("unsupported table version " + std::to_string(version));
  TableHeader h;
  h.vocab = get_u32(bytes.data() + 8);
  h.dim = get_u32(bytes.data() + 12);
  h.layers = get_u32(bytes.data() + 16);
  const unsigned char dtype = bytes[20];
  if (dtype > 1) throw FormatError("unknown table dtype " + std::to_string(dtype));
  h.dtype = static_cast<DType>(dtype);
  return h;
}

template <typename T>
void write_table(const BiasTable<T>& table, const std::string& path, DType dtype) {
  TableHeader h;
  h.vocab = static_cast<std::uint32_t>(table.vocab_size());
  h.dim = static_cast<std::uint32_t>(table.dim());
  h.layers = static_cast<std::uint32_t>(table.num_layers());
  h.dtype = dtype;
  const auto header = h.encode();
  std::vector<unsigned char> bytes(header.begin(), header.end());
  bytes.reserve(h.file_size());
  for (std::size_t l = 0; l < table.num_layers(); ++l) {
    for (T v : table.layer(l).flat()) put_value(bytes, v, dtype);
  }
  write_file(path, bytes);
}

template <typename T>
TableReader<T>::TableReader(const std::string& path) : path_(path) {
  fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0) throw IoError("cannot open table '" + path + "': " + errno_text());
  try {
    std::array<unsigned char, kTableHeaderBytes> buf{};
    const ssize_t got = ::pread(fd_, buf.data(), buf.size(), 0);
    if (got != static_cast<ssize_t>(buf.size())) throw FormatError("table '" + path + "' is truncated in its header");
    header_ = TableHeader::decode(buf);
    struct stat st {};
    if (::fstat(fd_, &st) != 0) throw IoError("cannot stat '" + path + "': " + errno_text());
    const auto size = static_cast<std::uint64_t>(st.st_size);
    if (size != header_.file_size()) {
      throw FormatError("table '" + path + "' has " + std::to_string(size) + " bytes, header implies " +
                        std::to_string(header_.file_size()));
    }
  } catch (...) {
    ::close(fd_);
    throw;
  }
}

template <typename T>
TableReader<T>::~TableReader() {
  if (fd_ >= 0) ::close(fd_);
}

template <typename T>
void TableReader<T>::gather(std::size_t layer, std::span<const TokenId> tokens, Tensor<T>& out) const {
  if (layer >= header_.layers) {
    throw InputError("layer " + std::to_string(layer) + " outside table with " + std::to_string(header_.layers) +
                     " layers");
  }
  const std::size_t d = header_.dim;
  const std::size_t width = dtype_bytes(header_.dtype);
  if (out.rows() != tokens.size() || out.cols() != d) out = Tensor<T>::zeros(tokens.size(), d);
  std::vector<unsigned char> staging(d * width);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    if (tokens[j] >= header_.vocab) {
      throw InputError("token " + std::to_string(tokens[j]) + " outside table vocabulary " +
                       std::to_string(header_.vocab));
    }
    const auto offset = static_cast<off_t>(header_.row_offset(layer, tokens[j]));
    const ssize_t got = ::pread(fd_, staging.data(), staging.size(), offset);
    if (got != static_cast<ssize_t>(staging.size())) throw FormatError("short read from table '" + path_ + "'");
    auto row = out.row(j);
    for (std::size_t c = 0; c < d; ++c) row[c] = get_value<T>(staging.data() + c * width, header_.dtype);
  }
}

template <typename T>
Tensor<T> TableReader<T>::read_rows(std::size_t layer, std::span<const TokenId> tokens) const {
  Tensor<T> out = Tensor<T>::zeros(tokens.size(), header_.dim);
  gather(layer, tokens, out);
  return out;
}

template <typename T>
BiasTable<T> TableReader<T>::load_all() const {
  std::vector<TokenId> all(header_.vocab);
  for (std::size_t v = 0; v < all.size(); ++v) all[v] = static_cast<TokenId>(v);
  std::vector<Tensor<T>> layers;
  for (std::size_t l = 0; l < header_.layers; ++l) layers.push_back(read_rows(l, all));
  return BiasTable<T>(std::move(layers), header_.dtype);
}

template <typename T>
Tensor<T> read_rows(const std::string& path, std::size_t layer, std::span<const TokenId> tokens) {
  return TableReader<T>(path).read_rows(layer, tokens);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::array<unsigned char, 4> kCheckpointMagic = {0x41, 0x4F, 0x54, 0x43};  // "AOTC"
constexpr std::uint32_t kCheckpointVersion = 1;

class ByteCursor {
 public:
  ByteCursor(const std::vector<unsigned char>& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  const unsigned char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint '" + path_ + "' is truncated");
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return get_u32(take(4)); }
  std::uint64_t u64() { return get_u64(take(8)); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<unsigned char>& bytes_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
const Tensor<T>* NamedTensors<T>::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

template <typename T>
void write_checkpoint(const std::string& path, const NamedTensors<T>& blob) {
  constexpr bool wide = sizeof(T) == 8;
  std::vector<unsigned char> bytes(kCheckpointMagic.begin(), kCheckpointMagic.end());
  put_u32(bytes, kCheckpointVersion);
  const std::string meta = blob.meta.dump();
  put_u64(bytes, meta.size());
  bytes.insert(bytes.end(), meta.begin(), meta.end());
  put_u32(bytes, static_cast<std::uint32_t>(blob.tensors.size()));
  for (const auto& [name, t] : blob.tensors) {
    put_u32(bytes, static_cast<std::uint32_t>(name.size()));
    bytes.insert(bytes.end(), name.begin(), name.end());
    put_u32(bytes, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) put_u64(bytes, dim);
    bytes.push_back(wide ? 2 : 0);
    for (T v : t.flat()) {
      if constexpr (wide) {
        put_u64(bytes, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
      } else {
        put_u32(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  write_file(path, bytes);
}

template <typename T>
NamedTensors<T> read_checkpoint(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  ByteCursor in(bytes, path);
  const unsigned char* magic = in.take(4);
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), magic)) {
    throw FormatError("'" + path + "' is not a checkpoint");
  }
  if (const auto v = in.u32(); v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  }
  NamedTensors<T> blob;
  const std::uint64_t meta_len = in.u64();
  const auto* meta = in.take(meta_len);
  try {
    blob.meta = nlohmann::json::parse(meta, meta + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint metadata is not valid JSON: " + std::string(e.what()));
  }
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = in.u32();
    const auto* name = in.take(name_len);
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw FormatError("implausible tensor rank in checkpoint");
    Shape shape(rank);
    for (auto& dim : shape) dim = in.u64();
    const unsigned char type = *in.take(1);
    if (type != 0 && type != 2) throw FormatError("unknown checkpoint element type");
    const std::size_t n = shape_size(shape);
    const std::size_t width = type == 2 ? 8 : 4;
    if (n > bytes.size() / width) throw FormatError("checkpoint '" + path + "' is truncated");
    std::vector<T> values(n);
    const auto* p = in.take(n * width);
    for (std::size_t k = 0; k < n; ++k) {
      values[k] = type == 2 ? static_cast<T>(std::bit_cast<double>(get_u64(p + 8 * k)))
                            : static_cast<T>(std::bit_cast<float>(get_u32(p + 4 * k)));
    }
    blob.tensors.emplace_back(std::string(name, name + name_len), Tensor<T>(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw FormatError("trailing bytes in checkpoint '" + path + "'");
  return blob;
}

// ---------------------------------------------------------------------------
// JSON forms of configurations

nlohmann::json peft_to_json(const PeftConfig& config) {
  nlohmann::json j;
  j["method"] = std::string(method_name(method_of(config)));
  std::visit(
      [&](const auto& c) {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, AotKronConfig>) {
          j["a"] = c.a;
          j["b"] = c.b;
          j["r"] = c.r;
        } else if constexpr (std::is_same_v<C, AotFcConfig> || std::is_same_v<C, AdapterConfig>) {
          j["r"] = c.r;
          j["activation"] = std::string(to_string(c.activation));
        } else if constexpr (std::is_same_v<C, PTuningV1Config> || std::is_same_v<C, PTuningV2Config>) {
          j["p"] = c.p;
        } else if constexpr (std::is_same_v<C, LoraConfig>) {
          j["r"] = c.r;
          j["alpha"] = c.alpha;
          j["fused"] = c.fused;
        }
      },
      config);
  return j;
}

PeftConfig peft_from_json(const nlohmann::json& j) {
  try {
    const Method m = parse_method(j.at("method").get<std::string>());
    switch (m) {
      case Method::aot_kron:
        return AotKronConfig{j.at("a").get<std::size_t>(), j.at("b").get<std::size_t>(), j.at("r").get<std::size_t>()};
      case Method::aot_fc:
        return AotFcConfig{j.at("r").get<std::size_t>(), parse_activation(j.value("activation", "gelu"))};
      case Method::ptv1: return PTuningV1Config{j.at("p").get<std::size_t>()};
      case Method::ptv2: return PTuningV2Config{j.at("p").get<std::size_t>()};
      case Method::bitfit: return BitFitConfig{};
      case Method::lora:
        return LoraConfig{j.at("r").get<std::size_t>(), j.value("alpha", 4.0), j.value("fused", false)};
      case Method::adapter:
        return AdapterConfig{j.at("r").get<std::size_t>(), parse_activation(j.value("activation", "gelu"))};
      case Method::full: return FullConfig{};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad method configuration: " + std::string(e.what()));
  }
  throw ConfigError("bad method configuration");
}

nlohmann::json model_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"hidden", c.hidden},   {"layers", c.layers},
          {"heads", c.heads},           {"ffn_mult", c.ffn_mult}, {"max_seq", c.max_seq},
          {"activation", std::string(to_string(c.activation))}, {"pad_id", c.pad_id},
          {"ln_eps", c.ln_eps}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.activation = parse_activation(j.value("activation", "gelu"));
    c.pad_id = j.value("pad_id", c.pad_id);
    c.ln_eps = j.value("ln_eps", c.ln_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad model dimensions: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Adaptation checkpoints

template <typename T>
void save_adaptation(const std::string& path, const Adaptation<T>& adaptation, const ModelConfig& model,
                     nlohmann::json meta) {
  if (std::holds_alternative<FusedAotState<T>>(adaptation.state)) {
    throw ConfigError("fused adaptations are stored as table files, not checkpoints");
  }
  Adaptation<T> copy = adaptation;
  NamedTensors<T> blob;
  blob.meta = std::move(meta);
  blob.meta["method"] = std::string(method_name(method_of(adaptation.config)));
  blob.meta["config"] = peft_to_json(adaptation.config);
  blob.meta["num_classes"] = adaptation.head.num_classes();
  blob.meta["model_dims"] = model_to_json(model);
  copy.for_each_param([&](const std::string& name, GradPair<T>& p) { blob.tensors.emplace_back(name, p.value); });
  write_checkpoint(path, blob);
}

template <typename T>
Adaptation<T> load_adaptation(const std::string& path, const Backbone<T>& backbone, nlohmann::json* meta) {
  NamedTensors<T> blob = read_checkpoint<T>(path);
  if (!blob.meta.contains("config") || !blob.meta.contains("num_classes")) {
    throw FormatError("checkpoint '" + path + "' has no method configuration");
  }
  const PeftConfig config = peft_from_json(blob.meta["config"]);
  if (blob.meta.contains("model_dims") && model_from_json(blob.meta["model_dims"]) != backbone.config) {
    throw ConfigError("checkpoint '" + path + "' was trained for different model dimensions");
  }
  Adaptation<T> out = make_adaptation(config, backbone, blob.meta["num_classes"].template get<std::size_t>(), 0);
  out.for_each_param([&](const std::string& name, GradPair<T>& p) {
    const Tensor<T>* t = blob.find(name);
    if (!t) throw FormatError("checkpoint '" + path + "' lacks tensor '" + name + "'");
    if (t->shape() != p.value.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(t->shape()) + ", expected " +
                        shape_string(p.value.shape()));
    }
    p.value = *t;
  });
  if (meta) *meta = std::move(blob.meta);
  return out;
}

template <typename T>
void save_head(const std::string& path, const Head<T>& head, nlohmann::json meta) {
  NamedTensors<T> blob;
  blob.meta = std::move(meta);
  blob.meta["num_classes"] = head.num_classes();
  blob.tensors.emplace_back("head.weight", head.weight.value);
  blob.tensors.emplace_back("head.bias", head.bias.value);
  write_checkpoint(path, blob);
}

template <typename T>
Head<T> load_head(const std::string& path) {
  const NamedTensors<T> blob = read_checkpoint<T>(path);
  const Tensor<T>* w = blob.find("head.weight");
  const Tensor<T>* b = blob.find("head.bias");
  if (!w || !b) throw FormatError("'" + path + "' holds no head");
  if (w->rank() != 2 || b->rank() != 1 || w->cols() != b->size()) throw FormatError("head tensors disagree in shape");
  Head<T> head;
  head.weight = GradPair<T>(*w);
  head.bias = GradPair<T>(*b);
  return head;
}

// ---------------------------------------------------------------------------
// Bundles

template <typename T>
Method TaskBundle<T>::method() const noexcept {
  return method_of(adaptation.config);
}

template <typename T>
TaskBundle<T> make_bundle(std::string task_id, Adaptation<T> adaptation, const ModelConfig& model) {
  TaskBundle<T> b;
  b.task_id = std::move(task_id);
  b.model = model;
  if (const auto* fused = std::get_if<FusedAotState<T>>(&adaptation.state)) {
    DType dtype = DType::f32;
    if (const auto* table = dynamic_cast<const BiasTable<T>*>(fused->rows.get())) dtype = table->dtype();
    if (const auto* reader = dynamic_cast<const TableReader<T>*>(fused->rows.get())) {
      dtype = reader->header().dtype;
      b.table_path = reader->path();
    }
    b.disk_bytes = kTableHeaderBytes + fused_table_bytes(model, dtype);
  } else {
    b.disk_bytes = adaptation.trainable_scalars(false) * 4;
  }
  b.disk_bytes += (adaptation.head.weight.value.size() + adaptation.head.bias.value.size()) * 4;
  b.adaptation = std::move(adaptation);
  return b;
}

nlohmann::json Manifest::to_json() const {
  return {{"task_id", task_id},         {"method", method},
          {"table_path", table_path},   {"head_path", head_path},
          {"num_classes", num_classes}, {"model_dims", model_to_json(model_dims)},
          {"backbone_seed", backbone_seed}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  try {
    m.task_id = j.at("task_id").get<std::string>();
    m.method = j.at("method").get<std::string>();
    m.table_path = j.value("table_path", "");
    m.head_path = j.at("head_path").get<std::string>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.model_dims = model_from_json(j.at("model_dims"));
    m.backbone_seed = j.value("backbone_seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad manifest: " + std::string(e.what()));
  }
  parse_method(m.method);
  if (m.task_id.empty()) throw ConfigError("manifest task_id is empty");
  return m;
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + path + "' is not valid JSON: " + std::string(e.what()));
  }
  return from_json(j);
}

void Manifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << to_json().dump(2) << "\n";
  if (!out) throw IoError("write to '" + path + "' failed");
}

template <typename T>
TaskBundle<T> load_bundle(const std::string& manifest_path, const Backbone<T>& backbone) {
  const Manifest m = Manifest::load(manifest_path);
  if (m.model_dims != backbone.config) {
    throw ConfigError("bundle '" + m.task_id + "' was built for different model dimensions");
  }
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };
  Adaptation<T> adaptation;
  const Method method = parse_method(m.method);
  const bool aot = method == Method::aot_kron || method == Method::aot_fc;
  if (aot && !m.table_path.empty()) {
    auto reader = std::make_shared<TableReader<T>>(resolve(m.table_path));
    if (reader->num_layers() != backbone.config.layers || reader->dim() != backbone.config.hidden ||
        reader->vocab_size() != backbone.config.vocab_size) {
      throw ConfigError("table for '" + m.task_id + "' does not match the backbone");
    }
    adaptation.config = default_config(method, backbone.config);
    adaptation.state = FusedAotState<T>{std::move(reader)};
    adaptation.head = load_head<T>(resolve(m.head_path));
  } else {
    adaptation = load_adaptation(resolve(m.head_path), backbone);
  }
  if (adaptation.head.num_classes() != m.num_classes) {
    throw FormatError("bundle '" + m.task_id + "' head has " + std::to_string(adaptation.head.num_classes()) +
                      " classes, manifest says " + std::to_string(m.num_classes));
  }
  TaskBundle<T> bundle = make_bundle(m.task_id, std::move(adaptation), backbone.config);
  if (!m.table_path.empty()) bundle.table_path = resolve(m.table_path);
  return bundle;
}

template <typename T>
TaskRegistry<T>::TaskRegistry(std::shared_ptr<const Backbone<T>> backbone) : backbone_(std::move(backbone)) {
  if (!backbone_) throw ConfigError("registry needs a backbone");
}

template <typename T>
void TaskRegistry<T>::add(TaskBundle<T> bundle) {
  if (bundle.model != backbone_->config) {
    throw ConfigError("bundle '" + bundle.task_id + "' does not match the registry backbone");
  }
  if (bundle.adaptation.head.weight.value.rows() != backbone_->config.hidden) {
    throw ConfigError("bundle '" + bundle.task_id + "' head width does not match the backbone");
  }
  const std::string id = bundle.task_id;
  if (!bundles_.emplace(id, std::move(bundle)).second) throw ConfigError("duplicate task_id '" + id + "'");
}

template <typename T>
const TaskBundle<T>& TaskRegistry<T>::at(const std::string& task_id) const {
  auto it = bundles_.find(task_id);
  if (it == bundles_.end()) throw InputError("unknown task_id '" + task_id + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Memory accounting

std::uint64_t aot_request_bytes(std::size_t seq_len, std::size_t hidden, std::size_t layers, DType dtype) noexcept {
  return std::uint64_t{seq_len} * hidden * layers * dtype_bytes(dtype);
}

std::uint64_t fused_lora_batch_params(std::size_t hidden, std::size_t layers, std::size_t batch) noexcept {
  return std::uint64_t{4} * hidden * hidden * layers * batch;
}

nlohmann::json MemoryReport::to_json() const {
  nlohmann::json j;
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : tasks) {
    j["tasks"].push_back({{"task_id", t.task_id},
                          {"method", t.method},
                          {"disk_bytes", t.disk_bytes},
                          {"request_resident_bytes", t.request_resident_bytes}});
  }
  j["fused_lora_batch_params"] = fused_lora_batch_params;
  j["fused_lora_batch_bytes"] = fused_lora_batch_bytes;
  return j;
}

template <typename T>
MemoryReport memory_budget(const TaskRegistry<T>& registry, const MemoryBudgetOptions& options) {
  const ModelConfig& m = registry.backbone().config;
  MemoryReport report;
  for (const auto& [id, bundle] : registry.bundles()) {
    TaskMemory t;
    t.task_id = id;
    t.method = std::string(method_name(bundle.method()));
    t.disk_bytes = bundle.disk_bytes;
    const auto& state = bundle.adaptation.state;
    if (const auto* fused = std::get_if<FusedAotState<T>>(&state)) {
      DType dtype = DType::f32;
      if (const auto* table = dynamic_cast<const BiasTable<T>*>(fused->rows.get())) dtype = table->dtype();
      if (const auto* reader = dynamic_cast<const TableReader<T>*>(fused->rows.get())) dtype = reader->header().dtype;
      t.request_resident_bytes = aot_request_bytes(options.seq_len, m.hidden, m.layers, dtype);
    } else {
      // Everything a non-fused method owns must stay resident.
      t.request_resident_bytes = bundle.adaptation.trainable_scalars(false) * sizeof(T);
    }
    report.tasks.push_back(std::move(t));
  }
  report.fused_lora_batch_params = fused_lora_batch_params(m.hidden, m.layers, options.batch);
  report.fused_lora_batch_bytes = report.fused_lora_batch_params * dtype_bytes(options.dtype);
  return report;
}

#define AOTP_INSTANTIATE(T)                                                                                     \
  template void write_table<T>(const BiasTable<T>&, const std::string&, DType);                                \
  template class TableReader<T>;                                                                                \
  template Tensor<T> read_rows<T>(const std::string&, std::size_t, std::span<const TokenId>);                  \
  template struct NamedTensors<T>;                                                                              \
  template void write_checkpoint<T>(const std::string&, const NamedTensors<T>&);                               \
  template NamedTensors<T> read_checkpoint<T>(const std::string&);                                              \
  template void save_adaptation<T>(const std::string&, const Adaptation<T>&, const ModelConfig&, nlohmann::json); \
  template Adaptation<T> load_adaptation<T>(const std::string&, const Backbone<T>&, nlohmann::json*);           \
  template void save_head<T>(const std::string&, const Head<T>&, nlohmann::json);                              \
  template Head<T> load_head<T>(const std::string&);                                                            \
  template struct TaskBundle<T>;                                                                                \
  template TaskBundle<T> make_bundle<T>(std::string, Adaptation<T>, const ModelConfig&);                       \
  template TaskBundle<T> load_bundle<T>(const std::string&, const Backbone<T>&);                               \
  template class TaskRegistry<T>;                                                                               \
  template MemoryReport memory_budget<T>(const TaskRegistry<T>&, const MemoryBudgetOptions&);

AOTP_INSTANTIATE(float)
AOTP_INSTANTIATE(double)

#undef AOTP_INSTANTIATE

}  // namespace aotp
