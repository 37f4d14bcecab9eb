#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "aotp/adaptation.hpp"
#include "aotp/backbone.hpp"
#include "aotp/peft.hpp"

namespace aotp {

// ---------------------------------------------------------------------------
// Fused table file
//
//   offset  size  field
//   0       4     magic "AOTP"
//   4       4     version (u32, 1)
//   8       4     vocab (u32)
//   12      4     d (u32)
//   16      4     layers (u32)
//   20      1     dtype (0 = 32-bit float, 1 = binary16)
//   21      11    zero padding
//   32      ...   values, layer-major then row-major, little-endian
// ---------------------------------------------------------------------------

inline constexpr std::array<unsigned char, 4> kTableMagic = {0x41, 0x4F, 0x54, 0x50};
inline constexpr std::uint32_t kTableVersion = 1;
inline constexpr std::size_t kTableHeaderBytes = 32;

struct TableHeader {
  std::uint32_t vocab = 0;
  std::uint32_t dim = 0;
  std::uint32_t layers = 0;
  DType dtype = DType::f32;

  std::uint64_t file_size() const noexcept;
  std::uint64_t row_offset(std::size_t layer, TokenId token) const noexcept;

  std::array<unsigned char, kTableHeaderBytes> encode() const noexcept;
  // Throws FormatError on a bad magic, version or dtype.
  static TableHeader decode(std::span<const unsigned char> bytes);

  friend bool operator==(const TableHeader&, const TableHeader&) = default;
};

// Values are converted to the file dtype; binary16 uses round-to-nearest-even.
// Throws IoError when the file cannot be written.
template <typename T>
void write_table(const BiasTable<T>& table, const std::string& path, DType dtype);

// Row-addressable reader. Only the header is read on open; every lookup
// issues positioned reads for exactly the requested rows, so resident memory
// is the n x d result plus one row of staging. Safe for concurrent readers.
template <typename T>
class TableReader final : public RowSource<T> {
 public:
  // Throws IoError when the file cannot be opened, FormatError on a bad
  // header or when the file size disagrees with the header (truncation).
  explicit TableReader(const std::string& path);
  ~TableReader() override;
  TableReader(const TableReader&) = delete;
  TableReader& operator=(const TableReader&) = delete;

  const TableHeader& header() const noexcept { return header_; }
  const std::string& path() const noexcept { return path_; }

  std::size_t num_layers() const override { return header_.layers; }
  std::size_t vocab_size() const override { return header_.vocab; }
  std::size_t dim() const override { return header_.dim; }

  // Rows tokens[j] of `layer` as an n x d tensor. Throws InputError for an
  // out-of-range layer or token and FormatError on a short read.
  Tensor<T> read_rows(std::size_t layer, std::span<const TokenId> tokens) const;

  void gather(std::size_t layer, std::span<const TokenId> tokens, Tensor<T>& out) const override;

  // Loads every row; for inspection and tests.
  BiasTable<T> load_all() const;

 private:
  std::string path_;
  int fd_ = -1;
  TableHeader header_;
};

template <typename T>
Tensor<T> read_rows(const std::string& path, std::size_t layer, std::span<const TokenId> tokens);

// ---------------------------------------------------------------------------
// Weight checkpoints
//
//   "AOTC", version u32 = 1, meta length u64, meta JSON bytes, tensor count
//   u32, then per tensor: name length u32, name, rank u32, dims u64 x rank,
//   element type u8 (0 = f32, 2 = f64), little-endian values.
// ---------------------------------------------------------------------------

template <typename T>
struct NamedTensors {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<T>>> tensors;

  const Tensor<T>* find(const std::string& name) const;
};

template <typename T>
void write_checkpoint(const std::string& path, const NamedTensors<T>& blob);

template <typename T>
NamedTensors<T> read_checkpoint(const std::string& path);

nlohmann::json peft_to_json(const PeftConfig& config);
PeftConfig peft_from_json(const nlohmann::json& j);
nlohmann::json model_to_json(const ModelConfig& config);
ModelConfig model_from_json(const nlohmann::json& j);

// Saves method parameters and head. `meta` gains "method", "config",
// "num_classes" and "model_dims".
template <typename T>
void save_adaptation(const std::string& path, const Adaptation<T>& adaptation, const ModelConfig& model,
                     nlohmann::json meta = nlohmann::json::object());

// Rebuilds the adaptation for `backbone` and fills every parameter from the
// file. Throws FormatError when a tensor is missing or mis-shaped.
template <typename T>
Adaptation<T> load_adaptation(const std::string& path, const Backbone<T>& backbone, nlohmann::json* meta = nullptr);

// Saves only head.weight and head.bias.
template <typename T>
void save_head(const std::string& path, const Head<T>& head, nlohmann::json meta = nlohmann::json::object());

template <typename T>
Head<T> load_head(const std::string& path);

// ---------------------------------------------------------------------------
// Task bundles and the multi-task registry
// ---------------------------------------------------------------------------

template <typename T>
struct TaskBundle {
  std::string task_id;
  Adaptation<T> adaptation;  // fused AoT bundles hold a FusedAotState
  ModelConfig model;
  std::string table_path;    // empty unless the rows come from a table file
  std::uint64_t disk_bytes = 0;

  Method method() const noexcept;
  std::size_t num_classes() const noexcept { return adaptation.head.num_classes(); }
};

// Bundle built from an in-memory adaptation; disk_bytes is what the fused
// table or the f32 checkpoint would occupy.
template <typename T>
TaskBundle<T> make_bundle(std::string task_id, Adaptation<T> adaptation, const ModelConfig& model);

// Manifest: {task_id, method, table_path, head_path, num_classes, model_dims,
// backbone_seed}. Relative paths resolve against the manifest's directory.
// AoT bundles name a table file plus a head checkpoint; other methods name a
// full checkpoint in head_path and leave table_path empty.
struct Manifest {
  std::string task_id;
  std::string method;
  std::string table_path;
  std::string head_path;
  std::size_t num_classes = 0;
  ModelConfig model_dims;
  std::uint64_t backbone_seed = 0;

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
  static Manifest load(const std::string& path);
  void save(const std::string& path) const;
};

template <typename T>
TaskBundle<T> load_bundle(const std::string& manifest_path, const Backbone<T>& backbone);

template <typename T>
class TaskRegistry {
 public:
  explicit TaskRegistry(std::shared_ptr<const Backbone<T>> backbone);

  // Throws ConfigError on a duplicate id or a model mismatch.
  void add(TaskBundle<T> bundle);

  // Throws InputError for an unknown id.
  const TaskBundle<T>& at(const std::string& task_id) const;
  bool contains(const std::string& task_id) const { return bundles_.count(task_id) != 0; }
  std::size_t size() const noexcept { return bundles_.size(); }

  const Backbone<T>& backbone() const noexcept { return *backbone_; }
  const std::map<std::string, TaskBundle<T>>& bundles() const noexcept { return bundles_; }

 private:
  std::shared_ptr<const Backbone<T>> backbone_;
  std::map<std::string, TaskBundle<T>> bundles_;
};

struct TaskRequest {
  std::vector<TokenId> tokens;
  std::string task_id;
};

// Structural mode of an adaptation. Examples can share a batch only when
// their modes agree ("aot", "ptv2:p=10", "lora:r=4", ...). Modes starting
// with "single:" change the backbone weights and batch with their own task only.
template <typename T>
std::string structural_mode(const Adaptation<T>& adaptation);

// One stacked pass over the shared backbone. Shared projections and FFNs run
// on all rows at once; bias rows, prefixes, BitFit shifts, LoRA deltas,
// adapters and heads are gathered per example. Output order matches input.
// Throws InputError for unknown ids, BatchCompositionError for mixed modes.
template <typename T>
std::vector<Tensor<T>> multitask_forward(const TaskRegistry<T>& registry, std::span<const TaskRequest> batch);

// ---------------------------------------------------------------------------
// Memory accounting
// ---------------------------------------------------------------------------

// Rows fetched by one AoT request: n * d * l * bytes.
std::uint64_t aot_request_bytes(std::size_t seq_len, std::size_t hidden, std::size_t layers, DType dtype) noexcept;

// Parameters carried by a batch of b sequences through fused LoRA, one merged
// copy of the four attention matrices per sequence: 4 * d^2 * l * b.
std::uint64_t fused_lora_batch_params(std::size_t hidden, std::size_t layers, std::size_t batch) noexcept;

struct TaskMemory {
  std::string task_id;
  std::string method;
  std::uint64_t disk_bytes = 0;
  std::uint64_t request_resident_bytes = 0;
};

struct MemoryReport {
  std::vector<TaskMemory> tasks;
  std::uint64_t fused_lora_batch_params = 0;
  std::uint64_t fused_lora_batch_bytes = 0;

  nlohmann::json to_json() const;
};

struct MemoryBudgetOptions {
  std::size_t seq_len = 128;
  std::size_t batch = 1;
  DType dtype = DType::f16;  // for the fused-LoRA comparison
};

template <typename T>
MemoryReport memory_budget(const TaskRegistry<T>& registry, const MemoryBudgetOptions& options = {});

}  // namespace aotp
