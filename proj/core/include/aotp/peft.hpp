#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "aotp/backbone.hpp"
#include "aotp/config.hpp"
#include "aotp/tensor.hpp"

namespace aotp {

// ---------------------------------------------------------------------------
// Method configuration
// ---------------------------------------------------------------------------

struct AotKronConfig {
  std::size_t a = 16;
  std::size_t b = 16;
  std::size_t r = 4;
  friend bool operator==(const AotKronConfig&, const AotKronConfig&) = default;
};

struct AotFcConfig {
  std::size_t r = 64;
  Activation activation = Activation::gelu;
  friend bool operator==(const AotFcConfig&, const AotFcConfig&) = default;
};

struct PTuningV1Config {
  std::size_t p = 10;
  friend bool operator==(const PTuningV1Config&, const PTuningV1Config&) = default;
};

struct PTuningV2Config {
  std::size_t p = 10;
  friend bool operator==(const PTuningV2Config&, const PTuningV2Config&) = default;
};

struct BitFitConfig {
  friend bool operator==(const BitFitConfig&, const BitFitConfig&) = default;
};

struct LoraConfig {
  std::size_t r = 4;
  double alpha = 4.0;  // scale alpha / r
  bool fused = false;
  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

struct AdapterConfig {
  std::size_t r = 16;
  Activation activation = Activation::gelu;
  friend bool operator==(const AdapterConfig&, const AdapterConfig&) = default;
};

// Plain fine-tuning of every backbone weight. Structurally identical to the
// vanilla model.
struct FullConfig {
  friend bool operator==(const FullConfig&, const FullConfig&) = default;
};

using PeftConfig = std::variant<AotKronConfig, AotFcConfig, PTuningV1Config, PTuningV2Config, BitFitConfig, LoraConfig,
                                AdapterConfig, FullConfig>;

enum class Method { aot_kron, aot_fc, ptv1, ptv2, bitfit, lora, adapter, full };

Method method_of(const PeftConfig& config) noexcept;
std::string_view method_name(Method m) noexcept;
Method parse_method(std::string_view name);

// Method defaults for a given model: Kron factors are the smallest a*b >= |V|
// with a and b as close as possible.
PeftConfig default_config(Method m, const ModelConfig& model);

// Validates ranks, prefix length and a*b >= |V|.
void validate(const PeftConfig& config, const ModelConfig& model);

// Row-level properties from the method comparison table.
struct MethodTraits {
  bool parameter_efficient;
  bool zero_inference_overhead;
  bool multi_task_inference;
};
MethodTraits method_traits(Method m, bool lora_fused = false) noexcept;

// ---------------------------------------------------------------------------
// Parameter blocks
// ---------------------------------------------------------------------------

// P = (W_L kron W_M) W_R for one layer.
template <typename T>
struct KronFactors {
  GradPair<T> left;    // a x r
  GradPair<T> middle;  // b x r
  GradPair<T> right;   // r^2 x d

  std::size_t a() const noexcept { return left.value.rows(); }
  std::size_t b() const noexcept { return middle.value.rows(); }
  std::size_t rank() const noexcept { return left.value.cols(); }
  std::size_t dim() const noexcept { return right.value.cols(); }

  template <typename F>
  void for_each_param(F&& f) {
    f("kron_left", left);
    f("kron_middle", middle);
    f("kron_right", right);
  }
};

// P = f(E W_1 + b_1) W_2 + b_2 for one layer.
template <typename T>
struct FCReparam {
  GradPair<T> w1;  // d x r
  GradPair<T> b1;  // r
  GradPair<T> w2;  // r x d
  GradPair<T> b2;  // d

  template <typename F>
  void for_each_param(F&& f) {
    f("fc_w1", w1);
    f("fc_b1", b1);
    f("fc_w2", w2);
    f("fc_b2", b2);
  }
};

template <typename T>
struct PrefixPair {
  GradPair<T> keys;    // p x d
  GradPair<T> values;  // p x d

  template <typename F>
  void for_each_param(F&& f) {
    f("prefix_keys", keys);
    f("prefix_values", values);
  }
};

template <typename T>
struct LoraPair {
  GradPair<T> a;  // d x r
  GradPair<T> b;  // r x d
};

// Projections in order q, k, v, o.
template <typename T>
struct LoraLayer {
  std::array<LoraPair<T>, 4> proj;

  template <typename F>
  void for_each_param(F&& f) {
    static constexpr const char* names[4] = {"q", "k", "v", "o"};
    for (std::size_t i = 0; i < 4; ++i) {
      f(std::string("lora_") + names[i] + "_a", proj[i].a);
      f(std::string("lora_") + names[i] + "_b", proj[i].b);
    }
  }
};

template <typename T>
struct AdapterBlock {
  GradPair<T> down;       // d x r
  GradPair<T> down_bias;  // r
  GradPair<T> up;         // r x d
  GradPair<T> up_bias;    // d

  template <typename F>
  void for_each_param(F&& f, const std::string& prefix) {
    f(prefix + "_down", down);
    f(prefix + "_down_bias", down_bias);
    f(prefix + "_up", up);
    f(prefix + "_up_bias", up_bias);
  }
};

// One bottleneck after the attention sublayer and one after the FFN.
template <typename T>
struct AdapterLayer {
  AdapterBlock<T> attn;
  AdapterBlock<T> ffn;

  template <typename F>
  void for_each_param(F&& f) {
    attn.for_each_param(f, "adapter_attn");
    ffn.for_each_param(f, "adapter_ffn");
  }
};

// Deltas added to every bias site of one backbone layer.
template <typename T>
struct BitFitDeltas {
  GradPair<T> bq, bk, bv, bo, b1, b2, ln1_beta, ln2_beta;

  template <typename F>
  void for_each_param(F&& f) {
    f("bitfit_bq", bq); f("bitfit_bk", bk); f("bitfit_bv", bv); f("bitfit_bo", bo);
    f("bitfit_b1", b1); f("bitfit_b2", b2);
    f("bitfit_ln1_beta", ln1_beta); f("bitfit_ln2_beta", ln2_beta);
  }
};

// ---------------------------------------------------------------------------
// Fused bias tables
// ---------------------------------------------------------------------------

// Anything that can hand out bias rows for (layer, token) lookups.
template <typename T>
class RowSource {
 public:
  virtual ~RowSource() = default;
  virtual std::size_t num_layers() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t dim() const = 0;
  // Writes row tokens[j] of layer `layer` into out.row(j). out is n x d.
  virtual void gather(std::size_t layer, std::span<const TokenId> tokens, Tensor<T>& out) const = 0;
};

// Materialized per-layer |V| x d tables. Read-only once built.
template <typename T>
class BiasTable final : public RowSource<T> {
 public:
  BiasTable() = default;
  BiasTable(std::vector<Tensor<T>> layers, DType dtype);

  std::size_t num_layers() const override { return layers_.size(); }
  std::size_t vocab_size() const override { return layers_.empty() ? 0 : layers_[0].rows(); }
  std::size_t dim() const override { return layers_.empty() ? 0 : layers_[0].cols(); }
  DType dtype() const noexcept { return dtype_; }

  const Tensor<T>& layer(std::size_t i) const { return layers_.at(i); }
  std::span<const T> row(std::size_t layer, TokenId token) const;

  void gather(std::size_t layer, std::span<const TokenId> tokens, Tensor<T>& out) const override;

  // Returns a copy with every value rounded through binary16 when dtype is
  // f16, mirroring what a half-precision file would hold.
  BiasTable quantized(DType dtype) const;

 private:
  std::vector<Tensor<T>> layers_;
  DType dtype_ = DType::f32;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// Row v of (W_L kron W_M) W_R with v -> (v / b, v % b) and the outer product
// flattened as [k * r + m] = W_L[i][k] * W_M[j][m].
template <typename T>
Tensor<T> kron_row(const KronFactors<T>& f, TokenId v);

// Dense (W_L kron W_M) W_R, all a*b rows, computed from the textbook Kronecker
// product. Reference for kron_row.
template <typename T>
Tensor<T> kron_dense(const KronFactors<T>& f);

// activation(E[v] W_1 + b_1) W_2 + b_2
template <typename T>
Tensor<T> fc_row(const FCReparam<T>& f, const Tensor<T>& embeddings, TokenId v, Activation act);

// FC reparametrization evaluated for a batch of (already dropped-out) input
// rows; rows of the result are bit-identical to fc_row on the same input.
template <typename T>
Tensor<T> fc_rows(const FCReparam<T>& f, const Tensor<T>& inputs, Activation act, Tensor<T>* pre_activation = nullptr,
                  Tensor<T>* activated = nullptr);

template <typename T>
BiasTable<T> materialize_table(std::span<const KronFactors<T>> layers, std::size_t vocab_size,
                               DType dtype = DType::f32);

template <typename T>
BiasTable<T> materialize_table(std::span<const FCReparam<T>> layers, const Tensor<T>& embeddings, Activation act,
                               DType dtype = DType::f32);

// Dropout applied to bias rows during training. keep = 1 - rate; surviving
// entries are scaled by 1 / keep.
struct DropoutSpec {
  bool enabled = false;
  double rate = 0.1;
  std::uint64_t key = 0;
};

// H' = H + stack(P[x_1], ..., P[x_n]).
template <typename T>
Tensor<T> apply_aot(const Tensor<T>& h, const Tensor<T>& table_layer, std::span<const TokenId> tokens,
                    const DropoutSpec& dropout = {});

// Multiplier (0 or 1 / keep) for element `index` of dropout stream `stream`.
template <typename T>
T dropout_multiplier(const DropoutSpec& spec, std::uint64_t stream, std::uint64_t index) noexcept;

// concat(P, H0) along the sequence axis.
template <typename T>
Tensor<T> ptv1_prepend(const Tensor<T>& prefix, const Tensor<T>& h0);

// attention(Q, concat(P_K, K), concat(P_V, V)). Prefix keys are always
// attendable; key_mask covers the n sequence keys only.
template <typename T>
Tensor<T> ptv2_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& prefix_k,
                         const Tensor<T>& prefix_v, std::span<const std::uint8_t> key_mask = {},
                         Tensor<T>* probs = nullptr);

// Output row i of prefix attention written as the two sums over prefix and
// sequence positions.
template <typename T>
struct Ptv2Decomposition {
  Tensor<T> prefix_term;
  Tensor<T> sequence_term;
  Tensor<T> weights;  // p + n attention weights of query i
};

template <typename T>
Ptv2Decomposition<T> decompose_ptv2_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                              const Tensor<T>& prefix_k, const Tensor<T>& prefix_v, std::size_t i);

// Every row gets + b.
template <typename T>
Tensor<T> bitfit_shift(const Tensor<T>& h, std::span<const T> b);

// Unfused: x W + (alpha / r) (x A) B.  Fused: x (W + (alpha / r) A B).
template <typename T>
Tensor<T> lora_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& a, const Tensor<T>& b, double alpha,
                      std::size_t r, bool fused);

// H + activation(H W_d + b_d) W_u + b_u
template <typename T>
Tensor<T> adapter_bottleneck(const Tensor<T>& h, const AdapterBlock<T>& block, Activation act);

// Single-head attention on H' = H + P_x split into the bias-driven term
// sum_j a_j P_{x_j} W_V and the value term sum_j a_j V_j. Head `head` uses
// the corresponding d_h column slice of the projections.
template <typename T>
struct AotDecomposition {
  Tensor<T> bias_term;
  Tensor<T> value_term;
  Tensor<T> weights;  // attention weights of query i over n keys
};

template <typename T>
AotDecomposition<T> decompose_aot_attention(const Tensor<T>& h, const Tensor<T>& bias_rows, const LayerWeights<T>& w,
                                            std::size_t heads, std::size_t head, std::size_t i);

// Exact trainable parameter count, head excluded.
std::uint64_t count_trainable(const PeftConfig& peft, const ModelConfig& model);

// Including a d x C + C classification head.
std::uint64_t count_trainable(const PeftConfig& peft, const ModelConfig& model, std::size_t num_classes);

// |V| * d * l * bytes
std::uint64_t fused_table_bytes(const ModelConfig& model, DType dtype);

}  // namespace aotp
