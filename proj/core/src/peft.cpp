#include "aotp/peft.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "aotp/half.hpp"
#include "aotp/numerics.hpp"
#include "aotp/rng.hpp"

namespace aotp {

Method method_of(const PeftConfig& config) noexcept {
  return static_cast<Method>(config.index());
}

std::string_view method_name(Method m) noexcept {
  switch (m) {
    case Method::aot_kron: return "aot-kron";
    case Method::aot_fc: return "aot-fc";
    case Method::ptv1: return "ptv1";
    case Method::ptv2: return "ptv2";
    case Method::bitfit: return "bitfit";
    case Method::lora: return "lora";
    case Method::adapter: return "adapter";
    case Method::full: return "full";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::aot_kron, Method::aot_fc, Method::ptv1, Method::ptv2, Method::bitfit, Method::lora,
                   Method::adapter, Method::full}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

PeftConfig default_config(Method m, const ModelConfig& model) {
  switch (m) {
    case Method::aot_kron: {
      const auto v = model.vocab_size;
      auto a = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(v))));
      const std::size_t b = (v + a - 1) / a;
      return AotKronConfig{a, b, 4};
    }
    case Method::aot_fc: return AotFcConfig{};
    case Method::ptv1: return PTuningV1Config{};
    case Method::ptv2: return PTuningV2Config{};
    case Method::bitfit: return BitFitConfig{};
    case Method::lora: return LoraConfig{};
    case Method::adapter: return AdapterConfig{};
    case Method::full: return FullConfig{};
  }
  return FullConfig{};
}

void validate(const PeftConfig& config, const ModelConfig& model) {
  std::visit(
      [&](const auto& c) {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, AotKronConfig>) {
          if (c.r < 1 || c.a < 1 || c.b < 1) throw ConfigError("aot-kron: a, b and r must be positive");
          if (c.a * c.b < model.vocab_size) {
            throw ConfigError("aot-kron: a*b = " + std::to_string(c.a * c.b) + " is smaller than |V| = " +
                              std::to_string(model.vocab_size));
          }
        } else if constexpr (std::is_same_v<C, AotFcConfig> || std::is_same_v<C, AdapterConfig>) {
          if (c.r < 1) throw ConfigError("rank must be at least 1");
        } else if constexpr (std::is_same_v<C, LoraConfig>) {
          if (c.r < 1) throw ConfigError("lora: rank must be at least 1");
          if (!(c.alpha > 0)) throw ConfigError("lora: alpha must be positive");
        } else if constexpr (std::is_same_v<C, PTuningV1Config> || std::is_same_v<C, PTuningV2Config>) {
          if (c.p + model.max_seq > 1u << 20) throw ConfigError("prefix length out of range");
        }
      },
      config);
}

MethodTraits method_traits(Method m, bool lora_fused) noexcept {
  switch (m) {
    case Method::full: return {false, true, false};
    case Method::lora: return lora_fused ? MethodTraits{true, true, false} : MethodTraits{true, false, true};
    case Method::adapter: return {true, false, true};
    case Method::bitfit: return {true, true, true};
    case Method::ptv1:
    case Method::ptv2: return {true, false, true};
    case Method::aot_kron:
    case Method::aot_fc: return {true, true, true};
  }
  return {false, false, false};
}

// ---------------------------------------------------------------------------

template <typename T>
BiasTable<T>::BiasTable(std::vector<Tensor<T>> layers, DType dtype) : layers_(std::move(layers)), dtype_(dtype) {
  for (const auto& l : layers_) {
    if (l.rank() != 2 || l.shape() != layers_.front().shape()) throw ShapeError("bias table layers differ in shape");
  }
}

template <typename T>
std::span<const T> BiasTable<T>::row(std::size_t layer, TokenId token) const {
  if (layer >= layers_.size()) throw InputError("bias table layer out of range");
  if (token >= vocab_size()) throw InputError("bias table token out of range");
  return layers_[layer].row(token);
}

template <typename T>
void BiasTable<T>::gather(std::size_t layer, std::span<const TokenId> tokens, Tensor<T>& out) const {
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    auto src = row(layer, tokens[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
}

template <typename T>
BiasTable<T> BiasTable<T>::quantized(DType dtype) const {
  std::vector<Tensor<T>> out = layers_;
  if (dtype == DType::f16) {
    for (auto& l : out) {
      for (auto& v : l.flat()) v = static_cast<T>(half_to_float(to_half(v)));
    }
  } else if constexpr (!std::is_same_v<T, float>) {
    for (auto& l : out) {
      for (auto& v : l.flat()) v = static_cast<T>(static_cast<float>(v));
    }
  }
  return BiasTable<T>(std::move(out), dtype);
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void kron_outer(const KronFactors<T>& f, TokenId v, T* outer) {
  const std::size_t r = f.rank();
  const std::size_t i = v / f.b();
  const std::size_t j = v % f.b();
  auto left = f.left.value.row(i);
  auto middle = f.middle.value.row(j);
  for (std::size_t k = 0; k < r; ++k) {
    for (std::size_t m = 0; m < r; ++m) outer[k * r + m] = left[k] * middle[m];
  }
}

}  // namespace

template <typename T>
Tensor<T> kron_row(const KronFactors<T>& f, TokenId v) {
  if (v >= f.a() * f.b()) {
    throw InputError("kron_row: token " + std::to_string(v) + " outside a*b = " + std::to_string(f.a() * f.b()));
  }
  const std::size_t r = f.rank();
  std::vector<T> outer(r * r);
  kron_outer(f, v, outer.data());
  Tensor<T> row(Shape{f.dim()});
  gemm(outer.data(), f.right.value.data(), row.data(), 1, r * r, f.dim(), false);
  return row;
}

template <typename T>
Tensor<T> kron_dense(const KronFactors<T>& f) {
  const std::size_t a = f.a(), b = f.b(), r = f.rank();
  // (W_L kron W_M)[(i*b + j), (k*r + m)] = W_L[i][k] * W_M[j][m]
  Tensor<T> kron = Tensor<T>::zeros(a * b, r * r);
  for (std::size_t i = 0; i < a; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      for (std::size_t k = 0; k < r; ++k) {
        for (std::size_t m = 0; m < r; ++m) kron(i * b + j, k * r + m) = f.left.value(i, k) * f.middle.value(j, m);
      }
    }
  }
  return matmul(kron, f.right.value);
}

template <typename T>
Tensor<T> fc_rows(const FCReparam<T>& f, const Tensor<T>& inputs, Activation act, Tensor<T>* pre_activation,
                  Tensor<T>* activated) {
  const std::size_t n = inputs.rows();
  const std::size_t r = f.w1.value.cols();
  const std::size_t d = f.w2.value.cols();
  Tensor<T> z = Tensor<T>::zeros(n, r);
  gemm(inputs.data(), f.w1.value.data(), z.data(), n, inputs.cols(), r, false);
  add_row_vector(z, f.b1.value.flat());
  if (pre_activation) *pre_activation = z;
  activation_inplace(z, act);
  Tensor<T> out = Tensor<T>::zeros(n, d);
  gemm(z.data(), f.w2.value.data(), out.data(), n, r, d, false);
  add_row_vector(out, f.b2.value.flat());
  if (activated) *activated = std::move(z);
  return out;
}

template <typename T>
Tensor<T> fc_row(const FCReparam<T>& f, const Tensor<T>& embeddings, TokenId v, Activation act) {
  if (v >= embeddings.rows()) throw InputError("fc_row: token " + std::to_string(v) + " outside vocabulary");
  auto src = embeddings.row(v);
  Tensor<T> input(Shape{1, embeddings.cols()}, std::vector<T>(src.begin(), src.end()));
  return fc_rows(f, input, act).reshaped(Shape{f.w2.value.cols()});
}

template <typename T>
BiasTable<T> materialize_table(std::span<const KronFactors<T>> layers, std::size_t vocab_size, DType dtype) {
  std::vector<Tensor<T>> out;
  out.reserve(layers.size());
  for (const auto& f : layers) {
    if (f.a() * f.b() < vocab_size) throw ConfigError("materialize_table: a*b smaller than the vocabulary");
    const std::size_t r = f.rank();
    Tensor<T> outer = Tensor<T>::zeros(vocab_size, r * r);
    for (std::size_t v = 0; v < vocab_size; ++v) kron_outer(f, static_cast<TokenId>(v), outer.data() + v * r * r);
    Tensor<T> table = Tensor<T>::zeros(vocab_size, f.dim());
    gemm(outer.data(), f.right.value.data(), table.data(), vocab_size, r * r, f.dim(), false);
    out.push_back(std::move(table));
  }
  BiasTable<T> table(std::move(out), DType::f32);
  return dtype == DType::f16 ? table.quantized(dtype) : table;
}

template <typename T>
BiasTable<T> materialize_table(std::span<const FCReparam<T>> layers, const Tensor<T>& embeddings, Activation act,
                               DType dtype) {
  std::vector<Tensor<T>> out;
  out.reserve(layers.size());
  for (const auto& f : layers) out.push_back(fc_rows(f, embeddings, act));
  BiasTable<T> table(std::move(out), DType::f32);
  return dtype == DType::f16 ? table.quantized(dtype) : table;
}

template <typename T>
T dropout_multiplier(const DropoutSpec& spec, std::uint64_t stream, std::uint64_t index) noexcept {
  if (!spec.enabled || spec.rate <= 0.0) return T{1};
  const double keep = 1.0 - spec.rate;
  return keyed_uniform(mix_key(spec.key, stream), index) < keep ? static_cast<T>(1.0 / keep) : T{0};
}

template <typename T>
Tensor<T> apply_aot(const Tensor<T>& h, const Tensor<T>& table_layer, std::span<const TokenId> tokens,
                    const DropoutSpec& dropout) {
  if (h.rows() != tokens.size()) throw ShapeError("apply_aot: token count differs from hidden rows");
  if (h.cols() != table_layer.cols()) throw ShapeError("apply_aot: width mismatch");
  Tensor<T> out = h;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    if (tokens[j] >= table_layer.rows()) throw InputError("apply_aot: token outside table");
    auto p = table_layer.row(tokens[j]);
    auto o = out.row(j);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += p[c] * dropout_multiplier<T>(dropout, j, c);
  }
  return out;
}

template <typename T>
Tensor<T> ptv1_prepend(const Tensor<T>& prefix, const Tensor<T>& h0) {
  const std::size_t p = prefix.size() == 0 ? 0 : prefix.rows();
  if (p > 0 && prefix.cols() != h0.cols()) throw ShapeError("ptv1_prepend: width mismatch");
  Tensor<T> out = Tensor<T>::zeros(p + h0.rows(), h0.cols());
  std::copy(prefix.data(), prefix.data() + p * h0.cols(), out.data());
  std::copy(h0.data(), h0.data() + h0.size(), out.data() + p * h0.cols());
  return out;
}

namespace {

template <typename T>
Tensor<T> vstack(const Tensor<T>& top, const Tensor<T>& bottom) {
  return ptv1_prepend(top, bottom);
}

}  // namespace

template <typename T>
Tensor<T> ptv2_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& prefix_k,
                         const Tensor<T>& prefix_v, std::span<const std::uint8_t> key_mask, Tensor<T>* probs) {
  const std::size_t p = prefix_k.size() == 0 ? 0 : prefix_k.rows();
  const std::size_t pv = prefix_v.size() == 0 ? 0 : prefix_v.rows();
  if (p != pv) throw ShapeError("ptv2_attention: prefix key/value lengths differ");
  if (p == 0) return attention(q, k, v, key_mask, probs);
  std::vector<std::uint8_t> mask;
  if (!key_mask.empty()) {
    mask.assign(p, 1);
    mask.insert(mask.end(), key_mask.begin(), key_mask.end());
  }
  return attention(q, vstack(prefix_k, k), vstack(prefix_v, v), mask, probs);
}

template <typename T>
Ptv2Decomposition<T> decompose_ptv2_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                              const Tensor<T>& prefix_k, const Tensor<T>& prefix_v, std::size_t i) {
  const std::size_t p = prefix_k.rows();
  const std::size_t n = k.rows();
  const std::size_t dh = q.cols();
  if (i >= q.rows()) throw InputError("decompose_ptv2_attention: query index out of range");

  // a = softmax over the p + n logits of query i.
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  std::vector<T> a(p + n);
  auto dot = [&](std::span<const T> x, std::span<const T> y) {
    T s{0};
    for (std::size_t c = 0; c < dh; ++c) s += x[c] * y[c];
    return s;
  };
  for (std::size_t j = 0; j < p; ++j) a[j] = dot(q.row(i), prefix_k.row(j)) * scale;
  for (std::size_t j = 0; j < n; ++j) a[p + j] = dot(q.row(i), k.row(j)) * scale;
  softmax_inplace(std::span<T>(a));

  Ptv2Decomposition<T> out{Tensor<T>::zeros(dh), Tensor<T>::zeros(dh), Tensor<T>(Shape{p + n}, a)};
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t c = 0; c < dh; ++c) out.prefix_term[c] += a[j] * prefix_v(j, c);
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t c = 0; c < dh; ++c) out.sequence_term[c] += a[p + j] * v(j, c);
  }
  return out;
}

template <typename T>
Tensor<T> bitfit_shift(const Tensor<T>& h, std::span<const T> b) {
  Tensor<T> out = h;
  add_row_vector(out, b);
  return out;
}

template <typename T>
Tensor<T> lora_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& a, const Tensor<T>& b, double alpha,
                      std::size_t r, bool fused) {
  if (r == 0) throw ConfigError("lora_linear: rank must be positive");
  const T scale = static_cast<T>(alpha / static_cast<double>(r));
  if (fused) {
    Tensor<T> merged = w;
    axpy_inplace(merged, scale, matmul(a, b));
    return matmul(x, merged);
  }
  Tensor<T> y = matmul(x, w);
  axpy_inplace(y, scale, matmul(matmul(x, a), b));
  return y;
}

template <typename T>
Tensor<T> adapter_bottleneck(const Tensor<T>& h, const AdapterBlock<T>& block, Activation act) {
  Tensor<T> z = matmul(h, block.down.value);
  add_row_vector(z, block.down_bias.value.flat());
  activation_inplace(z, act);
  Tensor<T> delta = matmul(z, block.up.value);
  add_row_vector(delta, block.up_bias.value.flat());
  Tensor<T> out = h;
  add_inplace(out, delta);
  return out;
}

template <typename T>
AotDecomposition<T> decompose_aot_attention(const Tensor<T>& h, const Tensor<T>& bias_rows, const LayerWeights<T>& w,
                                            std::size_t heads, std::size_t head, std::size_t i) {
  if (h.shape() != bias_rows.shape()) throw ShapeError("decompose_aot_attention: bias rows must match H");
  const std::size_t n = h.rows();
  const std::size_t d = h.cols();
  if (heads == 0 || d % heads != 0 || head >= heads) throw ConfigError("decompose_aot_attention: bad head index");
  if (i >= n) throw InputError("decompose_aot_attention: query index out of range");
  const std::size_t dh = d / heads;
  const std::size_t c0 = head * dh;

  Tensor<T> shifted = h;
  add_inplace(shifted, bias_rows);

  auto project = [&](const Tensor<T>& x, const GradPair<T>& wm, const GradPair<T>* bias) {
    Tensor<T> y = matmul(x, column_slice(wm.value, c0, dh));
    if (bias) {
      auto b = bias->value.flat().subspan(c0, dh);
      add_row_vector(y, std::span<const T>(b));
    }
    return y;
  };
  const Tensor<T> q = project(shifted, w.wq, &w.bq);
  const Tensor<T> k = project(shifted, w.wk, &w.bk);
  const Tensor<T> v = project(h, w.wv, &w.bv);            // V = H W_V + b_V
  const Tensor<T> pv = project(bias_rows, w.wv, nullptr);  // P_x W_V

  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  std::vector<T> a(n);
  for (std::size_t j = 0; j < n; ++j) {
    T s{0};
    for (std::size_t c = 0; c < dh; ++c) s += q(i, c) * k(j, c);
    a[j] = s * scale;
  }
  softmax_inplace(std::span<T>(a));

  AotDecomposition<T> out{Tensor<T>::zeros(dh), Tensor<T>::zeros(dh), Tensor<T>(Shape{n}, a)};
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t c = 0; c < dh; ++c) {
      out.bias_term[c] += a[j] * pv(j, c);
      out.value_term[c] += a[j] * v(j, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t count_trainable(const PeftConfig& peft, const ModelConfig& model) {
  const std::uint64_t d = model.hidden;
  const std::uint64_t l = model.layers;
  const std::uint64_t f = model.ffn_dim();
  const std::uint64_t v = model.vocab_size;
  return std::visit(
      [&](const auto& c) -> std::uint64_t {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, AotKronConfig>) {
          return l * (c.a * c.r + c.b * c.r + c.r * c.r * d);
        } else if constexpr (std::is_same_v<C, AotFcConfig>) {
          return l * (2 * d * c.r + c.r + d);
        } else if constexpr (std::is_same_v<C, PTuningV1Config>) {
          return c.p * d;
        } else if constexpr (std::is_same_v<C, PTuningV2Config>) {
          return 2 * l * c.p * d;
        } else if constexpr (std::is_same_v<C, LoraConfig>) {
          return 8 * l * d * c.r;
        } else if constexpr (std::is_same_v<C, AdapterConfig>) {
          return l * 2 * (2 * d * c.r + c.r + d);
        } else if constexpr (std::is_same_v<C, BitFitConfig>) {
          // q, k, v, o, FFN out, two layer-norm shifts (d each) plus FFN in (f)
          return l * (7 * d + f);
        } else {
          return v * d + l * (4 * d * d + 2 * d * f + f + 9 * d);
        }
      },
      peft);
}

std::uint64_t count_trainable(const PeftConfig& peft, const ModelConfig& model, std::size_t num_classes) {
  return count_trainable(peft, model) + static_cast<std::uint64_t>(model.hidden) * num_classes + num_classes;
}

std::uint64_t fused_table_bytes(const ModelConfig& model, DType dtype) {
  return static_cast<std::uint64_t>(model.vocab_size) * model.hidden * model.layers * dtype_bytes(dtype);
}

#define AOTP_INSTANTIATE(T)                                                                                       \
  template class BiasTable<T>;                                                                                    \
  template Tensor<T> kron_row(const KronFactors<T>&, TokenId);                                                    \
  template Tensor<T> kron_dense(const KronFactors<T>&);                                                           \
  template Tensor<T> fc_row(const FCReparam<T>&, const Tensor<T>&, TokenId, Activation);                          \
  template Tensor<T> fc_rows(const FCReparam<T>&, const Tensor<T>&, Activation, Tensor<T>*, Tensor<T>*);          \
  template BiasTable<T> materialize_table(std::span<const KronFactors<T>>, std::size_t, DType);                   \
  template BiasTable<T> materialize_table(std::span<const FCReparam<T>>, const Tensor<T>&, Activation, DType);    \
  template T dropout_multiplier<T>(const DropoutSpec&, std::uint64_t, std::uint64_t) noexcept;                    \
  template Tensor<T> apply_aot(const Tensor<T>&, const Tensor<T>&, std::span<const TokenId>, const DropoutSpec&); \
  template Tensor<T> ptv1_prepend(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> ptv2_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                    const Tensor<T>&, std::span<const std::uint8_t>, Tensor<T>*);                 \
  template Ptv2Decomposition<T> decompose_ptv2_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                                         const Tensor<T>&, const Tensor<T>&, std::size_t);        \
  template Tensor<T> bitfit_shift(const Tensor<T>&, std::span<const T>);                                          \
  template Tensor<T> lora_linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,  \
                                 std::size_t, bool);                                                              \
  template Tensor<T> adapter_bottleneck(const Tensor<T>&, const AdapterBlock<T>&, Activation);                    \
  template AotDecomposition<T> decompose_aot_attention(const Tensor<T>&, const Tensor<T>&, const LayerWeights<T>&, \
                                                       std::size_t, std::size_t, std::size_t);

AOTP_INSTANTIATE(float)
AOTP_INSTANTIATE(double)

#undef AOTP_INSTANTIATE

}  // namespace aotp
