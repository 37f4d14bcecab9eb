#include "aotp/backbone.hpp"

#include <cmath>
#include <string>

#include "aotp/numerics.hpp"

namespace aotp {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
  if (hidden < 2) throw ConfigError("hidden size must be at least 2");
  if (layers < 1) throw ConfigError("need at least one layer");
  if (heads < 1 || hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (ffn_mult < 1) throw ConfigError("ffn_mult must be at least 1");
  if (max_seq < 1) throw ConfigError("max_seq must be at least 1");
  if (pad_id >= vocab_size) throw ConfigError("pad_id outside the vocabulary");
}

DType dtype_from_bits(int bits) {
  if (bits == 16) return DType::f16;
  if (bits == 32) return DType::f32;
  throw ConfigError("unsupported dtype width " + std::to_string(bits) + " (expected 16 or 32)");
}

template <typename T>
void fill_normal(Tensor<T>& t, CounterRng& rng, double scale) {
  for (auto& v : t.flat()) v = static_cast<T>(rng.normal() * scale);
}

template <typename T>
Backbone<T> Backbone<T>::random(const ModelConfig& config, std::uint64_t seed, const BackboneInit& init) {
  config.validate();
  const std::size_t d = config.hidden;
  const std::size_t f = config.ffn_dim();
  CounterRng rng(seed, 0xBAC0);

  auto normal = [&](Shape shape, double scale) {
    Tensor<T> t(std::move(shape));
    fill_normal(t, rng, scale);
    return GradPair<T>(std::move(t));
  };
  auto ones = [&](std::size_t n) {
    Tensor<T> t(Shape{n});
    t.fill(T{1});
    return GradPair<T>(std::move(t));
  };

  Backbone<T> b;
  b.config = config;
  b.embeddings = normal({config.vocab_size, d}, init.embedding_scale);
  b.layers.resize(config.layers);
  for (auto& w : b.layers) {
    w.wq = normal({d, d}, init.weight_scale);
    w.wk = normal({d, d}, init.weight_scale);
    w.wv = normal({d, d}, init.weight_scale);
    w.wo = normal({d, d}, init.weight_scale);
    w.bq = normal({d}, init.bias_scale);
    w.bk = normal({d}, init.bias_scale);
    w.bv = normal({d}, init.bias_scale);
    w.bo = normal({d}, init.bias_scale);
    w.w1 = normal({d, f}, init.weight_scale);
    w.b1 = normal({f}, init.bias_scale);
    w.w2 = normal({f, d}, init.weight_scale);
    w.b2 = normal({d}, init.bias_scale);
    w.ln1_gamma = ones(d);
    w.ln1_beta = normal({d}, init.bias_scale);
    w.ln2_gamma = ones(d);
    w.ln2_beta = normal({d}, init.bias_scale);
  }
  return b;
}

template <typename T>
template <typename U>
Backbone<U> Backbone<T>::cast() const {
  Backbone<U> out;
  out.config = config;
  out.embeddings = GradPair<U>(embeddings.value.template cast<U>(), embeddings.trainable());
  out.layers.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    std::vector<const GradPair<T>*> src;
    layers[i].for_each_param([&](std::string_view, const GradPair<T>& p) { src.push_back(&p); });
    std::size_t k = 0;
    out.layers[i].for_each_param([&](std::string_view, GradPair<U>& p) {
      p = GradPair<U>(src[k]->value.template cast<U>(), src[k]->trainable());
      ++k;
    });
  }
  return out;
}

template <typename T>
Head<T> Head<T>::random(std::size_t hidden, std::size_t num_classes, CounterRng& rng, double scale) {
  if (num_classes < 1) throw ConfigError("head needs at least one class");
  Head<T> h;
  Tensor<T> w(Shape{hidden, num_classes});
  fill_normal(w, rng, scale);
  h.weight = GradPair<T>(std::move(w));
  h.bias = GradPair<T>(Tensor<T>(Shape{num_classes}));
  return h;
}

template <typename T>
Tensor<T> embed(std::span<const TokenId> tokens, const Tensor<T>& embeddings) {
  const std::size_t d = embeddings.cols();
  Tensor<T> out = Tensor<T>::zeros(tokens.size(), d);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    if (tokens[j] >= embeddings.rows()) {
      throw InputError("token id " + std::to_string(tokens[j]) + " outside vocabulary of " +
                       std::to_string(embeddings.rows()));
    }
    auto src = embeddings.row(tokens[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  return out;
}

std::vector<std::uint8_t> padding_mask(std::span<const TokenId> tokens, TokenId pad_id) {
  std::vector<std::uint8_t> mask(tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) mask[j] = tokens[j] != pad_id;
  return mask;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::span<const std::uint8_t> key_mask,
                    Tensor<T>* probs) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("attention: expected matrices");
  if (q.cols() != k.cols()) throw ShapeError("attention: query/key width mismatch");
  if (k.rows() != v.rows()) throw ShapeError("attention: key/value length mismatch");
  if (!key_mask.empty() && key_mask.size() != k.rows()) throw ShapeError("attention: mask length mismatch");

  const T scale = T{1} / std::sqrt(static_cast<T>(q.cols()));
  Tensor<T> scores = Tensor<T>::zeros(q.rows(), k.rows());
  gemm_nt(q.data(), k.data(), scores.data(), q.rows(), q.cols(), k.rows(), false);
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto row = scores.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] *= scale;
      if (!key_mask.empty() && !key_mask[j]) row[j] += static_cast<T>(kMaskPenalty);
    }
  }
  if (!all_finite(std::span<const T>(scores.flat()))) throw NumericError("attention: non-finite scores");
  for (std::size_t i = 0; i < scores.rows(); ++i) softmax_inplace(scores.row(i));
  Tensor<T> out = Tensor<T>::zeros(q.rows(), v.cols());
  gemm(scores.data(), v.data(), out.data(), scores.rows(), scores.cols(), v.cols(), false);
  if (probs) *probs = std::move(scores);
  return out;
}

template <typename T>
Tensor<T> column_slice(const Tensor<T>& m, std::size_t col, std::size_t width) {
  Tensor<T> out = Tensor<T>::zeros(m.rows(), width);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const T* src = m.data() + i * m.cols() + col;
    std::copy(src, src + width, out.data() + i * width);
  }
  return out;
}

template <typename T>
void write_column_slice(Tensor<T>& m, std::size_t col, const Tensor<T>& part) {
  for (std::size_t i = 0; i < part.rows(); ++i) {
    std::copy(part.data() + i * part.cols(), part.data() + (i + 1) * part.cols(), m.data() + i * m.cols() + col);
  }
}

template <typename T>
void add_column_slice(Tensor<T>& m, std::size_t col, const Tensor<T>& part) {
  for (std::size_t i = 0; i < part.rows(); ++i) {
    T* dst = m.data() + i * m.cols() + col;
    const T* src = part.data() + i * part.cols();
    for (std::size_t j = 0; j < part.cols(); ++j) dst[j] += src[j];
  }
}

template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& h, const LayerWeights<T>& w, const ModelConfig& config,
                        std::span<const std::uint8_t> key_mask) {
  const std::size_t d = config.hidden;
  if (h.cols() != d) throw ShapeError("encoder_layer: hidden width mismatch");
  const T eps = static_cast<T>(config.ln_eps);

  Tensor<T> x1 = layer_norm(h, w.ln1_gamma.value.flat(), w.ln1_beta.value.flat(), eps);
  auto project = [&](const GradPair<T>& wm, const GradPair<T>& b) {
    Tensor<T> y = matmul(x1, wm.value);
    add_row_vector(y, b.value.flat());
    return y;
  };
  const Tensor<T> q = project(w.wq, w.bq);
  const Tensor<T> k = project(w.wk, w.bk);
  const Tensor<T> v = project(w.wv, w.bv);

  const std::size_t dh = config.head_dim();
  Tensor<T> attn = Tensor<T>::zeros(h.rows(), d);
  for (std::size_t head = 0; head < config.heads; ++head) {
    const std::size_t c = head * dh;
    write_column_slice(attn, c, attention(column_slice(q, c, dh), column_slice(k, c, dh), column_slice(v, c, dh), key_mask));
  }
  Tensor<T> o = matmul(attn, w.wo.value);
  add_row_vector(o, w.bo.value.flat());
  Tensor<T> h2 = h;
  add_inplace(h2, o);

  Tensor<T> x2 = layer_norm(h2, w.ln2_gamma.value.flat(), w.ln2_beta.value.flat(), eps);
  Tensor<T> z = matmul(x2, w.w1.value);
  add_row_vector(z, w.b1.value.flat());
  activation_inplace(z, config.activation);
  Tensor<T> f = matmul(z, w.w2.value);
  add_row_vector(f, w.b2.value.flat());
  add_inplace(h2, f);
  return h2;
}

#define AOTP_INSTANTIATE(T)                                                                                     \
  template void fill_normal(Tensor<T>&, CounterRng&, double);                                                   \
  template struct Backbone<T>;                                                                                  \
  template struct Head<T>;                                                                                      \
  template Tensor<T> embed(std::span<const TokenId>, const Tensor<T>&);                                         \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>, \
                               Tensor<T>*);                                                                     \
  template Tensor<T> column_slice(const Tensor<T>&, std::size_t, std::size_t);                                  \
  template void write_column_slice(Tensor<T>&, std::size_t, const Tensor<T>&);                                  \
  template void add_column_slice(Tensor<T>&, std::size_t, const Tensor<T>&);                                    \
  template Tensor<T> encoder_layer(const Tensor<T>&, const LayerWeights<T>&, const ModelConfig&,                \
                                   std::span<const std::uint8_t>);

AOTP_INSTANTIATE(float)
AOTP_INSTANTIATE(double)
template Backbone<double> Backbone<float>::cast<double>() const;
template Backbone<float> Backbone<double>::cast<float>() const;
template Backbone<float> Backbone<float>::cast<float>() const;
template Backbone<double> Backbone<double>::cast<double>() const;

#undef AOTP_INSTANTIATE

}  // namespace aotp
