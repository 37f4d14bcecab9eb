#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "aotp/config.hpp"
#include "aotp/rng.hpp"
#include "aotp/tensor.hpp"

namespace aotp {

template <typename T>
struct LayerWeights {
  GradPair<T> wq, wk, wv, wo;  // d x d
  GradPair<T> bq, bk, bv, bo;  // d
  GradPair<T> w1;              // d x f
  GradPair<T> b1;              // f
  GradPair<T> w2;              // f x d
  GradPair<T> b2;              // d
  GradPair<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // d

  template <typename F>
  void for_each_param(F&& f) {
    f("wq", wq); f("wk", wk); f("wv", wv); f("wo", wo);
    f("bq", bq); f("bk", bk); f("bv", bv); f("bo", bo);
    f("w1", w1); f("b1", b1); f("w2", w2); f("b2", b2);
    f("ln1_gamma", ln1_gamma); f("ln1_beta", ln1_beta);
    f("ln2_gamma", ln2_gamma); f("ln2_beta", ln2_beta);
  }

  template <typename F>
  void for_each_param(F&& f) const {
    const_cast<LayerWeights*>(this)->for_each_param(
        [&](std::string_view name, GradPair<T>& p) { f(name, static_cast<const GradPair<T>&>(p)); });
  }
};

// Scales for random initialization. Every entry is standard normal times the
// scale; layer-norm gains start at one.
struct BackboneInit {
  double embedding_scale = 0.02;
  double weight_scale = 0.02;
  double bias_scale = 0.02;
};

template <typename T>
struct Backbone {
  ModelConfig config;
  GradPair<T> embeddings;  // |V| x d
  std::vector<LayerWeights<T>> layers;

  static Backbone random(const ModelConfig& config, std::uint64_t seed, const BackboneInit& init = {});

  template <typename F>
  void for_each_param(F&& f) {
    f("embeddings", embeddings);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].for_each_param([&](std::string_view name, GradPair<T>& p) {
        f("layers." + std::to_string(i) + "." + std::string(name), p);
      });
    }
  }

  void set_trainable(bool on) {
    for_each_param([on](const std::string&, GradPair<T>& p) { p.set_trainable(on); });
  }

  template <typename U>
  Backbone<U> cast() const;
};

// Per-task classification head on the pooled hidden state.
template <typename T>
struct Head {
  GradPair<T> weight;  // d x C
  GradPair<T> bias;    // C

  static Head random(std::size_t hidden, std::size_t num_classes, CounterRng& rng, double scale = 0.02);

  std::size_t num_classes() const noexcept { return bias.value.size(); }

  template <typename U>
  Head<U> cast() const {
    Head<U> h;
    h.weight = GradPair<U>(weight.value.template cast<U>(), weight.trainable());
    h.bias = GradPair<U>(bias.value.template cast<U>(), bias.trainable());
    return h;
  }
};

template <typename T>
void fill_normal(Tensor<T>& t, CounterRng& rng, double scale);

// H0 row j = E[tokens[j]]. Throws InputError for ids outside the vocabulary.
template <typename T>
Tensor<T> embed(std::span<const TokenId> tokens, const Tensor<T>& embeddings);

// softmax(Q K^T / sqrt(d_h) + penalty) V, where masked keys (mask[j] == 0)
// receive a -1e9 penalty. `probs`, when given, receives the weight matrix.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> key_mask = {}, Tensor<T>* probs = nullptr);

inline constexpr double kMaskPenalty = -1e9;

// Builds the attendable-key mask for a token sequence: pad positions are 0.
std::vector<std::uint8_t> padding_mask(std::span<const TokenId> tokens, TokenId pad_id);

// Copies columns [col, col + width) of m into a contiguous matrix, and back.
template <typename T>
Tensor<T> column_slice(const Tensor<T>& m, std::size_t col, std::size_t width);

template <typename T>
void write_column_slice(Tensor<T>& m, std::size_t col, const Tensor<T>& part);

template <typename T>
void add_column_slice(Tensor<T>& m, std::size_t col, const Tensor<T>& part);

// One pre-norm encoder block with no fine-tuning hooks:
//   H2 = H + MHA(LN1(H)),  out = H2 + FFN(LN2(H2)).
template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& h, const LayerWeights<T>& w, const ModelConfig& config,
                        std::span<const std::uint8_t> key_mask = {});

}  // namespace aotp
