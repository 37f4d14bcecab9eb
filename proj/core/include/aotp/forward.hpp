#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "aotp/adaptation.hpp"
#include "aotp/backbone.hpp"
#include "aotp/numerics.hpp"

namespace aotp {

struct ForwardOptions {
  bool training = false;
  double dropout = 0.1;
  std::uint64_t dropout_key = 0;
};

template <typename T>
struct AdapterTrace {
  Tensor<T> input;
  Tensor<T> pre;
  Tensor<T> act;
};

template <typename T>
struct LayerTrace {
  Tensor<T> aot_rows;     // n x d bias rows as added (after dropout)
  Tensor<T> aot_dropout;  // n x d multipliers (Kron: on rows, FC: on E rows)
  Tensor<T> fc_input;     // n x d E rows after dropout
  Tensor<T> fc_pre;       // n x r
  Tensor<T> fc_act;       // n x r

  Tensor<T> input;  // hidden state entering the block, after bias injection
  LayerNormCache<T> ln1;
  Tensor<T> x1;
  Tensor<T> q, k, v;
  std::vector<Tensor<T>> lora_xa;  // X A for q, k, v, o when LoRA is active
  std::vector<Tensor<T>> head_q;   // N x d_h
  std::vector<Tensor<T>> head_k;   // (p + N) x d_h incl. prefix
  std::vector<Tensor<T>> head_v;
  std::vector<Tensor<T>> probs;    // N x (p + N)
  Tensor<T> attn;
  AdapterTrace<T> adapter_attn;
  Tensor<T> h2;
  LayerNormCache<T> ln2;
  Tensor<T> x2;
  Tensor<T> z1, g;
  AdapterTrace<T> adapter_ffn;
};

template <typename T>
struct ForwardTrace {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> mask;  // N entries (prefix + tokens)
  std::size_t offset = 0;          // PTv1 prefix length
  std::vector<LayerTrace<T>> layers;
  Tensor<T> pooled;                // d
  ForwardOptions options;
};

// Embeds, runs every layer with the method's hooks, pools the first sequence
// position (after any PTv1 prefix) and applies the task head. Pad tokens are
// excluded as attention keys and receive no AoT bias.
template <typename T>
Tensor<T> forward(std::span<const TokenId> tokens, const Backbone<T>& backbone, const Adaptation<T>& adaptation,
                  const ForwardOptions& options = {}, ForwardTrace<T>* trace = nullptr);

// Accumulates dL/dtheta into every gradient-bearing tensor of `adaptation`.
template <typename T>
void backward(const ForwardTrace<T>& trace, const Tensor<T>& dlogits, const Backbone<T>& backbone,
              Adaptation<T>& adaptation);

// Cross-entropy of one example; writes dL/dlogits when asked.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::size_t label, Tensor<T>* dlogits = nullptr);

// forward + cross_entropy + backward with the gradient scaled by grad_scale.
template <typename T>
T accumulate_example_gradient(std::span<const TokenId> tokens, std::size_t label, const Backbone<T>& backbone,
                              Adaptation<T>& adaptation, const ForwardOptions& options, T grad_scale);

}  // namespace aotp
