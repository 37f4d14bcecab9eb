#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "aotp/backbone.hpp"
#include "aotp/peft.hpp"

namespace aotp {

// Per-method trainable (or fused, read-only) state.

template <typename T>
struct FullState {
  // Trainable copy of the backbone. Empty means "use the frozen backbone as
  // is", which is the vanilla model.
  std::optional<Backbone<T>> weights;
};

template <typename T>
struct KronState {
  std::vector<KronFactors<T>> layers;
};

template <typename T>
struct FcState {
  std::vector<FCReparam<T>> layers;
  Activation activation = Activation::gelu;
};

// AoT after fusion: bias rows come from a table in memory or on disk.
template <typename T>
struct FusedAotState {
  std::shared_ptr<const RowSource<T>> rows;
};

template <typename T>
struct Ptv1State {
  GradPair<T> prefix;  // p x d
};

template <typename T>
struct Ptv2State {
  std::vector<PrefixPair<T>> layers;
};

template <typename T>
struct BitFitState {
  std::vector<BitFitDeltas<T>> layers;
};

template <typename T>
struct LoraState {
  std::vector<LoraLayer<T>> layers;
  double scale = 1.0;  // alpha / r
  bool fused = false;
};

template <typename T>
struct AdapterState {
  std::vector<AdapterLayer<T>> layers;
  Activation activation = Activation::gelu;
};

template <typename T>
using MethodState = std::variant<FullState<T>, KronState<T>, FcState<T>, FusedAotState<T>, Ptv1State<T>, Ptv2State<T>,
                                 BitFitState<T>, LoraState<T>, AdapterState<T>>;

// Everything one task owns on top of the shared backbone.
template <typename T>
struct Adaptation {
  PeftConfig config = FullConfig{};
  MethodState<T> state;
  Head<T> head;

  // Visits method parameters (not the head) as (name, GradPair&).
  template <typename F>
  void for_each_method_param(F&& f);

  // Method parameters followed by the head.
  template <typename F>
  void for_each_param(F&& f) {
    for_each_method_param(f);
    f("head.weight", head.weight);
    f("head.bias", head.bias);
  }

  void zero_grad() {
    for_each_param([](const std::string&, GradPair<T>& p) { p.zero_grad(); });
  }

  // Number of scalars in gradient-bearing tensors, counted by enumeration.
  std::uint64_t trainable_scalars(bool include_head) const;

  // Structural prefix length (PTv1 / PTv2), 0 otherwise.
  std::size_t prefix_length() const noexcept;
};

// Initial state per method: Kron W_L, W_M random and W_R zero; FC W_1 random
// and W_2, b_1, b_2 zero; LoRA A random and B zero; adapter W_u zero; BitFit
// deltas zero; prefixes random. The head is random with a zero bias.
template <typename T>
Adaptation<T> make_adaptation(const PeftConfig& config, const Backbone<T>& backbone, std::size_t num_classes,
                              std::uint64_t seed, double init_scale = 0.02);

// The unmodified backbone with the given head.
template <typename T>
Adaptation<T> vanilla_adaptation(Head<T> head);

// Replaces a Kron or FC reparametrization with its materialized table.
template <typename T>
Adaptation<T> fuse_aot(const Adaptation<T>& trained, const Backbone<T>& backbone, DType dtype = DType::f32);

// Backbone with W + scale * A B folded into each attention projection.
template <typename T>
Backbone<T> merge_lora(const Backbone<T>& backbone, const LoraState<T>& lora);

// ---------------------------------------------------------------------------

template <typename T>
template <typename F>
void Adaptation<T>::for_each_method_param(F&& f) {
  auto per_layer = [&](auto& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "layers." + std::to_string(i) + ".";
      layers[i].for_each_param([&](const std::string& name, GradPair<T>& p) { f(prefix + name, p); });
    }
  };
  std::visit(
      [&](auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, FullState<T>>) {
          if (s.weights) s.weights->for_each_param([&](const std::string& name, GradPair<T>& p) { f(name, p); });
        } else if constexpr (std::is_same_v<S, Ptv1State<T>>) {
          f("prefix", s.prefix);
        } else if constexpr (std::is_same_v<S, FusedAotState<T>>) {
          // Fused tables are read-only.
        } else {
          per_layer(s.layers);
        }
      },
      state);
}

}  // namespace aotp
