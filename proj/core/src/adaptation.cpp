#include "aotp/adaptation.hpp"

#include "aotp/numerics.hpp"

namespace aotp {

namespace {

constexpr std::uint64_t kMethodStream = 0xADA0;
constexpr std::uint64_t kHeadStream = 0x4EAD;

}  // namespace

template <typename T>
std::uint64_t Adaptation<T>::trainable_scalars(bool include_head) const {
  std::uint64_t total = 0;
  auto count = [&](const std::string&, GradPair<T>& p) {
    if (p.trainable()) total += p.value.size();
  };
  auto& self = const_cast<Adaptation<T>&>(*this);
  if (include_head) {
    self.for_each_param(count);
  } else {
    self.for_each_method_param(count);
  }
  return total;
}

template <typename T>
std::size_t Adaptation<T>::prefix_length() const noexcept {
  if (const auto* s = std::get_if<Ptv1State<T>>(&state)) return s->prefix.value.rows();
  if (const auto* s = std::get_if<Ptv2State<T>>(&state)) {
    return s->layers.empty() ? 0 : s->layers.front().keys.value.rows();
  }
  return 0;
}

template <typename T>
Adaptation<T> make_adaptation(const PeftConfig& config, const Backbone<T>& backbone, std::size_t num_classes,
                              std::uint64_t seed, double init_scale) {
  const ModelConfig& model = backbone.config;
  validate(config, model);
  const std::size_t d = model.hidden;
  const std::size_t l = model.layers;

  CounterRng rng(seed, kMethodStream + static_cast<std::uint64_t>(config.index()));
  auto random = [&](std::size_t rows, std::size_t cols) {
    Tensor<T> t(rows == 0 ? Shape{0, cols} : Shape{rows, cols});
    fill_normal(t, rng, init_scale);
    return GradPair<T>(std::move(t), true);
  };
  auto zeros = [&](Shape shape) { return GradPair<T>(Tensor<T>(std::move(shape)), true); };

  Adaptation<T> out;
  out.config = config;
  std::visit(
      [&](const auto& c) {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, AotKronConfig>) {
          KronState<T> s;
          for (std::size_t i = 0; i < l; ++i) {
            KronFactors<T> f;
            f.left = random(c.a, c.r);
            f.middle = random(c.b, c.r);
            f.right = zeros({c.r * c.r, d});
            s.layers.push_back(std::move(f));
          }
          out.state = std::move(s);
        } else if constexpr (std::is_same_v<C, AotFcConfig>) {
          FcState<T> s;
          s.activation = c.activation;
          for (std::size_t i = 0; i < l; ++i) {
            FCReparam<T> f;
            f.w1 = random(d, c.r);
            f.b1 = zeros({c.r});
            f.w2 = zeros({c.r, d});
            f.b2 = zeros({d});
            s.layers.push_back(std::move(f));
          }
          out.state = std::move(s);
        } else if constexpr (std::is_same_v<C, PTuningV1Config>) {
          out.state = Ptv1State<T>{random(c.p, d)};
        } else if constexpr (std::is_same_v<C, PTuningV2Config>) {
          Ptv2State<T> s;
          for (std::size_t i = 0; i < l; ++i) s.layers.push_back({random(c.p, d), random(c.p, d)});
          out.state = std::move(s);
        } else if constexpr (std::is_same_v<C, BitFitConfig>) {
          const std::size_t f = model.ffn_dim();
          BitFitState<T> s;
          for (std::size_t i = 0; i < l; ++i) {
            s.layers.push_back({zeros({d}), zeros({d}), zeros({d}), zeros({d}), zeros({f}), zeros({d}), zeros({d}),
                                zeros({d})});
          }
          out.state = std::move(s);
        } else if constexpr (std::is_same_v<C, LoraConfig>) {
          LoraState<T> s;
          s.scale = c.alpha / static_cast<double>(c.r);
          s.fused = c.fused;
          for (std::size_t i = 0; i < l; ++i) {
            LoraLayer<T> layer;
            for (auto& p : layer.proj) {
              p.a = random(d, c.r);
              p.b = zeros({c.r, d});
            }
            s.layers.push_back(std::move(layer));
          }
          out.state = std::move(s);
        } else if constexpr (std::is_same_v<C, AdapterConfig>) {
          AdapterState<T> s;
          s.activation = c.activation;
          auto block = [&] { return AdapterBlock<T>{random(d, c.r), zeros({c.r}), zeros({c.r, d}), zeros({d})}; };
          for (std::size_t i = 0; i < l; ++i) {
            AdapterLayer<T> layer;
            layer.attn = block();
            layer.ffn = block();
            s.layers.push_back(std::move(layer));
          }
          out.state = std::move(s);
        } else {
          FullState<T> s;
          s.weights = backbone;
          s.weights->set_trainable(true);
          out.state = std::move(s);
        }
      },
      config);

  CounterRng head_rng(seed, kHeadStream);
  out.head = Head<T>::random(d, num_classes, head_rng, init_scale);
  out.head.weight.set_trainable(true);
  out.head.bias.set_trainable(true);
  return out;
}

template <typename T>
Adaptation<T> vanilla_adaptation(Head<T> head) {
  Adaptation<T> out;
  out.config = FullConfig{};
  out.state = FullState<T>{};
  out.head = std::move(head);
  return out;
}

template <typename T>
Adaptation<T> fuse_aot(const Adaptation<T>& trained, const Backbone<T>& backbone, DType dtype) {
  Adaptation<T> out;
  out.config = trained.config;
  out.head = Head<T>{GradPair<T>(trained.head.weight.value), GradPair<T>(trained.head.bias.value)};
  if (const auto* kron = std::get_if<KronState<T>>(&trained.state)) {
    out.state = FusedAotState<T>{std::make_shared<const BiasTable<T>>(
        materialize_table(std::span<const KronFactors<T>>(kron->layers), backbone.config.vocab_size, dtype))};
  } else if (const auto* fc = std::get_if<FcState<T>>(&trained.state)) {
    out.state = FusedAotState<T>{std::make_shared<const BiasTable<T>>(materialize_table(
        std::span<const FCReparam<T>>(fc->layers), backbone.embeddings.value, fc->activation, dtype))};
  } else if (std::holds_alternative<FusedAotState<T>>(trained.state)) {
    out.state = trained.state;
  } else {
    throw ConfigError("fuse_aot: adaptation is not an AoT reparametrization");
  }
  return out;
}

template <typename T>
Backbone<T> merge_lora(const Backbone<T>& backbone, const LoraState<T>& lora) {
  if (lora.layers.size() != backbone.layers.size()) throw ShapeError("merge_lora: layer count mismatch");
  Backbone<T> out = backbone;
  const T scale = static_cast<T>(lora.scale);
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    auto& w = out.layers[i];
    GradPair<T>* targets[4] = {&w.wq, &w.wk, &w.wv, &w.wo};
    for (std::size_t p = 0; p < 4; ++p) {
      const auto& pair = lora.layers[i].proj[p];
      axpy_inplace(targets[p]->value, scale, matmul(pair.a.value, pair.b.value));
    }
  }
  return out;
}

#define AOTP_INSTANTIATE(T)                                                                                 \
  template struct Adaptation<T>;                                                                            \
  template Adaptation<T> make_adaptation(const PeftConfig&, const Backbone<T>&, std::size_t, std::uint64_t, \
                                         double);                                                           \
  template Adaptation<T> vanilla_adaptation(Head<T>);                                                       \
  template Adaptation<T> fuse_aot(const Adaptation<T>&, const Backbone<T>&, DType);                         \
  template Backbone<T> merge_lora(const Backbone<T>&, const LoraState<T>&);

AOTP_INSTANTIATE(float)
AOTP_INSTANTIATE(double)

#undef AOTP_INSTANTIATE

}  // namespace aotp
