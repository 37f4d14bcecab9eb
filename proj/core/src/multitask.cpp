#include <cmath>
#include <optional>
#include <unordered_map>

#include "aotp/forward.hpp"
#include "aotp/taskstore.hpp"

namespace aotp {

template <typename T>
std::string structural_mode(const Adaptation<T>& adaptation) {
  return std::visit(
      [&](const auto& s) -> std::string {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, FullState<T>>) {
          return s.weights ? "single:full" : "vanilla";
        } else if constexpr (std::is_same_v<S, KronState<T>> || std::is_same_v<S, FcState<T>> ||
                             std::is_same_v<S, FusedAotState<T>>) {
          return "aot";
        } else if constexpr (std::is_same_v<S, Ptv1State<T>>) {
          return "ptv1:p=" + std::to_string(s.prefix.value.rows());
        } else if constexpr (std::is_same_v<S, Ptv2State<T>>) {
          return "ptv2:p=" + std::to_string(s.layers.empty() ? 0 : s.layers[0].keys.value.rows());
        } else if constexpr (std::is_same_v<S, BitFitState<T>>) {
          return "bitfit";
        } else if constexpr (std::is_same_v<S, LoraState<T>>) {
          const std::size_t r = s.layers.empty() ? 0 : s.layers[0].proj[0].a.value.cols();
          return (s.fused ? "single:lora-fused:r=" : "lora:r=") + std::to_string(r);
        } else {
          const std::size_t r = s.layers.empty() ? 0 : s.layers[0].attn.down.value.cols();
          return "adapter:r=" + std::to_string(r) + ":" + std::string(to_string(s.activation));
        }
      },
      adaptation.state);
}

namespace {

template <typename T>
Tensor<T> take_rows(const Tensor<T>& m, std::size_t start, std::size_t count) {
  const std::size_t c = m.cols();
  std::vector<T> data(m.data() + start * c, m.data() + (start + count) * c);
  return Tensor<T>(Shape{count, c}, std::move(data));
}

template <typename T>
void put_rows(Tensor<T>& m, std::size_t start, const Tensor<T>& part) {
  std::copy(part.flat().begin(), part.flat().end(), m.data() + start * m.cols());
}

// One example inside the stacked batch.
template <typename T>
struct Segment {
  const Adaptation<T>* adaptation = nullptr;
  std::span<const TokenId> tokens;
  std::size_t start = 0;   // first row in the stacked matrix
  std::size_t offset = 0;  // PTv1 prefix rows before the tokens
  std::size_t rows = 0;
  std::vector<std::uint8_t> mask;

  const BitFitDeltas<T>* bitfit(std::size_t layer) const {
    const auto* s = std::get_if<BitFitState<T>>(&adaptation->state);
    return s ? &s->layers[layer] : nullptr;
  }
};

// base, or base + delta exactly as the single-task forward forms it.
template <typename T>
Tensor<T> site_bias(const GradPair<T>& base, const GradPair<T>* delta) {
  Tensor<T> b = base.value;
  if (delta) add_inplace(b, delta->value);
  return b;
}

template <typename T>
void add_segment_bias(Tensor<T>& y, const Segment<T>& seg, std::span<const T> bias) {
  for (std::size_t r = 0; r < seg.rows; ++r) {
    auto row = y.row(seg.start + r);
    for (std::size_t c = 0; c < bias.size(); ++c) row[c] += bias[c];
  }
}

// y = x W for all rows, then per segment the LoRA delta and the bias.
template <typename T>
Tensor<T> batched_project(const Tensor<T>& x, const Tensor<T>& w, std::span<const Segment<T>> segs,
                          std::size_t layer, std::size_t proj, const GradPair<T>& base_bias,
                          GradPair<T> BitFitDeltas<T>::*delta_member) {
  Tensor<T> y = matmul(x, w);
  for (const auto& seg : segs) {
    if (const auto* lora = std::get_if<LoraState<T>>(&seg.adaptation->state); lora && !lora->fused) {
      const LoraPair<T>& pair = lora->layers[layer].proj[proj];
      const Tensor<T> xs = take_rows(x, seg.start, seg.rows);
      Tensor<T> ys = take_rows(y, seg.start, seg.rows);
      axpy_inplace(ys, static_cast<T>(lora->scale), matmul(matmul(xs, pair.a.value), pair.b.value));
      put_rows(y, seg.start, ys);
    }
    const BitFitDeltas<T>* delta = seg.bitfit(layer);
    add_segment_bias<T>(y, seg, site_bias(base_bias, delta ? &(delta->*delta_member) : nullptr).flat());
  }
  return y;
}

template <typename T>
void batched_adapter(Tensor<T>& y, std::span<const Segment<T>> segs, std::size_t layer, bool attn_block) {
  for (const auto& seg : segs) {
    const auto* ad = std::get_if<AdapterState<T>>(&seg.adaptation->state);
    if (!ad) continue;
    const AdapterBlock<T>& block = attn_block ? ad->layers[layer].attn : ad->layers[layer].ffn;
    put_rows(y, seg.start, adapter_bottleneck(take_rows(y, seg.start, seg.rows), block, ad->activation));
  }
}

template <typename T>
Tensor<T> batched_layer_norm(const Tensor<T>& h, std::span<const Segment<T>> segs, std::size_t layer,
                             const GradPair<T>& gamma, const GradPair<T>& beta,
                             GradPair<T> BitFitDeltas<T>::*delta_member, T eps) {
  Tensor<T> out = Tensor<T>::zeros(h.rows(), h.cols());
  for (const auto& seg : segs) {
    const BitFitDeltas<T>* delta = seg.bitfit(layer);
    const Tensor<T> b = site_bias(beta, delta ? &(delta->*delta_member) : nullptr);
    put_rows(out, seg.start, layer_norm(take_rows(h, seg.start, seg.rows), gamma.value.flat(), b.flat(), eps));
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> multitask_forward(const TaskRegistry<T>& registry, std::span<const TaskRequest> batch) {
  if (batch.empty()) return {};
  const Backbone<T>& shared = registry.backbone();
  const ModelConfig& cfg = shared.config;
  const std::size_t d = cfg.hidden;

  std::vector<const TaskBundle<T>*> bundles;
  for (const auto& req : batch) bundles.push_back(&registry.at(req.task_id));
  const std::string mode = structural_mode(bundles[0]->adaptation);
  for (std::size_t b = 1; b < bundles.size(); ++b) {
    const std::string other = structural_mode(bundles[b]->adaptation);
    if (other != mode) {
      throw BatchCompositionError("batch mixes structural modes '" + mode + "' and '" + other + "'");
    }
  }
  // Methods that rewrite backbone weights can share a pass with themselves only.
  std::optional<Backbone<T>> merged;
  const Backbone<T>* weights = &shared;
  if (mode.starts_with("single:")) {
    for (const auto* b : bundles) {
      if (b != bundles[0]) {
        throw BatchCompositionError("mode '" + mode + "' changes backbone weights and cannot mix tasks in one batch");
      }
    }
    const auto& state = bundles[0]->adaptation.state;
    if (const auto* full = std::get_if<FullState<T>>(&state)) {
      weights = &*full->weights;
    } else {
      merged = merge_lora(shared, std::get<LoraState<T>>(state));
      weights = &*merged;
    }
  }

  // Stack every example (with its PTv1 prefix) into one matrix.
  std::vector<Segment<T>> segs(batch.size());
  std::size_t total = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Segment<T>& s = segs[b];
    s.adaptation = &bundles[b]->adaptation;
    s.tokens = batch[b].tokens;
    if (s.tokens.empty()) throw InputError("multitask_forward: empty token sequence");
    if (s.tokens.size() > cfg.max_seq) throw InputError("multitask_forward: sequence exceeds max_seq");
    if (const auto* p1 = std::get_if<Ptv1State<T>>(&s.adaptation->state)) s.offset = p1->prefix.value.rows();
    s.start = total;
    s.rows = s.offset + s.tokens.size();
    s.mask = padding_mask(s.tokens, cfg.pad_id);
    s.mask.insert(s.mask.begin(), s.offset, std::uint8_t{1});
    total += s.rows;
  }
  Tensor<T> h = Tensor<T>::zeros(total, d);
  for (const auto& s : segs) {
    Tensor<T> h0 = embed(s.tokens, weights->embeddings.value);
    if (s.offset > 0) h0 = ptv1_prepend(std::get<Ptv1State<T>>(s.adaptation->state).prefix.value, h0);
    put_rows(h, s.start, h0);
  }

  const T eps = static_cast<T>(cfg.ln_eps);
  const std::size_t dh = cfg.head_dim();
  using D = BitFitDeltas<T>;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const LayerWeights<T>& w = weights->layers[i];

    // Per-example bias rows, gathered from each task's own table.
    for (const auto& s : segs) {
      const auto& state = s.adaptation->state;
      const auto* kron = std::get_if<KronState<T>>(&state);
      const auto* fc = std::get_if<FcState<T>>(&state);
      const auto* fused = std::get_if<FusedAotState<T>>(&state);
      if (!kron && !fc && !fused) continue;
      std::vector<std::size_t> active;
      std::vector<TokenId> ids;
      for (std::size_t j = 0; j < s.tokens.size(); ++j) {
        if (s.tokens[j] == cfg.pad_id) continue;
        active.push_back(j);
        ids.push_back(s.tokens[j]);
      }
      if (ids.empty()) continue;
      Tensor<T> rows = Tensor<T>::zeros(ids.size(), d);
      if (kron) {
        for (std::size_t a = 0; a < ids.size(); ++a) {
          const Tensor<T> row = kron_row(kron->layers[i], ids[a]);
          std::copy(row.flat().begin(), row.flat().end(), rows.row(a).begin());
        }
      } else if (fc) {
        Tensor<T> inputs = Tensor<T>::zeros(ids.size(), d);
        for (std::size_t a = 0; a < ids.size(); ++a) {
          auto src = weights->embeddings.value.row(ids[a]);
          std::copy(src.begin(), src.end(), inputs.row(a).begin());
        }
        rows = fc_rows(fc->layers[i], inputs, fc->activation);
      } else {
        fused->rows->gather(i, ids, rows);
      }
      for (std::size_t a = 0; a < ids.size(); ++a) {
        auto dst = h.row(s.start + s.offset + active[a]);
        auto src = rows.row(a);
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    }

    // Attention sublayer: shared projections over all rows.
    const Tensor<T> x1 = batched_layer_norm<T>(h, segs, i, w.ln1_gamma, w.ln1_beta, &D::ln1_beta, eps);
    const Tensor<T> q = batched_project<T>(x1, w.wq.value, segs, i, 0, w.bq, &D::bq);
    const Tensor<T> k = batched_project<T>(x1, w.wk.value, segs, i, 1, w.bk, &D::bk);
    const Tensor<T> v = batched_project<T>(x1, w.wv.value, segs, i, 2, w.bv, &D::bv);
    Tensor<T> attn = Tensor<T>::zeros(total, d);
    for (const auto& s : segs) {
      const auto* ptv2 = std::get_if<Ptv2State<T>>(&s.adaptation->state);
      const std::size_t p2 = ptv2 ? ptv2->layers[i].keys.value.rows() : 0;
      std::vector<std::uint8_t> key_mask = s.mask;
      if (p2 > 0) key_mask.insert(key_mask.begin(), p2, std::uint8_t{1});
      const Tensor<T> qs = take_rows(q, s.start, s.rows);
      const Tensor<T> ks = take_rows(k, s.start, s.rows);
      const Tensor<T> vs = take_rows(v, s.start, s.rows);
      Tensor<T> out = Tensor<T>::zeros(s.rows, d);
      for (std::size_t head = 0; head < cfg.heads; ++head) {
        const std::size_t c = head * dh;
        Tensor<T> hk = column_slice(ks, c, dh);
        Tensor<T> hv = column_slice(vs, c, dh);
        if (p2 > 0) {
          hk = ptv1_prepend(column_slice(ptv2->layers[i].keys.value, c, dh), hk);
          hv = ptv1_prepend(column_slice(ptv2->layers[i].values.value, c, dh), hv);
        }
        write_column_slice(out, c, attention(column_slice(qs, c, dh), hk, hv, key_mask));
      }
      put_rows(attn, s.start, out);
    }
    Tensor<T> o = batched_project<T>(attn, w.wo.value, segs, i, 3, w.bo, &D::bo);
    batched_adapter(o, std::span<const Segment<T>>(segs), i, true);
    add_inplace(h, o);

    // Feed-forward sublayer.
    const Tensor<T> x2 = batched_layer_norm<T>(h, segs, i, w.ln2_gamma, w.ln2_beta, &D::ln2_beta, eps);
    Tensor<T> z = matmul(x2, w.w1.value);
    for (const auto& s : segs) {
      const D* delta = s.bitfit(i);
      add_segment_bias<T>(z, s, site_bias(w.b1, delta ? &delta->b1 : nullptr).flat());
    }
    activation_inplace(z, cfg.activation);
    Tensor<T> f = matmul(z, w.w2.value);
    for (const auto& s : segs) {
      const D* delta = s.bitfit(i);
      add_segment_bias<T>(f, s, site_bias(w.b2, delta ? &delta->b2 : nullptr).flat());
    }
    batched_adapter(f, std::span<const Segment<T>>(segs), i, false);
    add_inplace(h, f);
  }

  std::vector<Tensor<T>> logits;
  logits.reserve(segs.size());
  for (const auto& s : segs) {
    const Head<T>& head = s.adaptation->head;
    const std::size_t C = head.num_classes();
    Tensor<T> out(Shape{C});
    gemm(h.row(s.start + s.offset).data(), head.weight.value.data(), out.data(), 1, d, C, false);
    for (std::size_t c = 0; c < C; ++c) out[c] += head.bias.value[c];
    check_finite(out, "multitask logits");
    logits.push_back(std::move(out));
  }
  return logits;
}

template std::string structural_mode<float>(const Adaptation<float>&);
template std::string structural_mode<double>(const Adaptation<double>&);
template std::vector<Tensor<float>> multitask_forward<float>(const TaskRegistry<float>&,
                                                             std::span<const TaskRequest>);
template std::vector<Tensor<double>> multitask_forward<double>(const TaskRegistry<double>&,
                                                               std::span<const TaskRequest>);

}  // namespace aotp
