#include "aotp/forward.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "aotp/rng.hpp"

namespace aotp {

namespace {

template <typename T>
T* grad_ptr(GradPair<T>& p) {
  return p.grad ? p.grad->data() : nullptr;
}

template <typename T>
std::span<T> grad_span(GradPair<T>* p) {
  if (!p || !p->grad) return {};
  return p->grad->flat();
}

// base + delta when BitFit is active, base otherwise.
template <typename T>
std::span<const T> effective_bias(const GradPair<T>& base, const GradPair<T>* delta, Tensor<T>& storage) {
  if (!delta) return base.value.flat();
  storage = base.value;
  add_inplace(storage, delta->value);
  return storage.flat();
}

template <typename T>
Tensor<T> merged_lora_weight(const Tensor<T>& w, const LoraPair<T>& pair, T scale) {
  Tensor<T> merged = w;
  axpy_inplace(merged, scale, matmul(pair.a.value, pair.b.value));
  return merged;
}

// y = x W + b with an optional LoRA delta on W.
template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, std::span<const T> bias, const LoraState<T>* lora,
                  const LoraPair<T>* pair, Tensor<T>* xa) {
  Tensor<T> y;
  if (lora && lora->fused) {
    y = matmul(x, merged_lora_weight(w, *pair, static_cast<T>(lora->scale)));
  } else if (lora) {
    y = matmul(x, w);
    *xa = matmul(x, pair->a.value);
    axpy_inplace(y, static_cast<T>(lora->scale), matmul(*xa, pair->b.value));
  } else {
    y = matmul(x, w);
  }
  add_row_vector(y, bias);
  return y;
}

// Backward of project(): accumulates parameter grads and adds dL/dx to dx.
template <typename T>
void project_backward(const Tensor<T>& x, const Tensor<T>& dy, GradPair<T>& w, std::span<T> bias_grad,
                      const LoraState<T>* lora, LoraPair<T>* pair, const Tensor<T>* xa, Tensor<T>& dx) {
  const std::size_t n = x.rows();
  const std::size_t din = x.cols();
  const std::size_t dout = dy.cols();
  if (!bias_grad.empty()) accumulate_column_sums(dy, bias_grad);
  if (T* g = grad_ptr(w)) gemm_tn(x.data(), dy.data(), g, din, n, dout, true);
  if (!lora) {
    gemm_nt(dy.data(), w.value.data(), dx.data(), n, dout, din, true);
    return;
  }
  const T scale = static_cast<T>(lora->scale);
  const std::size_t r = pair->a.value.cols();
  if (lora->fused) {
    const Tensor<T> merged = merged_lora_weight(w.value, *pair, scale);
    Tensor<T> dm = Tensor<T>::zeros(din, dout);
    gemm_tn(x.data(), dy.data(), dm.data(), din, n, dout, false);
    if (pair->a.grad) axpy_inplace(*pair->a.grad, scale, matmul_nt(dm, pair->b.value));
    if (pair->b.grad) axpy_inplace(*pair->b.grad, scale, matmul_tn(pair->a.value, dm));
    gemm_nt(dy.data(), merged.data(), dx.data(), n, dout, din, true);
    return;
  }
  gemm_nt(dy.data(), w.value.data(), dx.data(), n, dout, din, true);
  if (pair->b.grad) axpy_inplace(*pair->b.grad, scale, matmul_tn(*xa, dy));
  Tensor<T> dxa = Tensor<T>::zeros(n, r);
  gemm_nt(dy.data(), pair->b.value.data(), dxa.data(), n, dout, r, false);
  if (pair->a.grad) axpy_inplace(*pair->a.grad, scale, matmul_tn(x, dxa));
  axpy_inplace(dx, scale, matmul_nt(dxa, pair->a.value));
}

// out = x + act(x W_d + b_d) W_u + b_u, same arithmetic as adapter_bottleneck.
template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const AdapterBlock<T>& block, Activation act, AdapterTrace<T>& tr) {
  Tensor<T> z = matmul(x, block.down.value);
  add_row_vector(z, block.down_bias.value.flat());
  tr.pre = z;
  activation_inplace(z, act);
  Tensor<T> delta = matmul(z, block.up.value);
  add_row_vector(delta, block.up_bias.value.flat());
  tr.input = x;
  tr.act = std::move(z);
  Tensor<T> out = x;
  add_inplace(out, delta);
  return out;
}

template <typename T>
Tensor<T> adapter_backward(const AdapterTrace<T>& tr, const Tensor<T>& dout, AdapterBlock<T>& block, Activation act) {
  const std::size_t n = dout.rows();
  const std::size_t d = dout.cols();
  const std::size_t r = block.down.value.cols();
  if (T* g = grad_ptr(block.up)) gemm_tn(tr.act.data(), dout.data(), g, r, n, d, true);
  if (block.up_bias.grad) accumulate_column_sums(dout, block.up_bias.grad->flat());
  Tensor<T> dpre = Tensor<T>::zeros(n, r);
  gemm_nt(dout.data(), block.up.value.data(), dpre.data(), n, d, r, false);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= activate_grad(act, tr.pre[i]);
  if (T* g = grad_ptr(block.down)) gemm_tn(tr.input.data(), dpre.data(), g, d, n, r, true);
  if (block.down_bias.grad) accumulate_column_sums(dpre, block.down_bias.grad->flat());
  Tensor<T> dx = dout;
  gemm_nt(dpre.data(), block.down.value.data(), dx.data(), n, r, d, true);
  return dx;
}

template <typename T>
void kron_outer_rows(const KronFactors<T>& f, std::span<const TokenId> tokens, Tensor<T>& outer) {
  const std::size_t r = f.rank();
  outer = Tensor<T>::zeros(tokens.size(), r * r);
  for (std::size_t a = 0; a < tokens.size(); ++a) {
    if (tokens[a] >= f.a() * f.b()) throw InputError("token outside the Kronecker factor range");
    auto left = f.left.value.row(tokens[a] / f.b());
    auto middle = f.middle.value.row(tokens[a] % f.b());
    T* out = outer.data() + a * r * r;
    for (std::size_t k = 0; k < r; ++k) {
      for (std::size_t m = 0; m < r; ++m) out[k * r + m] = left[k] * middle[m];
    }
  }
}

constexpr std::uint64_t kDropoutWord = 0xD50;

template <typename T>
const Backbone<T>& effective_backbone(const Backbone<T>& backbone, const Adaptation<T>& adaptation) {
  if (const auto* full = std::get_if<FullState<T>>(&adaptation.state); full && full->weights) return *full->weights;
  return backbone;
}

template <typename T>
void check_layers(std::size_t have, std::size_t want, const char* what) {
  if (have != want) {
    throw ShapeError(std::string(what) + ": state has " + std::to_string(have) + " layers, backbone has " +
                     std::to_string(want));
  }
}

}  // namespace

template <typename T>
Tensor<T> forward(std::span<const TokenId> tokens, const Backbone<T>& backbone, const Adaptation<T>& adaptation,
                  const ForwardOptions& options, ForwardTrace<T>* trace) {
  const ModelConfig& cfg = backbone.config;
  const std::size_t d = cfg.hidden;
  const std::size_t L = cfg.layers;
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq) {
    throw InputError("forward: sequence of " + std::to_string(tokens.size()) + " exceeds max_seq " +
                     std::to_string(cfg.max_seq));
  }
  if (adaptation.head.weight.value.rows() != d) throw ShapeError("forward: head width does not match the backbone");

  const Backbone<T>& weights = effective_backbone(backbone, adaptation);
  const auto* kron = std::get_if<KronState<T>>(&adaptation.state);
  const auto* fc = std::get_if<FcState<T>>(&adaptation.state);
  const auto* fused = std::get_if<FusedAotState<T>>(&adaptation.state);
  const auto* ptv1 = std::get_if<Ptv1State<T>>(&adaptation.state);
  const auto* ptv2 = std::get_if<Ptv2State<T>>(&adaptation.state);
  const auto* bitfit = std::get_if<BitFitState<T>>(&adaptation.state);
  const auto* lora = std::get_if<LoraState<T>>(&adaptation.state);
  const auto* adapter = std::get_if<AdapterState<T>>(&adaptation.state);
  if (kron) check_layers<T>(kron->layers.size(), L, "aot-kron");
  if (fc) check_layers<T>(fc->layers.size(), L, "aot-fc");
  if (ptv2) check_layers<T>(ptv2->layers.size(), L, "ptv2");
  if (bitfit) check_layers<T>(bitfit->layers.size(), L, "bitfit");
  if (lora) check_layers<T>(lora->layers.size(), L, "lora");
  if (adapter) check_layers<T>(adapter->layers.size(), L, "adapter");
  if (fused) {
    if (!fused->rows) throw ConfigError("fused adaptation without a table");
    check_layers<T>(fused->rows->num_layers(), L, "fused table");
    if (fused->rows->dim() != d) throw ShapeError("fused table width does not match the backbone");
  }

  ForwardTrace<T> local;
  ForwardTrace<T>& tr = trace ? *trace : local;
  tr = ForwardTrace<T>{};
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.options = options;

  std::vector<std::uint8_t> mask = padding_mask(tokens, cfg.pad_id);
  Tensor<T> h = embed(tokens, weights.embeddings.value);
  if (ptv1) {
    tr.offset = ptv1->prefix.value.rows();
    if (tr.offset > 0) {
      h = ptv1_prepend(ptv1->prefix.value, h);
      mask.insert(mask.begin(), tr.offset, std::uint8_t{1});
    }
  }
  tr.mask = mask;
  const std::size_t N = h.rows();

  std::vector<std::size_t> active;
  std::vector<TokenId> active_tokens;
  if (kron || fc || fused) {
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      if (tokens[j] == cfg.pad_id) continue;
      active.push_back(j);
      active_tokens.push_back(tokens[j]);
    }
  }
  const std::size_t na = active.size();
  const bool dropout_on = options.training && options.dropout > 0.0;
  const T eps = static_cast<T>(cfg.ln_eps);
  const std::size_t dh = cfg.head_dim();

  tr.layers.resize(L);
  for (std::size_t i = 0; i < L; ++i) {
    LayerTrace<T>& lt = tr.layers[i];
    const LayerWeights<T>& w = weights.layers[i];
    const BitFitDeltas<T>* delta = bitfit ? &bitfit->layers[i] : nullptr;
    const DropoutSpec drop{dropout_on, options.dropout, mix_key(options.dropout_key, kDropoutWord, i)};

    // Bias injection before the layer.
    if (na > 0) {
      Tensor<T> rows = Tensor<T>::zeros(na, d);
      if (kron) {
        Tensor<T> outer;
        kron_outer_rows(kron->layers[i], active_tokens, outer);
        const std::size_t r2 = outer.cols();
        gemm(outer.data(), kron->layers[i].right.value.data(), rows.data(), na, r2, d, false);
        if (dropout_on) {
          lt.aot_dropout = Tensor<T>::zeros(na, d);
          for (std::size_t a = 0; a < na; ++a) {
            for (std::size_t c = 0; c < d; ++c) {
              const T m = dropout_multiplier<T>(drop, active[a], c);
              lt.aot_dropout(a, c) = m;
              rows(a, c) *= m;
            }
          }
        }
      } else if (fc) {
        Tensor<T> inputs = Tensor<T>::zeros(na, d);
        for (std::size_t a = 0; a < na; ++a) {
          auto src = weights.embeddings.value.row(active_tokens[a]);
          std::copy(src.begin(), src.end(), inputs.row(a).begin());
          if (dropout_on) {
            for (std::size_t c = 0; c < d; ++c) inputs(a, c) *= dropout_multiplier<T>(drop, active[a], c);
          }
        }
        rows = fc_rows(fc->layers[i], inputs, fc->activation, &lt.fc_pre, &lt.fc_act);
        lt.fc_input = std::move(inputs);
      } else {
        fused->rows->gather(i, active_tokens, rows);
      }
      for (std::size_t a = 0; a < na; ++a) {
        auto dst = h.row(tr.offset + active[a]);
        auto src = rows.row(a);
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      lt.aot_rows = std::move(rows);
    }
    lt.input = h;

    // Attention sublayer.
    Tensor<T> storage[8];
    const auto beta1 = effective_bias(w.ln1_beta, delta ? &delta->ln1_beta : nullptr, storage[0]);
    lt.x1 = layer_norm(h, w.ln1_gamma.value.flat(), beta1, eps, &lt.ln1);
    const LoraLayer<T>* ll = lora ? &lora->layers[i] : nullptr;
    if (lora && !lora->fused) lt.lora_xa.resize(4);
    auto xa = [&](std::size_t p) { return lt.lora_xa.empty() ? nullptr : &lt.lora_xa[p]; };
    auto pair = [&](std::size_t p) { return ll ? &ll->proj[p] : nullptr; };
    lt.q = project(lt.x1, w.wq.value, effective_bias(w.bq, delta ? &delta->bq : nullptr, storage[1]), lora, pair(0),
                   xa(0));
    lt.k = project(lt.x1, w.wk.value, effective_bias(w.bk, delta ? &delta->bk : nullptr, storage[2]), lora, pair(1),
                   xa(1));
    lt.v = project(lt.x1, w.wv.value, effective_bias(w.bv, delta ? &delta->bv : nullptr, storage[3]), lora, pair(2),
                   xa(2));

    const std::size_t p2 = ptv2 ? ptv2->layers[i].keys.value.rows() : 0;
    std::vector<std::uint8_t> key_mask = mask;
    if (p2 > 0) key_mask.insert(key_mask.begin(), p2, std::uint8_t{1});
    lt.attn = Tensor<T>::zeros(N, d);
    lt.head_q.resize(cfg.heads);
    lt.head_k.resize(cfg.heads);
    lt.head_v.resize(cfg.heads);
    lt.probs.resize(cfg.heads);
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      const std::size_t c = head * dh;
      lt.head_q[head] = column_slice(lt.q, c, dh);
      lt.head_k[head] = column_slice(lt.k, c, dh);
      lt.head_v[head] = column_slice(lt.v, c, dh);
      if (p2 > 0) {
        lt.head_k[head] = ptv1_prepend(column_slice(ptv2->layers[i].keys.value, c, dh), lt.head_k[head]);
        lt.head_v[head] = ptv1_prepend(column_slice(ptv2->layers[i].values.value, c, dh), lt.head_v[head]);
      }
      write_column_slice(lt.attn, c,
                         attention(lt.head_q[head], lt.head_k[head], lt.head_v[head], key_mask, &lt.probs[head]));
    }
    Tensor<T> o = project(lt.attn, w.wo.value, effective_bias(w.bo, delta ? &delta->bo : nullptr, storage[4]), lora,
                          pair(3), xa(3));
    if (adapter) o = adapter_forward(o, adapter->layers[i].attn, adapter->activation, lt.adapter_attn);
    Tensor<T> h2 = h;
    add_inplace(h2, o);
    lt.h2 = h2;

    // Feed-forward sublayer.
    const auto beta2 = effective_bias(w.ln2_beta, delta ? &delta->ln2_beta : nullptr, storage[5]);
    lt.x2 = layer_norm(h2, w.ln2_gamma.value.flat(), beta2, eps, &lt.ln2);
    lt.z1 = matmul(lt.x2, w.w1.value);
    add_row_vector(lt.z1, effective_bias(w.b1, delta ? &delta->b1 : nullptr, storage[6]));
    lt.g = activation(lt.z1, cfg.activation);
    Tensor<T> f = matmul(lt.g, w.w2.value);
    add_row_vector(f, effective_bias(w.b2, delta ? &delta->b2 : nullptr, storage[7]));
    if (adapter) f = adapter_forward(f, adapter->layers[i].ffn, adapter->activation, lt.adapter_ffn);
    add_inplace(h2, f);
    h = std::move(h2);
  }

  auto pooled = h.row(tr.offset);
  tr.pooled = Tensor<T>(Shape{d}, std::vector<T>(pooled.begin(), pooled.end()));
  const std::size_t C = adaptation.head.num_classes();
  Tensor<T> logits(Shape{C});
  gemm(tr.pooled.data(), adaptation.head.weight.value.data(), logits.data(), 1, d, C, false);
  for (std::size_t k = 0; k < C; ++k) logits[k] += adaptation.head.bias.value[k];
  check_finite(logits, "forward logits");
  return logits;
}

template <typename T>
void backward(const ForwardTrace<T>& tr, const Tensor<T>& dlogits, const Backbone<T>& backbone,
              Adaptation<T>& adaptation) {
  const ModelConfig& cfg = backbone.config;
  const std::size_t d = cfg.hidden;
  const std::size_t C = adaptation.head.num_classes();
  if (dlogits.size() != C) throw ShapeError("backward: dlogits length does not match the head");
  if (tr.layers.size() != cfg.layers) throw ShapeError("backward: trace does not match the backbone");

  auto* full = std::get_if<FullState<T>>(&adaptation.state);
  Backbone<T>* fw = full && full->weights ? &*full->weights : nullptr;
  const Backbone<T>& weights = fw ? *fw : backbone;
  auto* kron = std::get_if<KronState<T>>(&adaptation.state);
  auto* fc = std::get_if<FcState<T>>(&adaptation.state);
  auto* ptv1 = std::get_if<Ptv1State<T>>(&adaptation.state);
  auto* ptv2 = std::get_if<Ptv2State<T>>(&adaptation.state);
  auto* bitfit = std::get_if<BitFitState<T>>(&adaptation.state);
  auto* lora = std::get_if<LoraState<T>>(&adaptation.state);
  auto* adapter = std::get_if<AdapterState<T>>(&adaptation.state);

  const std::size_t N = tr.mask.size();
  const Tensor<T>& wh = adaptation.head.weight.value;

  // Head.
  if (T* g = grad_ptr(adaptation.head.weight)) gemm_tn(tr.pooled.data(), dlogits.data(), g, d, 1, C, true);
  if (adaptation.head.bias.grad) add_inplace(*adaptation.head.bias.grad, dlogits.reshaped(Shape{C}));
  Tensor<T> dh = Tensor<T>::zeros(N, d);
  gemm_nt(dlogits.data(), wh.data(), dh.data() + tr.offset * d, 1, C, d, false);

  std::vector<std::size_t> active;
  std::vector<TokenId> active_tokens;
  for (std::size_t j = 0; j < tr.tokens.size(); ++j) {
    if (tr.tokens[j] == cfg.pad_id) continue;
    active.push_back(j);
    active_tokens.push_back(tr.tokens[j]);
  }

  const std::size_t dhd = cfg.head_dim();
  const T scale = T{1} / std::sqrt(static_cast<T>(dhd));

  for (std::size_t li = cfg.layers; li-- > 0;) {
    const LayerTrace<T>& lt = tr.layers[li];
    // Parameters that receive weight grads (Full) and bias-site grads (Full or BitFit).
    LayerWeights<T>* gw = fw ? &fw->layers[li] : nullptr;
    const LayerWeights<T>& w = weights.layers[li];
    BitFitDeltas<T>* delta = bitfit ? &bitfit->layers[li] : nullptr;
    auto site = [&](GradPair<T>* full_p, GradPair<T>* delta_p) -> std::span<T> {
      if (full_p) return grad_span(full_p);
      return grad_span(delta_p);
    };
    LoraLayer<T>* ll = lora ? &lora->layers[li] : nullptr;
    auto xa = [&](std::size_t p) -> const Tensor<T>* { return lt.lora_xa.empty() ? nullptr : &lt.lora_xa[p]; };
    auto pair = [&](std::size_t p) { return ll ? &ll->proj[p] : nullptr; };
    // project_backward wants a mutable GradPair for the weight; frozen weights have no grad.
    auto weight = [&](GradPair<T>* full_p, const GradPair<T>& frozen) -> GradPair<T>& {
      return full_p ? *full_p : const_cast<GradPair<T>&>(frozen);
    };

    // Feed-forward sublayer: out = h2 + adapter(g W2 + b2).
    Tensor<T> df = dh;
    if (adapter) df = adapter_backward(lt.adapter_ffn, df, adapter->layers[li].ffn, adapter->activation);
    const std::size_t F = cfg.ffn_dim();
    if (auto s = site(gw ? &gw->b2 : nullptr, delta ? &delta->b2 : nullptr); !s.empty()) accumulate_column_sums(df, s);
    if (gw) gemm_tn(lt.g.data(), df.data(), grad_ptr(gw->w2), F, N, d, true);
    Tensor<T> dz = Tensor<T>::zeros(N, F);
    gemm_nt(df.data(), w.w2.value.data(), dz.data(), N, d, F, false);
    for (std::size_t k = 0; k < dz.size(); ++k) dz[k] *= activate_grad(cfg.activation, lt.z1[k]);
    if (auto s = site(gw ? &gw->b1 : nullptr, delta ? &delta->b1 : nullptr); !s.empty()) accumulate_column_sums(dz, s);
    if (gw) gemm_tn(lt.x2.data(), dz.data(), grad_ptr(gw->w1), d, N, F, true);
    Tensor<T> dx2 = Tensor<T>::zeros(N, d);
    gemm_nt(dz.data(), w.w1.value.data(), dx2.data(), N, F, d, false);
    Tensor<T> dh2 = dh;
    add_inplace(dh2, layer_norm_backward(dx2, lt.ln2, w.ln2_gamma.value.flat(),
                                         gw ? grad_span(&gw->ln2_gamma) : std::span<T>{},
                                         site(gw ? &gw->ln2_beta : nullptr, delta ? &delta->ln2_beta : nullptr)));

    // Attention sublayer: h2 = h + adapter(attn W_O + b_O).
    Tensor<T> dout = dh2;
    if (adapter) dout = adapter_backward(lt.adapter_attn, dout, adapter->layers[li].attn, adapter->activation);
    Tensor<T> dattn = Tensor<T>::zeros(N, d);
    project_backward(lt.attn, dout, weight(gw ? &gw->wo : nullptr, w.wo),
                     site(gw ? &gw->bo : nullptr, delta ? &delta->bo : nullptr), lora, pair(3), xa(3), dattn);

    const std::size_t p2 = ptv2 ? ptv2->layers[li].keys.value.rows() : 0;
    Tensor<T> dq = Tensor<T>::zeros(N, d);
    Tensor<T> dk = Tensor<T>::zeros(N, d);
    Tensor<T> dv = Tensor<T>::zeros(N, d);
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      const std::size_t c = head * dhd;
      const Tensor<T>& P = lt.probs[head];
      const Tensor<T>& hq = lt.head_q[head];
      const Tensor<T>& hk = lt.head_k[head];
      const Tensor<T>& hv = lt.head_v[head];
      const std::size_t M = hk.rows();
      const Tensor<T> dho = column_slice(dattn, c, dhd);
      Tensor<T> dP = matmul_nt(dho, hv);
      Tensor<T> dV = matmul_tn(P, dho);
      for (std::size_t r = 0; r < N; ++r) {
        auto prow = P.row(r);
        auto grow = dP.row(r);
        T dot{0};
        for (std::size_t j = 0; j < M; ++j) dot += prow[j] * grow[j];
        for (std::size_t j = 0; j < M; ++j) grow[j] = prow[j] * (grow[j] - dot) * scale;
      }
      Tensor<T> dQ = matmul(dP, hk);
      Tensor<T> dK = matmul_tn(dP, hq);
      add_column_slice(dq, c, dQ);
      if (p2 > 0) {
        auto& pref = ptv2->layers[li];
        auto split = [&](const Tensor<T>& full_grad, Tensor<T>& seq_grad, GradPair<T>& prefix) {
          Tensor<T> top(Shape{p2, dhd}, std::vector<T>(full_grad.data(), full_grad.data() + p2 * dhd));
          Tensor<T> rest(Shape{N, dhd}, std::vector<T>(full_grad.data() + p2 * dhd, full_grad.data() + M * dhd));
          if (prefix.grad) add_column_slice(*prefix.grad, c, top);
          add_column_slice(seq_grad, c, rest);
        };
        split(dK, dk, pref.keys);
        split(dV, dv, pref.values);
      } else {
        add_column_slice(dk, c, dK);
        add_column_slice(dv, c, dV);
      }
    }

    Tensor<T> dx1 = Tensor<T>::zeros(N, d);
    project_backward(lt.x1, dq, weight(gw ? &gw->wq : nullptr, w.wq),
                     site(gw ? &gw->bq : nullptr, delta ? &delta->bq : nullptr), lora, pair(0), xa(0), dx1);
    project_backward(lt.x1, dk, weight(gw ? &gw->wk : nullptr, w.wk),
                     site(gw ? &gw->bk : nullptr, delta ? &delta->bk : nullptr), lora, pair(1), xa(1), dx1);
    project_backward(lt.x1, dv, weight(gw ? &gw->wv : nullptr, w.wv),
                     site(gw ? &gw->bv : nullptr, delta ? &delta->bv : nullptr), lora, pair(2), xa(2), dx1);
    dh = std::move(dh2);
    add_inplace(dh, layer_norm_backward(dx1, lt.ln1, w.ln1_gamma.value.flat(),
                                        gw ? grad_span(&gw->ln1_gamma) : std::span<T>{},
                                        site(gw ? &gw->ln1_beta : nullptr, delta ? &delta->ln1_beta : nullptr)));

    // Bias injection: the added rows see the same gradient as the hidden state.
    const std::size_t na = active.size();
    if (na > 0 && (kron || fc)) {
      Tensor<T> g = Tensor<T>::zeros(na, d);
      for (std::size_t a = 0; a < na; ++a) {
        auto src = dh.row(tr.offset + active[a]);
        std::copy(src.begin(), src.end(), g.row(a).begin());
      }
      if (kron) {
        auto& f = kron->layers[li];
        if (!lt.aot_dropout.empty()) {
          for (std::size_t k = 0; k < g.size(); ++k) g[k] *= lt.aot_dropout[k];
        }
        Tensor<T> outer;
        kron_outer_rows(f, active_tokens, outer);
        const std::size_t r = f.rank();
        if (T* gr = grad_ptr(f.right)) gemm_tn(outer.data(), g.data(), gr, r * r, na, d, true);
        Tensor<T> douter = Tensor<T>::zeros(na, r * r);
        gemm_nt(g.data(), f.right.value.data(), douter.data(), na, d, r * r, false);
        for (std::size_t a = 0; a < na; ++a) {
          const std::size_t il = active_tokens[a] / f.b();
          const std::size_t im = active_tokens[a] % f.b();
          auto left = f.left.value.row(il);
          auto middle = f.middle.value.row(im);
          const T* dout_row = douter.data() + a * r * r;
          for (std::size_t k = 0; k < r; ++k) {
            for (std::size_t m = 0; m < r; ++m) {
              const T go = dout_row[k * r + m];
              if (f.left.grad) (*f.left.grad)(il, k) += go * middle[m];
              if (f.middle.grad) (*f.middle.grad)(im, m) += go * left[k];
            }
          }
        }
      } else {
        auto& f = fc->layers[li];
        const std::size_t r = f.w1.value.cols();
        if (T* gw2 = grad_ptr(f.w2)) gemm_tn(lt.fc_act.data(), g.data(), gw2, r, na, d, true);
        if (f.b2.grad) accumulate_column_sums(g, f.b2.grad->flat());
        Tensor<T> dpre = Tensor<T>::zeros(na, r);
        gemm_nt(g.data(), f.w2.value.data(), dpre.data(), na, d, r, false);
        for (std::size_t k = 0; k < dpre.size(); ++k) dpre[k] *= activate_grad(fc->activation, lt.fc_pre[k]);
        if (T* gw1 = grad_ptr(f.w1)) gemm_tn(lt.fc_input.data(), dpre.data(), gw1, d, na, r, true);
        if (f.b1.grad) accumulate_column_sums(dpre, f.b1.grad->flat());
      }
    }
  }

  if (ptv1 && ptv1->prefix.grad && tr.offset > 0) {
    T* g = ptv1->prefix.grad->data();
    for (std::size_t k = 0; k < tr.offset * d; ++k) g[k] += dh[k];
  }
  if (fw && fw->embeddings.grad) {
    for (std::size_t j = 0; j < tr.tokens.size(); ++j) {
      auto dst = fw->embeddings.grad->row(tr.tokens[j]);
      auto src = dh.row(tr.offset + j);
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  }
}

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::size_t label, Tensor<T>* dlogits) {
  const std::size_t C = logits.size();
  if (label >= C) {
    throw InputError("label " + std::to_string(label) + " outside " + std::to_string(C) + " classes");
  }
  check_finite(logits, "cross_entropy logits");
  T mx = logits[0];
  for (std::size_t k = 1; k < C; ++k) mx = std::max(mx, logits[k]);
  T sum{0};
  for (std::size_t k = 0; k < C; ++k) sum += std::exp(logits[k] - mx);
  const T lse = mx + std::log(sum);
  if (dlogits) {
    *dlogits = Tensor<T>(Shape{C});
    for (std::size_t k = 0; k < C; ++k) (*dlogits)[k] = std::exp(logits[k] - lse);
    (*dlogits)[label] -= T{1};
  }
  return lse - logits[label];
}

template <typename T>
T accumulate_example_gradient(std::span<const TokenId> tokens, std::size_t label, const Backbone<T>& backbone,
                              Adaptation<T>& adaptation, const ForwardOptions& options, T grad_scale) {
  ForwardTrace<T> trace;
  const Tensor<T> logits = forward(tokens, backbone, adaptation, options, &trace);
  Tensor<T> dlogits;
  const T loss = cross_entropy(logits, label, &dlogits);
  for (auto& v : dlogits.flat()) v *= grad_scale;
  backward(trace, dlogits, backbone, adaptation);
  return loss;
}

#define AOTP_INSTANTIATE(T)                                                                                     \
  template Tensor<T> forward(std::span<const TokenId>, const Backbone<T>&, const Adaptation<T>&,               \
                             const ForwardOptions&, ForwardTrace<T>*);                                          \
  template void backward(const ForwardTrace<T>&, const Tensor<T>&, const Backbone<T>&, Adaptation<T>&);         \
  template T cross_entropy(const Tensor<T>&, std::size_t, Tensor<T>*);                                          \
  template T accumulate_example_gradient(std::span<const TokenId>, std::size_t, const Backbone<T>&,             \
                                         Adaptation<T>&, const ForwardOptions&, T);

AOTP_INSTANTIATE(float)
AOTP_INSTANTIATE(double)

#undef AOTP_INSTANTIATE

}  // namespace aotp
