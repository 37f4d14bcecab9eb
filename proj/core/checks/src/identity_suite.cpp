#include <algorithm>
#include <chrono>
#include <cmath>

#include "aotp/checks.hpp"
#include "aotp/forward.hpp"

namespace aotp::checks {

namespace {

ModelConfig identity_model() {
  ModelConfig m;
  m.vocab_size = 50;
  m.hidden = 16;
  m.layers = 2;
  m.heads = 2;
  m.max_seq = 32;
  return m;
}

Tensor<double> random_matrix(std::size_t rows, std::size_t cols, CounterRng& rng, double scale = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(rows, cols);
  fill_normal(t, rng, scale);
  return t;
}

double max_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Row i of single-head attention computed directly on H' = H + P.
struct DirectHead {
  Tensor<double> out;
  Tensor<double> probs;
};

DirectHead direct_head(const Tensor<double>& h_prime, const LayerWeights<double>& w, std::size_t heads,
                       std::size_t head) {
  const std::size_t dh = h_prime.cols() / heads;
  auto proj = [&](const GradPair<double>& wt, const GradPair<double>& b) {
    Tensor<double> y = matmul(h_prime, wt.value);
    add_row_vector(y, b.value.flat());
    return column_slice(y, head * dh, dh);
  };
  DirectHead r;
  r.out = attention(proj(w.wq, w.bq), proj(w.wk, w.bk), proj(w.wv, w.bv), {}, &r.probs);
  return r;
}

// Randomly perturbs every parameter so trained-looking states are exercised.
template <typename T>
void perturb(Adaptation<T>& a, std::uint64_t seed, double scale) {
  CounterRng rng(seed, 0x7E57);
  a.for_each_param([&](const std::string&, GradPair<T>& p) {
    for (auto& v : p.value.flat()) v += static_cast<T>(scale * rng.normal());
  });
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, CounterRng& rng, bool pad_tail) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(1 + rng.below(vocab - 1));
  if (pad_tail && n > 2) t.back() = 0;
  return t;
}

}  // namespace

SuiteReport identity_suite(const IdentitySuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report{"identity", {}, 0.0};
  const ModelConfig model = identity_model();
  const std::size_t d = model.hidden;
  const std::size_t dh = model.head_dim();
  const double tol = options.tolerance;
  const std::size_t lengths[3] = {1, 2, 8};

  // (a) AoT attention decomposition versus direct attention on H + P_x.
  {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
      const auto bb = Backbone<double>::random(model, seed, BackboneInit{0.5, 0.3, 0.2});
      CounterRng rng(seed, 0xA4);
      const std::size_t n = lengths[seed % 3];
      const Tensor<double> h = random_matrix(n, d, rng);
      const Tensor<double> p = random_matrix(n, d, rng);
      Tensor<double> h_prime = h;
      add_inplace(h_prime, p);
      for (std::size_t head = 0; head < model.heads; ++head) {
        const DirectHead direct = direct_head(h_prime, bb.layers[0], model.heads, head);
        for (std::size_t i = 0; i < n; ++i) {
          const auto dec = decompose_aot_attention(h, p, bb.layers[0], model.heads, head, i);
          Tensor<double> sum = dec.bias_term;
          add_inplace(sum, dec.value_term);
          worst = std::max(worst, max_diff(sum.flat(), direct.out.row(i)));
          worst = std::max(worst, max_diff(dec.weights.flat(), direct.probs.row(i)));
        }
      }
    }
    report.checks.push_back({"aot decomposition equals direct attention", worst < tol, worst,
                             std::to_string(options.seeds) + " seeds, n in {1, 2, 8}, every head and query"});
  }

  // (b) Constant rows: the bias term is b W_V at every query position, and
  // the weights equal those of attention on H + {b, ..., b}. Input-dependent
  // rows change the weight matrix.
  {
    double term_err = 0.0;
    double position_spread = 0.0;
    double weight_err = 0.0;
    std::size_t contrasts = 0;
    for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
      const auto bb = Backbone<double>::random(model, seed, BackboneInit{0.5, 0.3, 0.2});
      const auto& w = bb.layers[0];
      CounterRng rng(seed, 0xB5);
      const std::size_t n = 8;
      const Tensor<double> h = random_matrix(n, d, rng);
      const Tensor<double> b = random_matrix(1, d, rng);
      Tensor<double> rows = Tensor<double>::zeros(n, d);
      for (std::size_t j = 0; j < n; ++j) std::copy(b.flat().begin(), b.flat().end(), rows.row(j).begin());
      const Tensor<double> shifted = bitfit_shift(h, b.flat());
      const Tensor<double> varied = random_matrix(n, d, rng);
      const Tensor<double> bwv = matmul(b, w.wv.value);
      for (std::size_t head = 0; head < model.heads; ++head) {
        const Tensor<double> expected = column_slice(bwv, head * dh, dh);
        const DirectHead direct = direct_head(shifted, w, model.heads, head);
        Tensor<double> first;
        for (std::size_t i = 0; i < n; ++i) {
          const auto dec = decompose_aot_attention(h, rows, w, model.heads, head, i);
          term_err = std::max(term_err, max_diff(dec.bias_term.flat(), expected.flat()));
          if (i == 0) first = dec.bias_term;
          position_spread = std::max(position_spread, max_diff(dec.bias_term.flat(), first.flat()));
          weight_err = std::max(weight_err, max_diff(dec.weights.flat(), direct.probs.row(i)));
          const auto other = decompose_aot_attention(h, varied, w, model.heads, head, i);
          if (max_diff(other.weights.flat(), dec.weights.flat()) > 1e-6) ++contrasts;
        }
      }
    }
    report.checks.push_back({"constant bias term equals b W_V", term_err < tol, term_err, ""});
    report.checks.push_back(
        {"constant bias term is query-position independent", position_spread < tol, position_spread, ""});
    report.checks.push_back({"constant bias weights equal attention on H + {b, ..., b}", weight_err < tol,
                             weight_err, ""});
    report.checks.push_back({"input-dependent rows change the attention map", contrasts > 0,
                             static_cast<double>(contrasts), "cases with a different weight row"});
  }

  // (c) PTv2 decomposition versus direct prefix attention.
  {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
      CounterRng rng(seed, 0xC6);
      const std::size_t n = lengths[seed % 3];
      const std::size_t p = 1 + seed % 4;
      const Tensor<double> q = random_matrix(n, dh, rng);
      const Tensor<double> k = random_matrix(n, dh, rng);
      const Tensor<double> v = random_matrix(n, dh, rng);
      const Tensor<double> pk = random_matrix(p, dh, rng);
      const Tensor<double> pv = random_matrix(p, dh, rng);
      const Tensor<double> direct = ptv2_attention(q, k, v, pk, pv);
      for (std::size_t i = 0; i < n; ++i) {
        const auto dec = decompose_ptv2_attention(q, k, v, pk, pv, i);
        Tensor<double> sum = dec.prefix_term;
        add_inplace(sum, dec.sequence_term);
        worst = std::max(worst, max_diff(sum.flat(), direct.row(i)));
      }
    }
    report.checks.push_back({"ptv2 decomposition equals prefix attention", worst < tol, worst, ""});
  }

  // (d) LoRA fused versus unfused, as an operator and through the model.
  {
    double op_err = 0.0;
    double model_err = 0.0;
    for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
      CounterRng rng(seed, 0xD7);
      const std::size_t r = 1 + seed % 4;
      const Tensor<double> x = random_matrix(5, d, rng);
      const Tensor<double> w = random_matrix(d, d, rng);
      const Tensor<double> a = random_matrix(d, r, rng);
      const Tensor<double> b = random_matrix(r, d, rng);
      const double alpha = 0.5 + static_cast<double>(seed % 7);
      op_err = std::max(op_err, max_abs_diff(lora_linear(x, w, a, b, alpha, r, true),
                                             lora_linear(x, w, a, b, alpha, r, false)));
      if (seed % 10 == 0) {
        const auto bb = Backbone<double>::random(model, seed);
        auto unfused = make_adaptation<double>(LoraConfig{r, alpha, false}, bb, 3, seed);
        perturb(unfused, seed, 0.1);
        auto fused = unfused;
        fused.config = LoraConfig{r, alpha, true};
        std::get<LoraState<double>>(fused.state).fused = true;
        const auto tokens = random_tokens(8, model.vocab_size, rng, seed % 20 == 0);
        model_err = std::max(model_err, max_abs_diff(forward<double>(tokens, bb, fused),
                                                     forward<double>(tokens, bb, unfused)));
        const auto merged = merge_lora(bb, std::get<LoraState<double>>(unfused.state));
        const auto plain = vanilla_adaptation(unfused.head);
        model_err = std::max(model_err, max_abs_diff(forward<double>(tokens, merged, plain),
                                                     forward<double>(tokens, bb, unfused)));
      }
    }
    report.checks.push_back({"lora fused equals unfused (operator)", op_err < tol, op_err, ""});
    report.checks.push_back({"lora fused and merged equal unfused (model)", model_err < tol, model_err, ""});
  }

  // (e) Fusion: the materialized table reproduces on-the-fly rows exactly.
  {
    double kron_err = 0.0;
    double fc_err = 0.0;
    for (std::uint64_t seed = 0; seed < options.seeds; seed += 5) {
      const auto bb = Backbone<double>::random(model, seed);
      CounterRng rng(seed, 0xE8);
      const auto tokens = random_tokens(1 + seed % 12, model.vocab_size, rng, seed % 2 == 1);
      auto kron = make_adaptation<double>(AotKronConfig{7, 8, 3}, bb, 2, seed);
      perturb(kron, seed, 0.1);
      kron_err = std::max(kron_err, max_abs_diff(forward<double>(tokens, bb, kron),
                                                 forward<double>(tokens, bb, fuse_aot(kron, bb))));
      auto fc = make_adaptation<double>(AotFcConfig{6, Activation::gelu}, bb, 2, seed);
      perturb(fc, seed, 0.1);
      fc_err = std::max(fc_err, max_abs_diff(forward<double>(tokens, bb, fc),
                                             forward<double>(tokens, bb, fuse_aot(fc, bb))));
    }
    report.checks.push_back({"kron fused forward equals on-the-fly forward", kron_err == 0.0, kron_err,
                             "exact equality required"});
    report.checks.push_back({"fc fused forward equals on-the-fly forward", fc_err == 0.0, fc_err,
                             "exact equality required"});
  }

  // (f) Documented initializations leave the logits bit-identical.
  {
    const std::vector<PeftConfig> neutral = {AotKronConfig{7, 8, 3}, AotFcConfig{6, Activation::gelu},
                                             LoraConfig{3, 3.0, false}, LoraConfig{3, 3.0, true},
                                             AdapterConfig{4, Activation::gelu}, BitFitConfig{},
                                             PTuningV1Config{0}, PTuningV2Config{0}};
    for (const auto& config : neutral) {
      std::size_t mismatches = 0;
      for (std::uint64_t seed = 0; seed < options.seeds; seed += 10) {
        const auto bb = Backbone<double>::random(model, seed);
        CounterRng rng(seed, 0xF9);
        const auto tokens = random_tokens(1 + seed % 10, model.vocab_size, rng, seed % 20 == 10);
        const auto a = make_adaptation<double>(config, bb, 3, seed);
        const auto vanilla = vanilla_adaptation(a.head);
        if (!(forward<double>(tokens, bb, a) == forward<double>(tokens, bb, vanilla))) ++mismatches;
      }
      std::string name = std::string(method_name(method_of(config)));
      if (const auto* l = std::get_if<LoraConfig>(&config)) name += l->fused ? " (fused)" : " (unfused)";
      if (std::holds_alternative<PTuningV1Config>(config) || std::holds_alternative<PTuningV2Config>(config)) {
        name += " p=0";
      }
      report.checks.push_back({"zero init is neutral: " + name, mismatches == 0, static_cast<double>(mismatches),
                               "seeds with logits differing from vanilla"});
    }
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace aotp::checks
