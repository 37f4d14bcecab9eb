#include <gtest/gtest.h>

#include <cmath>

#include "aotp/adaptation.hpp"
#include "aotp/error.hpp"
#include "aotp/half.hpp"
#include "aotp/numerics.hpp"
#include "oracles.hpp"

using namespace aotp;

namespace {

KronFactors<double> random_kron(std::size_t a, std::size_t b, std::size_t r, std::size_t d, std::uint64_t seed) {
  KronFactors<double> f;
  f.left = GradPair<double>(oracle::random(a, r, seed));
  f.middle = GradPair<double>(oracle::random(b, r, seed + 1));
  f.right = GradPair<double>(oracle::random(r * r, d, seed + 2));
  return f;
}

FCReparam<double> random_fc(std::size_t d, std::size_t r, std::uint64_t seed) {
  FCReparam<double> f;
  f.w1 = GradPair<double>(oracle::random(d, r, seed));
  f.b1 = GradPair<double>(oracle::random(1, r, seed + 1).reshaped(Shape{r}));
  f.w2 = GradPair<double>(oracle::random(r, d, seed + 2));
  f.b2 = GradPair<double>(oracle::random(1, d, seed + 3).reshaped(Shape{d}));
  return f;
}

ModelConfig model(std::size_t vocab, std::size_t d, std::size_t l, std::size_t heads) {
  ModelConfig m;
  m.vocab_size = vocab;
  m.hidden = d;
  m.layers = l;
  m.heads = heads;
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Kronecker and FC reparametrizations
// ---------------------------------------------------------------------------

TEST(Kron, RowsMatchTextbookKroneckerProduct) {
  const std::size_t a = 3, b = 4, r = 2, d = 5;
  const auto f = random_kron(a, b, r, d, 10);
  // (W_L kron W_M)[i * b + j][k * r + m] = W_L[i][k] * W_M[j][m]
  oracle::Mat kron(a * b, std::vector<double>(r * r));
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t m = 0; m < r; ++m) kron[i * b + j][k * r + m] = f.left.value(i, k) * f.middle.value(j, m);
  const auto want = oracle::matmul(kron, oracle::to_mat(f.right.value));
  EXPECT_LT(oracle::max_abs(oracle::to_mat(kron_dense(f)), want), 1e-13);
  for (TokenId v = 0; v < a * b; ++v) {
    const auto row = kron_row(f, v);
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(row[c], want[v][c], 1e-13);
  }
}

TEST(Kron, ZeroRightFactorGivesZeroRows) {
  auto f = random_kron(2, 2, 2, 3, 11);
  f.right.value.fill(0.0);
  for (TokenId v = 0; v < 4; ++v) {
    const auto row = kron_row(f, v);
    for (double x : row.flat()) EXPECT_EQ(x, 0.0);
  }
}

TEST(Fc, RowMatchesDefinition) {
  const std::size_t d = 6, r = 4;
  const auto f = random_fc(d, r, 20);
  const auto emb = oracle::random(9, d, 21);
  for (TokenId v : {0u, 4u, 8u}) {
    const auto row = fc_row(f, emb, v, Activation::tanh);
    for (std::size_t c = 0; c < d; ++c) {
      double want = f.b2.value[c];
      for (std::size_t k = 0; k < r; ++k) {
        double pre = f.b1.value[k];
        for (std::size_t j = 0; j < d; ++j) pre += emb(v, j) * f.w1.value(j, k);
        want += std::tanh(pre) * f.w2.value(k, c);
      }
      EXPECT_NEAR(row[c], want, 1e-13);
    }
  }
}

TEST(Fc, BatchRowsEqualSingleRows) {
  const auto f = random_fc(5, 3, 30);
  const auto emb = oracle::random(7, 5, 31);
  const auto all = fc_rows(f, emb, Activation::gelu);
  for (TokenId v = 0; v < 7; ++v) {
    const auto row = fc_row(f, emb, v, Activation::gelu);
    EXPECT_TRUE(std::equal(row.flat().begin(), row.flat().end(), all.row(v).begin()));
  }
}

TEST(Materialize, KronTableHoldsEveryRow) {
  std::vector<KronFactors<double>> layers = {random_kron(3, 3, 2, 4, 40), random_kron(3, 3, 2, 4, 50)};
  const auto table = materialize_table(std::span<const KronFactors<double>>(layers), 8);
  ASSERT_EQ(table.num_layers(), 2u);
  ASSERT_EQ(table.vocab_size(), 8u);
  for (std::size_t l = 0; l < 2; ++l) {
    for (TokenId v = 0; v < 8; ++v) {
      const auto want = kron_row(layers[l], v);
      EXPECT_TRUE(std::equal(want.flat().begin(), want.flat().end(), table.row(l, v).begin()));
    }
  }
}

TEST(Materialize, HalfTableRoundsEachValue) {
  std::vector<KronFactors<double>> layers = {random_kron(3, 3, 2, 4, 60)};
  const auto exact = materialize_table(std::span<const KronFactors<double>>(layers), 9);
  const auto half = materialize_table(std::span<const KronFactors<double>>(layers), 9, DType::f16);
  EXPECT_EQ(half.dtype(), DType::f16);
  for (std::size_t i = 0; i < exact.layer(0).size(); ++i) {
    const double want = half_to_float(double_to_half(exact.layer(0)[i]));
    EXPECT_EQ(half.layer(0)[i], want);
  }
}

TEST(BiasTable, GatherAndRowBounds) {
  BiasTable<double> table({oracle::random(5, 3, 70)}, DType::f32);
  const std::vector<TokenId> tokens = {4, 0, 4};
  auto out = Tensor<double>::zeros(3, 3);
  table.gather(0, tokens, out);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_TRUE(std::equal(out.row(j).begin(), out.row(j).end(), table.row(0, tokens[j]).begin()));
  }
  EXPECT_THROW(table.row(0, 5), InputError);
}

// ---------------------------------------------------------------------------
// Method operators
// ---------------------------------------------------------------------------

TEST(ApplyAot, AddsTheLookedUpRows) {
  const auto h = oracle::random(3, 4, 80);
  const auto p = oracle::random(6, 4, 81);
  const std::vector<TokenId> tokens = {5, 2, 5};
  const auto out = apply_aot(h, p, tokens);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(i, c), h(i, c) + p(tokens[i], c));
}

TEST(ApplyAot, DropoutKeepsOrZeroesWholeEntriesWithInverseScale) {
  const auto h = Tensor<double>::zeros(4, 50);
  auto p = Tensor<double>::zeros(3, 50);
  p.fill(1.0);
  const std::vector<TokenId> tokens = {0, 1, 2, 1};
  const DropoutSpec spec{true, 0.25, 99};
  const auto out = apply_aot(h, p, tokens, spec);
  std::size_t dropped = 0;
  for (double v : out.flat()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    dropped += v == 0.0;
  }
  EXPECT_GT(dropped, 20u);
  EXPECT_LT(dropped, 80u);
  EXPECT_EQ(out, apply_aot(h, p, tokens, spec));
}

TEST(PTuning, V1PrependsPrefixRows) {
  const auto p = oracle::random(2, 3, 90);
  const auto h = oracle::random(4, 3, 91);
  const auto out = ptv1_prepend(p, h);
  ASSERT_EQ(out.rows(), 6u);
  EXPECT_TRUE(std::equal(p.flat().begin(), p.flat().end(), out.flat().begin()));
  EXPECT_TRUE(std::equal(h.flat().begin(), h.flat().end(), out.flat().begin() + 6));
}

TEST(PTuning, V2IsAttentionOverConcatenatedKeysAndValues) {
  const auto q = oracle::random(3, 4, 100);
  const auto k = oracle::random(3, 4, 101);
  const auto v = oracle::random(3, 4, 102);
  const auto pk = oracle::random(2, 4, 103);
  const auto pv = oracle::random(2, 4, 104);
  auto kk = oracle::to_mat(pk);
  auto vv = oracle::to_mat(pv);
  for (const auto& row : oracle::to_mat(k)) kk.push_back(row);
  for (const auto& row : oracle::to_mat(v)) vv.push_back(row);
  const auto want = oracle::attention(oracle::to_mat(q), kk, vv);
  EXPECT_LT(oracle::max_abs(oracle::to_mat(ptv2_attention(q, k, v, pk, pv)), want), 1e-14);

  // Masked sequence keys are dropped while prefix keys stay attendable.
  const std::vector<std::uint8_t> mask = {1, 0, 1};
  const auto masked = ptv2_attention<double>(q, k, v, pk, pv, mask);
  const auto want_masked = oracle::attention(oracle::to_mat(q), kk, vv, {true, true, true, false, true});
  EXPECT_LT(oracle::max_abs(oracle::to_mat(masked), want_masked), 1e-14);
}

TEST(BitFit, ShiftAddsTheSameVectorToEveryRow) {
  const auto h = oracle::random(3, 4, 110);
  const auto b = oracle::random(1, 4, 111);
  const auto out = bitfit_shift<double>(h, b.flat());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(i, c), h(i, c) + b[c]);
}

TEST(Lora, UnfusedMatchesDefinition) {
  const auto x = oracle::random(3, 5, 120);
  const auto w = oracle::random(5, 5, 121);
  const auto a = oracle::random(5, 2, 122);
  const auto b = oracle::random(2, 5, 123);
  const auto mx = oracle::to_mat(x);
  auto want = oracle::matmul(mx, oracle::to_mat(w));
  const auto delta = oracle::matmul(oracle::matmul(mx, oracle::to_mat(a)), oracle::to_mat(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) want[i][j] += 1.5 * delta[i][j];  // alpha 3, r 2
  EXPECT_LT(oracle::max_abs(oracle::to_mat(lora_linear(x, w, a, b, 3.0, 2, false)), want), 1e-13);
  EXPECT_LT(oracle::max_abs(oracle::to_mat(lora_linear(x, w, a, b, 3.0, 2, true)), want), 1e-13);
  EXPECT_THROW(lora_linear(x, w, a, b, 3.0, 0, false), ConfigError);
}

TEST(Adapter, BottleneckWithResidual) {
  AdapterBlock<double> block;
  block.down = GradPair<double>(oracle::random(4, 2, 130));
  block.down_bias = GradPair<double>(Tensor<double>::vector({0.1, -0.2}));
  block.up = GradPair<double>(oracle::random(2, 4, 131));
  block.up_bias = GradPair<double>(Tensor<double>::vector({0.3, 0.0, -0.1, 0.2}));
  const auto h = oracle::random(3, 4, 132);
  const auto out = adapter_bottleneck(h, block, Activation::relu);
  for (std::size_t i = 0; i < 3; ++i) {
    double z[2];
    for (std::size_t k = 0; k < 2; ++k) {
      z[k] = block.down_bias.value[k];
      for (std::size_t j = 0; j < 4; ++j) z[k] += h(i, j) * block.down.value(j, k);
      z[k] = std::max(z[k], 0.0);
    }
    for (std::size_t c = 0; c < 4; ++c) {
      const double want = h(i, c) + z[0] * block.up.value(0, c) + z[1] * block.up.value(1, c) + block.up_bias.value[c];
      EXPECT_NEAR(out(i, c), want, 1e-14);
    }
  }
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

TEST(Accounting, ClosedFormsPerMethod) {
  const ModelConfig m = model(1000, 48, 3, 4);
  const std::uint64_t d = 48, l = 3, f = 4 * 48, V = 1000;
  EXPECT_EQ(count_trainable(AotKronConfig{40, 25, 5}, m), l * (40 * 5 + 25 * 5 + 25 * d));
  EXPECT_EQ(count_trainable(AotFcConfig{7}, m), l * (d * 7 + 7 + 7 * d + d));
  EXPECT_EQ(count_trainable(PTuningV1Config{9}, m), 9 * d);
  EXPECT_EQ(count_trainable(PTuningV2Config{9}, m), 2 * 9 * d * l);
  EXPECT_EQ(count_trainable(BitFitConfig{}, m), l * (4 * d + f + d + 2 * d));
  EXPECT_EQ(count_trainable(LoraConfig{3, 3.0, false}, m), l * 4 * (d * 3 + 3 * d));
  EXPECT_EQ(count_trainable(AdapterConfig{6}, m), l * 2 * (d * 6 + 6 + 6 * d + d));
  EXPECT_EQ(count_trainable(FullConfig{}, m), V * d + l * (4 * d * d + 4 * d + d * f + f + f * d + d + 4 * d));
  EXPECT_EQ(count_trainable(BitFitConfig{}, m, 5), count_trainable(BitFitConfig{}, m) + d * 5 + 5);
}

TEST(Accounting, ReferenceScaleValues) {
  const ModelConfig large = model(50265, 1024, 24, 16);
  EXPECT_EQ(count_trainable(AotKronConfig{256, 200, 20}, large), 10'049'280u);
  EXPECT_EQ(fused_table_bytes(large, DType::f16), 2'470'625'280u);
  EXPECT_EQ(fused_table_bytes(large, DType::f32), 2ull * 2'470'625'280ull);
  EXPECT_EQ(count_trainable(PTuningV2Config{20}, large), 983'040u);
}

TEST(Accounting, EnumerationAgreesWithClosedForm) {
  const ModelConfig m = model(30, 8, 2, 2);
  const auto bb = Backbone<double>::random(m, 1);
  for (Method method : {Method::aot_kron, Method::aot_fc, Method::ptv1, Method::ptv2, Method::bitfit, Method::lora,
                        Method::adapter, Method::full}) {
    const auto config = default_config(method, m);
    const auto a = make_adaptation<double>(config, bb, 3, 0);
    EXPECT_EQ(a.trainable_scalars(false), count_trainable(config, m)) << method_name(method);
    EXPECT_EQ(a.trainable_scalars(true), count_trainable(config, m, 3)) << method_name(method);
  }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST(Config, DefaultKronFactorsCoverTheVocabulary) {
  for (std::size_t v : {2u, 97u, 256u, 1000u, 50265u}) {
    const auto c = std::get<AotKronConfig>(default_config(Method::aot_kron, model(v, 16, 1, 2)));
    EXPECT_GE(c.a * c.b, v);
    EXPECT_LT((c.a - 1) * c.b, v);
  }
}

TEST(Config, ValidationErrors) {
  const ModelConfig m = model(100, 16, 2, 2);
  EXPECT_THROW(validate(AotKronConfig{9, 11, 2}, m), ConfigError);  // 99 < 100
  EXPECT_NO_THROW(validate(AotKronConfig{10, 10, 2}, m));
  EXPECT_THROW(validate(LoraConfig{0, 1.0, false}, m), ConfigError);
  EXPECT_THROW(validate(AdapterConfig{0}, m), ConfigError);
  EXPECT_THROW(validate(AotFcConfig{0}, m), ConfigError);
  EXPECT_THROW(parse_method("prompt-tuning"), ConfigError);
}

TEST(Config, MethodNamesRoundTrip) {
  for (Method method : {Method::aot_kron, Method::aot_fc, Method::ptv1, Method::ptv2, Method::bitfit, Method::lora,
                        Method::adapter, Method::full}) {
    EXPECT_EQ(parse_method(method_name(method)), method);
  }
}

TEST(Traits, ComparisonTable) {
  const auto check = [](MethodTraits t, bool pe, bool zero, bool multi) {
    EXPECT_EQ(t.parameter_efficient, pe);
    EXPECT_EQ(t.zero_inference_overhead, zero);
    EXPECT_EQ(t.multi_task_inference, multi);
  };
  check(method_traits(Method::full), false, true, false);
  check(method_traits(Method::lora, false), true, false, true);
  check(method_traits(Method::lora, true), true, true, false);
  check(method_traits(Method::adapter), true, false, true);
  check(method_traits(Method::bitfit), true, true, true);
  check(method_traits(Method::ptv1), true, false, true);
  check(method_traits(Method::ptv2), true, false, true);
  check(method_traits(Method::aot_kron), true, true, true);
  check(method_traits(Method::aot_fc), true, true, true);
}

// ---------------------------------------------------------------------------
// Adaptations
// ---------------------------------------------------------------------------

TEST(Adaptation, FuseRejectsNonAotMethods) {
  const ModelConfig m = model(30, 8, 2, 2);
  const auto bb = Backbone<double>::random(m, 1);
  const auto a = make_adaptation<double>(BitFitConfig{}, bb, 2, 0);
  EXPECT_THROW(fuse_aot(a, bb), ConfigError);
}

TEST(Adaptation, MergeLoraFoldsScaledProduct) {
  const ModelConfig m = model(30, 8, 1, 2);
  const auto bb = Backbone<double>::random(m, 2);
  auto a = make_adaptation<double>(LoraConfig{2, 5.0, false}, bb, 2, 0);
  auto& lora = std::get<LoraState<double>>(a.state);
  lora.layers[0].proj[2].b.value = oracle::random(2, 8, 140);
  const auto merged = merge_lora(bb, lora);
  const auto delta = oracle::matmul(oracle::to_mat(lora.layers[0].proj[2].a.value),
                                    oracle::to_mat(lora.layers[0].proj[2].b.value));
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(merged.layers[0].wv.value(i, j), bb.layers[0].wv.value(i, j) + 2.5 * delta[i][j], 1e-14);
  EXPECT_EQ(merged.layers[0].wq.value, bb.layers[0].wq.value);
}

TEST(Adaptation, InitializationFollowsDocumentedScheme) {
  const ModelConfig m = model(30, 8, 2, 2);
  const auto bb = Backbone<double>::random(m, 3);
  const auto kron = make_adaptation<double>(AotKronConfig{6, 5, 2}, bb, 2, 0);
  const auto& layers = std::get<KronState<double>>(kron.state).layers;
  for (const auto& l : layers) {
    for (double x : l.right.value.flat()) EXPECT_EQ(x, 0.0);
    EXPECT_NE(l.left.value[0], 0.0);
  }
  EXPECT_TRUE(kron.head.weight.trainable());
  for (double x : kron.head.bias.value.flat()) EXPECT_EQ(x, 0.0);
}
