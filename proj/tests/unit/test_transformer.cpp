#include <gtest/gtest.h>

#include <cmath>

#include "aotp/error.hpp"
#include "aotp/forward.hpp"
#include "oracles.hpp"

using namespace aotp;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.vocab_size = 40;
  m.hidden = 12;
  m.layers = 2;
  m.heads = 3;
  m.max_seq = 16;
  return m;
}

oracle::Mat slice(const oracle::Mat& m, std::size_t col, std::size_t width) {
  oracle::Mat out(m.size(), std::vector<double>(width));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < width; ++j) out[i][j] = m[i][col + j];
  return out;
}

oracle::Mat affine(const oracle::Mat& x, const GradPair<double>& w, const GradPair<double>& b) {
  auto y = oracle::matmul(x, oracle::to_mat(w.value));
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b.value[j];
  return y;
}

std::vector<double> vec(const GradPair<double>& p) { return {p.value.flat().begin(), p.value.flat().end()}; }

// Pre-norm block written out from its definition.
oracle::Mat encoder_oracle(const oracle::Mat& h, const LayerWeights<double>& w, const ModelConfig& m,
                           const std::vector<bool>& keep) {
  const auto x1 = oracle::layer_norm(h, vec(w.ln1_gamma), vec(w.ln1_beta), m.ln_eps);
  const auto q = affine(x1, w.wq, w.bq);
  const auto k = affine(x1, w.wk, w.bk);
  const auto v = affine(x1, w.wv, w.bv);
  const std::size_t dh = m.head_dim();
  oracle::Mat heads(h.size(), std::vector<double>(m.hidden));
  for (std::size_t t = 0; t < m.heads; ++t) {
    const auto o = oracle::attention(slice(q, t * dh, dh), slice(k, t * dh, dh), slice(v, t * dh, dh), keep);
    for (std::size_t i = 0; i < h.size(); ++i)
      for (std::size_t j = 0; j < dh; ++j) heads[i][t * dh + j] = o[i][j];
  }
  auto h2 = affine(heads, w.wo, w.bo);
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = 0; j < m.hidden; ++j) h2[i][j] += h[i][j];
  const auto x2 = oracle::layer_norm(h2, vec(w.ln2_gamma), vec(w.ln2_beta), m.ln_eps);
  auto z = affine(x2, w.w1, w.b1);
  for (auto& row : z)
    for (double& x : row) x = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  auto out = affine(z, w.w2, w.b2);
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = 0; j < m.hidden; ++j) out[i][j] += h2[i][j];
  return out;
}

}  // namespace

TEST(Attention, MatchesOracle) {
  const auto q = oracle::random(5, 4, 1);
  const auto k = oracle::random(5, 4, 2);
  const auto v = oracle::random(5, 3, 3);
  const auto got = attention(q, k, v);
  const auto want = oracle::attention(oracle::to_mat(q), oracle::to_mat(k), oracle::to_mat(v));
  EXPECT_LT(oracle::max_abs(oracle::to_mat(got), want), 1e-14);
}

TEST(Attention, MaskedKeysGetNoWeight) {
  const auto q = oracle::random(4, 4, 4);
  const auto k = oracle::random(4, 4, 5);
  const auto v = oracle::random(4, 2, 6);
  const std::vector<std::uint8_t> mask = {1, 0, 1, 0};
  Tensor<double> probs;
  const auto got = attention<double>(q, k, v, mask, &probs);
  const auto want =
      oracle::attention(oracle::to_mat(q), oracle::to_mat(k), oracle::to_mat(v), {true, false, true, false});
  EXPECT_LT(oracle::max_abs(oracle::to_mat(got), want), 1e-14);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(probs(i, 1), 0.0);
    EXPECT_EQ(probs(i, 3), 0.0);
  }
}

TEST(Backbone, SameSeedSameWeights) {
  const auto a = Backbone<double>::random(tiny_model(), 9);
  const auto b = Backbone<double>::random(tiny_model(), 9);
  const auto c = Backbone<double>::random(tiny_model(), 10);
  EXPECT_EQ(a.embeddings.value, b.embeddings.value);
  EXPECT_EQ(a.layers[1].w2.value, b.layers[1].w2.value);
  EXPECT_FALSE(a.embeddings.value == c.embeddings.value);
}

TEST(Backbone, EncoderLayerMatchesOracle) {
  const ModelConfig m = tiny_model();
  const auto bb = Backbone<double>::random(m, 3, BackboneInit{0.5, 0.3, 0.2});
  const auto h = oracle::random(6, m.hidden, 11);
  const std::vector<std::uint8_t> mask = {1, 1, 1, 1, 0, 0};
  const auto got = encoder_layer<double>(h, bb.layers[0], m, mask);
  const auto want = encoder_oracle(oracle::to_mat(h), bb.layers[0], m, {true, true, true, true, false, false});
  EXPECT_LT(oracle::max_abs(oracle::to_mat(got), want), 1e-12);
}

TEST(Backbone, EmbedRejectsOutOfVocabularyIds) {
  const auto bb = Backbone<double>::random(tiny_model(), 1);
  const std::vector<TokenId> bad = {1, 40};
  EXPECT_THROW(embed<double>(bad, bb.embeddings.value), InputError);
}

TEST(Backbone, PaddingMaskMarksPadIds) {
  const std::vector<TokenId> tokens = {5, 0, 3, 0};
  EXPECT_EQ(padding_mask(tokens, 0), (std::vector<std::uint8_t>{1, 0, 1, 0}));
}

TEST(Forward, VanillaMatchesStackedOracleLayers) {
  const ModelConfig m = tiny_model();
  const auto bb = Backbone<double>::random(m, 4, BackboneInit{0.5, 0.3, 0.2});
  CounterRng rng(1);
  const auto adaptation = vanilla_adaptation(Head<double>::random(m.hidden, 3, rng, 0.5));
  const std::vector<TokenId> tokens = {1, 7, 3, 9, 0};
  const auto logits = forward<double>(tokens, bb, adaptation);

  auto h = oracle::to_mat(embed<double>(tokens, bb.embeddings.value));
  for (const auto& layer : bb.layers) h = encoder_oracle(h, layer, m, {true, true, true, true, false});
  const auto pooled = oracle::Mat{h[0]};
  const auto want = affine(pooled, adaptation.head.weight, adaptation.head.bias);
  ASSERT_EQ(logits.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(logits[c], want[0][c], 1e-12);
}

TEST(Forward, TrailingPadsDoNotChangeLogits) {
  const ModelConfig m = tiny_model();
  const auto bb = Backbone<double>::random(m, 5, BackboneInit{0.5, 0.3, 0.2});
  for (const auto& config : std::vector<PeftConfig>{AotKronConfig{7, 6, 2}, BitFitConfig{}, PTuningV2Config{2},
                                                    AdapterConfig{3, Activation::relu}}) {
    auto a = make_adaptation<double>(config, bb, 2, 1, 0.3);
    const std::vector<TokenId> plain = {1, 4, 8};
    const std::vector<TokenId> padded = {1, 4, 8, 0, 0};
    EXPECT_LT(max_abs_diff(forward<double>(plain, bb, a), forward<double>(padded, bb, a)), 1e-12)
        << method_name(method_of(config));
  }
}

TEST(Forward, RejectsOverlongAndEmptySequences) {
  const ModelConfig m = tiny_model();
  const auto bb = Backbone<double>::random(m, 6);
  CounterRng rng(2);
  const auto a = vanilla_adaptation(Head<double>::random(m.hidden, 2, rng));
  const std::vector<TokenId> empty;
  const std::vector<TokenId> overlong(m.max_seq + 1, 3);
  EXPECT_THROW(forward<double>(empty, bb, a), InputError);
  EXPECT_THROW(forward<double>(overlong, bb, a), InputError);
}

TEST(Forward, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  const auto logits = Tensor<double>::vector({0.5, -1.0, 2.0});
  Tensor<double> d;
  const double loss = cross_entropy(logits, 2, &d);
  const auto p = oracle::softmax({0.5, -1.0, 2.0});
  EXPECT_NEAR(loss, -std::log(p[2]), 1e-15);
  EXPECT_NEAR(d[0], p[0], 1e-15);
  EXPECT_NEAR(d[1], p[1], 1e-15);
  EXPECT_NEAR(d[2], p[2] - 1.0, 1e-15);
}

TEST(ModelConfig, ValidateRejectsIndivisibleHeads) {
  ModelConfig m = tiny_model();
  m.heads = 5;
  EXPECT_THROW(m.validate(), ConfigError);
}
