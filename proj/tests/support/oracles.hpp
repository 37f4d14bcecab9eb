#pragma once

// Straightforward reference implementations used as test oracles. They favor
// obviousness over speed and share no code with the library kernels.

#include <cmath>
#include <cstddef>
#include <vector>

#include "aotp/rng.hpp"
#include "aotp/tensor.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const aotp::Tensor<double>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

inline aotp::Tensor<double> to_tensor(const Mat& m) {
  auto t = aotp::Tensor<double>::zeros(m.size(), m.empty() ? 0 : m[0].size());
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) t(i, j) = m[i][j];
  return t;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b.empty() ? 0 : b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < c[i].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.empty() ? 0 : a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline std::vector<double> softmax(std::vector<double> x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double& v : x) s += (v = std::exp(v - m));
  for (double& v : x) v /= s;
  return x;
}

// softmax(Q K^T / sqrt(d)) V with masked keys removed entirely.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, const std::vector<bool>& keep = {}) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
  Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> scores;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < k.size(); ++j) {
      if (!keep.empty() && !keep[j]) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < q[i].size(); ++c) s += q[i][c] * k[j][c];
      scores.push_back(s * scale);
      idx.push_back(j);
    }
    const auto p = softmax(scores);
    for (std::size_t t = 0; t < idx.size(); ++t)
      for (std::size_t c = 0; c < v[0].size(); ++c) out[i][c] += p[t] * v[idx[t]][c];
  }
  return out;
}

inline Mat layer_norm(const Mat& x, const std::vector<double>& gamma, const std::vector<double>& beta, double eps) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= static_cast<double>(x[i].size());
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j)
      out[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * gamma[j] + beta[j];
  }
  return out;
}

inline double max_abs(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

inline aotp::Tensor<double> random(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  aotp::CounterRng rng(seed, 0x7E57);
  auto t = aotp::Tensor<double>::zeros(rows, cols);
  for (auto& v : t.flat()) v = scale * rng.normal();
  return t;
}

}  // namespace oracle
