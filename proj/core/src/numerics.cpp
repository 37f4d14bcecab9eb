#include "aotp/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>

namespace aotp {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_string(t.shape()));
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  Tensor<T> c = Tensor<T>::zeros(a.rows(), b.cols());
  gemm(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols(), false);
  check_finite(c, "matmul");
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt lhs");
  require_matrix(b, "matmul_nt rhs");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()) + "^T");
  }
  Tensor<T> c = Tensor<T>::zeros(a.rows(), b.rows());
  gemm_nt(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.rows(), false);
  check_finite(c, "matmul_nt");
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_tn lhs");
  require_matrix(b, "matmul_tn rhs");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dimensions differ " + shape_string(a.shape()) + "^T * " +
                     shape_string(b.shape()));
  }
  Tensor<T> c = Tensor<T>::zeros(a.cols(), b.cols());
  gemm_tn(a.data(), b.data(), c.data(), a.cols(), a.rows(), b.cols(), false);
  check_finite(c, "matmul_tn");
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  Tensor<T> out = Tensor<T>::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  T* x = a.data();
  const T* y = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) x[i] += y[i];
}

template <typename T>
void axpy_inplace(Tensor<T>& a, T alpha, const Tensor<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("axpy: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  T* x = a.data();
  const T* y = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) x[i] += alpha * y[i];
}

template <typename T>
void add_row_vector(Tensor<T>& m, std::span<const T> v) {
  if (m.cols() != v.size()) {
    throw ShapeError("add_row_vector: " + std::to_string(v.size()) + " vs " + shape_string(m.shape()));
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    for (std::size_t j = 0; j < v.size(); ++j) row[j] += v[j];
  }
}

template <typename T>
void accumulate_column_sums(const Tensor<T>& m, std::span<T> out) {
  if (m.cols() != out.size()) throw ShapeError("accumulate_column_sums: width mismatch");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += row[j];
  }
}

template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  T sum{0};
  for (auto& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const T inv = T{1} / sum;
  for (auto& v : row) v *= inv;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& m) {
  require_matrix(m, "softmax_rows");
  if (!all_finite(m.flat())) throw NumericError("softmax_rows: non-finite input");
  Tensor<T> out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps,
                     LayerNormCache<T>* cache) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: gamma/beta width mismatch");
  if (d < 2) throw ShapeError("layer_norm: need at least two features");
  Tensor<T> out(x.shape());
  if (cache) {
    cache->normalized = Tensor<T>(x.shape());
    cache->rstd.assign(n, T{0});
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto in = x.row(i);
    T mean{0};
    for (T v : in) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = (in[j] - mean) * rstd;
      if (cache) cache->normalized(i, j) = xhat;
      o[j] = xhat * gamma[j] + beta[j];
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const LayerNormCache<T>& cache, std::span<const T> gamma,
                              std::span<T> dgamma, std::span<T> dbeta) {
  const std::size_t n = dy.rows();
  const std::size_t d = dy.cols();
  Tensor<T> dx(dy.shape());
  std::vector<T> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    auto g = dy.row(i);
    auto xhat = cache.normalized.row(i);
    T mean_dxhat{0};
    T mean_dxhat_xhat{0};
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = g[j] * gamma[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
      if (!dgamma.empty()) dgamma[j] += g[j] * xhat[j];
      if (!dbeta.empty()) dbeta[j] += g[j];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    auto out = dx.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      out[j] = cache.rstd[i] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
  return dx;
}

std::string_view to_string(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
  }
  return "unknown";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

template <typename T>
T activate(Activation kind, T x) noexcept {
  switch (kind) {
    case Activation::relu: return x > T{0} ? x : T{0};
    case Activation::tanh: return std::tanh(x);
    case Activation::gelu: {
      const T inner = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
      return T{0.5} * x * (T{1} + std::tanh(inner));
    }
  }
  return x;
}

template <typename T>
T activate_grad(Activation kind, T x) noexcept {
  switch (kind) {
    case Activation::relu: return x > T{0} ? T{1} : T{0};
    case Activation::tanh: {
      const T t = std::tanh(x);
      return T{1} - t * t;
    }
    case Activation::gelu: {
      const T c = static_cast<T>(kGeluC);
      const T a = static_cast<T>(kGeluA);
      const T t = std::tanh(c * (x + a * x * x * x));
      return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * c * (T{1} + T{3} * a * x * x);
    }
  }
  return T{1};
}

template <typename T>
void activation_inplace(Tensor<T>& x, Activation kind) {
  for (auto& v : x.flat()) v = activate(kind, v);
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> out = x;
  activation_inplace(out, kind);
  return out;
}

template <typename T>
bool all_finite(std::span<const T> values) noexcept {
  for (T v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void check_finite(const Tensor<T>& t, std::string_view what) {
  if (!all_finite(t.flat())) throw NumericError(std::string(what) + ": non-finite value");
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  T worst{0};
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                double eps) {
  Tensor<double> probe = x;
  Tensor<double> grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double plus = f(probe);
    probe[i] = saved - eps;
    const double minus = f(probe);
    probe[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) throw NumericError("finite_diff_grad: non-finite objective");
    grad[i] = (plus - minus) / (2.0 * eps);
  }
  return grad;
}

double central_difference(double& slot, const std::function<double()>& f, double eps) {
  const double saved = slot;
  slot = saved + eps;
  const double plus = f();
  slot = saved - eps;
  const double minus = f();
  slot = saved;
  if (!std::isfinite(plus) || !std::isfinite(minus)) throw NumericError("central_difference: non-finite objective");
  return (plus - minus) / (2.0 * eps);
}

#define AOTP_INSTANTIATE(T)                                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> transpose(const Tensor<T>&);                                                            \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                                   \
  template void axpy_inplace(Tensor<T>&, T, const Tensor<T>&);                                               \
  template void add_row_vector(Tensor<T>&, std::span<const T>);                                              \
  template void accumulate_column_sums(const Tensor<T>&, std::span<T>);                                      \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                         \
  template void softmax_inplace(std::span<T>);                                                               \
  template Tensor<T> layer_norm(const Tensor<T>&, std::span<const T>, std::span<const T>, T,                 \
                                LayerNormCache<T>*);                                                         \
  template Tensor<T> layer_norm_backward(const Tensor<T>&, const LayerNormCache<T>&, std::span<const T>,     \
                                         std::span<T>, std::span<T>);                                        \
  template T activate(Activation, T) noexcept;                                                               \
  template T activate_grad(Activation, T) noexcept;                                                          \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                               \
  template void activation_inplace(Tensor<T>&, Activation);                                                  \
  template bool all_finite(std::span<const T>) noexcept;                                                     \
  template void check_finite(const Tensor<T>&, std::string_view);                                            \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);

AOTP_INSTANTIATE(float)
AOTP_INSTANTIATE(double)

#undef AOTP_INSTANTIATE

}  // namespace aotp
