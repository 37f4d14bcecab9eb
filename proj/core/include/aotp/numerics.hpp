#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "aotp/tensor.hpp"

namespace aotp {

// ---------------------------------------------------------------------------
// Raw kernels over contiguous row-major buffers. Each output element is
// accumulated in ascending k order, so results are reproducible bit-for-bit
// for a given precision and build.
// ---------------------------------------------------------------------------

// C[m x n] (+)= A[m x k] * B[k x n]
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// ---------------------------------------------------------------------------
// Tensor operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// a * b^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

// a^T * b
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// a += b, same shape.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

// a += alpha * b, same shape.
template <typename T>
void axpy_inplace(Tensor<T>& a, T alpha, const Tensor<T>& b);

// Adds vector v (length cols) to every row of m.
template <typename T>
void add_row_vector(Tensor<T>& m, std::span<const T> v);

// out[j] += sum_i m(i, j)
template <typename T>
void accumulate_column_sums(const Tensor<T>& m, std::span<T> out);

// Numerically stable row softmax. Throws NumericError on non-finite input.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& m);

// In-place variant on a raw row; the caller guarantees finiteness.
template <typename T>
void softmax_inplace(std::span<T> row);

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormCache {
  Tensor<T> normalized;   // (x - mean) * rstd, before gamma/beta
  std::vector<T> rstd;    // 1 / sqrt(var + eps) per row
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps,
                     LayerNormCache<T>* cache = nullptr);

// Returns dL/dx; accumulates into dgamma / dbeta when non-empty.
template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const LayerNormCache<T>& cache, std::span<const T> gamma,
                              std::span<T> dgamma, std::span<T> dbeta);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { relu, gelu, tanh };

std::string_view to_string(Activation kind);
Activation parse_activation(std::string_view name);

// gelu uses the tanh approximation:
//   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
T activate(Activation kind, T x) noexcept;

// Derivative with respect to the pre-activation input.
template <typename T>
T activate_grad(Activation kind, T x) noexcept;

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
void activation_inplace(Tensor<T>& x, Activation kind);

// ---------------------------------------------------------------------------
// Checks and oracles
// ---------------------------------------------------------------------------

template <typename T>
bool all_finite(std::span<const T> values) noexcept;

template <typename T>
void check_finite(const Tensor<T>& t, std::string_view what);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

// Central differences: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                double eps);

// Same rule applied to a single scalar slot that `f` reads through a
// reference, used to probe parameters living inside larger structures.
double central_difference(double& slot, const std::function<double()>& f, double eps);

}  // namespace aotp
