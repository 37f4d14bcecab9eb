#include <algorithm>
#include <cstddef>
#include <vector>

#include "aotp/numerics.hpp"

namespace aotp {
namespace {

constexpr std::size_t kRowBlock = 4;

// Column block width. Four rows by this many columns of accumulators fit in
// the vector register file on AVX-512 hosts.
template <typename T>
constexpr std::size_t col_block() {
  return 64 / sizeof(T) * 4;
}

template <typename T, std::size_t R, std::size_t JB>
inline void block_kernel(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                         std::size_t k, bool accumulate) {
  T acc[R][JB];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < JB; ++j) acc[r][j] = accumulate ? c[r * ldc + j] : T{0};
  }
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* brow = b + kk * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const T av = a[r * lda + kk];
#pragma GCC unroll 16
      for (std::size_t j = 0; j < JB; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < JB; ++j) c[r * ldc + j] = acc[r][j];
  }
}

template <typename T>
inline void edge_kernel(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                        std::size_t rows, std::size_t cols, std::size_t k, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* crow = c + r * ldc;
    if (!accumulate) std::fill(crow, crow + cols, T{0});
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = a[r * lda + kk];
      const T* brow = b + kk * ldb;
      for (std::size_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  constexpr std::size_t JB = col_block<T>();
  const std::size_t full_cols = n - n % JB;
  std::size_t i = 0;
  for (; i + kRowBlock <= m; i += kRowBlock) {
    for (std::size_t j = 0; j < full_cols; j += JB) {
      block_kernel<T, kRowBlock, JB>(a + i * k, k, b + j, n, c + i * n + j, n, k, accumulate);
    }
    if (full_cols < n) {
      edge_kernel(a + i * k, k, b + full_cols, n, c + i * n + full_cols, n, kRowBlock, n - full_cols, k, accumulate);
    }
  }
  for (; i < m; ++i) {
    for (std::size_t j = 0; j < full_cols; j += JB) {
      block_kernel<T, 1, JB>(a + i * k, k, b + j, n, c + i * n + j, n, k, accumulate);
    }
    if (full_cols < n) {
      edge_kernel(a + i * k, k, b + full_cols, n, c + i * n + full_cols, n, 1, n - full_cols, k, accumulate);
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  // Transposing B keeps the inner loop contiguous; accumulation order is the
  // same ascending k as gemm.
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = b[j * k + kk];
  }
  gemm(a, bt.data(), c, m, k, n, accumulate);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* arow = a + kk * m;
    const T* brow = b + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void gemm<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool);
template void gemm<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_nt<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_nt<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_tn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_tn<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);

}  // namespace aotp
