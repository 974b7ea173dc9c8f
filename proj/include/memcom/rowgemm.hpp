#pragma once

// Register-tiled row-major GEMM used for forward products.
//
// Each output element accumulates its k-products strictly in ascending-k
// order through explicit std::fma calls, and no arithmetic ever crosses rows
// or columns.  The explicit fma pins the rounding behavior, so results cannot
// depend on which tile or tail path a row lands in.  Consequences, relied on
// elsewhere:
//   * a row of A*B is bit-identical whether computed inside a tall matrix or
//     alone (key-value prefix reuse must match the monolithic forward pass
//     bit for bit);
//   * results do not depend on tile placement, so m- and n-tail handling is
//     free of rounding surprises.
// Backward-pass products have no such contract and use Eigen directly.

#include <cmath>
#include <cstdint>

namespace memcom::detail {

template <typename T, int MR, int NR>
inline void rowgemm_micro(const T* a, const T* b, T* c, int64_t k, int64_t lda, int64_t ldb,
                          int64_t ldc) {
  T acc[MR][NR];
  for (int q = 0; q < MR; ++q)
    for (int j = 0; j < NR; ++j) acc[q][j] = T(0);
  for (int64_t kk = 0; kk < k; ++kk) {
    const T* br = b + kk * ldb;
    for (int q = 0; q < MR; ++q) {
      T av = a[q * lda + kk];
      for (int j = 0; j < NR; ++j) acc[q][j] = std::fma(av, br[j], acc[q][j]);
    }
  }
  for (int q = 0; q < MR; ++q)
    for (int j = 0; j < NR; ++j) c[q * ldc + j] = acc[q][j];
}

template <typename T, int MR>
inline void rowgemm_band(const T* a, const T* b, T* c, int64_t k, int64_t n, int64_t lda,
                         int64_t ldb, int64_t ldc) {
  int64_t j = 0;
  for (; j + 32 <= n; j += 32) rowgemm_micro<T, MR, 32>(a, b + j, c + j, k, lda, ldb, ldc);
  for (; j + 8 <= n; j += 8) rowgemm_micro<T, MR, 8>(a, b + j, c + j, k, lda, ldb, ldc);
  for (; j < n; ++j) rowgemm_micro<T, MR, 1>(a, b + j, c + j, k, lda, ldb, ldc);
}

// c[m,n] = a[m,k] * b[k,n], all row-major and densely packed.
template <typename T>
void rowgemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  int64_t r = 0;
  for (; r + 4 <= m; r += 4) rowgemm_band<T, 4>(a + r * k, b, c + r * n, k, n, k, n, n);
  for (; r + 2 <= m; r += 2) rowgemm_band<T, 2>(a + r * k, b, c + r * n, k, n, k, n, n);
  for (; r < m; ++r) rowgemm_band<T, 1>(a + r * k, b, c + r * n, k, n, k, n, n);
}

}  // namespace memcom::detail
