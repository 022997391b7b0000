#pragma once

// Dense kernels used by every layer. Two implementations are kept:
//   kernels::serial  - plain triple loops, the reference the tests compare to
//   kernels::omp     - OpenMP-parallel over output rows, vectorizable inner loops
// The unqualified kernels:: entry points forward to the OpenMP versions.
//
// Parallel loops only split output rows, so every output element is reduced
// in a fixed order regardless of the thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace arcflow::kernels {

namespace serial {

/// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

/// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = c[p * n + j];
      for (std::size_t i = 0; i < m; ++i) acc += a[i * k + p] * b[i * n + j];
      c[p * n + j] = acc;
    }
  }
}

/// c[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T{0};
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

/// out[r][j] += bias[j]
template <typename T>
void add_bias(T* out, const T* bias, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bias[j];
}

/// db[j] += sum_r d[r][j]
template <typename T>
void sum_rows(const T* d, T* db, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) db[j] += d[i * cols + j];
}

}  // namespace serial

namespace omp {

inline constexpr std::size_t kParallelFlops = 1u << 16;

// Output rows are handled in groups of four so each loaded row of b feeds
// four accumulating rows of c. Every element still sums over p in order.
inline constexpr std::size_t kRowBlock = 4;
inline constexpr std::size_t kColTile = 32;

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false) {
  const long blocks = static_cast<long>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlops)
  for (long bb = 0; bb < blocks; ++bb) {
    const std::size_t i0 = static_cast<std::size_t>(bb) * kRowBlock;
    if (!accumulate) std::fill(c + i0 * n, c + std::min(m, i0 + kRowBlock) * n, T{0});
    if (i0 + kRowBlock <= m) {
      const T* a0 = a + i0 * k;
      std::size_t j0 = 0;
      // Register tile: 4 rows x kColTile columns stay in accumulators over all of p.
      for (; j0 + kColTile <= n; j0 += kColTile) {
        T acc[kRowBlock][kColTile];
        for (std::size_t r = 0; r < kRowBlock; ++r)
          for (std::size_t j = 0; j < kColTile; ++j) acc[r][j] = c[(i0 + r) * n + j0 + j];
        for (std::size_t p = 0; p < k; ++p) {
          const T* __restrict__ brow = b + p * n + j0;
          for (std::size_t r = 0; r < kRowBlock; ++r) {
            const T av = a0[r * k + p];
#pragma omp simd
            for (std::size_t j = 0; j < kColTile; ++j) acc[r][j] += av * brow[j];
          }
        }
        for (std::size_t r = 0; r < kRowBlock; ++r)
          for (std::size_t j = 0; j < kColTile; ++j) c[(i0 + r) * n + j0 + j] = acc[r][j];
      }
      for (std::size_t r = 0; r < kRowBlock; ++r) {
        T* __restrict__ crow = c + (i0 + r) * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = a0[r * k + p];
          const T* __restrict__ brow = b + p * n;
          for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
      continue;
    }
    for (std::size_t i = i0; i < m; ++i) {
      T* __restrict__ crow = c + i * n;
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* __restrict__ brow = b + p * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const long blocks = static_cast<long>((k + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlops)
  for (long bb = 0; bb < blocks; ++bb) {
    const std::size_t p0 = static_cast<std::size_t>(bb) * kRowBlock;
    if (p0 + kRowBlock <= k) {
      std::size_t j0 = 0;
      for (; j0 + kColTile <= n; j0 += kColTile) {
        T acc[kRowBlock][kColTile];
        for (std::size_t r = 0; r < kRowBlock; ++r)
          for (std::size_t j = 0; j < kColTile; ++j) acc[r][j] = c[(p0 + r) * n + j0 + j];
        for (std::size_t i = 0; i < m; ++i) {
          const T* ai = a + i * k + p0;
          const T* __restrict__ brow = b + i * n + j0;
          for (std::size_t r = 0; r < kRowBlock; ++r) {
            const T av = ai[r];
#pragma omp simd
            for (std::size_t j = 0; j < kColTile; ++j) acc[r][j] += av * brow[j];
          }
        }
        for (std::size_t r = 0; r < kRowBlock; ++r)
          for (std::size_t j = 0; j < kColTile; ++j) c[(p0 + r) * n + j0 + j] = acc[r][j];
      }
      for (std::size_t r = 0; r < kRowBlock; ++r) {
        T* __restrict__ crow = c + (p0 + r) * n;
        for (std::size_t i = 0; i < m; ++i) {
          const T av = a[i * k + p0 + r];
          const T* __restrict__ brow = b + i * n;
          for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
      continue;
    }
    for (std::size_t p = p0; p < k; ++p) {
      T* __restrict__ crow = c + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = a[i * k + p];
        const T* __restrict__ brow = b + i * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate = false) {
  const long blocks = static_cast<long>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlops)
  for (long bb = 0; bb < blocks; ++bb) {
    const std::size_t i0 = static_cast<std::size_t>(bb) * kRowBlock;
    const std::size_t i1 = std::min(m, i0 + kRowBlock);
    std::size_t j = 0;
    if (i1 - i0 == kRowBlock) {
      // 4 x 4 block of dot products sharing every load.
      const T* __restrict__ a0 = a + i0 * k;
      const T* __restrict__ a1 = a0 + k;
      const T* __restrict__ a2 = a1 + k;
      const T* __restrict__ a3 = a2 + k;
      for (; j + kRowBlock <= n; j += kRowBlock) {
        const T* __restrict__ b0 = b + j * k;
        const T* __restrict__ b1 = b0 + k;
        const T* __restrict__ b2 = b1 + k;
        const T* __restrict__ b3 = b2 + k;
        T s00 = 0, s01 = 0, s02 = 0, s03 = 0, s10 = 0, s11 = 0, s12 = 0, s13 = 0;
        T s20 = 0, s21 = 0, s22 = 0, s23 = 0, s30 = 0, s31 = 0, s32 = 0, s33 = 0;
#pragma omp simd reduction(+ : s00, s01, s02, s03, s10, s11, s12, s13, s20, s21, s22, s23, s30, s31, s32, s33)
        for (std::size_t p = 0; p < k; ++p) {
          const T x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
          const T y0 = b0[p], y1 = b1[p], y2 = b2[p], y3 = b3[p];
          s00 += x0 * y0, s01 += x0 * y1, s02 += x0 * y2, s03 += x0 * y3;
          s10 += x1 * y0, s11 += x1 * y1, s12 += x1 * y2, s13 += x1 * y3;
          s20 += x2 * y0, s21 += x2 * y1, s22 += x2 * y2, s23 += x2 * y3;
          s30 += x3 * y0, s31 += x3 * y1, s32 += x3 * y2, s33 += x3 * y3;
        }
        const T s[4][4] = {{s00, s01, s02, s03}, {s10, s11, s12, s13}, {s20, s21, s22, s23}, {s30, s31, s32, s33}};
        for (std::size_t r = 0; r < kRowBlock; ++r)
          for (std::size_t q = 0; q < kRowBlock; ++q) {
            T& dst = c[(i0 + r) * n + j + q];
            dst = accumulate ? dst + s[r][q] : s[r][q];
          }
      }
    }
    for (std::size_t i = i0; i < i1; ++i) {
      const T* __restrict__ arow = a + i * k;
      for (std::size_t jj = j; jj < n; ++jj) {
        const T* __restrict__ brow = b + jj * k;
        T acc = T{0};
#pragma omp simd reduction(+ : acc)
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + jj] = accumulate ? c[i * n + jj] + acc : acc;
      }
    }
  }
}

template <typename T>
void add_bias(T* out, const T* bias, std::size_t rows, std::size_t cols) {
  const long r = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelFlops)
  for (long i = 0; i < r; ++i) {
    T* __restrict__ o = out + static_cast<std::size_t>(i) * cols;
#pragma omp simd
    for (std::size_t j = 0; j < cols; ++j) o[j] += bias[j];
  }
}

template <typename T>
void sum_rows(const T* d, T* db, std::size_t rows, std::size_t cols) {
  // Column blocks are split across threads; each db[j] is reduced over rows in order.
  constexpr std::size_t kBlock = 64;
  const long blocks = static_cast<long>((cols + kBlock - 1) / kBlock);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelFlops)
  for (long bb = 0; bb < blocks; ++bb) {
    const std::size_t j0 = static_cast<std::size_t>(bb) * kBlock;
    const std::size_t j1 = std::min(cols, j0 + kBlock);
    for (std::size_t i = 0; i < rows; ++i) {
      const T* __restrict__ drow = d + i * cols;
#pragma omp simd
      for (std::size_t j = j0; j < j1; ++j) db[j] += drow[j];
    }
  }
}

}  // namespace omp

using omp::add_bias;
using omp::matmul;
using omp::matmul_a_bt;
using omp::matmul_at_b;
using omp::sum_rows;

template <typename T>
inline T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

template <typename T>
inline T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
inline T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T{1} + x * (T{1} - s));
}

}  // namespace arcflow::kernels
