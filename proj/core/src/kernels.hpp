#pragma once

// Dense kernels shared by the op implementations. Every output element is
// reduced over its inner index in ascending order, so results depend only on
// the inputs and never on blocking.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace viewdelta::kernels {

/// c[m,n] (+)= a[m,k] * b[k,n], all row-major and densely packed.
template <typename Real>
void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kCols = 256 / sizeof(Real);

  auto block = [&]<std::size_t Rows, std::size_t Cols>(std::size_t i0, std::size_t j0) {
    Real acc[Rows][Cols];
    for (std::size_t r = 0; r < Rows; ++r) {
      for (std::size_t j = 0; j < Cols; ++j) {
        acc[r][j] = accumulate ? c[(i0 + r) * n + j0 + j] : Real(0);
      }
    }
    for (std::size_t p = 0; p < k; ++p) {
      const Real* brow = b + p * n + j0;
      for (std::size_t r = 0; r < Rows; ++r) {
        const Real av = a[(i0 + r) * k + p];
        for (std::size_t j = 0; j < Cols; ++j) acc[r][j] += av * brow[j];
      }
    }
    for (std::size_t r = 0; r < Rows; ++r) {
      for (std::size_t j = 0; j < Cols; ++j) c[(i0 + r) * n + j0 + j] = acc[r][j];
    }
  };

  // Ragged edges: same per-element reduction order, no register blocking.
  auto scalar_tile = [&](std::size_t i_begin, std::size_t i_end, std::size_t j_begin,
                         std::size_t j_end) {
    for (std::size_t i = i_begin; i < i_end; ++i) {
      Real* crow = c + i * n;
      if (!accumulate) std::fill(crow + j_begin, crow + j_end, Real(0));
      for (std::size_t p = 0; p < k; ++p) {
        const Real av = a[i * k + p];
        const Real* brow = b + p * n;
        for (std::size_t j = j_begin; j < j_end; ++j) crow[j] += av * brow[j];
      }
    }
  };

  const std::size_t m_full = m - m % kRows;
  const std::size_t n_full = n - n % kCols;
  for (std::size_t i0 = 0; i0 < m_full; i0 += kRows) {
    for (std::size_t j0 = 0; j0 < n_full; j0 += kCols) block.template operator()<kRows, kCols>(i0, j0);
  }
  if (n_full < n) {
    // Narrow column tail: 16-wide blocks where possible.
    constexpr std::size_t kNarrow = 64 / sizeof(Real);
    std::size_t j0 = n_full;
    for (; j0 + kNarrow <= n; j0 += kNarrow) {
      for (std::size_t i0 = 0; i0 < m_full; i0 += kRows) block.template operator()<kRows, kNarrow>(i0, j0);
    }
    scalar_tile(0, m_full, j0, n);
  }
  scalar_tile(m_full, m, 0, n);
}

/// out[cols, rows] = in[rows, cols]^T.
template <typename Real>
void transpose(const Real* in, Real* out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile) {
    const std::size_t i1 = std::min(rows, i0 + kTile);
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::size_t j1 = std::min(cols, j0 + kTile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * rows + i] = in[i * cols + j];
      }
    }
  }
}

template <typename Real>
std::vector<Real> transposed(const Real* in, std::size_t rows, std::size_t cols) {
  std::vector<Real> out(rows * cols);
  transpose(in, out.data(), rows, cols);
  return out;
}

/// c (+)= a * b^T with a[m,k], b[n,k].
template <typename Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const auto bt = transposed(b, n, k);
  gemm(a, bt.data(), c, m, k, n, accumulate);
}

/// c (+)= a^T * b with a[k,m], b[k,n].
template <typename Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const auto at = transposed(a, k, m);
  gemm(at.data(), b, c, m, k, n, accumulate);
}

}  // namespace viewdelta::kernels
