#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <vector>

namespace deepcaps::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapR = Eigen::Map<const RowMat<T>>;

// C[m,n] (+)= op(A) * op(B), all buffers row-major and contiguous.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MapR<T> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += CMapR<T>(a, M, K) * CMapR<T>(b, K, N);
  } else if (trans_a && !trans_b) {
    C.noalias() += CMapR<T>(a, K, M).transpose() * CMapR<T>(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += CMapR<T>(a, M, K) * CMapR<T>(b, N, K).transpose();
  } else {
    C.noalias() += CMapR<T>(a, K, M).transpose() * CMapR<T>(b, N, K).transpose();
  }
}

// C[m,n] = A[m,k] * B[k,n] with m padded to a multiple of the widest GEMM
// micro-kernel, so every row of A takes the same kernel path and equal rows
// of A give bitwise equal rows of C.
inline constexpr std::size_t kGemmRowBlock = 8;

template <typename T>
void gemm_row_stable(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const std::size_t padded = (m + kGemmRowBlock - 1) / kGemmRowBlock * kGemmRowBlock;
  if (padded == m) {
    gemm<T>(false, false, m, n, k, a, b, c, false);
    return;
  }
  std::vector<T> ap(padded * k, T(0)), cp(padded * n);
  std::copy_n(a, m * k, ap.data());
  gemm<T>(false, false, padded, n, k, ap.data(), b, cp.data(), false);
  std::copy_n(cp.data(), m * n, c);
}

}  // namespace deepcaps::detail
