#pragma once

// Row-major matrix kernels backed by Eigen's GEMM. All three variants add
// into the destination.

#include <cstddef>

#include <Eigen/Core>

namespace ivcxr::diff::kernels {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMajor<T>>;
template <typename T>
using Map = Eigen::Map<RowMajor<T>>;

/// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
    Map<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
}

/// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
    Map<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
}

/// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
    Map<T>(c, M, N).noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
}

}  // namespace ivcxr::diff::kernels
