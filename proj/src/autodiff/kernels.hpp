#pragma once

#include <cstddef>

// Dense float32 kernels. Every output element is reduced over the shared
// dimension in ascending index order, so results are bitwise reproducible.
namespace m3f::ad::kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c,
             bool accumulate);

// C[m x n] (+)= A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c,
             bool accumulate);

// C[m x n] (+)= A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c,
             bool accumulate);

void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst);

}  // namespace m3f::ad::kernels
