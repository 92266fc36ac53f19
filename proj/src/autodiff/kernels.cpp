#include "autodiff/kernels.hpp"

#include <algorithm>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace m3f::ad::kernels {

namespace {

#if defined(__AVX512F__)

// R rows x 32 columns of C held in registers. Every element is updated as
// c = fma(a, b, c) for p = 0..k-1, whatever R and the column mask are, so a
// row's result never depends on its neighbours.
template <int R>
void tile(std::size_t k, std::size_t n, const float* a, std::size_t lda, const float* b, float* c,
          __mmask16 m0, __mmask16 m1, bool accumulate) {
    __m512 acc[R][2];
    for (int r = 0; r < R; ++r) {
        if (accumulate) {
            acc[r][0] = _mm512_maskz_loadu_ps(m0, c + r * n);
            acc[r][1] = _mm512_maskz_loadu_ps(m1, c + r * n + 16);
        } else {
            acc[r][0] = _mm512_setzero_ps();
            acc[r][1] = _mm512_setzero_ps();
        }
    }
    for (std::size_t p = 0; p < k; ++p) {
        const __m512 b0 = _mm512_maskz_loadu_ps(m0, b + p * n);
        const __m512 b1 = _mm512_maskz_loadu_ps(m1, b + p * n + 16);
        for (int r = 0; r < R; ++r) {
            const __m512 av = _mm512_set1_ps(a[r * lda + p]);
            acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
            acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
        }
    }
    for (int r = 0; r < R; ++r) {
        _mm512_mask_storeu_ps(c + r * n, m0, acc[r][0]);
        _mm512_mask_storeu_ps(c + r * n + 16, m1, acc[r][1]);
    }
}

void gemm_nn_impl(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c,
                  bool accumulate) {
    constexpr std::size_t kRows = 8;
    for (std::size_t j0 = 0; j0 < n; j0 += 32) {
        const std::size_t width = std::min<std::size_t>(32, n - j0);
        const auto m0 = static_cast<__mmask16>(width >= 16 ? 0xFFFF : (1u << width) - 1);
        const auto m1 = static_cast<__mmask16>(width <= 16 ? 0 : width >= 32 ? 0xFFFF : (1u << (width - 16)) - 1);
        std::size_t i = 0;
        for (; i + kRows <= m; i += kRows) {
            tile<8>(k, n, a + i * k, k, b + j0, c + i * n + j0, m0, m1, accumulate);
        }
        const float* ar = a + i * k;
        float* cr = c + i * n + j0;
        switch (m - i) {
        case 7: tile<7>(k, n, ar, k, b + j0, cr, m0, m1, accumulate); break;
        case 6: tile<6>(k, n, ar, k, b + j0, cr, m0, m1, accumulate); break;
        case 5: tile<5>(k, n, ar, k, b + j0, cr, m0, m1, accumulate); break;
        case 4: tile<4>(k, n, ar, k, b + j0, cr, m0, m1, accumulate); break;
        case 3: tile<3>(k, n, ar, k, b + j0, cr, m0, m1, accumulate); break;
        case 2: tile<2>(k, n, ar, k, b + j0, cr, m0, m1, accumulate); break;
        case 1: tile<1>(k, n, ar, k, b + j0, cr, m0, m1, accumulate); break;
        default: break;
        }
    }
}

#else

void gemm_nn_impl(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c,
                  bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + m * n, 0.0f);
    }
    // i-p-j order: the inner loop is contiguous in B and C and vectorizes,
    // while each C[i][j] still sums over p in ascending order.
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        const float* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

#endif

}  // namespace

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c,
             bool accumulate) {
    if (m == 0 || n == 0) {
        return;
    }
    gemm_nn_impl(m, k, n, a, b, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c,
             bool accumulate) {
    std::vector<float> bt(k * n);
    transpose(n, k, b, bt.data());
    gemm_nn(m, k, n, a, bt.data(), c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c,
             bool accumulate) {
    std::vector<float> at(m * k);
    transpose(k, m, a, at.data());
    gemm_nn(m, k, n, at.data(), b, c, accumulate);
}

void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst) {
    constexpr std::size_t block = 16;
    for (std::size_t r0 = 0; r0 < rows; r0 += block) {
        const std::size_t r1 = std::min(rows, r0 + block);
        for (std::size_t c0 = 0; c0 < cols; c0 += block) {
            const std::size_t c1 = std::min(cols, c0 + block);
            for (std::size_t r = r0; r < r1; ++r) {
                for (std::size_t col = c0; col < c1; ++col) {
                    dst[col * rows + r] = src[r * cols + col];
                }
            }
        }
    }
}

}  // namespace m3f::ad::kernels
