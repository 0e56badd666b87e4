#include "kernels.hpp"

#include <Eigen/Core>
#include <span>

#include "ontraffic/tensor.hpp"

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace ontraffic::kernels {

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void dense_eigen(const float* x, std::size_t rows, std::size_t k, const float* w, std::size_t n, const float* b,
                 float* out) {
  const auto r = static_cast<Eigen::Index>(rows), kk = static_cast<Eigen::Index>(k), nn = static_cast<Eigen::Index>(n);
  Eigen::Map<MatF> o(out, r, nn);
  Eigen::Map<const MatF> wm(w, kk, nn);
  if (k <= 2) {
    // GEMM set-up dominates for one or two input columns.
    for (Eigen::Index i = 0; i < r; ++i) {
      o.row(i) = x[i * kk] * wm.row(0);
      for (Eigen::Index j = 1; j < kk; ++j) o.row(i) += x[i * kk + j] * wm.row(j);
    }
  } else {
    o.noalias() = Eigen::Map<const MatF>(x, r, kk) * wm;
  }
  if (b != nullptr) {
    Eigen::Map<const Eigen::RowVectorXf> bm(b, nn);
    for (Eigen::Index i = 0; i < r; ++i) o.row(i) += bm;
  }
}

#if defined(__AVX512F__)

// R rows by NB 16-wide column blocks, accumulated in registers.
template <int NB, int R>
inline __attribute__((always_inline)) void block(const float* x, std::size_t r, std::size_t k, const float* w,
                                                 std::size_t n, std::size_t j0, const float* b, float* out) {
  __m512 acc[R][NB];
#pragma GCC unroll 8
  for (int i = 0; i < R; ++i)
#pragma GCC unroll 4
    for (int j = 0; j < NB; ++j) acc[i][j] = b ? _mm512_loadu_ps(b + j0 + 16 * j) : _mm512_setzero_ps();
  for (std::size_t kk = 0; kk < k; ++kk) {
    __m512 wv[NB];
#pragma GCC unroll 4
    for (int j = 0; j < NB; ++j) wv[j] = _mm512_loadu_ps(w + kk * n + j0 + 16 * j);
#pragma GCC unroll 8
    for (int i = 0; i < R; ++i) {
      const __m512 xv = _mm512_set1_ps(x[(r + i) * k + kk]);
#pragma GCC unroll 4
      for (int j = 0; j < NB; ++j) acc[i][j] = _mm512_fmadd_ps(xv, wv[j], acc[i][j]);
    }
  }
#pragma GCC unroll 8
  for (int i = 0; i < R; ++i)
#pragma GCC unroll 4
    for (int j = 0; j < NB; ++j) _mm512_storeu_ps(out + (r + i) * n + j0 + 16 * j, acc[i][j]);
}

template <int NB>
void panel(const float* x, std::size_t rows, std::size_t k, const float* w, std::size_t n, std::size_t j0,
           const float* b, float* out) {
  std::size_t r = 0;
  for (; r + 6 <= rows; r += 6) block<NB, 6>(x, r, k, w, n, j0, b, out);
  for (; r < rows; ++r) block<NB, 1>(x, r, k, w, n, j0, b, out);
}

#endif

}  // namespace

void dense_f32(const float* x, std::size_t rows, std::size_t k, const float* w, std::size_t n, const float* b,
               float* out, bool tanh) {
#if defined(__AVX512F__)
  if (k > 2 && n % 16 == 0) {
    for (std::size_t j0 = 0; j0 < n; j0 += 64) {
      switch ((n - j0 >= 64 ? 64 : n - j0) / 16) {
        case 4: panel<4>(x, rows, k, w, n, j0, b, out); break;
        case 3: panel<3>(x, rows, k, w, n, j0, b, out); break;
        case 2: panel<2>(x, rows, k, w, n, j0, b, out); break;
        default: panel<1>(x, rows, k, w, n, j0, b, out); break;
      }
    }
  } else {
    dense_eigen(x, rows, k, w, n, b, out);
  }
#else
  dense_eigen(x, rows, k, w, n, b, out);
#endif
  if (tanh) ad::tanh_inplace(std::span<float>(out, rows * n));
}

}  // namespace ontraffic::kernels
