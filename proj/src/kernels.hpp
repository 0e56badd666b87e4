#pragma once

// Single-precision dense layer used on the inference query path.

#include <cstddef>

namespace ontraffic::kernels {

/// out (rows x n) = x (rows x k) W (k x n) + b, all row-major and contiguous.
/// `b` may be null. Applies tanh to the result when `tanh` is set.
void dense_f32(const float* x, std::size_t rows, std::size_t k, const float* w, std::size_t n, const float* b,
               float* out, bool tanh);

}  // namespace ontraffic::kernels
