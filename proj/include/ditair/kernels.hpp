#pragma once

#include "ditair/tensor.hpp"

namespace ditair {
namespace kernels {

// =============================================================================
// Matrix products
// =============================================================================
//
// All three products accumulate every output element over the shared axis in
// ascending order, matching a naive triple loop bit for bit. Parallel runs
// split by output row, so each element keeps its serial accumulation chain.
// When `accumulate` is false the output is overwritten, otherwise added to.

// c[m,n] (+)= a[m,k] * b[k,n]
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
               bool accumulate = false);

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
               bool accumulate = false);

// c[m,n] (+)= a[k,m]^T * b[k,n]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
               bool accumulate = false);

// Rank-2 convenience wrapper: returns a * b.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Gradients of c = a * b. Either output may be null to skip it.
template <typename T>
void matmul_backward(const T* dc, const T* a, const T* b, T* da, T* db,
                     int64_t m, int64_t k, int64_t n);

// =============================================================================
// Elementwise / row ops (x is [rows, cols] row-major)
// =============================================================================

template <typename T>
void add_bias(T* x, const T* bias, int64_t rows, int64_t cols);

// dbias[j] += sum over rows of dy[.,j]
template <typename T>
void add_bias_backward(const T* dy, T* dbias, int64_t rows, int64_t cols);

// Exact GELU: y = x * Phi(x) with Phi the standard normal CDF.
template <typename T>
void gelu(const T* x, T* y, int64_t n);

// dx += dy * gelu'(x)
template <typename T>
void gelu_backward(const T* dy, const T* x, T* dx, int64_t n);

// Row softmax with max subtraction.
template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols);

// dx += y .* (dy - sum(dy .* y)) per row. dx may alias dy only if it is
// overwritten, so it must not; callers pass a separate buffer.
template <typename T>
void softmax_backward(const T* dy, const T* y, T* dx, int64_t rows, int64_t cols);

// Affine-free LayerNorm. Caches mean and 1/std per row for the backward.
template <typename T>
void layernorm_rows(const T* x, T* y, T* mean, T* inv_std, int64_t rows,
                    int64_t cols, T eps);

// dx += inv_std * (dy - mean(dy) - y .* mean(dy .* y)) per row.
template <typename T>
void layernorm_backward(const T* dy, const T* y, const T* inv_std, T* dx,
                        int64_t rows, int64_t cols);

// RMS norm with a learned per-column scale g. Caches 1/rms per row.
template <typename T>
void rmsnorm_rows(const T* x, const T* g, T* y, T* inv_rms, int64_t rows,
                  int64_t cols, T eps);

template <typename T>
void rmsnorm_backward(const T* dy, const T* x, const T* g, const T* inv_rms,
                      T* dx, T* dg, int64_t rows, int64_t cols);

// Rotates column pairs (2j, 2j+1) of each row by per-row, per-pair angles
// given as cos/sin tables of shape [rows, cols/2].
template <typename T>
void rotate_pairs(const T* x, const T* cos_t, const T* sin_t, T* y,
                  int64_t rows, int64_t cols);

// The inverse rotation applied to dy, accumulated into dx.
template <typename T>
void rotate_pairs_backward(const T* dy, const T* cos_t, const T* sin_t, T* dx,
                           int64_t rows, int64_t cols);

// out[i,:] = table[ids[i],:]
template <typename T>
void embedding_lookup(const T* table, const int32_t* ids, T* out, int64_t n,
                      int64_t dim);

// dtable[ids[i],:] += dy[i,:], rows visited in ascending i so repeated ids
// accumulate in a fixed order.
template <typename T>
void embedding_backward(const T* dy, const int32_t* ids, T* dtable, int64_t n,
                        int64_t dim);

// Mean over all elements of (pred - target)^2, accumulated in double.
template <typename T>
double mse(const T* pred, const T* target, int64_t n);

// dpred += scale * 2/n * (pred - target)
template <typename T>
void mse_backward(const T* pred, const T* target, T* dpred, int64_t n,
                  double scale = 1.0);

// =============================================================================
// Convolution (toy image sizes; serial backward keeps accumulation order fixed)
// =============================================================================

// x[b,ci,h,w], w[co,ci,kh,kw], bias[co] -> y[b,co,ho,wo]
template <typename T>
void conv2d(const T* x, const T* w, const T* bias, T* y, int64_t b, int64_t ci,
            int64_t h, int64_t wd, int64_t co, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad);

template <typename T>
void conv2d_backward(const T* dy, const T* x, const T* w, T* dx, T* dw, T* dbias,
                     int64_t b, int64_t ci, int64_t h, int64_t wd, int64_t co,
                     int64_t kh, int64_t kw, int64_t stride, int64_t pad);

// Nearest-neighbour 2x upsampling.
template <typename T>
void upsample2x(const T* x, T* y, int64_t b, int64_t c, int64_t h, int64_t w);

// dx += sum of the 2x2 block of dy feeding each input element.
template <typename T>
void upsample2x_backward(const T* dy, T* dx, int64_t b, int64_t c, int64_t h,
                         int64_t w);

}  // namespace kernels

// Throws NumericError naming `what` if any element is non-finite.
template <typename T>
void require_finite(const Tensor<T>& t, const char* what);

}  // namespace ditair
