#pragma once

#include "ditair/kernels.hpp"
#include "ditair/tensor.hpp"

namespace ditair {
namespace layers {

// =============================================================================
// Linear
// =============================================================================

template <typename T>
struct LinearCache {
    Tensor<T> x;  // input saved for the weight/input gradients
};

// y = x * w + b with x [rows, in], w [in, out], b [out] or null.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                 LinearCache<T>* cache);

// Accumulates dw, db (if present) and dx (if present).
template <typename T>
void linear_backward(const Tensor<T>& dy, const LinearCache<T>& cache,
                     const Tensor<T>& w, Tensor<T>& dw, Tensor<T>* db,
                     Tensor<T>* dx);

// =============================================================================
// MLP: d -> 4d -> GELU -> d
// =============================================================================

template <typename T>
struct MlpCache {
    LinearCache<T> up;
    Tensor<T> pre;    // pre-activation
    LinearCache<T> down;  // its x is the activation
};

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const Tensor<T>& w_up, const Tensor<T>& b_up,
                      const Tensor<T>& w_down, const Tensor<T>& b_down,
                      MlpCache<T>* cache);

template <typename T>
void mlp_backward(const Tensor<T>& dy, const MlpCache<T>& cache, const Tensor<T>& w_up,
                  const Tensor<T>& w_down, Tensor<T>& dw_up, Tensor<T>& db_up,
                  Tensor<T>& dw_down, Tensor<T>& db_down, Tensor<T>* dx);

// =============================================================================
// Rotary tables
// =============================================================================
//
// One table row per sequence position. The leading n_text rows are identity
// rotations; image rows encode the (row, col) patch coordinate: the first
// half of the pairs rotates with the row index, the second half with the
// column index. head_dim must be divisible by 4 so both axes get whole pairs.

template <typename T>
struct RopeTable {
    int64_t head_dim = 0;
    int64_t n_positions = 0;
    Tensor<T> cos_t, sin_t;  // [n_positions, head_dim/2]
};

template <typename T>
RopeTable<T> build_rope_table(int64_t n_text, int64_t grid_h, int64_t grid_w,
                              int64_t head_dim, double base = 10000.0);

// Rotates every head segment of x [rows, d] by its token's table row; the
// token index of row r is r % seq_len (rows are sample-major). pos_offset
// shifts the table row (used when a stream is a slice of a longer sequence).
template <typename T>
void rope_apply(const Tensor<T>& x, const RopeTable<T>& table, int64_t heads,
                int64_t seq_len, int64_t pos_offset, Tensor<T>& y);

template <typename T>
void rope_apply_backward(const Tensor<T>& dy, const RopeTable<T>& table, int64_t heads,
                         int64_t seq_len, int64_t pos_offset, Tensor<T>& dx);

// =============================================================================
// QK RMS-norm (per token, per head segment, learned per-channel scale)
// =============================================================================

template <typename T>
void qknorm_forward(const Tensor<T>& x, const Tensor<T>& g, int64_t heads,
                    Tensor<T>& y, Tensor<T>& inv_rms, T eps = T(1e-6));

template <typename T>
void qknorm_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& g,
                     const Tensor<T>& inv_rms, int64_t heads, Tensor<T>& dx,
                     Tensor<T>& dg);

// =============================================================================
// Attention
// =============================================================================

enum class Mask { None, Causal };

template <typename T>
struct AttnParams {
    const Tensor<T>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    const Tensor<T>*q_scale, *k_scale;  // [d]
    int64_t heads = 1;
};

template <typename T>
struct AttnGrads {
    Tensor<T>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *q_scale, *k_scale;
};

// Post-projection attention over prepared q, k, v laid out [B*L, d] with d =
// heads * head_dim. Caches the probabilities for the backward.
template <typename T>
struct CoreCache {
    Tensor<T> probs;  // [B * heads * Lq, Lk]
};

template <typename T>
Tensor<T> attn_core_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            int64_t batch, int64_t lq, int64_t lk, int64_t heads,
                            Mask mask, CoreCache<T>* cache);

template <typename T>
void attn_core_backward(const Tensor<T>& dctx, const Tensor<T>& q, const Tensor<T>& k,
                        const Tensor<T>& v, const CoreCache<T>& cache, int64_t batch,
                        int64_t lq, int64_t lk, int64_t heads, Mask mask,
                        Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv);

// One stream's projection + QK-norm + rotary, producing attention-ready
// q/k/v. rope may be null (cross-attention streams carry no grid position).
template <typename T>
struct QkvCache {
    LinearCache<T> xq, xk, xv;
    Tensor<T> q_raw, k_raw;      // post-projection, pre-norm
    Tensor<T> q_ir, k_ir;        // inv rms per (row, head)
    Tensor<T> q_nr, k_nr;        // post-norm, pre-rotation
    Tensor<T> q, k, v;           // attention-ready
};

template <typename T>
void qkv_project(const Tensor<T>& xq, const Tensor<T>& xkv, const AttnParams<T>& p,
                 const RopeTable<T>* rope, int64_t seq_q, int64_t seq_kv,
                 int64_t pos_offset_q, int64_t pos_offset_kv, QkvCache<T>& cache);

template <typename T>
void qkv_project_backward(const Tensor<T>& dq, const Tensor<T>& dk, const Tensor<T>& dv,
                          const QkvCache<T>& cache, const AttnParams<T>& p,
                          const RopeTable<T>* rope, int64_t seq_q, int64_t seq_kv,
                          int64_t pos_offset_q, int64_t pos_offset_kv,
                          const AttnGrads<T>& g, Tensor<T>* dxq, Tensor<T>* dxkv);

// Full attention sublayer: project, normalize, rotate, attend, O-project.
// xq and xkv may alias (self-attention); pass the same dx pointer twice and
// both contributions accumulate into it.
template <typename T>
struct MhaCache {
    QkvCache<T> qkv;
    CoreCache<T> core;
    LinearCache<T> out;
};

template <typename T>
Tensor<T> mha_forward(const Tensor<T>& xq, const Tensor<T>& xkv, int64_t batch,
                      const AttnParams<T>& p, const RopeTable<T>* rope, Mask mask,
                      MhaCache<T>& cache);

template <typename T>
void mha_backward(const Tensor<T>& dy, const Tensor<T>& xq_unused, int64_t batch,
                  const AttnParams<T>& p, const RopeTable<T>* rope, Mask mask,
                  const MhaCache<T>& cache, const AttnGrads<T>& g, Tensor<T>* dxq,
                  Tensor<T>* dxkv);

// =============================================================================
// LayerNorm wrapper with cache
// =============================================================================

template <typename T>
struct LnCache {
    Tensor<T> y;        // normalized output
    Tensor<T> inv_std;  // per row
};

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, T eps, LnCache<T>* cache);

template <typename T>
void layernorm_backward_cached(const Tensor<T>& dy, const LnCache<T>& cache,
                               Tensor<T>& dx);

// =============================================================================
// Per-sample modulation over a token span
// =============================================================================
//
// Rows are sample-major: row r belongs to sample r / seq_len, token r %
// seq_len. The span [lo, hi) selects which tokens of every sample are
// touched (a stream's segment, or the whole sequence). shift/scale/gate
// point at per-sample vectors of width d with the given row stride; a
// stride of 0 broadcasts one vector (a shared learned gate).

template <typename T>
void modulate_span(const Tensor<T>& x, const T* shift, const T* scale,
                   int64_t vec_stride, int64_t batch, int64_t seq_len, int64_t lo,
                   int64_t hi, Tensor<T>& y);

template <typename T>
void modulate_span_backward(const Tensor<T>& dy, const Tensor<T>& x, const T* scale,
                            int64_t vec_stride, int64_t batch, int64_t seq_len,
                            int64_t lo, int64_t hi, Tensor<T>& dx, T* dshift,
                            T* dscale, int64_t dvec_stride);

// residual[r] += gate_s .* u[r] over the span.
template <typename T>
void gate_span(Tensor<T>& residual, const Tensor<T>& u, const T* gate,
               int64_t gate_stride, int64_t batch, int64_t seq_len, int64_t lo,
               int64_t hi);

template <typename T>
void gate_span_backward(const Tensor<T>& dresidual, const Tensor<T>& u, const T* gate,
                        int64_t gate_stride, int64_t batch, int64_t seq_len, int64_t lo,
                        int64_t hi, Tensor<T>& du, T* dgate, int64_t dgate_stride);

// =============================================================================
// Timestep features
// =============================================================================

// Sinusoidal features of t*1000: [cos(t*1000*f_j) | sin(t*1000*f_j)] with
// f_j = 10000^(-j/(dim/2)). dim must be even. No gradient flows into t.
template <typename T>
Tensor<T> timestep_embedding(const Tensor<T>& t, int64_t dim);

}  // namespace layers
}  // namespace ditair
