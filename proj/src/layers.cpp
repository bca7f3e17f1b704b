#include "ditair/layers.hpp"

#include <cmath>

#include "ditair/parallel.hpp"

namespace ditair {
namespace layers {

// =============================================================================
// Linear
// =============================================================================

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                 LinearCache<T>* cache) {
    check(x.rank() == 2 && w.rank() == 2, "linear expects rank-2 tensors");
    check(x.dim(1) == w.dim(0), "linear width mismatch: x " + shape_str(x.shape) +
                                    " vs w " + shape_str(w.shape));
    Tensor<T> y({x.dim(0), w.dim(1)});
    kernels::matmul_nn(x.ptr(), w.ptr(), y.ptr(), x.dim(0), x.dim(1), w.dim(1), false);
    if (b) {
        check(b->size() == w.dim(1), "bias width mismatch");
        kernels::add_bias(y.ptr(), b->ptr(), y.dim(0), y.dim(1));
    }
    if (cache) cache->x = x;
    return y;
}

template <typename T>
void linear_backward(const Tensor<T>& dy, const LinearCache<T>& cache,
                     const Tensor<T>& w, Tensor<T>& dw, Tensor<T>* db,
                     Tensor<T>* dx) {
    const int64_t m = cache.x.dim(0), k = cache.x.dim(1), n = w.dim(1);
    kernels::matmul_backward(dy.ptr(), cache.x.ptr(), w.ptr(),
                             dx ? dx->ptr() : nullptr, dw.ptr(), m, k, n);
    if (db) kernels::add_bias_backward(dy.ptr(), db->ptr(), m, n);
}

// =============================================================================
// MLP
// =============================================================================

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const Tensor<T>& w_up, const Tensor<T>& b_up,
                      const Tensor<T>& w_down, const Tensor<T>& b_down,
                      MlpCache<T>* cache) {
    MlpCache<T> local;
    MlpCache<T>& c = cache ? *cache : local;
    c.pre = linear(x, w_up, &b_up, &c.up);
    Tensor<T> act(c.pre.shape);
    kernels::gelu(c.pre.ptr(), act.ptr(), c.pre.size());
    return linear(act, w_down, &b_down, &c.down);
}

template <typename T>
void mlp_backward(const Tensor<T>& dy, const MlpCache<T>& cache, const Tensor<T>& w_up,
                  const Tensor<T>& w_down, Tensor<T>& dw_up, Tensor<T>& db_up,
                  Tensor<T>& dw_down, Tensor<T>& db_down, Tensor<T>* dx) {
    Tensor<T> dact(cache.down.x.shape);
    linear_backward(dy, cache.down, w_down, dw_down, &db_down, &dact);
    Tensor<T> dpre(cache.pre.shape);
    kernels::gelu_backward(dact.ptr(), cache.pre.ptr(), dpre.ptr(), dpre.size());
    linear_backward(dpre, cache.up, w_up, dw_up, &db_up, dx);
}

// =============================================================================
// Rotary tables
// =============================================================================

template <typename T>
RopeTable<T> build_rope_table(int64_t n_text, int64_t grid_h, int64_t grid_w,
                              int64_t head_dim, double base) {
    check(head_dim % 2 == 0, "rotary dimension must be even");
    if (grid_h * grid_w > 0)
        check(head_dim % 4 == 0, "2D rotary needs head_dim divisible by 4");
    RopeTable<T> t;
    t.head_dim = head_dim;
    t.n_positions = n_text + grid_h * grid_w;
    const int64_t half = head_dim / 2;
    t.cos_t = Tensor<T>({t.n_positions, half});
    t.sin_t = Tensor<T>({t.n_positions, half});
    for (int64_t i = 0; i < n_text; ++i) {
        for (int64_t j = 0; j < half; ++j) {
            t.cos_t.at(i, j) = T(1);
            t.sin_t.at(i, j) = T(0);
        }
    }
    const int64_t ppa = head_dim / 4;  // pairs per axis
    for (int64_t r = 0; r < grid_h; ++r) {
        for (int64_t c = 0; c < grid_w; ++c) {
            const int64_t row = n_text + r * grid_w + c;
            for (int64_t j = 0; j < half; ++j) {
                const int64_t axis_j = j < ppa ? j : j - ppa;
                const double pos = j < ppa ? double(r) : double(c);
                const double freq =
                    std::pow(base, -double(axis_j) / double(ppa));
                const double th = pos * freq;
                t.cos_t.at(row, j) = T(std::cos(th));
                t.sin_t.at(row, j) = T(std::sin(th));
            }
        }
    }
    return t;
}

template <typename T>
void rope_apply(const Tensor<T>& x, const RopeTable<T>& table, int64_t heads,
                int64_t seq_len, int64_t pos_offset, Tensor<T>& y) {
    const int64_t rows = x.dim(0), d = x.dim(1);
    const int64_t hd = d / heads, half = hd / 2;
    check(hd == table.head_dim, "rope table head_dim mismatch");
    parallel_for(rows, [&, rows, d, hd, half](int64_t r) {
        const int64_t pos = pos_offset + (r % seq_len);
        const T* cs = table.cos_t.ptr() + pos * half;
        const T* sn = table.sin_t.ptr() + pos * half;
        const T* xr = x.ptr() + r * d;
        T* yr = y.ptr() + r * d;
        for (int64_t h = 0; h < heads; ++h) {
            const T* xs = xr + h * hd;
            T* ys = yr + h * hd;
            for (int64_t j = 0; j < half; ++j) {
                const T a = xs[2 * j], b = xs[2 * j + 1];
                ys[2 * j] = a * cs[j] - b * sn[j];
                ys[2 * j + 1] = a * sn[j] + b * cs[j];
            }
        }
    });
}

template <typename T>
void rope_apply_backward(const Tensor<T>& dy, const RopeTable<T>& table, int64_t heads,
                         int64_t seq_len, int64_t pos_offset, Tensor<T>& dx) {
    const int64_t rows = dy.dim(0), d = dy.dim(1);
    const int64_t hd = d / heads, half = hd / 2;
    parallel_for(rows, [&, rows, d, hd, half](int64_t r) {
        const int64_t pos = pos_offset + (r % seq_len);
        const T* cs = table.cos_t.ptr() + pos * half;
        const T* sn = table.sin_t.ptr() + pos * half;
        const T* gr = dy.ptr() + r * d;
        T* dr = dx.ptr() + r * d;
        for (int64_t h = 0; h < heads; ++h) {
            const T* gs = gr + h * hd;
            T* ds = dr + h * hd;
            for (int64_t j = 0; j < half; ++j) {
                const T da = gs[2 * j], db = gs[2 * j + 1];
                ds[2 * j] += da * cs[j] + db * sn[j];
                ds[2 * j + 1] += -da * sn[j] + db * cs[j];
            }
        }
    });
}

// =============================================================================
// QK norm
// =============================================================================

template <typename T>
void qknorm_forward(const Tensor<T>& x, const Tensor<T>& g, int64_t heads,
                    Tensor<T>& y, Tensor<T>& inv_rms, T eps) {
    const int64_t rows = x.dim(0), d = x.dim(1), hd = d / heads;
    parallel_for(rows, [&, d, hd](int64_t r) {
        const T* xr = x.ptr() + r * d;
        T* yr = y.ptr() + r * d;
        for (int64_t h = 0; h < heads; ++h) {
            double ms = 0.0;
            for (int64_t j = 0; j < hd; ++j) {
                const double v = double(xr[h * hd + j]);
                ms += v * v;
            }
            ms /= double(hd);
            const double ir = 1.0 / std::sqrt(ms + double(eps));
            inv_rms[r * heads + h] = T(ir);
            for (int64_t j = 0; j < hd; ++j)
                yr[h * hd + j] = T(double(xr[h * hd + j]) * ir * double(g[h * hd + j]));
        }
    });
}

template <typename T>
void qknorm_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& g,
                     const Tensor<T>& inv_rms, int64_t heads, Tensor<T>& dx,
                     Tensor<T>& dg) {
    // dg sums over rows; keep the row loop serial for a fixed order.
    const int64_t rows = x.dim(0), d = x.dim(1), hd = d / heads;
    const double inv_n = 1.0 / double(hd);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * d;
        const T* gr = dy.ptr() + r * d;
        T* dr = dx.ptr() + r * d;
        for (int64_t h = 0; h < heads; ++h) {
            const double ir = double(inv_rms[r * heads + h]);
            double dot = 0.0;
            for (int64_t j = 0; j < hd; ++j) {
                const int64_t c = h * hd + j;
                dot += double(gr[c]) * double(g[c]) * double(xr[c]);
            }
            const double corr = dot * inv_n * ir * ir * ir;
            for (int64_t j = 0; j < hd; ++j) {
                const int64_t c = h * hd + j;
                dr[c] += T(double(gr[c]) * double(g[c]) * ir - double(xr[c]) * corr);
                dg[c] += T(double(gr[c]) * double(xr[c]) * ir);
            }
        }
    }
}

// =============================================================================
// Attention core
// =============================================================================

template <typename T>
Tensor<T> attn_core_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            int64_t batch, int64_t lq, int64_t lk, int64_t heads,
                            Mask mask, CoreCache<T>* cache) {
    const int64_t d = q.dim(1), hd = d / heads;
    check(d % heads == 0, "width not divisible by head count");
    check(mask != Mask::Causal || lq == lk, "causal mask needs square attention");
    const T scale = T(1.0 / std::sqrt(double(hd)));
    Tensor<T> logits({batch * heads * lq, lk});
    parallel_for(batch * heads, [&, lq, lk, hd, d, scale](int64_t plane) {
        const int64_t b = plane / heads, h = plane % heads;
        for (int64_t i = 0; i < lq; ++i) {
            const T* qi = q.ptr() + (b * lq + i) * d + h * hd;
            T* lrow = logits.ptr() + (plane * lq + i) * lk;
            for (int64_t j = 0; j < lk; ++j) {
                const T* kj = k.ptr() + (b * lk + j) * d + h * hd;
                T acc = T(0);
                for (int64_t c = 0; c < hd; ++c) acc += qi[c] * kj[c];
                lrow[j] = acc * scale;
                if (mask == Mask::Causal && j > i) lrow[j] = T(-1e30);
            }
        }
    }, 1);
    Tensor<T> probs({batch * heads * lq, lk});
    kernels::softmax_rows(logits.ptr(), probs.ptr(), batch * heads * lq, lk);
    Tensor<T> ctx({batch * lq, d});
    parallel_for(batch * heads, [&, lq, lk, hd, d](int64_t plane) {
        const int64_t b = plane / heads, h = plane % heads;
        for (int64_t i = 0; i < lq; ++i) {
            T* out = ctx.ptr() + (b * lq + i) * d + h * hd;
            const T* prow = probs.ptr() + (plane * lq + i) * lk;
            for (int64_t j = 0; j < lk; ++j) {
                const T* vj = v.ptr() + (b * lk + j) * d + h * hd;
                const T p = prow[j];
                for (int64_t c = 0; c < hd; ++c) out[c] += p * vj[c];
            }
        }
    }, 1);
    if (cache) cache->probs = std::move(probs);
    return ctx;
}

template <typename T>
void attn_core_backward(const Tensor<T>& dctx, const Tensor<T>& q, const Tensor<T>& k,
                        const Tensor<T>& v, const CoreCache<T>& cache, int64_t batch,
                        int64_t lq, int64_t lk, int64_t heads, Mask /*mask*/,
                        Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv) {
    // Masked positions hold probability 0, so their logit gradient vanishes
    // through softmax_backward without special cases.
    const int64_t d = q.dim(1), hd = d / heads;
    const T scale = T(1.0 / std::sqrt(double(hd)));
    const Tensor<T>& probs = cache.probs;
    parallel_for(batch * heads, [&, lq, lk, hd, d, scale](int64_t plane) {
        const int64_t b = plane / heads, h = plane % heads;
        Tensor<T> dprobs({lq, lk});
        for (int64_t i = 0; i < lq; ++i) {
            const T* dout = dctx.ptr() + (b * lq + i) * d + h * hd;
            for (int64_t j = 0; j < lk; ++j) {
                const T* vj = v.ptr() + (b * lk + j) * d + h * hd;
                T acc = T(0);
                for (int64_t c = 0; c < hd; ++c) acc += dout[c] * vj[c];
                dprobs.at(i, j) = acc;
            }
        }
        // dv[j] += sum_i probs[i,j] * dctx[i]; j owns its slice.
        for (int64_t j = 0; j < lk; ++j) {
            T* dvj = dv.ptr() + (b * lk + j) * d + h * hd;
            for (int64_t i = 0; i < lq; ++i) {
                const T p = probs[(plane * lq + i) * lk + j];
                const T* dout = dctx.ptr() + (b * lq + i) * d + h * hd;
                for (int64_t c = 0; c < hd; ++c) dvj[c] += p * dout[c];
            }
        }
        Tensor<T> dlogits({lq, lk});
        kernels::softmax_backward(dprobs.ptr(), probs.ptr() + plane * lq * lk,
                                  dlogits.ptr(), lq, lk);
        for (int64_t i = 0; i < lq; ++i) {
            T* dqi = dq.ptr() + (b * lq + i) * d + h * hd;
            const T* dlrow = dlogits.ptr() + i * lk;
            for (int64_t j = 0; j < lk; ++j) {
                const T* kj = k.ptr() + (b * lk + j) * d + h * hd;
                const T w = dlrow[j] * scale;
                for (int64_t c = 0; c < hd; ++c) dqi[c] += w * kj[c];
            }
        }
        for (int64_t j = 0; j < lk; ++j) {
            T* dkj = dk.ptr() + (b * lk + j) * d + h * hd;
            for (int64_t i = 0; i < lq; ++i) {
                const T w = dlogits.at(i, j) * scale;
                const T* qi = q.ptr() + (b * lq + i) * d + h * hd;
                for (int64_t c = 0; c < hd; ++c) dkj[c] += w * qi[c];
            }
        }
    }, 1);
}

// =============================================================================
// Stream projection
// =============================================================================

template <typename T>
void qkv_project(const Tensor<T>& xq, const Tensor<T>& xkv, const AttnParams<T>& p,
                 const RopeTable<T>* rope, int64_t seq_q, int64_t seq_kv,
                 int64_t pos_offset_q, int64_t pos_offset_kv, QkvCache<T>& cache) {
    cache.q_raw = linear(xq, *p.wq, p.bq, &cache.xq);
    cache.k_raw = linear(xkv, *p.wk, p.bk, &cache.xk);
    Tensor<T> v = linear(xkv, *p.wv, p.bv, &cache.xv);

    const int64_t rq = cache.q_raw.dim(0), rk = cache.k_raw.dim(0);
    cache.q_nr = Tensor<T>(cache.q_raw.shape);
    cache.k_nr = Tensor<T>(cache.k_raw.shape);
    cache.q_ir = Tensor<T>({rq * p.heads});
    cache.k_ir = Tensor<T>({rk * p.heads});
    qknorm_forward(cache.q_raw, *p.q_scale, p.heads, cache.q_nr, cache.q_ir);
    qknorm_forward(cache.k_raw, *p.k_scale, p.heads, cache.k_nr, cache.k_ir);

    if (rope) {
        cache.q = Tensor<T>(cache.q_nr.shape);
        cache.k = Tensor<T>(cache.k_nr.shape);
        rope_apply(cache.q_nr, *rope, p.heads, seq_q, pos_offset_q, cache.q);
        rope_apply(cache.k_nr, *rope, p.heads, seq_kv, pos_offset_kv, cache.k);
    } else {
        cache.q = cache.q_nr;
        cache.k = cache.k_nr;
    }
    cache.v = std::move(v);
}

template <typename T>
void qkv_project_backward(const Tensor<T>& dq, const Tensor<T>& dk, const Tensor<T>& dv,
                          const QkvCache<T>& cache, const AttnParams<T>& p,
                          const RopeTable<T>* rope, int64_t seq_q, int64_t seq_kv,
                          int64_t pos_offset_q, int64_t pos_offset_kv,
                          const AttnGrads<T>& g, Tensor<T>* dxq, Tensor<T>* dxkv) {
    Tensor<T> dq_nr(dq.shape), dk_nr(dk.shape);
    if (rope) {
        rope_apply_backward(dq, *rope, p.heads, seq_q, pos_offset_q, dq_nr);
        rope_apply_backward(dk, *rope, p.heads, seq_kv, pos_offset_kv, dk_nr);
    } else {
        dq_nr = dq;
        dk_nr = dk;
    }
    Tensor<T> dq_raw(dq.shape), dk_raw(dk.shape);
    qknorm_backward(dq_nr, cache.q_raw, *p.q_scale, cache.q_ir, p.heads, dq_raw,
                    *g.q_scale);
    qknorm_backward(dk_nr, cache.k_raw, *p.k_scale, cache.k_ir, p.heads, dk_raw,
                    *g.k_scale);
    linear_backward(dq_raw, cache.xq, *p.wq, *g.wq, g.bq, dxq);
    linear_backward(dk_raw, cache.xk, *p.wk, *g.wk, g.bk, dxkv);
    linear_backward(dv, cache.xv, *p.wv, *g.wv, g.bv, dxkv);
}

// =============================================================================
// Full attention sublayer
// =============================================================================

template <typename T>
Tensor<T> mha_forward(const Tensor<T>& xq, const Tensor<T>& xkv, int64_t batch,
                      const AttnParams<T>& p, const RopeTable<T>* rope, Mask mask,
                      MhaCache<T>& cache) {
    check(xq.dim(1) == p.wq->dim(0) && xkv.dim(1) == p.wk->dim(0),
          "attention width mismatch");
    const int64_t lq = xq.dim(0) / batch, lk = xkv.dim(0) / batch;
    qkv_project(xq, xkv, p, rope, lq, lk, 0, 0, cache.qkv);
    Tensor<T> ctx = attn_core_forward(cache.qkv.q, cache.qkv.k, cache.qkv.v, batch, lq,
                                      lk, p.heads, mask, &cache.core);
    return linear(ctx, *p.wo, p.bo, &cache.out);
}

template <typename T>
void mha_backward(const Tensor<T>& dy, const Tensor<T>& /*xq_unused*/, int64_t batch,
                  const AttnParams<T>& p, const RopeTable<T>* rope, Mask mask,
                  const MhaCache<T>& cache, const AttnGrads<T>& g, Tensor<T>* dxq,
                  Tensor<T>* dxkv) {
    const int64_t lq = cache.qkv.q.dim(0) / batch, lk = cache.qkv.k.dim(0) / batch;
    Tensor<T> dctx(cache.qkv.q.shape);
    linear_backward(dy, cache.out, *p.wo, *g.wo, g.bo, &dctx);
    Tensor<T> dq(cache.qkv.q.shape), dk(cache.qkv.k.shape), dv(cache.qkv.v.shape);
    attn_core_backward(dctx, cache.qkv.q, cache.qkv.k, cache.qkv.v, cache.core, batch,
                       lq, lk, p.heads, mask, dq, dk, dv);
    qkv_project_backward(dq, dk, dv, cache.qkv, p, rope, lq, lk, 0, 0, g, dxq, dxkv);
}

// =============================================================================
// LayerNorm wrapper
// =============================================================================

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, T eps, LnCache<T>* cache) {
    const int64_t rows = x.dim(0), cols = x.dim(1);
    Tensor<T> y({rows, cols}), mean({rows}), inv_std({rows});
    kernels::layernorm_rows(x.ptr(), y.ptr(), mean.ptr(), inv_std.ptr(), rows, cols,
                            eps);
    if (cache) {
        cache->y = y;
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

template <typename T>
void layernorm_backward_cached(const Tensor<T>& dy, const LnCache<T>& cache,
                               Tensor<T>& dx) {
    kernels::layernorm_backward(dy.ptr(), cache.y.ptr(), cache.inv_std.ptr(), dx.ptr(),
                                dy.dim(0), dy.dim(1));
}

// =============================================================================
// Span modulation
// =============================================================================

template <typename T>
void modulate_span(const Tensor<T>& x, const T* shift, const T* scale,
                   int64_t vec_stride, int64_t batch, int64_t seq_len, int64_t lo,
                   int64_t hi, Tensor<T>& y) {
    const int64_t d = x.dim(1);
    parallel_for(batch * (hi - lo), [&, d, seq_len, lo, hi](int64_t idx) {
        const int64_t b = idx / (hi - lo);
        const int64_t tok = lo + idx % (hi - lo);
        const int64_t r = b * seq_len + tok;
        const T* xr = x.ptr() + r * d;
        const T* sh = shift + b * vec_stride;
        const T* sc = scale + b * vec_stride;
        T* yr = y.ptr() + r * d;
        for (int64_t c = 0; c < d; ++c) yr[c] = xr[c] * (T(1) + sc[c]) + sh[c];
    });
}

template <typename T>
void modulate_span_backward(const Tensor<T>& dy, const Tensor<T>& x, const T* scale,
                            int64_t vec_stride, int64_t batch, int64_t seq_len,
                            int64_t lo, int64_t hi, Tensor<T>& dx, T* dshift,
                            T* dscale, int64_t dvec_stride) {
    const int64_t d = x.dim(1);
    if (dvec_stride == 0) {
        // Broadcast vectors: accumulate serially in row order.
        for (int64_t b = 0; b < batch; ++b) {
            const T* sc = scale + b * vec_stride;
            for (int64_t tok = lo; tok < hi; ++tok) {
                const int64_t r = b * seq_len + tok;
                const T* gr = dy.ptr() + r * d;
                const T* xr = x.ptr() + r * d;
                T* dxr = dx.ptr() + r * d;
                for (int64_t c = 0; c < d; ++c) {
                    dxr[c] += gr[c] * (T(1) + sc[c]);
                    dshift[c] += gr[c];
                    dscale[c] += gr[c] * xr[c];
                }
            }
        }
        return;
    }
    // Parallel over samples: each sample owns its dshift/dscale rows.
    parallel_for(batch, [&, d, seq_len, lo, hi](int64_t b) {
        const T* sc = scale + b * vec_stride;
        T* dsh = dshift + b * dvec_stride;
        T* dsc = dscale + b * dvec_stride;
        for (int64_t tok = lo; tok < hi; ++tok) {
            const int64_t r = b * seq_len + tok;
            const T* gr = dy.ptr() + r * d;
            const T* xr = x.ptr() + r * d;
            T* dxr = dx.ptr() + r * d;
            for (int64_t c = 0; c < d; ++c) {
                dxr[c] += gr[c] * (T(1) + sc[c]);
                dsh[c] += gr[c];
                dsc[c] += gr[c] * xr[c];
            }
        }
    }, 1);
}

template <typename T>
void gate_span(Tensor<T>& residual, const Tensor<T>& u, const T* gate,
               int64_t gate_stride, int64_t batch, int64_t seq_len, int64_t lo,
               int64_t hi) {
    const int64_t d = residual.dim(1);
    parallel_for(batch * (hi - lo), [&, d, seq_len, lo, hi](int64_t idx) {
        const int64_t b = idx / (hi - lo);
        const int64_t tok = lo + idx % (hi - lo);
        const int64_t r = b * seq_len + tok;
        const T* gt = gate + b * gate_stride;
        const T* ur = u.ptr() + r * d;
        T* xr = residual.ptr() + r * d;
        for (int64_t c = 0; c < d; ++c) xr[c] += gt[c] * ur[c];
    });
}

template <typename T>
void gate_span_backward(const Tensor<T>& dresidual, const Tensor<T>& u, const T* gate,
                        int64_t gate_stride, int64_t batch, int64_t seq_len, int64_t lo,
                        int64_t hi, Tensor<T>& du, T* dgate, int64_t dgate_stride) {
    const int64_t d = u.dim(1);
    if (dgate_stride == 0) {
        // Shared gate vector: accumulate serially in row order.
        for (int64_t b = 0; b < batch; ++b) {
            const T* gt = gate + b * gate_stride;
            for (int64_t tok = lo; tok < hi; ++tok) {
                const int64_t r = b * seq_len + tok;
                const T* gr = dresidual.ptr() + r * d;
                const T* ur = u.ptr() + r * d;
                T* dur = du.ptr() + r * d;
                for (int64_t c = 0; c < d; ++c) {
                    dur[c] += gr[c] * gt[c];
                    dgate[c] += gr[c] * ur[c];
                }
            }
        }
        return;
    }
    parallel_for(batch, [&, d, seq_len, lo, hi](int64_t b) {
        const T* gt = gate + b * gate_stride;
        T* dgt = dgate + b * dgate_stride;
        for (int64_t tok = lo; tok < hi; ++tok) {
            const int64_t r = b * seq_len + tok;
            const T* gr = dresidual.ptr() + r * d;
            const T* ur = u.ptr() + r * d;
            T* dur = du.ptr() + r * d;
            for (int64_t c = 0; c < d; ++c) {
                dur[c] += gr[c] * gt[c];
                dgt[c] += gr[c] * ur[c];
            }
        }
    }, 1);
}

// =============================================================================
// Timestep features
// =============================================================================

template <typename T>
Tensor<T> timestep_embedding(const Tensor<T>& t, int64_t dim) {
    check(dim % 2 == 0, "timestep embedding dim must be even");
    const int64_t b = t.size(), half = dim / 2;
    Tensor<T> out({b, half * 2});
    for (int64_t i = 0; i < b; ++i) {
        const double tv = double(t[i]) * 1000.0;
        for (int64_t j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * double(j) / double(half));
            out.at(i, j) = T(std::cos(tv * freq));
            out.at(i, half + j) = T(std::sin(tv * freq));
        }
    }
    return out;
}

// =============================================================================
// Explicit instantiations
// =============================================================================

#define DITAIR_LAYERS_INSTANTIATE(T)                                                   \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, \
                                 LinearCache<T>*);                                     \
    template void linear_backward<T>(const Tensor<T>&, const LinearCache<T>&,          \
                                     const Tensor<T>&, Tensor<T>&, Tensor<T>*,         \
                                     Tensor<T>*);                                      \
    template Tensor<T> mlp_forward<T>(const Tensor<T>&, const Tensor<T>&,              \
                                      const Tensor<T>&, const Tensor<T>&,              \
                                      const Tensor<T>&, MlpCache<T>*);                 \
    template void mlp_backward<T>(const Tensor<T>&, const MlpCache<T>&,                \
                                  const Tensor<T>&, const Tensor<T>&, Tensor<T>&,      \
                                  Tensor<T>&, Tensor<T>&, Tensor<T>&, Tensor<T>*);     \
    template RopeTable<T> build_rope_table<T>(int64_t, int64_t, int64_t, int64_t,      \
                                              double);                                 \
    template void rope_apply<T>(const Tensor<T>&, const RopeTable<T>&, int64_t,        \
                                int64_t, int64_t, Tensor<T>&);                         \
    template void rope_apply_backward<T>(const Tensor<T>&, const RopeTable<T>&,        \
                                         int64_t, int64_t, int64_t, Tensor<T>&);       \
    template void qknorm_forward<T>(const Tensor<T>&, const Tensor<T>&, int64_t,       \
                                    Tensor<T>&, Tensor<T>&, T);                        \
    template void qknorm_backward<T>(const Tensor<T>&, const Tensor<T>&,               \
                                     const Tensor<T>&, const Tensor<T>&, int64_t,      \
                                     Tensor<T>&, Tensor<T>&);                          \
    template Tensor<T> attn_core_forward<T>(const Tensor<T>&, const Tensor<T>&,        \
                                            const Tensor<T>&, int64_t, int64_t,        \
                                            int64_t, int64_t, Mask, CoreCache<T>*);    \
    template void attn_core_backward<T>(const Tensor<T>&, const Tensor<T>&,            \
                                        const Tensor<T>&, const Tensor<T>&,            \
                                        const CoreCache<T>&, int64_t, int64_t,         \
                                        int64_t, int64_t, Mask, Tensor<T>&,            \
                                        Tensor<T>&, Tensor<T>&);                       \
    template void qkv_project<T>(const Tensor<T>&, const Tensor<T>&,                   \
                                 const AttnParams<T>&, const RopeTable<T>*, int64_t,   \
                                 int64_t, int64_t, int64_t, QkvCache<T>&);             \
    template void qkv_project_backward<T>(                                             \
        const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const QkvCache<T>&,      \
        const AttnParams<T>&, const RopeTable<T>*, int64_t, int64_t, int64_t,          \
        int64_t, const AttnGrads<T>&, Tensor<T>*, Tensor<T>*);                         \
    template Tensor<T> mha_forward<T>(const Tensor<T>&, const Tensor<T>&, int64_t,     \
                                      const AttnParams<T>&, const RopeTable<T>*,       \
                                      Mask, MhaCache<T>&);                             \
    template void mha_backward<T>(const Tensor<T>&, const Tensor<T>&, int64_t,         \
                                  const AttnParams<T>&, const RopeTable<T>*, Mask,     \
                                  const MhaCache<T>&, const AttnGrads<T>&, Tensor<T>*, \
                                  Tensor<T>*);                                         \
    template Tensor<T> layernorm<T>(const Tensor<T>&, T, LnCache<T>*);                 \
    template void layernorm_backward_cached<T>(const Tensor<T>&, const LnCache<T>&,    \
                                               Tensor<T>&);                            \
    template void modulate_span<T>(const Tensor<T>&, const T*, const T*, int64_t,      \
                                   int64_t, int64_t, int64_t, int64_t, Tensor<T>&);    \
    template void modulate_span_backward<T>(const Tensor<T>&, const Tensor<T>&,        \
                                            const T*, int64_t, int64_t, int64_t,      \
                                            int64_t, int64_t, Tensor<T>&, T*, T*,      \
                                            int64_t);                                  \
    template void gate_span<T>(Tensor<T>&, const Tensor<T>&, const T*, int64_t,        \
                               int64_t, int64_t, int64_t, int64_t);                    \
    template void gate_span_backward<T>(const Tensor<T>&, const Tensor<T>&, const T*,  \
                                        int64_t, int64_t, int64_t, int64_t, int64_t,   \
                                        Tensor<T>&, T*, int64_t);                      \
    template Tensor<T> timestep_embedding<T>(const Tensor<T>&, int64_t);

DITAIR_LAYERS_INSTANTIATE(float)
DITAIR_LAYERS_INSTANTIATE(double)
#undef DITAIR_LAYERS_INSTANTIATE

}  // namespace layers
}  // namespace ditair
