#include "ditair/conditioning.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ditair/kernels.hpp"

namespace ditair {
namespace cond {

namespace {

// Random orthogonal map: Gram-Schmidt over the columns of a seeded Gaussian
// matrix, computed in double for stability, then cast.
template <typename T>
Tensor<T> random_orthogonal(int64_t n, Rng& rng) {
    std::vector<double> g(size_t(n * n));
    rng.fill_normal(g.data(), n * n);
    std::vector<double> q(size_t(n * n));
    for (int64_t j = 0; j < n; ++j) {
        std::vector<double> v(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) v[size_t(i)] = g[size_t(i * n + j)];
        for (int64_t jj = 0; jj < j; ++jj) {
            double dot = 0.0;
            for (int64_t i = 0; i < n; ++i) dot += q[size_t(i * n + jj)] * v[size_t(i)];
            for (int64_t i = 0; i < n; ++i) v[size_t(i)] -= dot * q[size_t(i * n + jj)];
        }
        double nrm = 0.0;
        for (int64_t i = 0; i < n; ++i) nrm += v[size_t(i)] * v[size_t(i)];
        nrm = std::sqrt(nrm);
        check(nrm > 1e-8, "degenerate direction while orthogonalizing");
        for (int64_t i = 0; i < n; ++i) q[size_t(i * n + j)] = v[size_t(i)] / nrm;
    }
    Tensor<T> out({n, n});
    for (int64_t i = 0; i < n * n; ++i) out[i] = T(q[size_t(i)]);
    return out;
}

}  // namespace

template <typename T>
ToyEncoder<T> make_toy_encoder(int64_t vocab, int64_t d_enc, int64_t n_layers,
                               EncoderMode mode, uint64_t seed) {
    check(vocab > 0 && d_enc > 0 && n_layers > 0, "encoder dims must be positive");
    ToyEncoder<T> enc;
    enc.vocab = vocab;
    enc.d_enc = d_enc;
    enc.n_layers = n_layers;
    enc.mode = mode;
    Rng rng(seed, 11);
    enc.embed = Tensor<T>({vocab, d_enc});
    rng.fill_normal(enc.embed.ptr(), enc.embed.size());
    for (int64_t k = 0; k < n_layers; ++k) {
        Rng rm = rng.split(uint64_t(2 * k));
        Rng rc = rng.split(uint64_t(2 * k + 1));
        enc.mix.push_back(random_orthogonal<T>(d_enc, rm));
        enc.couple.push_back(random_orthogonal<T>(d_enc, rc));
    }
    return enc;
}

template <typename T>
std::vector<Tensor<T>> hidden_states(const ToyEncoder<T>& enc,
                                     const std::vector<int32_t>& ids) {
    check(!ids.empty(), "empty token sequence");
    for (int32_t id : ids)
        if (id < 0 || int64_t(id) >= enc.vocab)
            throw ConfigError("token id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(enc.vocab));
    const int64_t l = int64_t(ids.size()), d = enc.d_enc;
    Tensor<T> h({l, d});
    kernels::embedding_lookup(enc.embed.ptr(), ids.data(), h.ptr(), l, d);

    std::vector<Tensor<T>> states;
    for (int64_t k = 0; k < enc.n_layers; ++k) {
        // Token coupling term: prefix mean (causal) or global mean.
        Tensor<T> m({l, d});
        if (enc.mode == EncoderMode::Causal) {
            std::vector<double> run(size_t(d), 0.0);
            for (int64_t i = 0; i < l; ++i) {
                for (int64_t c = 0; c < d; ++c) {
                    run[size_t(c)] += double(h.at(i, c));
                    m.at(i, c) = T(run[size_t(c)] / double(i + 1));
                }
            }
        } else {
            std::vector<double> sum(size_t(d), 0.0);
            for (int64_t i = 0; i < l; ++i)
                for (int64_t c = 0; c < d; ++c) sum[size_t(c)] += double(h.at(i, c));
            for (int64_t i = 0; i < l; ++i)
                for (int64_t c = 0; c < d; ++c) m.at(i, c) = T(sum[size_t(c)] / double(l));
        }
        Tensor<T> next({l, d});
        kernels::matmul_nn(h.ptr(), enc.mix[size_t(k)].ptr(), next.ptr(), l, d, d,
                           false);
        Tensor<T> cm({l, d});
        kernels::matmul_nn(m.ptr(), enc.couple[size_t(k)].ptr(), cm.ptr(), l, d, d,
                           false);
        for (int64_t i = 0; i < l * d; ++i)
            next[i] = T(std::tanh(double(next[i]) + 0.5 * double(cm[i])));
        states.push_back(next);
        h = next;
    }
    return states;
}

template <typename T>
Tensor<T> concat_layers(const std::vector<Tensor<T>>& states,
                        const std::vector<int64_t>& spec) {
    check(!states.empty(), "no hidden states");
    check(!spec.empty(), "empty layer selection");
    const int64_t M = int64_t(states.size());
    for (int64_t k : spec)
        if (k < 1 || k > M)
            throw ConfigError("layer index " + std::to_string(k) + " outside [1.." +
                              std::to_string(M) + "]");
    const int64_t l = states[0].dim(0), d = states[0].dim(1);
    const int64_t K = int64_t(spec.size());
    Tensor<T> out({l, K * d});
    for (int64_t s = 0; s < K; ++s) {
        const Tensor<T>& src = states[size_t(spec[size_t(s)] - 1)];
        for (int64_t i = 0; i < l; ++i)
            for (int64_t c = 0; c < d; ++c) out.at(i, s * d + c) = src.at(i, c);
    }
    return out;
}

template <typename T>
Tensor<T> identity_projection(int64_t k, int64_t d_enc) {
    Tensor<T> p({k * d_enc, d_enc});
    for (int64_t c = 0; c < d_enc; ++c) p.at(c, c) = T(1);
    return p;
}

template <typename T>
Tensor<T> pool(const Tensor<T>& hidden, EncoderMode mode) {
    check(hidden.rank() == 2, "pooling expects [l, d]");
    const int64_t l = hidden.dim(0), d = hidden.dim(1);
    check(l >= 1, "cannot pool an empty sequence");
    Tensor<T> out({d});
    if (mode == EncoderMode::Causal) {
        for (int64_t c = 0; c < d; ++c) out[c] = hidden.at(l - 1, c);
    } else {
        for (int64_t i = 0; i < l; ++i)
            for (int64_t c = 0; c < d; ++c) out[c] += hidden.at(i, c);
        for (int64_t c = 0; c < d; ++c) out[c] = T(double(out[c]) / double(l));
    }
    return out;
}

template <typename T>
CondBundle<T> encode_with_projection(const ToyEncoder<T>& enc,
                                     const std::vector<int32_t>& ids,
                                     const std::vector<int64_t>& layer_spec,
                                     const Tensor<T>& proj) {
    auto states = hidden_states(enc, ids);
    auto cat = concat_layers(states, layer_spec);
    check(proj.rank() == 2 && proj.dim(0) == cat.dim(1) && proj.dim(1) == enc.d_enc,
          "projection shape mismatch: " + shape_str(proj.shape));
    CondBundle<T> b;
    b.ctx = kernels::matmul(cat, proj);
    b.pooled = pool(b.ctx, enc.mode);
    b.is_null = false;
    return b;
}

template <typename T>
CondBundle<T> encode(const ToyEncoder<T>& enc, const std::vector<int32_t>& ids,
                     const std::vector<int64_t>& layer_spec) {
    return encode_with_projection(
        enc, ids, layer_spec,
        identity_projection<T>(int64_t(layer_spec.size()), enc.d_enc));
}

template <typename T>
CondBundle<T> null_condition(int64_t l, int64_t d_enc) {
    check(l > 0 && d_enc > 0, "null condition dims must be positive");
    CondBundle<T> b;
    b.ctx = Tensor<T>({l, d_enc});
    b.pooled = Tensor<T>({d_enc});
    b.is_null = true;
    return b;
}

template <typename T>
CondBundle<T> drop_condition(CondBundle<T> b, Rng& rng, double p_drop) {
    if (rng.uniform() < p_drop)
        return null_condition<T>(b.ctx.dim(0), b.ctx.dim(1));
    return b;
}

template <typename T>
CondBatch<T> pack_bundles(const std::vector<CondBundle<T>>& bundles, int64_t l_text) {
    check(!bundles.empty(), "empty bundle list");
    const int64_t B = int64_t(bundles.size());
    const int64_t d = bundles[0].ctx.dim(1);
    CondBatch<T> batch;
    batch.batch = B;
    batch.l_text = l_text;
    batch.ctx = Tensor<T>({B * l_text, d});
    batch.pooled = Tensor<T>({B, d});
    batch.null_mask.assign(size_t(B), 0);
    for (int64_t s = 0; s < B; ++s) {
        const CondBundle<T>& b = bundles[size_t(s)];
        check(b.ctx.dim(1) == d, "bundle width mismatch");
        batch.null_mask[size_t(s)] = b.is_null ? 1 : 0;
        const int64_t l = std::min(b.ctx.dim(0), l_text);
        for (int64_t i = 0; i < l; ++i)
            for (int64_t c = 0; c < d; ++c)
                batch.ctx.at(s * l_text + i, c) = b.ctx.at(i, c);
        for (int64_t c = 0; c < d; ++c) batch.pooled.at(s, c) = b.pooled[c];
    }
    return batch;
}

std::vector<std::vector<int32_t>> parse_prompt_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open prompt file: " + path);
    std::vector<std::vector<int32_t>> out;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ss(line);
        std::vector<int32_t> ids;
        std::string tok;
        while (ss >> tok) {
            try {
                size_t used = 0;
                const long v = std::stol(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
                ids.push_back(int32_t(v));
            } catch (const std::exception&) {
                throw ConfigError("bad token '" + tok + "' on line " +
                                  std::to_string(lineno) + " of " + path);
            }
        }
        if (!ids.empty()) out.push_back(std::move(ids));
    }
    return out;
}

#define DITAIR_COND_INSTANTIATE(T)                                                   \
    template ToyEncoder<T> make_toy_encoder<T>(int64_t, int64_t, int64_t,             \
                                               EncoderMode, uint64_t);                \
    template std::vector<Tensor<T>> hidden_states<T>(const ToyEncoder<T>&,            \
                                                     const std::vector<int32_t>&);    \
    template Tensor<T> concat_layers<T>(const std::vector<Tensor<T>>&,                \
                                        const std::vector<int64_t>&);                 \
    template Tensor<T> identity_projection<T>(int64_t, int64_t);                      \
    template Tensor<T> pool<T>(const Tensor<T>&, EncoderMode);                        \
    template CondBundle<T> encode<T>(const ToyEncoder<T>&, const std::vector<int32_t>&, \
                                     const std::vector<int64_t>&);                    \
    template CondBundle<T> encode_with_projection<T>(                                 \
        const ToyEncoder<T>&, const std::vector<int32_t>&, const std::vector<int64_t>&, \
        const Tensor<T>&);                                                            \
    template CondBundle<T> null_condition<T>(int64_t, int64_t);                       \
    template CondBundle<T> drop_condition<T>(CondBundle<T>, Rng&, double);            \
    template CondBatch<T> pack_bundles<T>(const std::vector<CondBundle<T>>&, int64_t);

DITAIR_COND_INSTANTIATE(float)
DITAIR_COND_INSTANTIATE(double)
#undef DITAIR_COND_INSTANTIATE

}  // namespace cond
}  // namespace ditair
