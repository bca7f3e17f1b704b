#include <cmath>

#include "doctest.h"

#include "ditair/checkpoint.hpp"
#include "ditair/gradcheck.hpp"
#include "ditair/kernels.hpp"
#include "ditair/optim.hpp"
#include "ditair/params.hpp"
#include "ditair/rng.hpp"
#include "ditair/sha1.hpp"
#include "ditair/tensor.hpp"

using namespace ditair;

namespace {

// The reference product: literal triple loop, ascending k per element. The
// fast kernels must reproduce this bit for bit, not just approximately.
template <typename T>
std::vector<T> naive_nn(const std::vector<T>& a, const std::vector<T>& b,
                        int64_t m, int64_t k, int64_t n) {
    std::vector<T> c(static_cast<size_t>(m * n), T(0));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (int64_t kk = 0; kk < k; ++kk)
                acc += a[size_t(i * k + kk)] * b[size_t(kk * n + j)];
            c[size_t(i * n + j)] = acc;
        }
    return c;
}

template <typename T>
std::vector<T> random_vec(int64_t n, Rng& rng, double scale = 1.0) {
    std::vector<T> v(static_cast<size_t>(n));
    rng.fill_normal(v.data(), n, scale);
    return v;
}

// Wraps a raw backward call in the finite-difference harness: loss is a
// fixed random linear functional of the kernel output.
struct LinearLossProbe {
    Tensor<double> weights;
    explicit LinearLossProbe(const Shape& out_shape, uint64_t seed) : weights(out_shape) {
        Rng r(seed, 77);
        r.fill_normal(weights.ptr(), weights.size());
    }
    double loss_of(const Tensor<double>& out) const {
        double s = 0.0;
        for (int64_t i = 0; i < out.size(); ++i) s += weights[i] * out[i];
        return s;
    }
};

}  // namespace

// =============================================================================
// Matrix products
// =============================================================================

TEST_CASE("matmul_nn matches the naive triple loop exactly") {
    Rng rng(42);
    for (auto [m, k, n] : {std::tuple<int64_t, int64_t, int64_t>{1, 1, 1},
                           {3, 5, 4},
                           {17, 33, 9},
                           {64, 128, 48}}) {
        auto a = random_vec<float>(m * k, rng);
        auto b = random_vec<float>(k * n, rng);
        std::vector<float> c(static_cast<size_t>(m * n), -7.0f);
        kernels::matmul_nn(a.data(), b.data(), c.data(), m, k, n, false);
        auto ref = naive_nn(a, b, m, k, n);
        for (size_t i = 0; i < ref.size(); ++i) REQUIRE(c[i] == ref[i]);
    }
}

TEST_CASE("matmul_nn in double matches the naive loop exactly") {
    Rng rng(43);
    int64_t m = 11, k = 29, n = 13;
    auto a = random_vec<double>(m * k, rng);
    auto b = random_vec<double>(k * n, rng);
    std::vector<double> c(static_cast<size_t>(m * n));
    kernels::matmul_nn(a.data(), b.data(), c.data(), m, k, n, false);
    auto ref = naive_nn(a, b, m, k, n);
    for (size_t i = 0; i < ref.size(); ++i) REQUIRE(c[i] == ref[i]);
}

TEST_CASE("matmul_nt and matmul_tn match rearranged naive products exactly") {
    Rng rng(44);
    int64_t m = 7, k = 19, n = 11;
    auto a = random_vec<float>(m * k, rng);
    auto bt = random_vec<float>(n * k, rng);  // b stored [n,k]
    std::vector<float> b(static_cast<size_t>(k * n));
    for (int64_t j = 0; j < n; ++j)
        for (int64_t kk = 0; kk < k; ++kk) b[size_t(kk * n + j)] = bt[size_t(j * k + kk)];

    std::vector<float> c1(static_cast<size_t>(m * n));
    kernels::matmul_nt(a.data(), bt.data(), c1.data(), m, k, n, false);
    auto ref = naive_nn(a, b, m, k, n);
    for (size_t i = 0; i < ref.size(); ++i) REQUIRE(c1[i] == ref[i]);

    // tn: a stored [k,m]
    auto at = random_vec<float>(k * m, rng);
    std::vector<float> a2(static_cast<size_t>(m * k));
    for (int64_t kk = 0; kk < k; ++kk)
        for (int64_t i = 0; i < m; ++i) a2[size_t(i * k + kk)] = at[size_t(kk * m + i)];
    std::vector<float> c2(static_cast<size_t>(m * n));
    kernels::matmul_tn(at.data(), b.data(), c2.data(), m, k, n, false);
    auto ref2 = naive_nn(a2, b, m, k, n);
    for (size_t i = 0; i < ref2.size(); ++i) REQUIRE(c2[i] == ref2[i]);
}

TEST_CASE("matmul accumulate adds on top of existing output") {
    Rng rng(45);
    int64_t m = 4, k = 6, n = 5;
    auto a = random_vec<float>(m * k, rng);
    auto b = random_vec<float>(k * n, rng);
    std::vector<float> c(static_cast<size_t>(m * n), 2.0f);
    kernels::matmul_nn(a.data(), b.data(), c.data(), m, k, n, true);
    // The existing value heads the accumulation chain, so the reference must
    // accumulate in the same order rather than add the finished dot product.
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            float acc = 2.0f;
            for (int64_t kk = 0; kk < k; ++kk)
                acc += a[size_t(i * k + kk)] * b[size_t(kk * n + j)];
            REQUIRE(c[size_t(i * n + j)] == acc);
        }
}

TEST_CASE("matmul rejects mismatched shapes") {
    Tensor<float> a({2, 3}), b({4, 2});
    CHECK_THROWS_AS(kernels::matmul(a, b), DimensionError);
}

TEST_CASE("matmul_backward gradients agree with finite differences") {
    int64_t m = 3, k = 4, n = 5;
    Tensor<double> a({m, k}), b({k, n});
    Rng rng(46);
    rng.fill_normal(a.ptr(), a.size());
    rng.fill_normal(b.ptr(), b.size());
    LinearLossProbe probe({m, n}, 9);

    auto forward = [&] {
        Tensor<double> c = kernels::matmul(a, b);
        return probe.loss_of(c);
    };
    Tensor<double> da({m, k}), db({k, n});
    kernels::matmul_backward(probe.weights.ptr(), a.ptr(), b.ptr(), da.ptr(), db.ptr(),
                             m, k, n);
    auto res = grad_check(forward, {{"a", &a, &da}, {"b", &b, &db}});
    CHECK(res.max_rel_err < 1e-6);
}

// =============================================================================
// Elementwise and row kernels
// =============================================================================

TEST_CASE("gelu matches normal-CDF reference values") {
    double xs[3] = {1.0, -0.5, 2.3};
    double ys[3];
    kernels::gelu(xs, ys, 3);
    CHECK(std::abs(ys[0] - 0.8413447460685429) < 1e-14);
    CHECK(std::abs(ys[1] - -0.15426876936299344) < 1e-14);
    CHECK(std::abs(ys[2] - 2.2753345469501456) < 1e-14);
    double zero = 0.0, out = 1.0;
    kernels::gelu(&zero, &out, 1);
    CHECK(out == 0.0);
}

TEST_CASE("gelu gradient agrees with finite differences") {
    int64_t n = 64;
    Tensor<double> x({n});
    Rng rng(47);
    rng.fill_normal(x.ptr(), n, 2.0);
    LinearLossProbe probe({n}, 10);
    auto forward = [&] {
        Tensor<double> y({n});
        kernels::gelu(x.ptr(), y.ptr(), n);
        return probe.loss_of(y);
    };
    Tensor<double> dx({n});
    kernels::gelu_backward(probe.weights.ptr(), x.ptr(), dx.ptr(), n);
    auto res = grad_check(forward, {{"x", &x, &dx}});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows are normalized and shift invariant") {
    int64_t rows = 5, cols = 9;
    Tensor<double> x({rows, cols}), y({rows, cols}), y2({rows, cols});
    Rng rng(48);
    rng.fill_normal(x.ptr(), x.size(), 3.0);
    kernels::softmax_rows(x.ptr(), y.ptr(), rows, cols);
    for (int64_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            CHECK(y.at(i, j) > 0.0);
            s += y.at(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
    Tensor<double> shifted = x;
    for (int64_t i = 0; i < shifted.size(); ++i) shifted[i] += 7.5;
    kernels::softmax_rows(shifted.ptr(), y2.ptr(), rows, cols);
    for (int64_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - y2[i]) < 1e-12);
}

TEST_CASE("softmax gradient agrees with finite differences") {
    int64_t rows = 4, cols = 7;
    Tensor<double> x({rows, cols});
    Rng rng(49);
    rng.fill_normal(x.ptr(), x.size());
    LinearLossProbe probe({rows, cols}, 11);
    auto forward = [&] {
        Tensor<double> y({rows, cols});
        kernels::softmax_rows(x.ptr(), y.ptr(), rows, cols);
        return probe.loss_of(y);
    };
    Tensor<double> y({rows, cols});
    kernels::softmax_rows(x.ptr(), y.ptr(), rows, cols);
    Tensor<double> dx({rows, cols});
    kernels::softmax_backward(probe.weights.ptr(), y.ptr(), dx.ptr(), rows, cols);
    auto res = grad_check(forward, {{"x", &x, &dx}});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("layernorm output has zero mean, unit variance per row") {
    int64_t rows = 6, cols = 32;
    Tensor<double> x({rows, cols}), y({rows, cols}), mean({rows}), inv_std({rows});
    Rng rng(50);
    rng.fill_normal(x.ptr(), x.size(), 4.0);
    for (int64_t i = 0; i < x.size(); ++i) x[i] += 2.0;
    kernels::layernorm_rows(x.ptr(), y.ptr(), mean.ptr(), inv_std.ptr(), rows, cols,
                            1e-6);
    for (int64_t i = 0; i < rows; ++i) {
        double mu = 0.0, var = 0.0;
        for (int64_t j = 0; j < cols; ++j) mu += y.at(i, j);
        mu /= double(cols);
        for (int64_t j = 0; j < cols; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
        var /= double(cols);
        CHECK(std::abs(mu) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-4);  // eps shrinks variance slightly
    }
}

TEST_CASE("layernorm gradient agrees with finite differences") {
    int64_t rows = 3, cols = 8;
    Tensor<double> x({rows, cols});
    Rng rng(51);
    rng.fill_normal(x.ptr(), x.size());
    LinearLossProbe probe({rows, cols}, 12);
    auto forward = [&] {
        Tensor<double> y({rows, cols}), mean({rows}), is({rows});
        kernels::layernorm_rows(x.ptr(), y.ptr(), mean.ptr(), is.ptr(), rows, cols, 1e-6);
        return probe.loss_of(y);
    };
    Tensor<double> y({rows, cols}), mean({rows}), is({rows});
    kernels::layernorm_rows(x.ptr(), y.ptr(), mean.ptr(), is.ptr(), rows, cols, 1e-6);
    Tensor<double> dx({rows, cols});
    kernels::layernorm_backward(probe.weights.ptr(), y.ptr(), is.ptr(), dx.ptr(), rows,
                                cols);
    auto res = grad_check(forward, {{"x", &x, &dx}});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("rmsnorm gradient (input and scale) agrees with finite differences") {
    int64_t rows = 4, cols = 6;
    Tensor<double> x({rows, cols}), g({cols});
    Rng rng(52);
    rng.fill_normal(x.ptr(), x.size());
    rng.fill_normal(g.ptr(), g.size());
    for (int64_t i = 0; i < cols; ++i) g[i] += 1.5;  // keep scales away from 0
    LinearLossProbe probe({rows, cols}, 13);
    auto forward = [&] {
        Tensor<double> y({rows, cols}), ir({rows});
        kernels::rmsnorm_rows(x.ptr(), g.ptr(), y.ptr(), ir.ptr(), rows, cols, 1e-6);
        return probe.loss_of(y);
    };
    Tensor<double> y({rows, cols}), ir({rows});
    kernels::rmsnorm_rows(x.ptr(), g.ptr(), y.ptr(), ir.ptr(), rows, cols, 1e-6);
    Tensor<double> dx({rows, cols}), dg({cols});
    kernels::rmsnorm_backward(probe.weights.ptr(), x.ptr(), g.ptr(), ir.ptr(), dx.ptr(),
                              dg.ptr(), rows, cols);
    auto res = grad_check(forward, {{"x", &x, &dx}, {"g", &g, &dg}});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("rotate_pairs preserves pair norms and inverts exactly") {
    int64_t rows = 5, cols = 8, half = cols / 2;
    Tensor<double> x({rows, cols}), cs({rows, half}), sn({rows, half}), y({rows, cols});
    Rng rng(53);
    rng.fill_normal(x.ptr(), x.size());
    for (int64_t i = 0; i < rows * half; ++i) {
        double th = rng.uniform() * 6.28318530717958647692;
        cs[i] = std::cos(th);
        sn[i] = std::sin(th);
    }
    kernels::rotate_pairs(x.ptr(), cs.ptr(), sn.ptr(), y.ptr(), rows, cols);
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < half; ++j) {
            double nx = x.at(i, 2 * j) * x.at(i, 2 * j) + x.at(i, 2 * j + 1) * x.at(i, 2 * j + 1);
            double ny = y.at(i, 2 * j) * y.at(i, 2 * j) + y.at(i, 2 * j + 1) * y.at(i, 2 * j + 1);
            CHECK(std::abs(nx - ny) < 1e-12);
        }
    // Rotating back by the negated angle recovers the input.
    Tensor<double> neg_sn = sn, back({rows, cols});
    for (int64_t i = 0; i < neg_sn.size(); ++i) neg_sn[i] = -neg_sn[i];
    kernels::rotate_pairs(y.ptr(), cs.ptr(), neg_sn.ptr(), back.ptr(), rows, cols);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(std::abs(back[i] - x[i]) < 1e-12);
}

TEST_CASE("rotate_pairs gradient agrees with finite differences") {
    int64_t rows = 3, cols = 6, half = cols / 2;
    Tensor<double> x({rows, cols}), cs({rows, half}), sn({rows, half});
    Rng rng(54);
    rng.fill_normal(x.ptr(), x.size());
    for (int64_t i = 0; i < rows * half; ++i) {
        double th = rng.uniform() * 6.28318530717958647692;
        cs[i] = std::cos(th);
        sn[i] = std::sin(th);
    }
    LinearLossProbe probe({rows, cols}, 14);
    auto forward = [&] {
        Tensor<double> y({rows, cols});
        kernels::rotate_pairs(x.ptr(), cs.ptr(), sn.ptr(), y.ptr(), rows, cols);
        return probe.loss_of(y);
    };
    Tensor<double> dx({rows, cols});
    kernels::rotate_pairs_backward(probe.weights.ptr(), cs.ptr(), sn.ptr(), dx.ptr(),
                                   rows, cols);
    auto res = grad_check(forward, {{"x", &x, &dx}});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("embedding backward accumulates repeated ids in order") {
    int64_t vocab = 5, dim = 3, n = 4;
    Tensor<double> table({vocab, dim});
    Rng rng(55);
    rng.fill_normal(table.ptr(), table.size());
    std::vector<int32_t> ids = {2, 0, 2, 4};  // id 2 twice
    LinearLossProbe probe({n, dim}, 15);
    auto forward = [&] {
        Tensor<double> out({n, dim});
        kernels::embedding_lookup(table.ptr(), ids.data(), out.ptr(), n, dim);
        return probe.loss_of(out);
    };
    Tensor<double> dt({vocab, dim});
    kernels::embedding_backward(probe.weights.ptr(), ids.data(), dt.ptr(), n, dim);
    auto res = grad_check(forward, {{"table", &table, &dt}});
    CHECK(res.max_rel_err < 1e-6);
    // Row 2 must hold the sum of both occurrences.
    for (int64_t j = 0; j < dim; ++j)
        CHECK(dt.at(2, j) == probe.weights.at(0, j) + probe.weights.at(2, j));
    // Untouched rows stay zero.
    for (int64_t j = 0; j < dim; ++j) CHECK(dt.at(1, j) == 0.0);
}

TEST_CASE("mse value and gradient") {
    int64_t n = 24;
    Tensor<double> p({n}), t({n});
    Rng rng(56);
    rng.fill_normal(p.ptr(), n);
    rng.fill_normal(t.ptr(), n);
    double ref = 0.0;
    for (int64_t i = 0; i < n; ++i) ref += (p[i] - t[i]) * (p[i] - t[i]);
    ref /= double(n);
    CHECK(std::abs(kernels::mse(p.ptr(), t.ptr(), n) - ref) < 1e-14);

    auto forward = [&] { return kernels::mse(p.ptr(), t.ptr(), n); };
    Tensor<double> dp({n});
    kernels::mse_backward(p.ptr(), t.ptr(), dp.ptr(), n);
    auto res = grad_check(forward, {{"p", &p, &dp}});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("conv2d gradient agrees with finite differences") {
    for (auto [stride, pad] : {std::pair<int64_t, int64_t>{1, 1}, {2, 1}, {1, 0}}) {
        int64_t b = 2, ci = 3, h = 5, w = 6, co = 4, kh = 3, kw = 3;
        int64_t ho = (h + 2 * pad - kh) / stride + 1;
        int64_t wo = (w + 2 * pad - kw) / stride + 1;
        Tensor<double> x({b, ci, h, w}), wt({co, ci, kh, kw}), bias({co});
        Rng rng(57 + stride * 10 + pad);
        rng.fill_normal(x.ptr(), x.size());
        rng.fill_normal(wt.ptr(), wt.size(), 0.5);
        rng.fill_normal(bias.ptr(), bias.size());
        LinearLossProbe probe({b, co, ho, wo}, 16);
        auto forward = [&] {
            Tensor<double> y({b, co, ho, wo});
            kernels::conv2d(x.ptr(), wt.ptr(), bias.ptr(), y.ptr(), b, ci, h, w, co, kh,
                            kw, stride, pad);
            return probe.loss_of(y);
        };
        Tensor<double> dx({b, ci, h, w}), dw({co, ci, kh, kw}), db({co});
        kernels::conv2d_backward(probe.weights.ptr(), x.ptr(), wt.ptr(), dx.ptr(),
                                 dw.ptr(), db.ptr(), b, ci, h, w, co, kh, kw, stride,
                                 pad);
        auto res = grad_check(forward, {{"x", &x, &dx}, {"w", &wt, &dw}, {"b", &bias, &db}});
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("upsample2x places each value in a 2x2 block and backward sums it") {
    int64_t b = 1, c = 2, h = 3, w = 2;
    Tensor<double> x({b, c, h, w});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = double(i);
    Tensor<double> y({b, c, 2 * h, 2 * w});
    kernels::upsample2x(x.ptr(), y.ptr(), b, c, h, w);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 0.0);
    CHECK(y[2] == 1.0);
    CHECK(y[4] == 0.0);

    LinearLossProbe probe({b, c, 2 * h, 2 * w}, 17);
    auto forward = [&] {
        Tensor<double> yy({b, c, 2 * h, 2 * w});
        kernels::upsample2x(x.ptr(), yy.ptr(), b, c, h, w);
        return probe.loss_of(yy);
    };
    Tensor<double> dx({b, c, h, w});
    kernels::upsample2x_backward(probe.weights.ptr(), dx.ptr(), b, c, h, w);
    auto res = grad_check(forward, {{"x", &x, &dx}});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("add_bias backward sums gradient over rows") {
    int64_t rows = 7, cols = 5;
    Tensor<double> x({rows, cols}), bias({cols});
    Rng rng(58);
    rng.fill_normal(x.ptr(), x.size());
    rng.fill_normal(bias.ptr(), bias.size());
    LinearLossProbe probe({rows, cols}, 18);
    auto forward = [&] {
        Tensor<double> y = x;
        kernels::add_bias(y.ptr(), bias.ptr(), rows, cols);
        return probe.loss_of(y);
    };
    Tensor<double> db({cols});
    kernels::add_bias_backward(probe.weights.ptr(), db.ptr(), rows, cols);
    auto res = grad_check(forward, {{"bias", &bias, &db}});
    CHECK(res.max_rel_err < 1e-6);
}

// =============================================================================
// Random numbers
// =============================================================================

TEST_CASE("rng is reproducible and depends on seed and stream") {
    Rng a(123, 5), b(123, 5), c(124, 5), d(123, 6);
    for (int i = 0; i < 100; ++i) {
        uint64_t va = a.next_u64();
        REQUIRE(va == b.next_u64());
        REQUIRE(va != c.next_u64());
        REQUIRE(va != d.next_u64());
    }
}

TEST_CASE("rng split children differ from parent and from each other") {
    Rng parent(7);
    Rng c0 = parent.split(0), c1 = parent.split(1);
    Rng c0_again = parent.split(0);
    for (int i = 0; i < 64; ++i) {
        uint64_t v0 = c0.next_u64();
        REQUIRE(v0 == c0_again.next_u64());
        REQUIRE(v0 != c1.next_u64());
    }
    // Nested splits also reproduce.
    Rng g = parent.split(3).split(9);
    Rng g2 = parent.split(3).split(9);
    CHECK(g.next_u64() == g2.next_u64());
}

TEST_CASE("uniform lies in [0,1) and normal has the right moments") {
    Rng rng(2024);
    const int n = 200000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
        sum2 += u * u;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.005);
    CHECK(std::abs(sum2 / n - 1.0 / 3.0) < 0.005);

    double ns = 0.0, ns2 = 0.0, ns4 = 0.0;
    Rng rng2(2025);
    for (int i = 0; i < n; ++i) {
        double z = rng2.normal();
        ns += z;
        ns2 += z * z;
        ns4 += z * z * z * z;
    }
    CHECK(std::abs(ns / n) < 0.01);
    CHECK(std::abs(ns2 / n - 1.0) < 0.02);
    CHECK(std::abs(ns4 / n - 3.0) < 0.15);  // normal kurtosis
}

// =============================================================================
// Optimizer
// =============================================================================

TEST_CASE("adam first step matches the closed-form update") {
    ParamStore<double> store;
    ParamPlan plan{"p", {2}, Component::Overhead, InitSpec::constant(1.0)};
    ParamId id = store.add(plan, Rng(0));
    store.grad(id)[0] = 3.0;
    store.grad(id)[1] = -0.25;
    AdamConfig cfg;  // lr 1e-4, betas 0.9/0.999, eps 1e-8
    Adam<double> opt(store, cfg);
    opt.step(store);
    // After one step the bias corrections cancel the decay exactly, so
    // m_hat = g and v_hat = g^2, update = -lr * g / (|g| + eps).
    for (int i = 0; i < 2; ++i) {
        double g = i == 0 ? 3.0 : -0.25;
        double expect = 1.0 - cfg.lr * g / (std::abs(g) + cfg.eps);
        CHECK(std::abs(store.value(id)[i] - expect) < 1e-15);
    }
}

TEST_CASE("adam second step with constant gradient keeps unit-sized steps") {
    ParamStore<double> store;
    ParamId id = store.add({"p", {1}, Component::Overhead, InitSpec::constant(0.0)}, Rng(0));
    Adam<double> opt(store, {});
    double p_prev = 0.0;
    for (int s = 1; s <= 3; ++s) {
        store.zero_grads();
        store.grad(id)[0] = 3.0;
        opt.step(store);
        // With a constant gradient, m_hat = g and v_hat = g^2 at every step.
        double step_taken = store.value(id)[0] - p_prev;
        CHECK(std::abs(step_taken - (-1e-4 * 3.0 / (3.0 + 1e-8))) < 1e-12);
        p_prev = store.value(id)[0];
    }
}

// =============================================================================
// Checkpoints
// =============================================================================

TEST_CASE("checkpoint round-trips exactly and rejects mismatches") {
    ParamStore<float> store;
    Rng root(99);
    store.add({"alpha", {3, 4}, Component::Mlp, InitSpec::normal(1.0)}, root.split(0));
    store.add({"beta", {7}, Component::Overhead, InitSpec::normal(0.5)}, root.split(1));
    const std::string path = "test_ckpt_roundtrip.dita";
    save_checkpoint(store, path);

    ParamStore<float> loaded;
    Rng other(1);
    loaded.add({"alpha", {3, 4}, Component::Mlp, InitSpec::zero()}, other.split(0));
    loaded.add({"beta", {7}, Component::Overhead, InitSpec::zero()}, other.split(1));
    load_checkpoint(loaded, path);
    for (int64_t i = 0; i < store.count(); ++i) {
        auto id = static_cast<ParamId>(i);
        REQUIRE(loaded.value(id).shape == store.value(id).shape);
        for (int64_t j = 0; j < store.value(id).size(); ++j)
            REQUIRE(loaded.value(id)[j] == store.value(id)[j]);
    }

    ParamStore<float> wrong_name;
    wrong_name.add({"alphaX", {3, 4}, Component::Mlp, InitSpec::zero()}, other.split(2));
    wrong_name.add({"beta", {7}, Component::Overhead, InitSpec::zero()}, other.split(3));
    CHECK_THROWS_AS(load_checkpoint(wrong_name, path), ConfigError);

    ParamStore<float> wrong_shape;
    wrong_shape.add({"alpha", {4, 3}, Component::Mlp, InitSpec::zero()}, other.split(4));
    wrong_shape.add({"beta", {7}, Component::Overhead, InitSpec::zero()}, other.split(5));
    CHECK_THROWS_AS(load_checkpoint(wrong_shape, path), ConfigError);

    std::remove(path.c_str());
}

// =============================================================================
// Hashing
// =============================================================================

TEST_CASE("sha1 matches reference vectors") {
    CHECK(sha1_hex(std::string("")) == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
    CHECK(sha1_hex(std::string("abc")) == "a9993e364706816aba3e25717850c26c9cd0d89d");
    CHECK(sha1_hex(std::string("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
          "84983e441c3bd26ebaae4aa1f95129e5e54670f1");
}

TEST_CASE("git blob hash matches git's content addressing") {
    CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK(git_blob_sha1("hello world\n") == "3b18e512dba79e4c8300dd08aeb37f8e728b8dad");
    std::string bin(256, '\0');
    for (int i = 0; i < 256; ++i) bin[size_t(i)] = char(i);
    CHECK(git_blob_sha1(bin) == "c86626638e0bc8cf47ca49bb1525b40e9737ee64");
}

// =============================================================================
// Gradient checker plumbing
// =============================================================================

TEST_CASE("grad_check flags a deliberately wrong gradient") {
    Tensor<double> x({4});
    Rng rng(60);
    rng.fill_normal(x.ptr(), x.size());
    auto forward = [&] {
        double s = 0.0;
        for (int64_t i = 0; i < 4; ++i) s += x[i] * x[i];
        return s;
    };
    Tensor<double> good({4}), bad({4});
    for (int64_t i = 0; i < 4; ++i) {
        good[i] = 2.0 * x[i];
        bad[i] = 2.0 * x[i] + 0.5;
    }
    CHECK(grad_check(forward, {{"x", &x, &good}}).max_rel_err < 1e-8);
    CHECK(grad_check(forward, {{"x", &x, &bad}}).max_rel_err > 1e-2);
}

TEST_CASE("grad_check subsampling touches the requested coordinate count") {
    Tensor<double> x({100});
    Rng rng(61);
    rng.fill_normal(x.ptr(), x.size());
    auto forward = [&] {
        double s = 0.0;
        for (int64_t i = 0; i < 100; ++i) s += std::sin(x[i]);
        return s;
    };
    Tensor<double> g({100});
    for (int64_t i = 0; i < 100; ++i) g[i] = std::cos(x[i]);
    auto res = grad_check(forward, {{"x", &x, &g}}, 1e-4, 10);
    CHECK(res.coords_checked == 10);
    CHECK(res.max_rel_err < 1e-6);
}
