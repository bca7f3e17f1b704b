#include "ditair/vaetoy.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>
#include <utility>
#include <vector>

#include "ditair/common.hpp"
#include "ditair/kernels.hpp"
#include "ditair/optim.hpp"

namespace ditair {
namespace vaetoy {

// =============================================================================
// Configuration
// =============================================================================

void validate(const VaeConfig& cfg) {
    if (cfg.compression != 2 && cfg.compression != 4)
        throw ConfigError("compression must be 2 or 4 at toy scale");
    if (cfg.img_channels < 1) throw ConfigError("img_channels must be >= 1");
    if (cfg.c1 < 1) throw ConfigError("stage-1 channels must be >= 1");
    if (cfg.c2 <= cfg.c1)
        throw ConfigError("stage-2 must widen: c2 > c1 required");
    if (!(cfg.beta > 0.0)) throw ConfigError("beta must be > 0");
    if (cfg.steps_stage1 < 1 || cfg.steps_stage2 < 1)
        throw ConfigError("step budgets must be >= 1");
    if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
    if (!(cfg.lr > 0.0)) throw ConfigError("lr must be > 0");
    if (cfg.log_every < 1) throw ConfigError("log_every must be >= 1");
}

// =============================================================================
// Construction
// =============================================================================

namespace {

constexpr int64_t kK = 3;  // all convolutions are 3x3, pad 1

InitSpec conv_init(int64_t fan_in) {
    return InitSpec::normal(1.0 / std::sqrt(double(fan_in)));
}

template <typename T>
VaeModel<T> build_structure(int64_t compression, int64_t img_channels,
                            int64_t latent_channels, Rng& rng) {
    VaeModel<T> m;
    m.compression = compression;
    m.img_channels = img_channels;
    m.latent_channels = latent_channels;
    m.enc_widths = (compression == 2) ? std::vector<int64_t>{16}
                                      : std::vector<int64_t>{16, 32};
    const int64_t nd = int64_t(m.enc_widths.size());
    const int64_t inner = m.enc_widths.back();

    int64_t slot = 0;
    auto add = [&](const std::string& name, const Shape& shape,
                   const InitSpec& init) {
        return m.store.add(
            ParamPlan{name, shape, Component::Overhead, init},
            rng.split(uint64_t(slot++)));
    };

    int64_t ci = img_channels;
    for (int64_t i = 0; i < nd; ++i) {
        const int64_t co = m.enc_widths[size_t(i)];
        const std::string base = "enc" + std::to_string(i);
        m.enc_w.push_back(
            add(base + ".w", {co, ci, kK, kK}, conv_init(ci * kK * kK)));
        m.enc_b.push_back(add(base + ".b", {co}, InitSpec::zero()));
        ci = co;
    }
    m.head_w = add("head.w", {2 * latent_channels, inner, kK, kK},
                   conv_init(inner * kK * kK));
    m.head_b = add("head.b", {2 * latent_channels}, InitSpec::zero());

    m.dec0_w = add("dec0.w", {inner, latent_channels, kK, kK},
                   conv_init(latent_channels * kK * kK));
    m.dec0_b = add("dec0.b", {inner}, InitSpec::zero());

    ci = inner;
    for (int64_t i = 0; i < nd; ++i) {
        const int64_t co =
            (i + 1 < nd) ? m.enc_widths[size_t(nd - 2 - i)] : img_channels;
        const std::string base = "dec" + std::to_string(i + 1);
        m.dec_w.push_back(
            add(base + ".w", {co, ci, kK, kK}, conv_init(ci * kK * kK)));
        m.dec_b.push_back(add(base + ".b", {co}, InitSpec::zero()));
        ci = co;
    }
    return m;
}

// y = conv3x3(x) at the given stride, pad 1.
template <typename T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
               int64_t stride) {
    const int64_t B = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t co = w.dim(0);
    const int64_t ho = (h + 2 - kK) / stride + 1;
    const int64_t wo = (wd + 2 - kK) / stride + 1;
    Tensor<T> y(Shape{B, co, ho, wo});
    kernels::conv2d(x.ptr(), w.ptr(), b.ptr(), y.ptr(), B, ci, h, wd, co, kK,
                    kK, stride, 1);
    return y;
}

template <typename T>
Tensor<T> gelu_t(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    kernels::gelu(x.ptr(), y.ptr(), x.size());
    return y;
}

}  // namespace

template <typename T>
VaeModel<T> build_vae(const VaeConfig& cfg, int64_t latent_channels,
                      Rng& rng) {
    validate(cfg);
    check(latent_channels >= 1, "latent channels must be >= 1");
    return build_structure<T>(cfg.compression, cfg.img_channels,
                              latent_channels, rng);
}

// =============================================================================
// Encode / decode
// =============================================================================

template <typename T>
Posterior<T> encode(const VaeModel<T>& m, const Tensor<T>& x,
                    EncodeCache<T>* cache) {
    check(x.rank() == 4, "encoder expects [B, c, h, w]");
    check(x.dim(1) == m.img_channels, "image channel mismatch");
    check(x.dim(2) % m.compression == 0 && x.dim(3) % m.compression == 0,
          "image sides must be divisible by the compression factor");
    check(x.dim(2) >= m.compression && x.dim(3) >= m.compression,
          "image too small for the compression factor");

    const int64_t nd = int64_t(m.enc_widths.size());
    EncodeCache<T> local;
    EncodeCache<T>& c = cache ? *cache : local;
    c.x = x;
    c.pre.clear();
    c.act.clear();

    const Tensor<T>* cur = &c.x;
    for (int64_t i = 0; i < nd; ++i) {
        c.pre.push_back(conv(*cur, m.store.value(m.enc_w[size_t(i)]),
                             m.store.value(m.enc_b[size_t(i)]), 2));
        c.act.push_back(gelu_t(c.pre.back()));
        cur = &c.act.back();
    }
    c.head = conv(*cur, m.store.value(m.head_w), m.store.value(m.head_b), 1);

    const int64_t B = c.head.dim(0), lc = m.latent_channels;
    const int64_t plane = c.head.dim(2) * c.head.dim(3);
    Posterior<T> post;
    post.mean = Tensor<T>(Shape{B, lc, c.head.dim(2), c.head.dim(3)});
    post.logvar = Tensor<T>(Shape{B, lc, c.head.dim(2), c.head.dim(3)});
    for (int64_t b = 0; b < B; ++b) {
        const T* src = c.head.ptr() + b * 2 * lc * plane;
        std::copy(src, src + lc * plane, post.mean.ptr() + b * lc * plane);
        std::copy(src + lc * plane, src + 2 * lc * plane,
                  post.logvar.ptr() + b * lc * plane);
    }
    return post;
}

template <typename T>
Tensor<T> decode(const VaeModel<T>& m, const Tensor<T>& z,
                 DecodeCache<T>* cache) {
    check(z.rank() == 4, "decoder expects [B, c, h, w]");
    check(z.dim(1) == m.latent_channels, "latent channel mismatch");

    const int64_t nd = int64_t(m.dec_w.size());
    DecodeCache<T> local;
    DecodeCache<T>& c = cache ? *cache : local;
    c.z = z;
    c.up.clear();
    c.pre.clear();
    c.act.clear();

    c.d0_pre = conv(c.z, m.store.value(m.dec0_w), m.store.value(m.dec0_b), 1);
    c.d0_act = gelu_t(c.d0_pre);

    const Tensor<T>* cur = &c.d0_act;
    for (int64_t i = 0; i < nd; ++i) {
        const int64_t B = cur->dim(0), ch = cur->dim(1);
        const int64_t h = cur->dim(2), w = cur->dim(3);
        Tensor<T> up(Shape{B, ch, 2 * h, 2 * w});
        kernels::upsample2x(cur->ptr(), up.ptr(), B, ch, h, w);
        c.up.push_back(std::move(up));
        c.pre.push_back(conv(c.up.back(), m.store.value(m.dec_w[size_t(i)]),
                             m.store.value(m.dec_b[size_t(i)]), 1));
        if (i + 1 < nd) {
            c.act.push_back(gelu_t(c.pre.back()));
            cur = &c.act.back();
        }
    }
    return c.pre.back();
}

// =============================================================================
// KL divergence
// =============================================================================

template <typename T>
double kl_divergence(const Tensor<T>& mean, const Tensor<T>& logvar) {
    check(same_shape(mean, logvar), "mean/logvar shape mismatch");
    check(mean.rank() >= 1 && mean.dim(0) >= 1, "kl needs a batch dimension");
    const int64_t B = mean.dim(0);
    double acc = 0.0;
    for (int64_t i = 0; i < mean.size(); ++i) {
        const double mu = double(mean[i]), lv = double(logvar[i]);
        acc += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    return acc / double(B);
}

template <typename T>
void kl_backward(const Tensor<T>& mean, const Tensor<T>& logvar, double scale,
                 Tensor<T>& dmean, Tensor<T>& dlogvar) {
    const double s = scale / double(mean.dim(0));
    for (int64_t i = 0; i < mean.size(); ++i) {
        dmean[i] += static_cast<T>(s * double(mean[i]));
        dlogvar[i] +=
            static_cast<T>(s * 0.5 * (std::exp(double(logvar[i])) - 1.0));
    }
}

// =============================================================================
// Training objective
// =============================================================================

template <typename T>
double vae_loss(const VaeModel<T>& m, const Tensor<T>& x,
                const Tensor<T>& noise, double beta, VaeStepCache<T>& cache) {
    cache.post = encode(m, x, &cache.enc);
    check(same_shape(noise, cache.post.mean),
          "noise must match the posterior shape");
    cache.noise = noise;
    cache.z = Tensor<T>(cache.post.mean.shape);
    for (int64_t i = 0; i < cache.z.size(); ++i)
        cache.z[i] = cache.post.mean[i] +
                     std::exp(T(0.5) * cache.post.logvar[i]) * noise[i];
    cache.recon = decode(m, cache.z, &cache.dec);
    cache.mse = kernels::mse(cache.recon.ptr(), x.ptr(), x.size());
    cache.kl = kl_divergence(cache.post.mean, cache.post.logvar);
    return cache.mse + beta * cache.kl;
}

template <typename T>
void vae_loss_backward(VaeModel<T>& m, double beta,
                       const VaeStepCache<T>& cache) {
    const Tensor<T>& x = cache.enc.x;
    const int64_t nd = int64_t(m.dec_w.size());

    Tensor<T> dout(cache.recon.shape);
    kernels::mse_backward(cache.recon.ptr(), x.ptr(), dout.ptr(), x.size(),
                          1.0);

    // Decoder chain, last convolution first. dout holds the gradient at the
    // current convolution's output (pre-activation for interior stages).
    for (int64_t i = nd - 1; i >= 0; --i) {
        const Tensor<T>& up = cache.dec.up[size_t(i)];
        Tensor<T> dup(up.shape);
        kernels::conv2d_backward(
            dout.ptr(), up.ptr(), m.store.value(m.dec_w[size_t(i)]).ptr(),
            dup.ptr(), m.store.grad(m.dec_w[size_t(i)]).ptr(),
            m.store.grad(m.dec_b[size_t(i)]).ptr(), up.dim(0), up.dim(1),
            up.dim(2), up.dim(3), dout.dim(1), kK, kK, 1, 1);

        const Tensor<T>& below =
            (i > 0) ? cache.dec.act[size_t(i - 1)] : cache.dec.d0_act;
        Tensor<T> dact(below.shape);
        kernels::upsample2x_backward(dup.ptr(), dact.ptr(), below.dim(0),
                                     below.dim(1), below.dim(2), below.dim(3));
        if (i > 0) {
            dout = Tensor<T>(below.shape);
            kernels::gelu_backward(dact.ptr(),
                                   cache.dec.pre[size_t(i - 1)].ptr(),
                                   dout.ptr(), dact.size());
        } else {
            dout = std::move(dact);
        }
    }

    Tensor<T> dd0_pre(cache.dec.d0_pre.shape);
    kernels::gelu_backward(dout.ptr(), cache.dec.d0_pre.ptr(), dd0_pre.ptr(),
                           dout.size());
    Tensor<T> dz(cache.z.shape);
    kernels::conv2d_backward(dd0_pre.ptr(), cache.z.ptr(),
                             m.store.value(m.dec0_w).ptr(), dz.ptr(),
                             m.store.grad(m.dec0_w).ptr(),
                             m.store.grad(m.dec0_b).ptr(), cache.z.dim(0),
                             cache.z.dim(1), cache.z.dim(2), cache.z.dim(3),
                             dd0_pre.dim(1), kK, kK, 1, 1);

    // Reparameterization: z = mean + exp(logvar / 2) * noise.
    Tensor<T> dmean = dz;
    Tensor<T> dlogvar(dz.shape);
    for (int64_t i = 0; i < dz.size(); ++i)
        dlogvar[i] = dz[i] * T(0.5) * (cache.z[i] - cache.post.mean[i]);
    kl_backward(cache.post.mean, cache.post.logvar, beta, dmean, dlogvar);

    // Reassemble the head gradient from the mean/logvar halves.
    const int64_t B = cache.enc.head.dim(0), lc = m.latent_channels;
    const int64_t plane = cache.enc.head.dim(2) * cache.enc.head.dim(3);
    Tensor<T> dhead(cache.enc.head.shape);
    for (int64_t b = 0; b < B; ++b) {
        std::copy(dmean.ptr() + b * lc * plane,
                  dmean.ptr() + (b + 1) * lc * plane,
                  dhead.ptr() + b * 2 * lc * plane);
        std::copy(dlogvar.ptr() + b * lc * plane,
                  dlogvar.ptr() + (b + 1) * lc * plane,
                  dhead.ptr() + b * 2 * lc * plane + lc * plane);
    }

    const int64_t ne = int64_t(m.enc_widths.size());
    const Tensor<T>& top = cache.enc.act.back();
    Tensor<T> dact(top.shape);
    kernels::conv2d_backward(dhead.ptr(), top.ptr(),
                             m.store.value(m.head_w).ptr(), dact.ptr(),
                             m.store.grad(m.head_w).ptr(),
                             m.store.grad(m.head_b).ptr(), top.dim(0),
                             top.dim(1), top.dim(2), top.dim(3), dhead.dim(1),
                             kK, kK, 1, 1);

    for (int64_t i = ne - 1; i >= 0; --i) {
        Tensor<T> dpre(cache.enc.pre[size_t(i)].shape);
        kernels::gelu_backward(dact.ptr(), cache.enc.pre[size_t(i)].ptr(),
                               dpre.ptr(), dact.size());
        const Tensor<T>& in = (i > 0) ? cache.enc.act[size_t(i - 1)] : x;
        Tensor<T> din(in.shape);
        kernels::conv2d_backward(
            dpre.ptr(), in.ptr(), m.store.value(m.enc_w[size_t(i)]).ptr(),
            (i > 0) ? din.ptr() : nullptr, m.store.grad(m.enc_w[size_t(i)]).ptr(),
            m.store.grad(m.enc_b[size_t(i)]).ptr(), in.dim(0), in.dim(1),
            in.dim(2), in.dim(3), dpre.dim(1), kK, kK, 2, 1);
        dact = std::move(din);
    }
}

// =============================================================================
// Training
// =============================================================================

template <typename T>
TrainResult<T> train_vae(const VaeConfig& cfg, const Tensor<T>& data,
                         int stage, Rng& rng, const VaeModel<T>* stage1) {
    validate(cfg);
    if (stage != 1 && stage != 2)
        throw ConfigError("stage must be 1 or 2");
    check(data.rank() == 4 && data.dim(0) >= 1, "data must be [N, c, h, w]");
    check(data.dim(1) == cfg.img_channels, "data channel mismatch");

    TrainResult<T> out;
    if (stage == 1) {
        out.model = build_vae<T>(cfg, cfg.c1, rng);
    } else {
        if (stage1 == nullptr)
            throw ConfigError("stage 2 requires a stage-1 model");
        if (stage1->latent_channels != cfg.c1)
            throw ConfigError("stage-1 model channel mismatch");
        out.model = widen_latent(*stage1, cfg.c2, rng);
    }

    const int64_t steps = (stage == 1) ? cfg.steps_stage1 : cfg.steps_stage2;
    const int64_t N = data.dim(0);
    const int64_t row = data.size() / N;

    Adam<T> opt(out.model.store, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    Tensor<T> batch(Shape{cfg.batch, data.dim(1), data.dim(2), data.dim(3)});
    VaeStepCache<T> cache;

    for (int64_t step = 1; step <= steps; ++step) {
        for (int64_t b = 0; b < cfg.batch; ++b) {
            const int64_t idx = int64_t(rng.uniform_int(uint64_t(N)));
            std::copy(data.ptr() + idx * row, data.ptr() + (idx + 1) * row,
                      batch.ptr() + b * row);
        }
        Tensor<T> noise(Shape{cfg.batch, out.model.latent_channels,
                              data.dim(2) / cfg.compression,
                              data.dim(3) / cfg.compression});
        rng.fill_normal(noise.ptr(), noise.size());

        out.model.store.zero_grads();
        const double loss =
            vae_loss(out.model, batch, noise, cfg.beta, cache);
        if (!std::isfinite(loss) || loss > 1e8)
            throw NumericError("vae training diverged at step " +
                               std::to_string(step));
        vae_loss_backward(out.model, cfg.beta, cache);
        opt.step(out.model.store);

        if (step % cfg.log_every == 0 || step == steps)
            out.metrics.push_back(MetricRow{step, cache.mse, cache.kl});
    }
    return out;
}

// =============================================================================
// Channel surgery
// =============================================================================

template <typename T>
VaeModel<T> widen_latent(const VaeModel<T>& m, int64_t c2, Rng& rng) {
    const int64_t c1 = m.latent_channels;
    if (c2 <= c1)
        throw ConfigError("widened latent must add channels: c2 > c1");

    VaeModel<T> w =
        build_structure<T>(m.compression, m.img_channels, c2, rng);

    // Everything except the two latent-adjacent convolutions is copied bit
    // for bit; ids line up because both plans share the same layout.
    for (int64_t i = 0; i < m.store.count(); ++i) {
        const auto id = static_cast<ParamId>(i);
        if (id == m.head_w || id == m.head_b || id == m.dec0_w) continue;
        check(same_shape(m.store.value(id), w.store.value(id)),
              "surgery must preserve untouched shapes");
        w.store.value(id) = m.store.value(id);
    }

    // Replacement tensors draw their new slices at small scale first, then
    // the surviving c1 slices overwrite them with the original values.
    auto& hw = w.store.value(w.head_w);
    auto& hb = w.store.value(w.head_b);
    auto& dw = w.store.value(w.dec0_w);
    rng.fill_normal(hw.ptr(), hw.size(), 0.01);
    rng.fill_normal(hb.ptr(), hb.size(), 0.01);
    rng.fill_normal(dw.ptr(), dw.size(), 0.01);

    const auto& ohw = m.store.value(m.head_w);
    const auto& ohb = m.store.value(m.head_b);
    const auto& odw = m.store.value(m.dec0_w);
    const int64_t hrow = ohw.size() / (2 * c1);  // per-output-channel weights
    for (int64_t r = 0; r < c1; ++r) {
        std::copy(ohw.ptr() + r * hrow, ohw.ptr() + (r + 1) * hrow,
                  hw.ptr() + r * hrow);
        std::copy(ohw.ptr() + (c1 + r) * hrow, ohw.ptr() + (c1 + r + 1) * hrow,
                  hw.ptr() + (c2 + r) * hrow);
        hb[r] = ohb[r];
        hb[c2 + r] = ohb[c1 + r];
    }
    const int64_t co = odw.dim(0), krow = kK * kK;
    for (int64_t oc = 0; oc < co; ++oc)
        std::copy(odw.ptr() + oc * c1 * krow, odw.ptr() + (oc + 1) * c1 * krow,
                  dw.ptr() + oc * c2 * krow);
    return w;
}

// =============================================================================
// Measurement, data, output
// =============================================================================

template <typename T>
double measure_kl(const VaeModel<T>& m, const Tensor<T>& data) {
    Posterior<T> post = encode<T>(m, data, nullptr);
    return kl_divergence(post.mean, post.logvar);
}

template <typename T>
Tensor<T> make_textures(int64_t n, int64_t h, int64_t w, uint64_t seed) {
    check(n >= 1 && h >= 1 && w >= 1, "texture grid must be positive");
    Tensor<T> x(Shape{n, 1, h, w});
    Rng rng(seed, 3);
    const double tau = 6.283185307179586;
    for (int64_t i = 0; i < n; ++i) {
        double amp[2], phase[2];
        int64_t fx[2], fy[2];
        for (int k = 0; k < 2; ++k) {
            fx[k] = 1 + int64_t(rng.uniform_int(3));
            fy[k] = int64_t(rng.uniform_int(4));
            amp[k] = 0.3 + 0.5 * rng.uniform();
            phase[k] = tau * rng.uniform();
        }
        const double offset = 0.6 * (rng.uniform() - 0.5);
        T* img = x.ptr() + i * h * w;
        for (int64_t py = 0; py < h; ++py)
            for (int64_t px = 0; px < w; ++px) {
                double v = offset;
                for (int k = 0; k < 2; ++k)
                    v += amp[k] * std::sin(tau * (double(fx[k] * px) / double(w) +
                                                  double(fy[k] * py) / double(h)) +
                                           phase[k]);
                img[py * w + px] = static_cast<T>(v);
            }
    }
    return x;
}

void write_metrics_csv(const std::vector<MetricRow>& rows,
                       const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write metrics csv: " + path);
    f << "step,mse,kl\n";
    f << std::setprecision(17);
    for (const auto& r : rows)
        f << r.step << ',' << r.mse << ',' << r.kl << '\n';
    if (!f) throw ConfigError("failed writing metrics csv: " + path);
}

// =============================================================================
// Instantiations
// =============================================================================

#define DITAIR_VAETOY_INSTANTIATE(T)                                          \
    template VaeModel<T> build_vae<T>(const VaeConfig&, int64_t, Rng&);       \
    template Posterior<T> encode<T>(const VaeModel<T>&, const Tensor<T>&,     \
                                    EncodeCache<T>*);                         \
    template Tensor<T> decode<T>(const VaeModel<T>&, const Tensor<T>&,        \
                                 DecodeCache<T>*);                            \
    template double kl_divergence<T>(const Tensor<T>&, const Tensor<T>&);     \
    template void kl_backward<T>(const Tensor<T>&, const Tensor<T>&, double,  \
                                 Tensor<T>&, Tensor<T>&);                     \
    template double vae_loss<T>(const VaeModel<T>&, const Tensor<T>&,         \
                                const Tensor<T>&, double, VaeStepCache<T>&);  \
    template void vae_loss_backward<T>(VaeModel<T>&, double,                  \
                                       const VaeStepCache<T>&);               \
    template TrainResult<T> train_vae<T>(const VaeConfig&, const Tensor<T>&,  \
                                         int, Rng&, const VaeModel<T>*);      \
    template VaeModel<T> widen_latent<T>(const VaeModel<T>&, int64_t, Rng&);  \
    template double measure_kl<T>(const VaeModel<T>&, const Tensor<T>&);      \
    template Tensor<T> make_textures<T>(int64_t, int64_t, int64_t, uint64_t);

DITAIR_VAETOY_INSTANTIATE(float)
DITAIR_VAETOY_INSTANTIATE(double)
#undef DITAIR_VAETOY_INSTANTIATE

}  // namespace vaetoy
}  // namespace ditair
