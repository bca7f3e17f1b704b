#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ditair/params.hpp"
#include "ditair/rng.hpp"
#include "ditair/tensor.hpp"

namespace ditair {
namespace vaetoy {

// =============================================================================
// Configuration
// =============================================================================

struct VaeConfig {
    int64_t compression = 4;  // spatial factor: one stride-2 stage per halving
    int64_t img_channels = 1;
    int64_t c1 = 4;           // stage-1 latent channels
    int64_t c2 = 8;           // stage-2 latent channels after widening
    double beta = 1e-3;       // KL weight
    int64_t steps_stage1 = 250;
    int64_t steps_stage2 = 250;
    int64_t batch = 16;
    double lr = 1e-3;
    int64_t log_every = 25;
    uint64_t seed = 0;
};

// c2 > c1 >= 1, beta > 0, compression in {2, 4}, positive budgets; violations
// throw ConfigError.
void validate(const VaeConfig& cfg);

// =============================================================================
// Model
// =============================================================================
//
// Stride-2 convolutional encoder, a 3x3 latent head emitting (mean, logvar)
// with latent_channels each, and a mirrored decoder that starts with a 3x3
// convolution from latent_channels and alternates nearest-neighbour
// upsampling with 3x3 convolutions back to image channels.

template <typename T>
struct VaeModel {
    int64_t compression = 4;
    int64_t img_channels = 1;
    int64_t latent_channels = 0;
    std::vector<int64_t> enc_widths;  // encoder channel ladder, e.g. {16, 32}

    ParamStore<T> store;
    std::vector<ParamId> enc_w, enc_b;
    ParamId head_w = -1, head_b = -1;
    ParamId dec0_w = -1, dec0_b = -1;
    std::vector<ParamId> dec_w, dec_b;  // one conv per upsampling stage
};

template <typename T>
VaeModel<T> build_vae(const VaeConfig& cfg, int64_t latent_channels, Rng& rng);

// =============================================================================
// Forward pieces
// =============================================================================

template <typename T>
struct Posterior {
    Tensor<T> mean;    // [B, c, h/f, w/f]
    Tensor<T> logvar;  // [B, c, h/f, w/f]
};

template <typename T>
struct EncodeCache {
    Tensor<T> x;
    std::vector<Tensor<T>> pre, act;
    Tensor<T> head;  // [B, 2c, h/f, w/f]
};

template <typename T>
struct DecodeCache {
    Tensor<T> z;
    Tensor<T> d0_pre, d0_act;
    std::vector<Tensor<T>> up, pre, act;
};

// x is [B, img_channels, H, W] with H, W divisible by the compression
// factor; shape violations throw DimensionError.
template <typename T>
Posterior<T> encode(const VaeModel<T>& m, const Tensor<T>& x,
                    EncodeCache<T>* cache);

template <typename T>
Tensor<T> decode(const VaeModel<T>& m, const Tensor<T>& z,
                 DecodeCache<T>* cache);

// Mean over the batch of the per-sample diagonal-Gaussian KL to N(0, I):
// 0.5 * sum_dims (mean^2 + exp(logvar) - 1 - logvar).
template <typename T>
double kl_divergence(const Tensor<T>& mean, const Tensor<T>& logvar);

template <typename T>
void kl_backward(const Tensor<T>& mean, const Tensor<T>& logvar, double scale,
                 Tensor<T>& dmean, Tensor<T>& dlogvar);

// =============================================================================
// Training objective
// =============================================================================

template <typename T>
struct VaeStepCache {
    EncodeCache<T> enc;
    Posterior<T> post;
    Tensor<T> noise, z;
    DecodeCache<T> dec;
    Tensor<T> recon;
    double mse = 0.0, kl = 0.0;
};

// Reconstruction MSE plus beta times KL for one batch, using the supplied
// reparameterization noise (same shape as the posterior mean). Returns the
// scalar loss and fills the cache for the backward pass.
template <typename T>
double vae_loss(const VaeModel<T>& m, const Tensor<T>& x,
                const Tensor<T>& noise, double beta, VaeStepCache<T>& cache);

// Accumulates parameter gradients of vae_loss into the store.
template <typename T>
void vae_loss_backward(VaeModel<T>& m, double beta,
                       const VaeStepCache<T>& cache);

// =============================================================================
// Training, surgery, measurement
// =============================================================================

struct MetricRow {
    int64_t step = 0;
    double mse = 0.0;
    double kl = 0.0;
};

template <typename T>
struct TrainResult {
    VaeModel<T> model;
    std::vector<MetricRow> metrics;
};

// Adam on MSE + beta * KL over uniformly sampled batches of `data`
// ([N, img_channels, H, W]). Stage 1 trains a fresh c1-channel model; stage 2
// widens the supplied stage-1 model to c2 channels and continues. A
// non-finite loss aborts with NumericError naming the step.
template <typename T>
TrainResult<T> train_vae(const VaeConfig& cfg, const Tensor<T>& data,
                         int stage, Rng& rng,
                         const VaeModel<T>* stage1 = nullptr);

// Replaces only the latent head (2c output channels) and the first decoder
// convolution (c input channels). Replacements copy the original channel
// slices and draw the new slices at 0.01 * N(0, 1); every other parameter is
// copied bit for bit. Shrinking throws ConfigError.
template <typename T>
VaeModel<T> widen_latent(const VaeModel<T>& m, int64_t c2, Rng& rng);

// Mean KL of the encoded posteriors over the whole dataset.
template <typename T>
double measure_kl(const VaeModel<T>& m, const Tensor<T>& data);

// =============================================================================
// Toy data and metric output
// =============================================================================

// Smooth random textures: per image a sum of two integer-frequency sinusoid
// waves plus a DC offset, so the dataset lives on a low-dimensional manifold
// a small latent can capture.
template <typename T>
Tensor<T> make_textures(int64_t n, int64_t h, int64_t w, uint64_t seed);

// step,mse,kl rows; throws ConfigError when the file cannot be written.
void write_metrics_csv(const std::vector<MetricRow>& rows,
                       const std::string& path);

}  // namespace vaetoy
}  // namespace ditair
