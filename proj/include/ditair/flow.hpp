#pragma once

#include "ditair/rng.hpp"
#include "ditair/tensor.hpp"

namespace ditair {
namespace flow {

// =============================================================================
// Objective
// =============================================================================
//
// Linear interpolant z_t = (1-t) z0 + t eps with regression target z0 - eps,
// the negative velocity of the path. The model is trained to predict the
// target; integrating -prediction from t=1 to t=0 transports noise to data.

struct TimestepDist {
    double m = 0.0;  // location of the logit-normal
    double s = 1.0;  // scale, > 0
};

// t = sigmoid(m + s * n), n ~ N(0,1). Strictly interior: draws that would
// round to an endpoint in double precision are pulled one ulp inside.
double sample_timestep(const TimestepDist& dist, Rng& rng);

template <typename T>
struct FlowBatch {
    Tensor<T> z0;      // clean samples, [B, ...]
    Tensor<T> eps;     // standard normal, same shape
    Tensor<T> t;       // [B], strictly interior
    Tensor<T> z_t;     // interpolated
    Tensor<T> target;  // z0 - eps
};

// z_t[b] = (1 - t[b]) * z0[b] + t[b] * eps[b]. First dimension is the batch.
template <typename T>
Tensor<T> interpolate(const Tensor<T>& z0, const Tensor<T>& eps, const Tensor<T>& t);

template <typename T>
FlowBatch<T> make_batch(const Tensor<T>& z0, Rng& rng, const TimestepDist& dist);

// Mean over every element of (pred - target)^2, so a zero predictor scores
// about 2 on unit-Gaussian data regardless of shape.
template <typename T>
double flow_loss(const Tensor<T>& pred, const FlowBatch<T>& batch);

// d loss / d pred for the normalization above: 2 (pred - target) / numel.
template <typename T>
Tensor<T> flow_loss_grad(const Tensor<T>& pred, const FlowBatch<T>& batch);

// =============================================================================
// Analytic Gaussian oracle
// =============================================================================
//
// For z0 ~ N(mu, sigma^2 I) the posterior mean of the target given z_t is
// linear: E[z0 - eps | z_t] = mu + k(t) (z_t - (1-t) mu) with
//   k(t) = ((1-t) sigma^2 - t) / ((1-t)^2 sigma^2 + t^2),
// and the per-element achievable loss at fixed t is the conditional variance
//   v(t) = (sigma^2 + 1) - ((1-t) sigma^2 - t)^2 / ((1-t)^2 sigma^2 + t^2).

double oracle_k(double t, double sigma);
double oracle_min_loss(double t, double sigma);

// Optimal prediction per sample, t given per row of the batch dimension.
template <typename T>
Tensor<T> gaussian_oracle(const Tensor<T>& z_t, const Tensor<T>& t, double mu,
                          double sigma);

// E_t[v(t)] under the logit-normal: Simpson quadrature over the normal
// variable on [m - 8s, m + 8s], dense enough that the error is far below
// any Monte Carlo tolerance used against it.
double expected_min_loss(const TimestepDist& dist, double sigma);

}  // namespace flow
}  // namespace ditair
