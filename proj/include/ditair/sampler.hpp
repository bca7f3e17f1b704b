#pragma once

#include <cstdint>
#include <functional>

#include "ditair/arch.hpp"
#include "ditair/conditioning.hpp"
#include "ditair/rng.hpp"
#include "ditair/tensor.hpp"

namespace ditair {
namespace sampler {

// =============================================================================
// Sampler configuration
// =============================================================================

struct SamplerConfig {
    int64_t steps = 50;  // uniform integration steps from t = 1 down to t = 0
    double w = 7.5;      // guidance weight
    double churn = 0.0;  // per-step noise amplitude; 0 keeps the path an ODE
    uint64_t seed = 0;   // noise stream for callers that own no rng
};

// steps >= 1, w >= 0, churn >= 0; violations throw ConfigError.
void validate(const SamplerConfig& cfg);

// =============================================================================
// Classifier-free guidance
// =============================================================================

// uncond + w * (cond - uncond). The w = 1 and w = 0 weights return the
// corresponding input unchanged, so those settings reproduce the ungated
// predictions exactly instead of up to rounding.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& cond_pred, const Tensor<T>& uncond_pred,
                      double w);

// =============================================================================
// Heun integrator
// =============================================================================

// A prediction field maps (state, time) to a prediction with the state's
// shape; the integrated velocity is the negated prediction.
template <typename T>
using Field = std::function<Tensor<T>(const Tensor<T>&, double)>;

// Integrates dz/dt = -field(z, t) from t = 1 down to t = 0 on a uniform grid.
// Interior steps take an Euler proposal and average the endpoint velocities
// (second order); the final step keeps the proposal, so the field is never
// evaluated at t = 0, where learned fields may be singular. With churn > 0
// every step first perturbs the state by churn * sqrt(1/steps) * N(0, I)
// drawn from churn_rng (required non-null in that case). A non-finite state
// after any step throws NumericError naming the step.
template <typename T>
Tensor<T> heun_integrate(const Field<T>& field, const Tensor<T>& z_start,
                         const SamplerConfig& cfg, Rng* churn_rng = nullptr);

// =============================================================================
// End-to-end generation
// =============================================================================

// Draws z ~ N(0, I) of latent shape [1, c, grid_h, grid_w] from rng and
// integrates the guided field cfg_combine(f(z, bundle, t), f(z, null, t), w).
// At w = 1 only the conditional branch runs, at w = 0 only the null branch,
// so those weights cost one forward per evaluation and match the ungated
// model bit for bit.
template <typename T>
Tensor<T> generate(const arch::Model<T>& m, const cond::CondBundle<T>& bundle,
                   int64_t grid_h, int64_t grid_w, const SamplerConfig& cfg,
                   Rng& rng);

}  // namespace sampler
}  // namespace ditair
