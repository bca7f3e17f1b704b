#include "ditair/sampler.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "ditair/common.hpp"

namespace ditair {
namespace sampler {

// =============================================================================
// Configuration
// =============================================================================

void validate(const SamplerConfig& cfg) {
    if (cfg.steps < 1) throw ConfigError("sampler needs at least one step");
    if (!(cfg.w >= 0.0)) throw ConfigError("guidance weight must be >= 0");
    if (!(cfg.churn >= 0.0)) throw ConfigError("churn must be >= 0");
}

// =============================================================================
// Guidance
// =============================================================================

template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& cond_pred, const Tensor<T>& uncond_pred,
                      double w) {
    check(same_shape(cond_pred, uncond_pred),
          "guidance needs matching prediction shapes");
    if (w == 1.0) return cond_pred;
    if (w == 0.0) return uncond_pred;
    Tensor<T> out(cond_pred.shape);
    const T wt = static_cast<T>(w);
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = uncond_pred[i] + wt * (cond_pred[i] - uncond_pred[i]);
    return out;
}

// =============================================================================
// Heun integrator
// =============================================================================

namespace {

template <typename T>
void require_finite_state(const Tensor<T>& z, int64_t step) {
    for (int64_t i = 0; i < z.size(); ++i)
        if (!std::isfinite(double(z[i])))
            throw NumericError("sampler state went non-finite at step " +
                               std::to_string(step));
}

}  // namespace

template <typename T>
Tensor<T> heun_integrate(const Field<T>& field, const Tensor<T>& z_start,
                         const SamplerConfig& cfg, Rng* churn_rng) {
    validate(cfg);
    if (cfg.churn > 0.0 && churn_rng == nullptr)
        throw ConfigError("churn needs an rng");

    const int64_t n = cfg.steps;
    const double h = -1.0 / double(n);
    const int64_t size = z_start.size();

    Tensor<T> z = z_start;
    Tensor<T> proposal(z.shape);
    for (int64_t i = 0; i < n; ++i) {
        const double t0 = 1.0 - double(i) / double(n);
        const double t1 = 1.0 - double(i + 1) / double(n);
        if (cfg.churn > 0.0) {
            const T amp =
                static_cast<T>(cfg.churn * std::sqrt(1.0 / double(n)));
            for (int64_t j = 0; j < size; ++j)
                z[j] += amp * static_cast<T>(churn_rng->normal());
        }

        Tensor<T> p0 = field(z, t0);
        check(same_shape(p0, z), "field must preserve the state shape");
        for (int64_t j = 0; j < size; ++j)
            proposal[j] = z[j] + static_cast<T>(h) * (-p0[j]);

        if (i + 1 == n) {
            // One-sided Euler into the boundary keeps the field unevaluated
            // at t = 0.
            std::swap(z, proposal);
        } else {
            Tensor<T> p1 = field(proposal, t1);
            check(same_shape(p1, z), "field must preserve the state shape");
            const T hh = static_cast<T>(0.5 * h);
            for (int64_t j = 0; j < size; ++j)
                z[j] += hh * ((-p0[j]) + (-p1[j]));
        }
        require_finite_state(z, i);
    }
    return z;
}

// =============================================================================
// Generation
// =============================================================================

template <typename T>
Tensor<T> generate(const arch::Model<T>& m, const cond::CondBundle<T>& bundle,
                   int64_t grid_h, int64_t grid_w, const SamplerConfig& cfg,
                   Rng& rng) {
    validate(cfg);
    const arch::ModelConfig& mc = m.cfg();
    check(grid_h >= 1 && grid_w >= 1, "latent grid must be positive");

    Tensor<T> z(Shape{1, mc.latent_channels, grid_h, grid_w});
    rng.fill_normal(z.ptr(), z.size());

    const cond::CondBatch<T> cb_cond = cond::pack_bundles<T>({bundle}, mc.l_text);
    const cond::CondBatch<T> cb_null = cond::pack_bundles<T>(
        {cond::null_condition<T>(mc.l_text, mc.d_enc)}, mc.l_text);

    Tensor<T> tt(Shape{1});
    const double w = cfg.w;
    Field<T> field = [&](const Tensor<T>& zt, double t) {
        tt[0] = static_cast<T>(t);
        if (w == 1.0) return arch::forward<T>(m, zt, cb_cond, tt, nullptr);
        if (w == 0.0) return arch::forward<T>(m, zt, cb_null, tt, nullptr);
        Tensor<T> c = arch::forward<T>(m, zt, cb_cond, tt, nullptr);
        Tensor<T> u = arch::forward<T>(m, zt, cb_null, tt, nullptr);
        return cfg_combine<T>(c, u, w);
    };
    return heun_integrate<T>(field, z, cfg, &rng);
}

// =============================================================================
// Instantiations
// =============================================================================

#define DITAIR_SAMPLER_INSTANTIATE(T)                                         \
    template Tensor<T> cfg_combine<T>(const Tensor<T>&, const Tensor<T>&,     \
                                      double);                                \
    template Tensor<T> heun_integrate<T>(const Field<T>&, const Tensor<T>&,   \
                                         const SamplerConfig&, Rng*);         \
    template Tensor<T> generate<T>(const arch::Model<T>&,                     \
                                   const cond::CondBundle<T>&, int64_t,       \
                                   int64_t, const SamplerConfig&, Rng&);

DITAIR_SAMPLER_INSTANTIATE(float)
DITAIR_SAMPLER_INSTANTIATE(double)
#undef DITAIR_SAMPLER_INSTANTIATE

}  // namespace sampler
}  // namespace ditair
