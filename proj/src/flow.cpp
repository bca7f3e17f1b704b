#include "ditair/flow.hpp"

#include <cmath>

namespace ditair {
namespace flow {

// =============================================================================
// Timesteps
// =============================================================================

double sample_timestep(const TimestepDist& dist, Rng& rng) {
    check(dist.s > 0.0, "timestep scale must be positive");
    const double n = rng.normal();
    double t = 1.0 / (1.0 + std::exp(-(dist.m + dist.s * n)));
    // sigmoid of an extreme draw can round to an endpoint in double
    // precision; the objective needs t strictly interior.
    if (t <= 0.0) t = std::nextafter(0.0, 1.0);
    if (t >= 1.0) t = std::nextafter(1.0, 0.0);
    return t;
}

// =============================================================================
// Batches
// =============================================================================

template <typename T>
Tensor<T> interpolate(const Tensor<T>& z0, const Tensor<T>& eps, const Tensor<T>& t) {
    check(z0.size() == eps.size() && z0.rank() >= 1, "interpolant inputs must match");
    const int64_t B = z0.dim(0);
    check(t.size() == B, "one timestep per sample");
    const int64_t row = z0.size() / B;
    Tensor<T> z_t(z0.shape);
    for (int64_t b = 0; b < B; ++b) {
        const T tb = t[b];
        const T* a = z0.ptr() + b * row;
        const T* e = eps.ptr() + b * row;
        T* o = z_t.ptr() + b * row;
        for (int64_t i = 0; i < row; ++i) o[i] = (T(1) - tb) * a[i] + tb * e[i];
    }
    return z_t;
}

template <typename T>
FlowBatch<T> make_batch(const Tensor<T>& z0, Rng& rng, const TimestepDist& dist) {
    check(z0.rank() >= 1 && z0.dim(0) >= 1, "batch needs a leading sample dimension");
    FlowBatch<T> fb;
    fb.z0 = z0;
    fb.eps = Tensor<T>(z0.shape);
    rng.fill_normal(fb.eps.ptr(), fb.eps.size());
    fb.t = Tensor<T>({z0.dim(0)});
    for (int64_t b = 0; b < z0.dim(0); ++b)
        fb.t[b] = static_cast<T>(sample_timestep(dist, rng));
    fb.z_t = interpolate(fb.z0, fb.eps, fb.t);
    fb.target = Tensor<T>(z0.shape);
    for (int64_t i = 0; i < z0.size(); ++i) fb.target[i] = fb.z0[i] - fb.eps[i];
    return fb;
}

// =============================================================================
// Loss
// =============================================================================

template <typename T>
double flow_loss(const Tensor<T>& pred, const FlowBatch<T>& batch) {
    check(pred.size() == batch.target.size(), "prediction/target shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        const double r = double(pred[i]) - double(batch.target[i]);
        s += r * r;
    }
    return s / double(pred.size());
}

template <typename T>
Tensor<T> flow_loss_grad(const Tensor<T>& pred, const FlowBatch<T>& batch) {
    check(pred.size() == batch.target.size(), "prediction/target shape mismatch");
    Tensor<T> g(pred.shape);
    const T scale = T(2) / T(pred.size());
    for (int64_t i = 0; i < pred.size(); ++i)
        g[i] = scale * (pred[i] - batch.target[i]);
    return g;
}

// =============================================================================
// Gaussian oracle
// =============================================================================

double oracle_k(double t, double sigma) {
    const double s2 = sigma * sigma, u = 1.0 - t;
    return (u * s2 - t) / (u * u * s2 + t * t);
}

double oracle_min_loss(double t, double sigma) {
    const double s2 = sigma * sigma, u = 1.0 - t;
    const double cov = u * s2 - t;
    const double var = u * u * s2 + t * t;
    return (s2 + 1.0) - cov * cov / var;
}

template <typename T>
Tensor<T> gaussian_oracle(const Tensor<T>& z_t, const Tensor<T>& t, double mu,
                          double sigma) {
    const int64_t B = z_t.dim(0);
    check(t.size() == B, "one timestep per sample");
    const int64_t row = z_t.size() / B;
    Tensor<T> pred(z_t.shape);
    for (int64_t b = 0; b < B; ++b) {
        const double tb = double(t[b]);
        const double k = oracle_k(tb, sigma);
        const double base = (1.0 - tb) * mu;
        const T* zp = z_t.ptr() + b * row;
        T* o = pred.ptr() + b * row;
        for (int64_t i = 0; i < row; ++i)
            o[i] = static_cast<T>(mu + k * (double(zp[i]) - base));
    }
    return pred;
}

double expected_min_loss(const TimestepDist& dist, double sigma) {
    check(dist.s > 0.0, "timestep scale must be positive");
    // Integrate v(sigmoid(m + s n)) phi(n) dn by composite Simpson.
    const int64_t segments = 4000;  // even panel count
    const double lo = -8.0, hi = 8.0;
    const double h = (hi - lo) / double(segments);
    auto f = [&](double n) {
        const double t = 1.0 / (1.0 + std::exp(-(dist.m + dist.s * n)));
        const double phi = std::exp(-0.5 * n * n) / std::sqrt(2.0 * 3.14159265358979323846);
        return oracle_min_loss(t, sigma) * phi;
    };
    double s = f(lo) + f(hi);
    for (int64_t i = 1; i < segments; ++i)
        s += f(lo + h * double(i)) * ((i % 2) ? 4.0 : 2.0);
    return s * h / 3.0;
}

// =============================================================================
// Explicit instantiations
// =============================================================================

#define DITAIR_FLOW_INSTANTIATE(T)                                                   \
    template Tensor<T> interpolate<T>(const Tensor<T>&, const Tensor<T>&,             \
                                      const Tensor<T>&);                               \
    template FlowBatch<T> make_batch<T>(const Tensor<T>&, Rng&, const TimestepDist&); \
    template double flow_loss<T>(const Tensor<T>&, const FlowBatch<T>&);              \
    template Tensor<T> flow_loss_grad<T>(const Tensor<T>&, const FlowBatch<T>&);      \
    template Tensor<T> gaussian_oracle<T>(const Tensor<T>&, const Tensor<T>&, double, \
                                          double);

DITAIR_FLOW_INSTANTIATE(float)
DITAIR_FLOW_INSTANTIATE(double)
#undef DITAIR_FLOW_INSTANTIATE

}  // namespace flow
}  // namespace ditair
