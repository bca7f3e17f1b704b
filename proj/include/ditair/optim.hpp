#pragma once

#include <cmath>

#include "ditair/params.hpp"

namespace ditair {

// Adam with bias correction. eps sits outside the square root:
//   p -= lr * m_hat / (sqrt(v_hat) + eps)
// Moments are kept in double regardless of the parameter dtype; the update
// is computed in double and applied in parameter precision.
struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class Adam {
public:
    Adam(const ParamStore<T>& store, AdamConfig cfg = {}) : cfg_(cfg) {
        m_.resize(static_cast<size_t>(store.count()));
        v_.resize(static_cast<size_t>(store.count()));
        for (int64_t i = 0; i < store.count(); ++i) {
            size_t n = static_cast<size_t>(store.value(static_cast<ParamId>(i)).size());
            m_[static_cast<size_t>(i)].assign(n, 0.0);
            v_[static_cast<size_t>(i)].assign(n, 0.0);
        }
    }

    // One optimizer step from the accumulated grads. A parameter shared by
    // several layers has a single slot here, so its update sees the summed
    // gradient over all use sites exactly once.
    void step(ParamStore<T>& store) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (int64_t idx = 0; idx < store.count(); ++idx) {
            auto id = static_cast<ParamId>(idx);
            T* p = store.value(id).ptr();
            const T* g = store.grad(id).ptr();
            double* m = m_[static_cast<size_t>(idx)].data();
            double* v = v_[static_cast<size_t>(idx)].data();
            const int64_t n = store.value(id).size();
            for (int64_t i = 0; i < n; ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                p[i] = static_cast<T>(static_cast<double>(p[i]) -
                                      cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
    }

    int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace ditair
