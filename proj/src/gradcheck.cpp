#include "ditair/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ditair/rng.hpp"

namespace ditair {

GradCheckResult grad_check(const std::function<double()>& loss,
                           const std::vector<GradCheckItem>& items,
                           double eps, int64_t max_coords_per_tensor,
                           uint64_t coord_seed) {
    GradCheckResult res;
    Rng picker(coord_seed);
    for (size_t t = 0; t < items.size(); ++t) {
        const GradCheckItem& item = items[t];
        check(item.value && item.grad, "grad_check item missing tensors");
        check(item.value->shape == item.grad->shape,
              "grad_check shape mismatch for " + item.name);
        const int64_t n = item.value->size();
        std::vector<int64_t> coords;
        if (max_coords_per_tensor <= 0 || n <= max_coords_per_tensor) {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            // Sample without replacement from a per-tensor stream.
            Rng r = picker.split(static_cast<uint64_t>(t));
            std::vector<int64_t> all(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            for (int64_t i = 0; i < max_coords_per_tensor; ++i) {
                int64_t j = i + static_cast<int64_t>(
                                    r.uniform_int(static_cast<uint64_t>(n - i)));
                std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
            }
            coords.assign(all.begin(), all.begin() + max_coords_per_tensor);
        }
        for (int64_t c : coords) {
            double* slot = item.value->ptr() + c;
            const double saved = *slot;
            *slot = saved + eps;
            const double lp = loss();
            *slot = saved - eps;
            const double lm = loss();
            *slot = saved;
            if (!std::isfinite(lp) || !std::isfinite(lm))
                throw NumericError("grad_check loss non-finite at " + item.name);
            const double fd = (lp - lm) / (2.0 * eps);
            const double an = item.grad->data[static_cast<size_t>(c)];
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
            const double rel = std::abs(an - fd) / denom;
            ++res.coords_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = item.name + "[" + std::to_string(c) + "]";
            }
        }
    }
    return res;
}

}  // namespace ditair
