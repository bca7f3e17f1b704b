#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ditair/tensor.hpp"

namespace ditair {

// One tensor to verify: its analytic gradient must already be computed and
// must not change while the checker re-evaluates the loss.
struct GradCheckItem {
    std::string name;
    Tensor<double>* value;        // perturbed in place and restored
    const Tensor<double>* grad;   // analytic gradient at the unperturbed point
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;           // "tensor[flat_index]" of the worst coordinate
    int64_t coords_checked = 0;
};

// Central finite differences in double: fd = (L(+eps) - L(-eps)) / (2 eps),
// rel = |analytic - fd| / max(|analytic|, |fd|, 1e-8). With
// max_coords_per_tensor > 0, coordinates are subsampled per tensor from a
// stream seeded by coord_seed, so large tensors stay cheap while every
// tensor is still touched.
GradCheckResult grad_check(const std::function<double()>& loss,
                           const std::vector<GradCheckItem>& items,
                           double eps = 1e-4,
                           int64_t max_coords_per_tensor = 0,
                           uint64_t coord_seed = 1234);

}  // namespace ditair
