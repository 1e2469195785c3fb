#pragma once

#include <functional>
#include <vector>

#include "diffattn/tensor.hpp"

namespace diffattn {

// Central-difference gradient check. `loss_fn` rebuilds the scalar loss from
// the current contents of `params` on every call; `params` are the leaf
// tensors to differentiate. Returns the max over all coordinates of
//   |analytic - central| / max(|analytic|, |central|, 1e-8).
//
// The central difference for each coordinate is averaged over several step
// sizes in [0.6h, h]. A single float32 difference carries rounding noise of
// roughly eps*|f|/(2h); that noise is effectively independent across step
// sizes, so averaging pulls the check below the noise floor for coordinates
// whose true gradient is small.
inline float grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                        float h = 1e-2f) {
    constexpr int kSteps = 8;
    if (h < 1e-5f || h > 1e-2f)
        throw ContractError("grad_check: step h must be in [1e-5, 1e-2]");
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tensor loss = loss_fn();
    if (loss.numel() != 1)
        throw ContractError("grad_check: loss function must return a scalar");
    loss.backward();
    std::vector<std::vector<float>> analytic;
    for (auto& p : params) analytic.push_back(p.grad());

    float max_rel = 0.0f;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const float orig = p.data()[i];
            double central = 0.0;
            for (int k = 0; k < kSteps; ++k) {
                const float hk = h * (0.6f + 0.4f * static_cast<float>(k) / (kSteps - 1));
                p.data()[i] = orig + hk;
                const double fp = loss_fn().item();
                p.data()[i] = orig - hk;
                const double fm = loss_fn().item();
                central += (fp - fm) / (2.0 * static_cast<double>(hk));
            }
            central /= kSteps;
            p.data()[i] = orig;
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(central), 1e-8});
            max_rel = std::max(max_rel, static_cast<float>(std::fabs(a - central) / denom));
        }
    }
    return max_rel;
}

}  // namespace diffattn
