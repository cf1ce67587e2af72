#pragma once

#include <cstdint>
#include <span>

#include "dmpt/tensor.hpp"

namespace dmpt {

// Schedule state for one parameter group. `warmup_steps` is the fixed-rate
// window at the start of training; the cosine anneal runs over the steps
// after it, starting at base_lr and ending at zero.
struct OptimizerState {
    float learning_rate = 0.0f;  // rate used by the next sgd_step
    std::int64_t step_index = 0;
    std::int64_t total_steps = 1;
    float base_lr = 0.0f;
    std::int64_t warmup_steps = 0;
    float warmup_lr = 1e-5f;
};

float cosine_lr(const OptimizerState& state);

// param <- param - lr * grad for every tensor in the group, then zeros the
// grads and advances the step counter. Every param must carry a gradient.
void sgd_step(std::span<Tensor> params, OptimizerState& state);

}  // namespace dmpt
