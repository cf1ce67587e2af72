#include "dmpt/optim.hpp"

#include <algorithm>
#include <cmath>

#include "dmpt/errors.hpp"

namespace dmpt {

float cosine_lr(const OptimizerState& state) {
    if (state.total_steps <= 0) throw ValueError("cosine_lr: total_steps must be positive");
    if (state.step_index < state.warmup_steps) return state.warmup_lr;
    const std::int64_t span = state.total_steps - state.warmup_steps;
    double progress = span > 0 ? static_cast<double>(state.step_index - state.warmup_steps) / static_cast<double>(span)
                               : 1.0;
    progress = std::clamp(progress, 0.0, 1.0);
    return static_cast<float>(state.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));
}

void sgd_step(std::span<Tensor> params, OptimizerState& state) {
    for (Tensor& p : params) {
        if (!p.defined() || !p.requires_grad() || !p.has_grad()) {
            throw ContractError("sgd_step: parameter is missing its gradient");
        }
    }
    const float lr = state.learning_rate;
    for (Tensor& p : params) {
        float* value = p.data();
        const std::vector<float>& g = p.grad();
        for (std::size_t i = 0; i < g.size(); ++i) value[i] -= lr * g[i];
        std::fill(p.grad().begin(), p.grad().end(), 0.0f);
    }
    ++state.step_index;
}

}  // namespace dmpt
