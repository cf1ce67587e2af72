#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "dmpt/backbone.hpp"
#include "dmpt/config.hpp"
#include "dmpt/dataset.hpp"
#include "dmpt/optim.hpp"
#include "dmpt/prompts.hpp"
#include "dmpt/rng.hpp"

namespace dmpt {

// Every knob of one training cell, resolved from the flat config file.
struct ExperimentConfig {
    Variant variant = Variant::Dpt;
    int shots = 16;
    int batch_size = 32;
    std::uint64_t seed = 0;
    PromptConfig prompts;  // M, P, K_N, cavpt layers, sharing, aux-LN flag
    float alpha = 0.3f;
    float beta = 0.1f;
    int epochs = 100;  // 60 when shots == 1 and not set explicitly
    int warmup_epochs = 30;
    float lr_text = 2e-3f;
    float lr_visual = 1e-3f;
    float fixed_warmup_lr = 1e-5f;
    int fixed_warmup_epochs = 10;
    BackboneConfig backbone;

    void validate() const;
    static ExperimentConfig from_map(const ConfigMap& map);
};

struct LabeledImage {
    Tensor image;
    int label = 0;
    int dataset_index = -1;
};

struct FewShotTask {
    std::vector<std::string> class_names;
    std::vector<LabeledImage> support;
    std::vector<LabeledImage> query;
    std::vector<BBox> query_bboxes;  // aligned with query
    int class_count() const { return static_cast<int>(class_names.size()); }
};

// Seeded uniform sampling without replacement per class; the remainder of the
// split becomes the query set.
FewShotTask sample_few_shot(const Dataset& dataset, int shots, std::uint64_t seed);

struct LossReport {
    float l_ce = 0.0f;
    float l_ca = 0.0f;
    float l_coop = 0.0f;
    float l_vpt = 0.0f;
    float total = 0.0f;
};

// Frozen per-task byproducts of the zero-shot pipeline: the template
// classifier and the prompt-free image features (none of these can change
// during prompt training).
struct TaskCache {
    Tensor template_class_features;  // K x D
    std::vector<Tensor> support_plain_features;
    std::vector<std::vector<float>> support_scores;  // zero-shot logits
    std::vector<Tensor> query_plain_features;
    std::vector<std::vector<float>> query_scores;
};

TaskCache build_task_cache(const FewShotTask& task, const DualEncoderWeights& weights,
                           const Vocabulary& vocab);

enum class Phase { Warmup, Main };
const char* phase_name(Phase p);
Phase phase_for_epoch(const ExperimentConfig& cfg, int epoch);

// K x D feature matrix of every class sentence under the learned context.
Tensor class_features_with_context(const PromptSet& prompts, const Vocabulary& vocab,
                                   const DualEncoderWeights& weights);

// alpha * l_ca + l_ce (l_ca may be undefined)
Tensor combine_main_loss(const Tensor& l_ce, const Tensor& l_ca, float alpha);
// l_coop + l_vpt + beta * l_ce + alpha * l_ca (l_ca may be undefined)
Tensor combine_warmup_loss(const Tensor& l_coop, const Tensor& l_vpt, const Tensor& l_ce,
                           const Tensor& l_ca, float alpha, float beta);

struct LossBundle {
    Tensor l_ce, l_ca, l_coop, l_vpt;  // undefined when the term does not apply
    Tensor total;
    LossReport report() const;
};

class Trainer {
public:
    Trainer(const ExperimentConfig& cfg, const DualEncoderWeights& weights, PromptSet& prompts,
            const FewShotTask& task, const Vocabulary& vocab);

    // forward only, no parameter update
    LossBundle forward_losses(const std::vector<int>& support_indices, Phase phase);

    // spec-facing loss entry points
    Tensor loss_main(const std::vector<int>& support_indices);
    Tensor loss_ca(const std::vector<int>& support_indices);
    Tensor warmup_loss(const std::vector<int>& support_indices);

    // forward + backward + per-group SGD with the cosine schedule
    LossReport train_step(const std::vector<int>& support_indices);

    // full loop; `stop_early` (if given) runs after each epoch and ends
    // training when it returns true
    void run(std::ostream* log, const std::function<bool(int finished_epoch)>& stop_early = {});

    int epoch() const { return epoch_; }
    std::int64_t global_step() const { return step_; }
    int steps_per_epoch() const { return steps_per_epoch_; }
    int epochs_run() const { return epochs_run_; }
    const TaskCache& cache() const { return cache_; }
    const OptimizerState& text_state() const { return text_state_; }
    const OptimizerState& visual_state() const { return visual_state_; }

private:
    ExperimentConfig cfg_;
    const DualEncoderWeights& weights_;
    PromptSet& prompts_;
    const FewShotTask& task_;
    const Vocabulary& vocab_;
    TaskCache cache_;
    std::vector<Tensor> text_params_;
    std::vector<Tensor> visual_params_;
    OptimizerState text_state_;
    OptimizerState visual_state_;
    Rng shuffle_rng_;
    int epoch_ = 0;
    std::int64_t step_ = 0;
    int steps_per_epoch_ = 0;
    int epochs_run_ = 0;
};

}  // namespace dmpt
