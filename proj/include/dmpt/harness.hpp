#pragma once

#include <string>
#include <vector>

#include "dmpt/trainer.hpp"

namespace dmpt {

// Everything needed to score one image under a variant at inference time.
// Class selection for the class-aware path uses pure zero-shot ranking
// (no ground-truth injection).
struct EvalContext {
    Variant variant = Variant::ZeroShot;
    const PromptSet* prompts = nullptr;  // null for zeroshot
    const DualEncoderWeights* weights = nullptr;
    const Vocabulary* vocab = nullptr;
    Tensor template_feats;  // K x D, frozen classifier
    Tensor class_feats;     // classifier actually used (learned when available)

    static EvalContext build(Variant variant, const PromptSet* prompts,
                             const DualEncoderWeights& weights, const Vocabulary& vocab);
    EncodeResult encode(const Tensor& image) const;  // variant's prompted image pass
    std::vector<float> scores(const Tensor& image) const;
};

double evaluate_images(const std::vector<LabeledImage>& images, const EvalContext& ctx);

// Fraction of query images whose argmax matches the label.
double evaluate(const FewShotTask& task, const PromptSet& prompts, const DualEncoderWeights& weights,
                Variant variant);

// Final-layer class-token attention, head-averaged, restricted to the patch
// slots and laid out on the patch grid.
struct PatchAttentionMap {
    int grid = 0;
    std::vector<float> weights;  // grid * grid
};

PatchAttentionMap class_attention_patches(const EncodeResult& result, const BackboneConfig& cfg);

// Attention mass inside the box (area-weighted per patch) over total patch
// attention.
double attention_focus(const PatchAttentionMap& map, const BBox& box, int patch_size);

// Min-max normalized patch attention, nearest-neighbor upsampled to the image
// size, written as binary PGM.
void export_attention_map(const Tensor& image, const EvalContext& ctx, const std::string& out_path);

struct ResultsRow {
    std::string variant;
    int shots = 0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    int epochs_run = 0;
    double wall_seconds = 0.0;
};

struct SummaryStat {
    double mean = 0.0;
    double stddev = 0.0;  // population
};
SummaryStat accuracy_summary(const std::vector<ResultsRow>& rows);

// CSV with one data row per cell plus one mean/std summary row per
// (variant, shots) group.
void write_results(const std::vector<ResultsRow>& rows, const std::string& path);

SyntheticSpec synthetic_spec_from_map(const ConfigMap& map);

// Full sweep: for each (variant, shots, seed) cell samples a task, trains,
// evaluates, and writes results, logs, prompt packs, and attention maps
// under out_dir.
std::vector<ResultsRow> run_experiment(const ConfigMap& map);

}  // namespace dmpt
