#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmpt/backbone.hpp"
#include "dmpt/tensor.hpp"

namespace dmpt {

enum class Variant { ZeroShot, CoOp, Vpt, Vlp, Dpt };

Variant parse_variant(const std::string& name);  // UsageError listing valid names
std::string variant_name(Variant v);
bool variant_tunes_text(Variant v);
bool variant_tunes_visual(Variant v);

// Knobs owned by the prompt families. cavpt_layers holds 1-based layer
// indices; an empty list disables the class-aware path entirely.
struct PromptConfig {
    int context_len = 16;      // M
    int prompt_len = 10;       // P, per layer
    int cavpt_len = 10;        // K_N
    std::vector<int> cavpt_layers;  // default {L} is resolved by the caller
    bool cavpt_shared = true;
    bool aux_ln_on_attended = false;  // classify LN(o_j) instead of LN(o_j + q_j)
};

// Learnable context vectors shared by every class sentence, plus the frozen
// word embeddings of the class names.
struct TextPromptContext {
    Tensor context;                  // M x d_text, learnable
    Tensor class_token_embeddings;   // K x d_text, frozen
};

// Plain per-layer visual prompts. An undefined entry means the layer gets
// nothing (or its class-aware replacement).
struct VisualPromptStack {
    std::vector<Tensor> prompts_per_layer;  // size = visual layer count
    std::vector<int> cavpt_layers;          // 0-based indices inside this struct
    int prompt_len = 0;
};

// Cross-attention prompt generator: queries from text features, keys and
// values from the visual layer's inputs, residual + layer norm on top, and
// the auxiliary K-way classifier head.
struct CAVPTGeneratorParams {
    Tensor query_w;  // embed_dim x d_visual
    Tensor query_b;  // d_visual
    Tensor wq;       // d_visual x d_k
    Tensor wk;       // d_visual x d_k
    Tensor wv;       // d_visual x d_visual
    Tensor ln_gain;  // d_visual
    Tensor ln_bias;  // d_visual
    Tensor head_w;   // d_visual x K
    Tensor head_b;   // K
    int d_k = 0;
};

// The three learnable families. Which ones exist depends on the variant.
struct PromptSet {
    Variant variant = Variant::ZeroShot;
    PromptConfig cfg;
    TextPromptContext text;
    VisualPromptStack visual;
    std::vector<CAVPTGeneratorParams> generators;  // one, or one per cavpt layer

    bool has_text() const { return text.context.defined(); }
    bool has_visual() const;
    bool has_generator() const { return !generators.empty(); }
    const CAVPTGeneratorParams& generator_for_layer(int layer) const;

    std::vector<Tensor> text_params() const;
    std::vector<Tensor> visual_params() const;  // plain prompts + generator parameters
    void zero_all_grads();
};

PromptSet init_prompts(Variant variant, const PromptConfig& cfg, const BackboneConfig& backbone,
                       const Vocabulary& vocab, const DualEncoderWeights& weights, std::uint64_t seed);

void save_prompt_pack(const PromptSet& prompts, const std::string& path);
PromptSet load_prompt_pack(const std::string& path);

// Class ids chosen for the CAVPT generator, strongest zero-shot score first.
struct ClassSelection {
    std::vector<int> indices;
    std::optional<int> forced_ground_truth;
    int size() const { return static_cast<int>(indices.size()); }
    std::optional<int> position_of(int class_id) const;
};

struct PromptedText {
    std::vector<TokenSequence> sequences;  // one per requested class
    Tensor context;                        // the shared override
};

// One sentence per class: M overridable context slots, then the class token,
// then the end marker.
PromptedText build_text_prompts(const TextPromptContext& ctx, const Vocabulary& vocab,
                                const std::vector<int>& class_ids);

// Ranking core: top k_n by descending score, ties broken toward the lower
// class id. When a training label is given and missing, it replaces the
// lowest-ranked pick.
ClassSelection select_from_scores(const std::vector<float>& scores, int k_n,
                                  std::optional<int> training_label);

// Full operation: plain (prompt-free) encode of the image, template-classifier
// logits, then the ranking above.
ClassSelection select_topk_classes(const Tensor& image, const Tensor& handcrafted_class_features,
                                   int k_n, std::optional<int> training_label,
                                   const DualEncoderWeights& w);

struct CavptOutputs {
    Tensor prompts;   // K_N x d, LN(o + q)
    Tensor queries;   // K_N x d
    Tensor attended;  // K_N x d, the raw cross-attention outputs o
};

// q_j = FC(g_j); o_j = softmax(q_j Wq (k Wk)^T / sqrt(d_k)) k Wv over the
// layer inputs; prompt_j = LN(o_j + q_j).
CavptOutputs generate_cavpt(const ClassSelection& selection, const Tensor& text_features,
                            const Tensor& layer_inputs, const CAVPTGeneratorParams& params,
                            AttentionCapture* capture = nullptr);

// K-way logits from the single generator row belonging to the label's class.
Tensor cavpt_aux_logits(const CavptOutputs& outs, const ClassSelection& selection, int label,
                        const CAVPTGeneratorParams& params, bool ln_on_attended_only = false);

using CavptProvider = std::function<Tensor(int layer, const Tensor& layer_inputs)>;

// Lays out plain prompts below the class-aware layers and splices the
// generator callback into the latter. Empty provider leaves those layers bare.
InjectionPlan assemble_image_input(const VisualPromptStack& stack, const CavptProvider& provider,
                                   int n_layers);

}  // namespace dmpt
