#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmpt/tensor.hpp"

namespace dmpt {

inline constexpr float kLayerNormEps = 1e-5f;

// Desk-scale dual-encoder dimensions. Defaults give a 4-layer ViT over a
// 4x4 patch grid and a 2-layer text transformer, all width 64.
struct BackboneConfig {
    int image_size = 32;
    int patch_size = 8;
    int d_visual = 64;
    int d_text = 64;
    int embed_dim = 64;  // joint space D
    int visual_layers = 4;
    int text_layers = 2;
    int heads = 4;
    int vocab_size = 32;
    int max_text_len = 19;  // sos + 16 context slots + class + eos
    float temperature = 0.01f;

    int n_patches() const {
        const int g = image_size / patch_size;
        return g * g;
    }
    int patch_grid() const { return image_size / patch_size; }
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

// Whitespace tokenizer over a fixed small vocabulary. Class names are single
// entries appended after the built-in tokens.
struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kSos = 1;
    static constexpr int kEos = 2;
    static constexpr int kCtx = 3;  // placeholder whose embedding gets overridden

    std::vector<std::string> tokens;

    static Vocabulary build(const std::vector<std::string>& class_names);
    int id_of(const std::string& token) const;  // ValueError if unknown
    int class_token_id(int class_index) const;
    int class_count() const { return static_cast<int>(tokens.size()) - kFirstClass; }
    int size() const { return static_cast<int>(tokens.size()); }

    static constexpr int kFirstClass = 7;  // after specials + "a photo of"
};

struct TokenSequence {
    std::vector<int> token_ids;
    int class_token_position = -1;
    int end_position = -1;  // pooling slot (the end-of-text marker)
};

// "a photo of a <class>" wrapped in sequence markers.
TokenSequence template_sequence(const Vocabulary& vocab, int class_index);

// One pre-LN transformer block: attention weights in row-vector convention
// (y = x * W + b), two layer norms, GELU MLP at 4x width.
struct LayerWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor bq, bk, bv, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Frozen parameters of both encoders. Every tensor stays requires_grad=false
// for the lifetime of the artifact.
struct DualEncoderWeights {
    BackboneConfig cfg;
    Tensor patch_embed_w;  // (3*patch^2) x d_visual
    Tensor patch_embed_b;  // d_visual
    Tensor visual_class_token;  // 1 x d_visual
    Tensor visual_pos_embed;    // (1 + n_patches) x d_visual
    std::vector<LayerWeights> visual_layers;
    Tensor visual_proj;  // d_visual x embed_dim

    Tensor token_embed;    // vocab_size x d_text
    Tensor text_pos_embed; // max_text_len x d_text
    std::vector<LayerWeights> text_layers;
    Tensor text_proj;  // d_text x embed_dim

    float temperature = 0.01f;

    // every parameter, in the serialization manifest order
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
};

// Per-head attention weights of one block, copied out for inspection.
struct AttentionCapture {
    int n = 0;
    int heads = 0;
    std::vector<std::vector<float>> head_weights;  // each n*n row-major
    bool empty() const { return head_weights.empty(); }
    // class-token attention row (query 0) averaged over heads, length n
    std::vector<float> class_row_mean() const;
};

Tensor transformer_layer_forward(const Tensor& inputs, const LayerWeights& lw, int heads,
                                 AttentionCapture* capture = nullptr);

// Flattened non-overlapping patches mapped to d_visual, patch-slot positional
// embeddings added. Output row j is the embedding of patch j.
Tensor embed_patches(const Tensor& image, const DualEncoderWeights& w);

// What gets spliced between the class token and the patch tokens at each
// layer. `plain` and `class_aware` are mutually exclusive per layer; the
// class-aware generator sees the would-be inputs [s; E] of its layer.
struct InjectionPlan {
    struct LayerPlan {
        Tensor plain;  // undefined => nothing
        std::function<Tensor(int layer, const Tensor& layer_inputs)> class_aware;
    };
    std::vector<LayerPlan> layers;  // indexed from layer 0; may be shorter than L
};

struct EncodeResult {
    Tensor feature;                  // embed_dim, L2-normalized
    AttentionCapture last_attention; // final layer, class token included
    int last_prompt_rows = 0;        // prompt slots in the final layer's sequence
};

// Runs the prompt-injected ViT. Prompt output slots are dropped after every
// layer; fresh prompts are spliced in at the next one.
EncodeResult image_encode(const Tensor& image, const InjectionPlan& plan,
                          const DualEncoderWeights& w);

// Token + positional embeddings through the text transformer, pooled at
// end_position, projected and L2-normalized. `context_override` replaces the
// embeddings of the <ctx> slots in order.
Tensor text_encode(const TokenSequence& seq, const Tensor& context_override,
                   const DualEncoderWeights& w);

// logit_i = cos(x, w_i) / tau for unit-normalized features (checked).
Tensor zero_shot_logits(const Tensor& image_feature, const Tensor& class_features, float tau);

DualEncoderWeights init_weights(const BackboneConfig& cfg, std::uint64_t seed);
void save_weights(const DualEncoderWeights& w, const std::string& path);
DualEncoderWeights load_weights(const std::string& path, const BackboneConfig* expected = nullptr);
DualEncoderWeights init_or_load_weights(const BackboneConfig& cfg, const std::optional<std::string>& path,
                                        std::uint64_t seed);

}  // namespace dmpt
