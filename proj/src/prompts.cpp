#include "dmpt/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dmpt/container.hpp"
#include "dmpt/errors.hpp"
#include "dmpt/rng.hpp"

namespace dmpt {

// ---- variants ---------------------------------------------------------------

Variant parse_variant(const std::string& name) {
    if (name == "zeroshot") return Variant::ZeroShot;
    if (name == "coop") return Variant::CoOp;
    if (name == "vpt") return Variant::Vpt;
    if (name == "vlp") return Variant::Vlp;
    if (name == "dpt") return Variant::Dpt;
    throw UsageError("unknown variant '" + name + "' (valid: zeroshot, coop, vpt, vlp, dpt)");
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::ZeroShot: return "zeroshot";
        case Variant::CoOp: return "coop";
        case Variant::Vpt: return "vpt";
        case Variant::Vlp: return "vlp";
        case Variant::Dpt: return "dpt";
    }
    return "?";
}

bool variant_tunes_text(Variant v) {
    return v == Variant::CoOp || v == Variant::Vlp || v == Variant::Dpt;
}

bool variant_tunes_visual(Variant v) {
    return v == Variant::Vpt || v == Variant::Vlp || v == Variant::Dpt;
}

// ---- prompt set -------------------------------------------------------------

bool PromptSet::has_visual() const {
    for (const Tensor& t : visual.prompts_per_layer)
        if (t.defined()) return true;
    return false;
}

const CAVPTGeneratorParams& PromptSet::generator_for_layer(int layer) const {
    if (generators.empty()) throw ConfigError("no class-aware generator configured");
    if (cfg.cavpt_shared || generators.size() == 1) return generators.front();
    for (std::size_t i = 0; i < visual.cavpt_layers.size(); ++i) {
        if (visual.cavpt_layers[i] == layer) return generators[i];
    }
    throw ConfigError("layer " + std::to_string(layer + 1) + " is not a class-aware layer");
}

std::vector<Tensor> PromptSet::text_params() const {
    std::vector<Tensor> params;
    if (text.context.defined()) params.push_back(text.context);
    return params;
}

std::vector<Tensor> PromptSet::visual_params() const {
    std::vector<Tensor> params;
    for (const Tensor& t : visual.prompts_per_layer)
        if (t.defined()) params.push_back(t);
    for (const CAVPTGeneratorParams& g : generators) {
        params.push_back(g.query_w);
        params.push_back(g.query_b);
        params.push_back(g.wq);
        params.push_back(g.wk);
        params.push_back(g.wv);
        params.push_back(g.ln_gain);
        params.push_back(g.ln_bias);
        params.push_back(g.head_w);
        params.push_back(g.head_b);
    }
    return params;
}

void PromptSet::zero_all_grads() {
    for (Tensor& t : text_params()) t.zero_grad();
    for (Tensor& t : visual_params()) t.zero_grad();
}

namespace {

Tensor learnable_normal(Rng& rng, std::vector<int> shape, float stddev) {
    std::int64_t count = 1;
    for (int e : shape) count *= e;
    std::vector<float> data(static_cast<std::size_t>(count));
    for (auto& v : data) v = rng.normal(0.0f, stddev);
    return Tensor(std::move(shape), std::move(data), true);
}

CAVPTGeneratorParams init_generator(Rng& rng, int d, int embed_dim, int classes) {
    CAVPTGeneratorParams g;
    g.d_k = d;  // single-head cross attention
    g.query_w = learnable_normal(rng, {embed_dim, d}, 0.02f);
    g.query_b = Tensor::zeros({d}, true);
    g.wq = learnable_normal(rng, {d, g.d_k}, 0.02f);
    g.wk = learnable_normal(rng, {d, g.d_k}, 0.02f);
    g.wv = learnable_normal(rng, {d, d}, 0.02f);
    g.ln_gain = Tensor::full({d}, 1.0f, true);
    g.ln_bias = Tensor::zeros({d}, true);
    g.head_w = learnable_normal(rng, {d, classes}, 0.02f);
    g.head_b = Tensor::zeros({classes}, true);
    return g;
}

std::vector<int> zero_based_cavpt_layers(const PromptConfig& cfg, int n_layers) {
    std::vector<int> layers;
    for (int l : cfg.cavpt_layers) {
        if (l < 1 || l > n_layers) {
            throw ConfigError("cavpt layer " + std::to_string(l) + " outside [1," +
                              std::to_string(n_layers) + "]");
        }
        layers.push_back(l - 1);
    }
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    return layers;
}

}  // namespace

PromptSet init_prompts(Variant variant, const PromptConfig& cfg, const BackboneConfig& backbone,
                       const Vocabulary& vocab, const DualEncoderWeights& weights, std::uint64_t seed) {
    if (cfg.context_len < 1) throw ConfigError("context_len must be at least 1");
    if (cfg.prompt_len < 0 || cfg.cavpt_len < 0) throw ConfigError("prompt lengths must be nonnegative");
    const int classes = vocab.class_count();
    if (classes < 1) throw ConfigError("vocabulary has no classes");
    if (vocab.size() > backbone.vocab_size) {
        throw ConfigError("vocabulary has " + std::to_string(vocab.size()) +
                          " tokens but the backbone embeds only " + std::to_string(backbone.vocab_size));
    }
    if (1 + cfg.context_len + 2 > backbone.max_text_len) {
        throw ConfigError("context_len " + std::to_string(cfg.context_len) +
                          " does not fit max_text_len " + std::to_string(backbone.max_text_len));
    }

    PromptSet set;
    set.variant = variant;
    set.cfg = cfg;
    Rng rng(mix_seed(seed, 0x9209));

    // Draw order is fixed (context, then per-layer prompts, then generators)
    // so that configurations sharing a seed share their common draws.
    if (variant_tunes_text(variant)) {
        set.text.context = learnable_normal(rng, {cfg.context_len, backbone.d_text}, 0.02f);
        std::vector<float> class_embed(static_cast<std::size_t>(classes) * backbone.d_text);
        for (int k = 0; k < classes; ++k) {
            const int id = vocab.class_token_id(k);
            const float* row = weights.token_embed.data() + static_cast<std::size_t>(id) * backbone.d_text;
            std::copy(row, row + backbone.d_text,
                      class_embed.begin() + static_cast<std::ptrdiff_t>(k) * backbone.d_text);
        }
        set.text.class_token_embeddings = Tensor({classes, backbone.d_text}, std::move(class_embed), false);
    }

    const bool use_cavpt = variant == Variant::Dpt;
    if (variant_tunes_visual(variant)) {
        set.visual.prompt_len = cfg.prompt_len;
        set.visual.prompts_per_layer.resize(static_cast<std::size_t>(backbone.visual_layers));
        set.visual.cavpt_layers = use_cavpt ? zero_based_cavpt_layers(cfg, backbone.visual_layers)
                                            : std::vector<int>{};
        for (int l = 0; l < backbone.visual_layers; ++l) {
            const bool is_cavpt = std::find(set.visual.cavpt_layers.begin(), set.visual.cavpt_layers.end(),
                                            l) != set.visual.cavpt_layers.end();
            if (!is_cavpt && cfg.prompt_len > 0) {
                set.visual.prompts_per_layer[static_cast<std::size_t>(l)] =
                    learnable_normal(rng, {cfg.prompt_len, backbone.d_visual}, 0.02f);
            }
        }
    }

    if (use_cavpt && !set.visual.cavpt_layers.empty() && cfg.cavpt_len > 0) {
        const std::size_t count = cfg.cavpt_shared ? 1 : set.visual.cavpt_layers.size();
        for (std::size_t i = 0; i < count; ++i) {
            set.generators.push_back(init_generator(rng, backbone.d_visual, backbone.embed_dim, classes));
        }
    }
    return set;
}

// ---- prompt pack serialization ----------------------------------------------

void save_prompt_pack(const PromptSet& prompts, const std::string& path) {
    TensorArchive archive;
    archive.add_config("variant", variant_name(prompts.variant));
    archive.add_config("context_len", prompts.cfg.context_len);
    archive.add_config("prompt_len", prompts.cfg.prompt_len);
    archive.add_config("cavpt_len", prompts.cfg.cavpt_len);
    std::ostringstream layers;
    for (std::size_t i = 0; i < prompts.cfg.cavpt_layers.size(); ++i) {
        if (i) layers << ",";
        layers << prompts.cfg.cavpt_layers[i];
    }
    archive.add_config("cavpt_layers", layers.str());
    archive.add_config("cavpt_shared", prompts.cfg.cavpt_shared ? 1 : 0);
    archive.add_config("aux_ln_on_attended", prompts.cfg.aux_ln_on_attended ? 1 : 0);
    archive.add_config("n_layers", static_cast<int>(prompts.visual.prompts_per_layer.size()));

    if (prompts.text.context.defined()) archive.add_tensor("text.context", prompts.text.context);
    if (prompts.text.class_token_embeddings.defined())
        archive.add_tensor("text.class_embeddings", prompts.text.class_token_embeddings);
    for (std::size_t l = 0; l < prompts.visual.prompts_per_layer.size(); ++l) {
        const Tensor& t = prompts.visual.prompts_per_layer[l];
        if (t.defined()) archive.add_tensor("visual.layer" + std::to_string(l) + ".prompts", t);
    }
    for (std::size_t g = 0; g < prompts.generators.size(); ++g) {
        const std::string p = "gen" + std::to_string(g);
        const CAVPTGeneratorParams& gen = prompts.generators[g];
        archive.add_tensor(p + ".query.weight", gen.query_w);
        archive.add_tensor(p + ".query.bias", gen.query_b);
        archive.add_tensor(p + ".attn.wq", gen.wq);
        archive.add_tensor(p + ".attn.wk", gen.wk);
        archive.add_tensor(p + ".attn.wv", gen.wv);
        archive.add_tensor(p + ".ln.gain", gen.ln_gain);
        archive.add_tensor(p + ".ln.bias", gen.ln_bias);
        archive.add_tensor(p + ".head.weight", gen.head_w);
        archive.add_tensor(p + ".head.bias", gen.head_b);
    }
    archive.save(path, kPromptsMagic);
}

PromptSet load_prompt_pack(const std::string& path) {
    TensorArchive archive = TensorArchive::load(path, kPromptsMagic);
    PromptSet set;
    set.variant = parse_variant(archive.config_value("variant"));
    set.cfg.context_len = archive.config_int("context_len");
    set.cfg.prompt_len = archive.config_int("prompt_len");
    set.cfg.cavpt_len = archive.config_int("cavpt_len");
    set.cfg.cavpt_shared = archive.config_int("cavpt_shared") != 0;
    set.cfg.aux_ln_on_attended = archive.config_int("aux_ln_on_attended") != 0;
    const int n_layers = archive.config_int("n_layers");
    {
        std::istringstream in(archive.config_value("cavpt_layers"));
        std::string item;
        while (std::getline(in, item, ',')) {
            if (!item.empty()) set.cfg.cavpt_layers.push_back(std::stoi(item));
        }
    }

    auto learnable = [](const NamedTensor& stored) { return Tensor(stored.shape, stored.data, true); };
    if (archive.has_tensor("text.context")) {
        set.text.context = learnable(archive.tensor("text.context"));
        if (archive.has_tensor("text.class_embeddings")) {
            const NamedTensor& c = archive.tensor("text.class_embeddings");
            set.text.class_token_embeddings = Tensor(c.shape, c.data, false);
        }
    }
    set.visual.prompts_per_layer.resize(static_cast<std::size_t>(n_layers));
    set.visual.prompt_len = set.cfg.prompt_len;
    for (int l : set.cfg.cavpt_layers) set.visual.cavpt_layers.push_back(l - 1);
    for (int l = 0; l < n_layers; ++l) {
        const std::string name = "visual.layer" + std::to_string(l) + ".prompts";
        if (archive.has_tensor(name)) {
            set.visual.prompts_per_layer[static_cast<std::size_t>(l)] = learnable(archive.tensor(name));
        }
    }
    for (int g = 0;; ++g) {
        const std::string p = "gen" + std::to_string(g);
        if (!archive.has_tensor(p + ".query.weight")) break;
        CAVPTGeneratorParams gen;
        gen.query_w = learnable(archive.tensor(p + ".query.weight"));
        gen.query_b = learnable(archive.tensor(p + ".query.bias"));
        gen.wq = learnable(archive.tensor(p + ".attn.wq"));
        gen.wk = learnable(archive.tensor(p + ".attn.wk"));
        gen.wv = learnable(archive.tensor(p + ".attn.wv"));
        gen.ln_gain = learnable(archive.tensor(p + ".ln.gain"));
        gen.ln_bias = learnable(archive.tensor(p + ".ln.bias"));
        gen.head_w = learnable(archive.tensor(p + ".head.weight"));
        gen.head_b = learnable(archive.tensor(p + ".head.bias"));
        gen.d_k = gen.wq.cols();
        set.generators.push_back(std::move(gen));
    }
    return set;
}

// ---- text prompt construction -------------------------------------------------

PromptedText build_text_prompts(const TextPromptContext& ctx, const Vocabulary& vocab,
                                const std::vector<int>& class_ids) {
    if (!ctx.context.defined()) throw ConfigError("build_text_prompts: no learnable context");
    const int m = ctx.context.rows();
    PromptedText out;
    out.context = ctx.context;
    out.sequences.reserve(class_ids.size());
    for (int class_index : class_ids) {
        TokenSequence seq;
        seq.token_ids.reserve(static_cast<std::size_t>(m) + 3);
        seq.token_ids.push_back(Vocabulary::kSos);
        for (int i = 0; i < m; ++i) seq.token_ids.push_back(Vocabulary::kCtx);
        seq.token_ids.push_back(vocab.class_token_id(class_index));  // ValueError if unknown
        seq.token_ids.push_back(Vocabulary::kEos);
        seq.class_token_position = 1 + m;
        seq.end_position = 2 + m;
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

// ---- top-K_N selection ----------------------------------------------------------

std::optional<int> ClassSelection::position_of(int class_id) const {
    for (std::size_t i = 0; i < indices.size(); ++i)
        if (indices[i] == class_id) return static_cast<int>(i);
    return std::nullopt;
}

ClassSelection select_from_scores(const std::vector<float>& scores, int k_n,
                                  std::optional<int> training_label) {
    if (k_n < 1) throw ValueError("top-K selection needs K_N >= 1, got " + std::to_string(k_n));
    const int classes = static_cast<int>(scores.size());
    if (classes < 1) throw ValueError("top-K selection over an empty score vector");
    const int keep = std::min(k_n, classes);

    std::vector<int> order(static_cast<std::size_t>(classes));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
            return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
        return a < b;  // ties go to the lower class id
    });

    ClassSelection selection;
    selection.indices.assign(order.begin(), order.begin() + keep);
    if (training_label) {
        if (*training_label < 0 || *training_label >= classes) {
            throw ValueError("training label " + std::to_string(*training_label) + " out of range");
        }
        if (!selection.position_of(*training_label)) {
            selection.indices.back() = *training_label;
            selection.forced_ground_truth = *training_label;
        }
    }
    return selection;
}

ClassSelection select_topk_classes(const Tensor& image, const Tensor& handcrafted_class_features,
                                   int k_n, std::optional<int> training_label,
                                   const DualEncoderWeights& w) {
    NoGradGuard guard;  // ranking is a frozen zero-shot pass
    Tensor feature = image_encode(image, InjectionPlan{}, w).feature;
    Tensor logits = zero_shot_logits(feature, handcrafted_class_features, w.temperature);
    return select_from_scores(logits.values(), k_n, training_label);
}

// ---- class-aware prompt generation -----------------------------------------------

CavptOutputs generate_cavpt(const ClassSelection& selection, const Tensor& text_features,
                            const Tensor& layer_inputs, const CAVPTGeneratorParams& params,
                            AttentionCapture* capture) {
    if (!text_features.defined() || text_features.rank() != 2 ||
        text_features.rows() != selection.size()) {
        throw ShapeError("generate_cavpt: selection of " + std::to_string(selection.size()) +
                         " classes but text features " +
                         (text_features.defined() ? shape_str(text_features.shape()) : "(undefined)"));
    }
    if (layer_inputs.rank() != 2) {
        throw ShapeError("generate_cavpt: layer inputs must be rank-2, got " +
                         shape_str(layer_inputs.shape()));
    }

    Tensor queries = add_bias(matmul(text_features, params.query_w), params.query_b);  // K_N x d
    Tensor q_proj = matmul(queries, params.wq);        // K_N x d_k
    Tensor k_proj = matmul(layer_inputs, params.wk);   // n x d_k
    Tensor v_proj = matmul(layer_inputs, params.wv);   // n x d
    const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(params.d_k));
    Tensor attn = softmax(scale(matmul(q_proj, transpose(k_proj)), inv_sqrt_dk), 1.0f);
    if (capture) {
        capture->n = layer_inputs.rows();
        capture->heads = 1;
        capture->head_weights = {attn.values()};
    }
    CavptOutputs out;
    out.queries = queries;
    out.attended = matmul(attn, v_proj);
    out.prompts = layer_norm(add(out.attended, queries), params.ln_gain, params.ln_bias, kLayerNormEps);
    return out;
}

Tensor cavpt_aux_logits(const CavptOutputs& outs, const ClassSelection& selection, int label,
                        const CAVPTGeneratorParams& params, bool ln_on_attended_only) {
    const std::optional<int> pos = selection.position_of(label);
    if (!pos) {
        throw ContractError("cavpt_aux_logits: label " + std::to_string(label) +
                            " is not in the class selection");
    }
    Tensor row = ln_on_attended_only
                     ? layer_norm(slice_rows(outs.attended, *pos, 1), params.ln_gain, params.ln_bias,
                                  kLayerNormEps)
                     : slice_rows(outs.prompts, *pos, 1);
    const int classes = params.head_w.cols();
    return reshape(add_bias(matmul(row, params.head_w), params.head_b), {classes});
}

// ---- layer-input assembly ----------------------------------------------------------

InjectionPlan assemble_image_input(const VisualPromptStack& stack, const CavptProvider& provider,
                                   int n_layers) {
    if (static_cast<int>(stack.prompts_per_layer.size()) > n_layers) {
        throw ConfigError("prompt stack covers " + std::to_string(stack.prompts_per_layer.size()) +
                          " layers but the encoder has " + std::to_string(n_layers));
    }
    InjectionPlan plan;
    plan.layers.resize(static_cast<std::size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) {
        const bool is_cavpt = std::find(stack.cavpt_layers.begin(), stack.cavpt_layers.end(), l) !=
                              stack.cavpt_layers.end();
        const Tensor& plain = l < static_cast<int>(stack.prompts_per_layer.size())
                                  ? stack.prompts_per_layer[static_cast<std::size_t>(l)]
                                  : Tensor();
        if (is_cavpt) {
            if (plain.defined()) {
                throw ConfigError("layer " + std::to_string(l + 1) +
                                  " has plain prompts but is marked class-aware");
            }
            if (provider) plan.layers[static_cast<std::size_t>(l)].class_aware = provider;
            // no provider (e.g. prompt length 0): the layer receives nothing
        } else if (plain.defined()) {
            plan.layers[static_cast<std::size_t>(l)].plain = plain;
        }
    }
    return plan;
}

}  // namespace dmpt
