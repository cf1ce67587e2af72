#include "dmpt/backbone.hpp"

#include <cmath>

#include "dmpt/container.hpp"
#include "dmpt/errors.hpp"
#include "dmpt/rng.hpp"

namespace dmpt {

void BackboneConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) +
                          " must be a positive multiple of patch_size " + std::to_string(patch_size));
    }
    if (heads <= 0 || d_visual % heads != 0 || d_text % heads != 0) {
        throw ConfigError("widths must be divisible by heads");
    }
    if (d_visual <= 0 || d_text <= 0 || embed_dim <= 0 || visual_layers <= 0 || text_layers <= 0) {
        throw ConfigError("all dimensions must be positive");
    }
    if (vocab_size < Vocabulary::kFirstClass + 1) {
        throw ConfigError("vocab_size too small for the built-in tokens");
    }
    if (max_text_len < 4) throw ConfigError("max_text_len too small");
    if (!(temperature > 0.0f)) throw ConfigError("temperature must be positive");
}

// ---- vocabulary -------------------------------------------------------------

Vocabulary Vocabulary::build(const std::vector<std::string>& class_names) {
    Vocabulary v;
    v.tokens = {"<pad>", "<sos>", "<eos>", "<ctx>", "a", "photo", "of"};
    for (const auto& name : class_names) v.tokens.push_back(name);
    return v;
}

int Vocabulary::id_of(const std::string& token) const {
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == token) return static_cast<int>(i);
    throw ValueError("unknown vocabulary token '" + token + "'");
}

int Vocabulary::class_token_id(int class_index) const {
    if (class_index < 0 || class_index >= class_count()) {
        throw ValueError("class index " + std::to_string(class_index) + " out of range [0," +
                         std::to_string(class_count()) + ")");
    }
    return kFirstClass + class_index;
}

TokenSequence template_sequence(const Vocabulary& vocab, int class_index) {
    TokenSequence seq;
    const int a = 4, photo = 5, of = 6;
    seq.token_ids = {Vocabulary::kSos, a, photo, of, a, vocab.class_token_id(class_index),
                     Vocabulary::kEos};
    seq.class_token_position = 5;
    seq.end_position = 6;
    return seq;
}

// ---- attention capture ------------------------------------------------------

std::vector<float> AttentionCapture::class_row_mean() const {
    std::vector<float> row(static_cast<std::size_t>(n), 0.0f);
    for (const auto& hw : head_weights)
        for (int j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] += hw[static_cast<std::size_t>(j)];
    for (float& v : row) v /= static_cast<float>(heads);
    return row;
}

// ---- transformer block ------------------------------------------------------

namespace {

// per-head outputs come back as columns: stack their transposes, flip once
Tensor concat_cols(const std::vector<Tensor>& parts) {
    std::vector<Tensor> flipped;
    flipped.reserve(parts.size());
    for (const Tensor& p : parts) flipped.push_back(transpose(p));
    return transpose(concat_rows(std::span<const Tensor>(flipped.data(), flipped.size())));
}

}  // namespace

Tensor transformer_layer_forward(const Tensor& inputs, const LayerWeights& lw, int heads,
                                 AttentionCapture* capture) {
    const int n = inputs.rows();
    const int d = inputs.cols();
    const int dh = d / heads;

    Tensor normed = layer_norm(inputs, lw.ln1_gain, lw.ln1_bias, kLayerNormEps);
    Tensor q = add_bias(matmul(normed, lw.wq), lw.bq);
    Tensor k = add_bias(matmul(normed, lw.wk), lw.bk);
    Tensor v = add_bias(matmul(normed, lw.wv), lw.bv);

    if (capture) {
        capture->n = n;
        capture->heads = heads;
        capture->head_weights.clear();
    }

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), 1.0f);
        if (capture) capture->head_weights.push_back(attn.values());
        head_outputs.push_back(matmul(attn, vh));
    }
    Tensor attended = heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
    Tensor after_attn = add(inputs, add_bias(matmul(attended, lw.wo), lw.bo));

    Tensor normed2 = layer_norm(after_attn, lw.ln2_gain, lw.ln2_bias, kLayerNormEps);
    Tensor hidden = gelu(add_bias(matmul(normed2, lw.mlp_w1), lw.mlp_b1));
    return add(after_attn, add_bias(matmul(hidden, lw.mlp_w2), lw.mlp_b2));
}

// ---- patch embedding --------------------------------------------------------

Tensor embed_patches(const Tensor& image, const DualEncoderWeights& w) {
    const BackboneConfig& cfg = w.cfg;
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_size ||
        image.dim(2) != cfg.image_size) {
        throw ShapeError("embed_patches: expected image [3," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + "], got " + shape_str(image.shape()));
    }
    const int ps = cfg.patch_size;
    const int grid = cfg.patch_grid();
    const int np = cfg.n_patches();
    const int flat = 3 * ps * ps;
    const int hw = cfg.image_size;

    std::vector<float> patches(static_cast<std::size_t>(np) * flat);
    const float* pix = image.data();
    for (int py = 0; py < grid; ++py) {
        for (int px = 0; px < grid; ++px) {
            float* row = patches.data() + static_cast<std::size_t>(py * grid + px) * flat;
            int idx = 0;
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < ps; ++y)
                    for (int x = 0; x < ps; ++x)
                        row[idx++] = pix[(static_cast<std::size_t>(c) * hw + (py * ps + y)) * hw + (px * ps + x)];
        }
    }
    Tensor patch_matrix({np, flat}, std::move(patches));
    Tensor embedded = add_bias(matmul(patch_matrix, w.patch_embed_w), w.patch_embed_b);
    return add(embedded, slice_rows(w.visual_pos_embed, 1, np));
}

// ---- image encoder ----------------------------------------------------------

EncodeResult image_encode(const Tensor& image, const InjectionPlan& plan,
                          const DualEncoderWeights& w) {
    const BackboneConfig& cfg = w.cfg;
    const int layers = cfg.visual_layers;
    if (static_cast<int>(plan.layers.size()) > layers) {
        throw ConfigError("injection plan covers " + std::to_string(plan.layers.size()) +
                          " layers but the encoder has " + std::to_string(layers));
    }

    Tensor patch_rows = embed_patches(image, w);
    Tensor class_row = add(w.visual_class_token, slice_rows(w.visual_pos_embed, 0, 1));

    EncodeResult result;
    const int np = cfg.n_patches();
    for (int l = 0; l < layers; ++l) {
        Tensor prompts;
        if (l < static_cast<int>(plan.layers.size())) {
            const auto& lp = plan.layers[static_cast<std::size_t>(l)];
            if (lp.plain.defined() && lp.class_aware) {
                throw ConfigError("layer " + std::to_string(l + 1) +
                                  " has both plain and class-aware prompts assigned");
            }
            if (lp.plain.defined()) {
                prompts = lp.plain;
            } else if (lp.class_aware) {
                prompts = lp.class_aware(l, concat_rows({class_row, patch_rows}));
            }
        }
        const int prompt_rows = prompts.defined() ? prompts.rows() : 0;
        Tensor sequence = prompts.defined() ? concat_rows({class_row, prompts, patch_rows})
                                            : concat_rows({class_row, patch_rows});
        const bool last = l == layers - 1;
        Tensor out = transformer_layer_forward(sequence, w.visual_layers[static_cast<std::size_t>(l)],
                                               cfg.heads, last ? &result.last_attention : nullptr);
        // prompt slots are dropped here; only the class token and patches survive
        class_row = slice_rows(out, 0, 1);
        patch_rows = slice_rows(out, 1 + prompt_rows, np);
        if (last) result.last_prompt_rows = prompt_rows;
    }
    result.feature = l2_normalize(reshape(matmul(class_row, w.visual_proj), {cfg.embed_dim}));
    return result;
}

// ---- text encoder -----------------------------------------------------------

Tensor text_encode(const TokenSequence& seq, const Tensor& context_override,
                   const DualEncoderWeights& w) {
    const BackboneConfig& cfg = w.cfg;
    const int n = static_cast<int>(seq.token_ids.size());
    if (n == 0 || n > cfg.max_text_len) {
        throw ShapeError("text_encode: sequence length " + std::to_string(n) +
                         " outside [1," + std::to_string(cfg.max_text_len) + "]");
    }
    if (seq.end_position < 0 || seq.end_position >= n) {
        throw ShapeError("text_encode: end_position " + std::to_string(seq.end_position) +
                         " outside the sequence");
    }

    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(n));
    int ctx_used = 0;
    for (int p = 0; p < n; ++p) {
        const int id = seq.token_ids[static_cast<std::size_t>(p)];
        if (id < 0 || id >= cfg.vocab_size) {
            throw ValueError("text_encode: token id " + std::to_string(id) + " outside vocabulary");
        }
        if (context_override.defined() && id == Vocabulary::kCtx) {
            if (ctx_used >= context_override.rows()) {
                throw ShapeError("text_encode: more <ctx> slots than override rows " +
                                 shape_str(context_override.shape()));
            }
            rows.push_back(slice_rows(context_override, ctx_used++, 1));
        } else {
            rows.push_back(slice_rows(w.token_embed, id, 1));
        }
    }
    if (context_override.defined() && ctx_used != context_override.rows()) {
        throw ShapeError("text_encode: sequence has " + std::to_string(ctx_used) +
                         " <ctx> slots but override has " + std::to_string(context_override.rows()) +
                         " rows");
    }

    Tensor x = add(concat_rows(std::span<const Tensor>(rows.data(), rows.size())),
                   slice_rows(w.text_pos_embed, 0, n));
    for (const LayerWeights& lw : w.text_layers) {
        x = transformer_layer_forward(x, lw, cfg.heads);
    }
    Tensor pooled = slice_rows(x, seq.end_position, 1);
    return l2_normalize(reshape(matmul(pooled, w.text_proj), {cfg.embed_dim}));
}

// ---- zero-shot scoring --------------------------------------------------------

Tensor zero_shot_logits(const Tensor& image_feature, const Tensor& class_features, float tau) {
    if (!(tau > 0.0f)) throw ValueError("zero_shot_logits: temperature must be positive");
    if (image_feature.rank() != 1 || class_features.rank() != 2 ||
        class_features.cols() != image_feature.dim(0)) {
        throw ShapeError("zero_shot_logits: feature " + shape_str(image_feature.shape()) +
                         " vs classes " + shape_str(class_features.shape()));
    }
    auto check_unit = [](const float* v, int n, const char* what) {
        double sq = 0.0;
        for (int i = 0; i < n; ++i) sq += static_cast<double>(v[i]) * v[i];
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-4) {
            throw ContractError(std::string("zero_shot_logits: ") + what +
                                " is not unit-normalized (norm " + std::to_string(std::sqrt(sq)) + ")");
        }
    };
    const int d = image_feature.dim(0);
    const int classes = class_features.rows();
    check_unit(image_feature.data(), d, "image feature");
    for (int i = 0; i < classes; ++i) check_unit(class_features.data() + static_cast<std::size_t>(i) * d, d, "class feature");

    Tensor column = reshape(image_feature, {d, 1});
    return scale(reshape(matmul(class_features, column), {classes}), 1.0f / tau);
}

// ---- weight management --------------------------------------------------------

namespace {

Tensor normal_tensor(Rng& rng, std::vector<int> shape, float stddev) {
    std::int64_t count = 1;
    for (int e : shape) count *= e;
    std::vector<float> data(static_cast<std::size_t>(count));
    for (auto& v : data) v = rng.normal(0.0f, stddev);
    return Tensor(std::move(shape), std::move(data), false);
}

// fan-in scaled init for the mixing matrices; a frozen random encoder needs
// O(1) block outputs to act as a feature extractor at all
Tensor scaled_matrix(Rng& rng, int fan_in, int fan_out) {
    return normal_tensor(rng, {fan_in, fan_out}, 1.0f / std::sqrt(static_cast<float>(fan_in)));
}

LayerWeights init_layer(Rng& rng, int d) {
    LayerWeights lw;
    lw.ln1_gain = Tensor::full({d}, 1.0f);
    lw.ln1_bias = Tensor::zeros({d});
    lw.wq = scaled_matrix(rng, d, d);
    lw.wk = scaled_matrix(rng, d, d);
    lw.wv = scaled_matrix(rng, d, d);
    lw.wo = scaled_matrix(rng, d, d);
    lw.bq = Tensor::zeros({d});
    lw.bk = Tensor::zeros({d});
    lw.bv = Tensor::zeros({d});
    lw.bo = Tensor::zeros({d});
    lw.ln2_gain = Tensor::full({d}, 1.0f);
    lw.ln2_bias = Tensor::zeros({d});
    lw.mlp_w1 = scaled_matrix(rng, d, 4 * d);
    lw.mlp_b1 = Tensor::zeros({4 * d});
    lw.mlp_w2 = scaled_matrix(rng, 4 * d, d);
    lw.mlp_b2 = Tensor::zeros({d});
    return lw;
}

void layer_names(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                 const LayerWeights& lw) {
    out.emplace_back(prefix + ".ln1.gain", lw.ln1_gain);
    out.emplace_back(prefix + ".ln1.bias", lw.ln1_bias);
    out.emplace_back(prefix + ".attn.wq", lw.wq);
    out.emplace_back(prefix + ".attn.wk", lw.wk);
    out.emplace_back(prefix + ".attn.wv", lw.wv);
    out.emplace_back(prefix + ".attn.wo", lw.wo);
    out.emplace_back(prefix + ".attn.bq", lw.bq);
    out.emplace_back(prefix + ".attn.bk", lw.bk);
    out.emplace_back(prefix + ".attn.bv", lw.bv);
    out.emplace_back(prefix + ".attn.bo", lw.bo);
    out.emplace_back(prefix + ".ln2.gain", lw.ln2_gain);
    out.emplace_back(prefix + ".ln2.bias", lw.ln2_bias);
    out.emplace_back(prefix + ".mlp.w1", lw.mlp_w1);
    out.emplace_back(prefix + ".mlp.b1", lw.mlp_b1);
    out.emplace_back(prefix + ".mlp.w2", lw.mlp_w2);
    out.emplace_back(prefix + ".mlp.b2", lw.mlp_b2);
}

void add_backbone_config(TensorArchive& archive, const BackboneConfig& cfg) {
    archive.add_config("image_size", cfg.image_size);
    archive.add_config("patch_size", cfg.patch_size);
    archive.add_config("d_visual", cfg.d_visual);
    archive.add_config("d_text", cfg.d_text);
    archive.add_config("embed_dim", cfg.embed_dim);
    archive.add_config("visual_layers", cfg.visual_layers);
    archive.add_config("text_layers", cfg.text_layers);
    archive.add_config("heads", cfg.heads);
    archive.add_config("vocab_size", cfg.vocab_size);
    archive.add_config("max_text_len", cfg.max_text_len);
    archive.add_config("temperature", cfg.temperature);
}

BackboneConfig read_backbone_config(const TensorArchive& archive) {
    BackboneConfig cfg;
    cfg.image_size = archive.config_int("image_size");
    cfg.patch_size = archive.config_int("patch_size");
    cfg.d_visual = archive.config_int("d_visual");
    cfg.d_text = archive.config_int("d_text");
    cfg.embed_dim = archive.config_int("embed_dim");
    cfg.visual_layers = archive.config_int("visual_layers");
    cfg.text_layers = archive.config_int("text_layers");
    cfg.heads = archive.config_int("heads");
    cfg.vocab_size = archive.config_int("vocab_size");
    cfg.max_text_len = archive.config_int("max_text_len");
    cfg.temperature = archive.config_float("temperature");
    return cfg;
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> DualEncoderWeights::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch_embed.weight", patch_embed_w);
    out.emplace_back("patch_embed.bias", patch_embed_b);
    out.emplace_back("visual.class_token", visual_class_token);
    out.emplace_back("visual.pos_embed", visual_pos_embed);
    for (std::size_t i = 0; i < visual_layers.size(); ++i) {
        layer_names(out, "visual.layer" + std::to_string(i), visual_layers[i]);
    }
    out.emplace_back("visual.proj", visual_proj);
    out.emplace_back("text.token_embed", token_embed);
    out.emplace_back("text.pos_embed", text_pos_embed);
    for (std::size_t i = 0; i < text_layers.size(); ++i) {
        layer_names(out, "text.layer" + std::to_string(i), text_layers[i]);
    }
    out.emplace_back("text.proj", text_proj);
    return out;
}

DualEncoderWeights init_weights(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0xB0DE));
    DualEncoderWeights w;
    w.cfg = cfg;
    w.temperature = cfg.temperature;
    const int d = cfg.d_visual;
    const int dt = cfg.d_text;
    w.patch_embed_w = scaled_matrix(rng, 3 * cfg.patch_size * cfg.patch_size, d);
    w.patch_embed_b = Tensor::zeros({d});
    // embedding-like tensors follow the 0.02 convention
    w.visual_class_token = normal_tensor(rng, {1, d}, 0.02f);
    w.visual_pos_embed = normal_tensor(rng, {1 + cfg.n_patches(), d}, 0.02f);
    for (int l = 0; l < cfg.visual_layers; ++l) w.visual_layers.push_back(init_layer(rng, d));
    w.visual_proj = scaled_matrix(rng, d, cfg.embed_dim);
    w.token_embed = normal_tensor(rng, {cfg.vocab_size, dt}, 0.02f);
    w.text_pos_embed = normal_tensor(rng, {cfg.max_text_len, dt}, 0.02f);
    for (int l = 0; l < cfg.text_layers; ++l) w.text_layers.push_back(init_layer(rng, dt));
    w.text_proj = scaled_matrix(rng, dt, cfg.embed_dim);
    return w;
}

void save_weights(const DualEncoderWeights& w, const std::string& path) {
    TensorArchive archive;
    add_backbone_config(archive, w.cfg);
    for (const auto& [name, tensor] : w.named_tensors()) archive.add_tensor(name, tensor);
    archive.save(path, kWeightsMagic);
}

DualEncoderWeights load_weights(const std::string& path, const BackboneConfig* expected) {
    TensorArchive archive = TensorArchive::load(path, kWeightsMagic);
    const BackboneConfig cfg = read_backbone_config(archive);
    cfg.validate();
    if (expected && !(cfg == *expected)) {
        throw FormatError("weight file header disagrees with the requested configuration", 12);
    }

    DualEncoderWeights w;
    w.cfg = cfg;
    w.temperature = cfg.temperature;
    w.visual_layers.resize(static_cast<std::size_t>(cfg.visual_layers));
    w.text_layers.resize(static_cast<std::size_t>(cfg.text_layers));

    // validate every shape against a freshly shaped skeleton before loading
    DualEncoderWeights shaped = init_weights(cfg, 0);
    for (auto& [name, tensor] : shaped.named_tensors()) {
        const NamedTensor& stored = archive.tensor(name);
        if (stored.shape != tensor.shape()) {
            throw FormatError("tensor '" + name + "' has shape " + shape_str(stored.shape) +
                                  ", expected " + shape_str(tensor.shape()),
                              12);
        }
    }
    auto take = [&](const std::string& name) {
        const NamedTensor& stored = archive.tensor(name);
        return Tensor(stored.shape, stored.data, false);
    };
    w.patch_embed_w = take("patch_embed.weight");
    w.patch_embed_b = take("patch_embed.bias");
    w.visual_class_token = take("visual.class_token");
    w.visual_pos_embed = take("visual.pos_embed");
    auto take_layer = [&](const std::string& prefix) {
        LayerWeights lw;
        lw.ln1_gain = take(prefix + ".ln1.gain");
        lw.ln1_bias = take(prefix + ".ln1.bias");
        lw.wq = take(prefix + ".attn.wq");
        lw.wk = take(prefix + ".attn.wk");
        lw.wv = take(prefix + ".attn.wv");
        lw.wo = take(prefix + ".attn.wo");
        lw.bq = take(prefix + ".attn.bq");
        lw.bk = take(prefix + ".attn.bk");
        lw.bv = take(prefix + ".attn.bv");
        lw.bo = take(prefix + ".attn.bo");
        lw.ln2_gain = take(prefix + ".ln2.gain");
        lw.ln2_bias = take(prefix + ".ln2.bias");
        lw.mlp_w1 = take(prefix + ".mlp.w1");
        lw.mlp_b1 = take(prefix + ".mlp.b1");
        lw.mlp_w2 = take(prefix + ".mlp.w2");
        lw.mlp_b2 = take(prefix + ".mlp.b2");
        return lw;
    };
    for (int l = 0; l < cfg.visual_layers; ++l)
        w.visual_layers[static_cast<std::size_t>(l)] = take_layer("visual.layer" + std::to_string(l));
    w.visual_proj = take("visual.proj");
    w.token_embed = take("text.token_embed");
    w.text_pos_embed = take("text.pos_embed");
    for (int l = 0; l < cfg.text_layers; ++l)
        w.text_layers[static_cast<std::size_t>(l)] = take_layer("text.layer" + std::to_string(l));
    w.text_proj = take("text.proj");
    return w;
}

DualEncoderWeights init_or_load_weights(const BackboneConfig& cfg, const std::optional<std::string>& path,
                                        std::uint64_t seed) {
    if (path) return load_weights(*path, &cfg);
    return init_weights(cfg, seed);
}

}  // namespace dmpt
