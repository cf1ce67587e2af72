#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dmpt/backbone.hpp"
#include "dmpt/container.hpp"
#include "dmpt/errors.hpp"
#include "dmpt/rng.hpp"
#include "oracle.hpp"

using namespace dmpt;

namespace {

Tensor random_image(Rng& rng, int size) {
    std::vector<float> pix(static_cast<std::size_t>(3 * size * size));
    for (auto& v : pix) v = rng.uniform(0.0f, 1.0f);
    return Tensor({3, size, size}, std::move(pix));
}

std::filesystem::path temp_file(const char* stem) {
    return std::filesystem::temp_directory_path() / (std::string(stem) + std::to_string(::getpid()) + ".bin");
}

}  // namespace

TEST_CASE("embed_patches: zero image reduces to positional embeddings") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 42);
    Tensor zero_img = Tensor::zeros({3, cfg.image_size, cfg.image_size});
    Tensor rows = embed_patches(zero_img, w);
    CHECK(rows.rows() == cfg.n_patches());
    CHECK(cfg.n_patches() == (cfg.image_size / cfg.patch_size) * (cfg.image_size / cfg.patch_size));
    // bias is zero-initialized, so a zero image leaves only the positions
    for (int j = 0; j < cfg.n_patches(); ++j) {
        for (int c = 0; c < cfg.d_visual; ++c) {
            CHECK(rows.data()[j * cfg.d_visual + c] ==
                  w.visual_pos_embed.data()[(j + 1) * cfg.d_visual + c]);
        }
    }
}

TEST_CASE("embed_patches: a single pixel touches exactly one row") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 43);
    Tensor zero_img = Tensor::zeros({3, cfg.image_size, cfg.image_size});
    Tensor poked = Tensor::zeros({3, cfg.image_size, cfg.image_size});
    const int y = 13, x = 27;  // patch row 1, col 3 on the 8-pixel grid
    poked.data()[(1 * cfg.image_size + y) * cfg.image_size + x] = 1.0f;

    Tensor base = embed_patches(zero_img, w);
    Tensor bumped = embed_patches(poked, w);
    int changed_rows = 0;
    int changed_index = -1;
    for (int j = 0; j < cfg.n_patches(); ++j) {
        bool differs = false;
        for (int c = 0; c < cfg.d_visual; ++c) {
            if (base.data()[j * cfg.d_visual + c] != bumped.data()[j * cfg.d_visual + c]) differs = true;
        }
        if (differs) {
            ++changed_rows;
            changed_index = j;
        }
    }
    CHECK(changed_rows == 1);
    CHECK(changed_index == (y / cfg.patch_size) * cfg.patch_grid() + (x / cfg.patch_size));
}

TEST_CASE("embed_patches rejects wrong image sizes") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 44);
    CHECK_THROWS_AS(embed_patches(Tensor::zeros({3, 16, 16}), w), ShapeError);
    CHECK_THROWS_AS(embed_patches(Tensor::zeros({3, 32, 16}), w), ShapeError);
}

TEST_CASE("transformer layer preserves shape and normalizes attention rows") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 45);
    Rng rng(46);
    for (int n : {1, 5, 27}) {
        Tensor x({n, cfg.d_visual}, oracle::random_values(rng, static_cast<std::size_t>(n) * cfg.d_visual));
        AttentionCapture cap;
        Tensor y = transformer_layer_forward(x, w.visual_layers[0], cfg.heads, &cap);
        CHECK(y.shape() == x.shape());
        CHECK(cap.n == n);
        CHECK(cap.heads == cfg.heads);
        for (const auto& head : cap.head_weights) {
            for (int i = 0; i < n; ++i) {
                double total = 0.0;
                for (int j = 0; j < n; ++j) total += head[static_cast<std::size_t>(i) * n + j];
                CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("transformer layer is permutation-equivariant over rows") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 47);
    Rng rng(48);
    const int n = 9;
    std::vector<float> base = oracle::random_values(rng, static_cast<std::size_t>(n) * cfg.d_visual);
    std::vector<float> swapped = base;
    const int r1 = 2, r2 = 6;
    for (int c = 0; c < cfg.d_visual; ++c)
        std::swap(swapped[static_cast<std::size_t>(r1) * cfg.d_visual + c],
                  swapped[static_cast<std::size_t>(r2) * cfg.d_visual + c]);

    Tensor y1 = transformer_layer_forward(Tensor({n, cfg.d_visual}, base), w.visual_layers[1], cfg.heads);
    Tensor y2 = transformer_layer_forward(Tensor({n, cfg.d_visual}, swapped), w.visual_layers[1], cfg.heads);
    for (int i = 0; i < n; ++i) {
        const int expect_row = i == r1 ? r2 : i == r2 ? r1 : i;
        for (int c = 0; c < cfg.d_visual; ++c) {
            CHECK(y2.data()[i * cfg.d_visual + c] ==
                  doctest::Approx(y1.data()[expect_row * cfg.d_visual + c]).epsilon(1e-5));
        }
    }
}

TEST_CASE("image_encode with an empty plan matches a manual unprompted pass") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 49);
    Rng rng(50);
    Tensor img = random_image(rng, cfg.image_size);

    EncodeResult r = image_encode(img, InjectionPlan{}, w);
    CHECK(r.last_prompt_rows == 0);
    double norm = 0.0;
    for (int i = 0; i < cfg.embed_dim; ++i) norm += static_cast<double>(r.feature.data()[i]) * r.feature.data()[i];
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));

    // independent recomposition from the public pieces
    Tensor patches = embed_patches(img, w);
    Tensor cls = add(w.visual_class_token, slice_rows(w.visual_pos_embed, 0, 1));
    Tensor seq = concat_rows({cls, patches});
    for (int l = 0; l < cfg.visual_layers; ++l)
        seq = transformer_layer_forward(seq, w.visual_layers[static_cast<std::size_t>(l)], cfg.heads);
    Tensor manual = l2_normalize(reshape(matmul(slice_rows(seq, 0, 1), w.visual_proj), {cfg.embed_dim}));
    for (int i = 0; i < cfg.embed_dim; ++i) CHECK(r.feature.data()[i] == manual.data()[i]);
}

TEST_CASE("image_encode splices prompts into every planned layer") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 51);
    Rng rng(52);
    Tensor img = random_image(rng, cfg.image_size);

    InjectionPlan plan;
    plan.layers.resize(static_cast<std::size_t>(cfg.visual_layers));
    for (auto& lp : plan.layers)
        lp.plain = Tensor({10, cfg.d_visual}, oracle::random_values(rng, static_cast<std::size_t>(10) * cfg.d_visual));
    EncodeResult r = image_encode(img, plan, w);
    CHECK(r.last_attention.n == 1 + 10 + cfg.n_patches());
    CHECK(r.last_prompt_rows == 10);

    InjectionPlan too_long;
    too_long.layers.resize(static_cast<std::size_t>(cfg.visual_layers) + 1);
    CHECK_THROWS_AS(image_encode(img, too_long, w), ConfigError);
}

TEST_CASE("prompt outputs are discarded between layers") {
    // zeroing the prompt output slots after each layer must not change the
    // downstream computation, because only [class; patches] are carried over
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 53);
    Rng rng(54);
    Tensor img = random_image(rng, cfg.image_size);
    const int P = 4;
    std::vector<Tensor> prompts;
    for (int l = 0; l < cfg.visual_layers; ++l)
        prompts.push_back(Tensor({P, cfg.d_visual}, oracle::random_values(rng, static_cast<std::size_t>(P) * cfg.d_visual)));

    InjectionPlan plan;
    plan.layers.resize(static_cast<std::size_t>(cfg.visual_layers));
    for (int l = 0; l < cfg.visual_layers; ++l) plan.layers[static_cast<std::size_t>(l)].plain = prompts[static_cast<std::size_t>(l)];
    EncodeResult r = image_encode(img, plan, w);

    // manual pass that explicitly zeroes the prompt output slots
    Tensor patch_rows = embed_patches(img, w);
    Tensor cls = add(w.visual_class_token, slice_rows(w.visual_pos_embed, 0, 1));
    for (int l = 0; l < cfg.visual_layers; ++l) {
        Tensor seq = concat_rows({cls, prompts[static_cast<std::size_t>(l)], patch_rows});
        Tensor out = transformer_layer_forward(seq, w.visual_layers[static_cast<std::size_t>(l)], cfg.heads);
        for (int p = 0; p < P; ++p)
            for (int c = 0; c < cfg.d_visual; ++c) out.data()[(1 + p) * cfg.d_visual + c] = 0.0f;
        cls = slice_rows(out, 0, 1);
        patch_rows = slice_rows(out, 1 + P, cfg.n_patches());
    }
    Tensor manual = l2_normalize(reshape(matmul(cls, w.visual_proj), {cfg.embed_dim}));
    for (int i = 0; i < cfg.embed_dim; ++i) CHECK(r.feature.data()[i] == manual.data()[i]);
}

TEST_CASE("text_encode determinism, normalization and context sensitivity") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 55);
    Vocabulary vocab = Vocabulary::build({"red_square", "green_circle"});
    TokenSequence seq = template_sequence(vocab, 0);

    Tensor f1 = text_encode(seq, Tensor(), w);
    Tensor f2 = text_encode(seq, Tensor(), w);
    for (int i = 0; i < cfg.embed_dim; ++i) CHECK(f1.data()[i] == f2.data()[i]);
    double norm = 0.0;
    for (int i = 0; i < cfg.embed_dim; ++i) norm += static_cast<double>(f1.data()[i]) * f1.data()[i];
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));

    // sequence with 3 context slots; perturbing one changes the feature
    TokenSequence prompted;
    prompted.token_ids = {Vocabulary::kSos, Vocabulary::kCtx, Vocabulary::kCtx, Vocabulary::kCtx,
                          vocab.class_token_id(0), Vocabulary::kEos};
    prompted.class_token_position = 4;
    prompted.end_position = 5;
    Rng rng(56);
    std::vector<float> ctx = oracle::random_values(rng, static_cast<std::size_t>(3) * cfg.d_text);
    Tensor ctx1({3, cfg.d_text}, ctx);
    ctx[5] += 0.05f;
    Tensor ctx2({3, cfg.d_text}, ctx);
    Tensor g1 = text_encode(prompted, ctx1, w);
    Tensor g2 = text_encode(prompted, ctx2, w);
    double delta = 0.0;
    for (int i = 0; i < cfg.embed_dim; ++i) delta += std::abs(g1.data()[i] - g2.data()[i]);
    CHECK(delta > 0.0);

    TokenSequence too_long;
    too_long.token_ids.assign(static_cast<std::size_t>(cfg.max_text_len) + 1, Vocabulary::kSos);
    too_long.end_position = 0;
    CHECK_THROWS_AS(text_encode(too_long, Tensor(), w), ShapeError);
}

TEST_CASE("zero_shot_logits: self-match attains 1/tau, rotation leaves logits alone") {
    const int D = 16, K = 5;
    Rng rng(57);
    // random unit class features, image feature equal to class 2
    std::vector<float> feats(static_cast<std::size_t>(K) * D);
    for (int i = 0; i < K; ++i) {
        double sq = 0.0;
        for (int j = 0; j < D; ++j) {
            feats[static_cast<std::size_t>(i) * D + j] = rng.normal(0.0f, 1.0f);
            sq += static_cast<double>(feats[static_cast<std::size_t>(i) * D + j]) * feats[static_cast<std::size_t>(i) * D + j];
        }
        for (int j = 0; j < D; ++j) feats[static_cast<std::size_t>(i) * D + j] /= static_cast<float>(std::sqrt(sq));
    }
    Tensor class_feats({K, D}, feats);
    Tensor x({D}, std::vector<float>(feats.begin() + 2 * D, feats.begin() + 3 * D));
    const float tau = 0.01f;
    Tensor logits = zero_shot_logits(x, class_feats, tau);
    int best = 0;
    for (int i = 1; i < K; ++i)
        if (logits.data()[i] > logits.data()[best]) best = i;
    CHECK(best == 2);
    CHECK(logits.data()[2] == doctest::Approx(1.0 / tau).epsilon(1e-5));

    // joint rotation by an orthogonal matrix (Gram-Schmidt in double)
    std::vector<double> q(static_cast<std::size_t>(D) * D);
    Rng qrng(58);
    for (auto& v : q) v = qrng.normal(0.0f, 1.0f);
    for (int i = 0; i < D; ++i) {
        for (int j = 0; j < i; ++j) {
            double dot = 0.0;
            for (int c = 0; c < D; ++c) dot += q[static_cast<std::size_t>(i) * D + c] * q[static_cast<std::size_t>(j) * D + c];
            for (int c = 0; c < D; ++c) q[static_cast<std::size_t>(i) * D + c] -= dot * q[static_cast<std::size_t>(j) * D + c];
        }
        double sq = 0.0;
        for (int c = 0; c < D; ++c) sq += q[static_cast<std::size_t>(i) * D + c] * q[static_cast<std::size_t>(i) * D + c];
        for (int c = 0; c < D; ++c) q[static_cast<std::size_t>(i) * D + c] /= std::sqrt(sq);
    }
    auto rotate = [&](const float* v, float* out) {
        for (int i = 0; i < D; ++i) {
            double acc = 0.0;
            for (int c = 0; c < D; ++c) acc += q[static_cast<std::size_t>(i) * D + c] * v[c];
            out[i] = static_cast<float>(acc);
        }
    };
    std::vector<float> rx(static_cast<std::size_t>(D));
    rotate(x.data(), rx.data());
    std::vector<float> rfeats(static_cast<std::size_t>(K) * D);
    for (int i = 0; i < K; ++i) rotate(feats.data() + static_cast<std::size_t>(i) * D, rfeats.data() + static_cast<std::size_t>(i) * D);
    Tensor rotated_logits = zero_shot_logits(Tensor({D}, rx), Tensor({K, D}, rfeats), tau);
    for (int i = 0; i < K; ++i)
        CHECK(rotated_logits.data()[i] == doctest::Approx(logits.data()[i]).epsilon(1e-5));

    // non-normalized features violate the contract
    Tensor unnormalized({D}, std::vector<float>(static_cast<std::size_t>(D), 0.5f));
    CHECK_THROWS_AS(zero_shot_logits(unnormalized, class_feats, tau), ContractError);
}

TEST_CASE("zero-shot pipeline composes end-to-end from the public pieces") {
    BackboneConfig cfg;
    DualEncoderWeights w = init_weights(cfg, 59);
    Vocabulary vocab = Vocabulary::build({"red_square", "green_circle", "blue_triangle"});
    Rng rng(60);
    Tensor img = random_image(rng, cfg.image_size);

    std::vector<Tensor> class_rows;
    for (int k = 0; k < 3; ++k) {
        Tensor f = text_encode(template_sequence(vocab, k), Tensor(), w);
        class_rows.push_back(reshape(f, {1, cfg.embed_dim}));
    }
    Tensor class_feats = concat_rows(std::span<const Tensor>(class_rows.data(), class_rows.size()));
    Tensor x = image_encode(img, InjectionPlan{}, w).feature;
    Tensor logits = zero_shot_logits(x, class_feats, w.temperature);

    for (int k = 0; k < 3; ++k) {
        Tensor wk = reshape(slice_rows(class_feats, k, 1), {cfg.embed_dim});
        const float expect = cosine_similarity(x, wk).item() / w.temperature;
        CHECK(logits.data()[k] == doctest::Approx(expect).epsilon(1e-5));
    }
}

TEST_CASE("weight files round-trip bitwise and validate their header") {
    BackboneConfig cfg;
    cfg.visual_layers = 2;
    cfg.text_layers = 1;
    DualEncoderWeights w = init_weights(cfg, 77);
    const auto path = temp_file("dmpt_weights_");
    save_weights(w, path.string());

    DualEncoderWeights loaded = load_weights(path.string(), &cfg);
    auto a = w.named_tensors();
    auto b = loaded.named_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].second.values().size() == b[i].second.values().size());
        CHECK(std::memcmp(a[i].second.data(), b[i].second.data(),
                          a[i].second.values().size() * sizeof(float)) == 0);
        CHECK_FALSE(b[i].second.requires_grad());
    }

    // determinism of init
    DualEncoderWeights again = init_weights(cfg, 77);
    auto c = again.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::memcmp(a[i].second.data(), c[i].second.data(),
                          a[i].second.values().size() * sizeof(float)) == 0);
    }
    DualEncoderWeights other = init_weights(cfg, 78);
    bool all_same = true;
    auto d = other.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::memcmp(a[i].second.data(), d[i].second.data(),
                        a[i].second.values().size() * sizeof(float)) != 0)
            all_same = false;
    }
    CHECK_FALSE(all_same);

    // header dimension mismatch is rejected
    BackboneConfig wrong = cfg;
    wrong.d_visual = 32;
    wrong.d_text = 32;
    CHECK_THROWS_AS(load_weights(path.string(), &wrong), FormatError);

    std::filesystem::remove(path);
}

TEST_CASE("malformed weight files report a byte offset") {
    const auto path = temp_file("dmpt_badfile_");
    {
        std::ofstream out(path, std::ios::binary);
        out.write("NOTMAGIC", 8);
    }
    try {
        load_weights(path.string());
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.byte_offset == 0);
    }

    // valid magic but truncated payload
    BackboneConfig cfg;
    cfg.visual_layers = 1;
    cfg.text_layers = 1;
    DualEncoderWeights w = init_weights(cfg, 5);
    save_weights(w, path.string());
    const auto full_size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full_size - 64);
    try {
        load_weights(path.string());
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.byte_offset > 0);
    }
    std::filesystem::remove(path);
}
