#include "dmpt/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dmpt/errors.hpp"

namespace dmpt {

namespace fs = std::filesystem;

// ---- evaluation ---------------------------------------------------------------

EvalContext EvalContext::build(Variant variant, const PromptSet* prompts,
                               const DualEncoderWeights& weights, const Vocabulary& vocab) {
    NoGradGuard guard;
    EvalContext ctx;
    ctx.variant = variant;
    ctx.prompts = prompts;
    ctx.weights = &weights;
    ctx.vocab = &vocab;
    std::vector<Tensor> rows;
    for (int k = 0; k < vocab.class_count(); ++k) {
        rows.push_back(reshape(text_encode(template_sequence(vocab, k), Tensor(), weights),
                               {1, weights.cfg.embed_dim}));
    }
    ctx.template_feats = concat_rows(std::span<const Tensor>(rows.data(), rows.size()));
    if (prompts && prompts->has_text()) {
        ctx.class_feats = class_features_with_context(*prompts, vocab, weights);
    } else {
        ctx.class_feats = ctx.template_feats;
    }
    return ctx;
}

EncodeResult EvalContext::encode(const Tensor& image) const {
    NoGradGuard guard;
    if (variant == Variant::ZeroShot || variant == Variant::CoOp) {
        return image_encode(image, InjectionPlan{}, *weights);
    }
    CavptProvider provider;
    ClassSelection selection;
    Tensor g_sel;
    if (prompts && prompts->has_generator()) {
        // per-image ranking with the frozen zero-shot module, no label injected
        Tensor plain = image_encode(image, InjectionPlan{}, *weights).feature;
        std::vector<float> ranking_scores =
            zero_shot_logits(plain, template_feats, weights->temperature).values();
        selection = select_from_scores(ranking_scores, prompts->cfg.cavpt_len, std::nullopt);
        std::vector<Tensor> sel_rows;
        for (int ci : selection.indices) sel_rows.push_back(slice_rows(class_feats, ci, 1));
        g_sel = concat_rows(std::span<const Tensor>(sel_rows.data(), sel_rows.size()));
        provider = [this, &selection, &g_sel](int layer, const Tensor& inputs) {
            return generate_cavpt(selection, g_sel, inputs, prompts->generator_for_layer(layer)).prompts;
        };
    }
    InjectionPlan plan =
        assemble_image_input(prompts->visual, provider, weights->cfg.visual_layers);
    return image_encode(image, plan, *weights);
}

std::vector<float> EvalContext::scores(const Tensor& image) const {
    NoGradGuard guard;
    EncodeResult result = encode(image);
    const Tensor& classifier =
        (variant == Variant::ZeroShot || variant == Variant::Vpt) ? template_feats : class_feats;
    return zero_shot_logits(result.feature, classifier, weights->temperature).values();
}

double evaluate_images(const std::vector<LabeledImage>& images, const EvalContext& ctx) {
    if (images.empty()) throw DataError("no images to evaluate");
    int correct = 0;
    for (const LabeledImage& im : images) {
        const std::vector<float> s = ctx.scores(im.image);
        int best = 0;
        for (int i = 1; i < static_cast<int>(s.size()); ++i) {
            if (s[static_cast<std::size_t>(i)] > s[static_cast<std::size_t>(best)]) best = i;
        }
        if (best == im.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

double evaluate(const FewShotTask& task, const PromptSet& prompts, const DualEncoderWeights& weights,
                Variant variant) {
    if (task.query.empty()) throw DataError("task has an empty query set");
    Vocabulary vocab = Vocabulary::build(task.class_names);
    EvalContext ctx = EvalContext::build(variant, variant == Variant::ZeroShot ? nullptr : &prompts,
                                         weights, vocab);
    return evaluate_images(task.query, ctx);
}

// ---- attention maps ---------------------------------------------------------------

PatchAttentionMap class_attention_patches(const EncodeResult& result, const BackboneConfig& cfg) {
    const std::vector<float> row = result.last_attention.class_row_mean();
    const int np = cfg.n_patches();
    const int offset = result.last_attention.n - np;  // class token + prompt slots
    if (offset < 1) throw ContractError("attention capture is missing patch slots");
    PatchAttentionMap map;
    map.grid = cfg.patch_grid();
    map.weights.assign(row.begin() + offset, row.end());
    return map;
}

double attention_focus(const PatchAttentionMap& map, const BBox& box, int patch_size) {
    double total = 0.0, inside = 0.0;
    const double patch_area = static_cast<double>(patch_size) * patch_size;
    for (int gy = 0; gy < map.grid; ++gy) {
        for (int gx = 0; gx < map.grid; ++gx) {
            const double a = map.weights[static_cast<std::size_t>(gy) * map.grid + gx];
            total += a;
            const int px0 = gx * patch_size, py0 = gy * patch_size;
            const int px1 = px0 + patch_size - 1, py1 = py0 + patch_size - 1;
            const int ox = std::max(0, std::min(px1, box.x1) - std::max(px0, box.x0) + 1);
            const int oy = std::max(0, std::min(py1, box.y1) - std::max(py0, box.y0) + 1);
            inside += a * (static_cast<double>(ox) * oy / patch_area);
        }
    }
    return total > 0.0 ? inside / total : 0.0;
}

void export_attention_map(const Tensor& image, const EvalContext& ctx, const std::string& out_path) {
    const BackboneConfig& cfg = ctx.weights->cfg;
    PatchAttentionMap map = class_attention_patches(ctx.encode(image), cfg);

    float lo = map.weights[0], hi = map.weights[0];
    for (float v : map.weights) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float span = hi - lo;
    std::vector<std::uint8_t> cells(map.weights.size(), 0);
    if (span > 0.0f) {
        for (std::size_t i = 0; i < map.weights.size(); ++i) {
            cells[i] = static_cast<std::uint8_t>(
                std::lround((map.weights[i] - lo) / span * 255.0f));
        }
    }
    // nearest-neighbor upsample to the image size
    const int size = cfg.image_size;
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(size) * size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const int gy = y / cfg.patch_size, gx = x / cfg.patch_size;
            pixels[static_cast<std::size_t>(y) * size + x] =
                cells[static_cast<std::size_t>(gy) * map.grid + gx];
        }
    }
    write_pgm(out_path, size, size, pixels);
}

// ---- results -------------------------------------------------------------------------

SummaryStat accuracy_summary(const std::vector<ResultsRow>& rows) {
    if (rows.empty()) throw ValueError("accuracy_summary over no rows");
    SummaryStat stat;
    for (const ResultsRow& r : rows) stat.mean += r.accuracy;
    stat.mean /= static_cast<double>(rows.size());
    double var = 0.0;
    for (const ResultsRow& r : rows) var += (r.accuracy - stat.mean) * (r.accuracy - stat.mean);
    stat.stddev = std::sqrt(var / static_cast<double>(rows.size()));
    return stat;
}

void write_results(const std::vector<ResultsRow>& rows, const std::string& path) {
    if (rows.empty()) throw ValueError("write_results needs at least one row");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "variant,shots,seed,accuracy,epochs,seconds\n";
    char line[192];
    for (const ResultsRow& r : rows) {
        std::snprintf(line, sizeof(line), "%s,%d,%llu,%.4f,%d,%.3f\n", r.variant.c_str(), r.shots,
                      static_cast<unsigned long long>(r.seed), r.accuracy, r.epochs_run,
                      r.wall_seconds);
        out << line;
    }
    // one mean/std summary row per (variant, shots) group, in first-seen order
    std::vector<std::pair<std::string, int>> groups;
    for (const ResultsRow& r : rows) {
        const std::pair<std::string, int> key{r.variant, r.shots};
        if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
    }
    for (const auto& [variant, shots] : groups) {
        std::vector<ResultsRow> members;
        double seconds = 0.0;
        for (const ResultsRow& r : rows) {
            if (r.variant == variant && r.shots == shots) {
                members.push_back(r);
                seconds += r.wall_seconds;
            }
        }
        const SummaryStat stat = accuracy_summary(members);
        std::snprintf(line, sizeof(line), "%s,%d,mean/std,%.4f±%.4f,%d,%.3f\n", variant.c_str(), shots,
                      stat.mean, stat.stddev, members.front().epochs_run,
                      seconds / static_cast<double>(members.size()));
        out << line;
    }
    if (!out) throw IoError("short write to '" + path + "'");
}

// ---- orchestration ----------------------------------------------------------------------

SyntheticSpec synthetic_spec_from_map(const ConfigMap& map) {
    SyntheticSpec spec;
    const std::vector<std::string> class_tokens = map.get_list(
        "classes", {"red_square", "green_circle", "blue_triangle", "yellow_cross"});
    for (const std::string& token : class_tokens) spec.classes.push_back(parse_class_spec(token));
    SyntheticSpec defaults;
    spec.image_size = map.get_int("image_size", defaults.image_size);
    spec.distractor_count = map.get_int("distractor_count", defaults.distractor_count);
    spec.noise_std = map.get_float("noise_std", defaults.noise_std);
    spec.samples_per_class = map.get_int("samples_per_class", defaults.samples_per_class);
    return spec;
}

std::vector<ResultsRow> run_experiment(const ConfigMap& map) {
    const std::string data_dir = map.require("data_dir");
    const std::string out_dir = map.get("out_dir", "runs");
    Dataset dataset = Dataset::load(data_dir);
    Vocabulary vocab = Vocabulary::build(dataset.class_names);

    ExperimentConfig base = ExperimentConfig::from_map(map);
    if (dataset.image_size != base.backbone.image_size) {
        throw DataError("dataset images are " + std::to_string(dataset.image_size) +
                        "px but the backbone expects " + std::to_string(base.backbone.image_size));
    }
    const std::uint64_t weights_seed = static_cast<std::uint64_t>(map.get_i64("weights_seed", 7321));
    DualEncoderWeights weights =
        map.has("weights_path")
            ? load_weights(map.require("weights_path"), &base.backbone)
            : init_weights(base.backbone, weights_seed);

    const std::vector<std::string> variants = map.get_list("variants", {map.get("variant", "dpt")});
    const std::vector<int> shots_list = map.get_int_list("shots_list", {map.get_int("shots", 16)});
    const std::vector<int> seeds = map.get_int_list("seeds", {0, 1, 2});
    const int attmap_images = map.get_int("attmap_images", 0);

    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "logs", ec);
    fs::create_directories(fs::path(out_dir) / "packs", ec);
    if (attmap_images > 0) fs::create_directories(fs::path(out_dir) / "maps", ec);
    if (ec) throw IoError("cannot create output directories under '" + out_dir + "'");
    save_weights(weights, (fs::path(out_dir) / "weights.dptw").string());

    std::vector<ResultsRow> rows;
    for (const std::string& variant_token : variants) {
        const Variant variant = parse_variant(variant_token);
        for (int shots : shots_list) {
            for (int seed : seeds) {
                ConfigMap cell = map;
                cell.set("variant", variant_token);
                cell.set("shots", std::to_string(shots));
                cell.set("seed", std::to_string(seed));
                ExperimentConfig cfg = ExperimentConfig::from_map(cell);

                const auto t0 = std::chrono::steady_clock::now();
                FewShotTask task = sample_few_shot(dataset, shots, cfg.seed);
                PromptSet prompts =
                    init_prompts(variant, cfg.prompts, cfg.backbone, vocab, weights, cfg.seed);

                const std::string cell_name =
                    variant_token + "_" + std::to_string(shots) + "shot_s" + std::to_string(seed);
                int epochs_run = 0;
                if (variant != Variant::ZeroShot) {
                    std::ofstream log(fs::path(out_dir) / "logs" / (cell_name + ".tsv"),
                                      std::ios::trunc);
                    Trainer trainer(cfg, weights, prompts, task, vocab);
                    trainer.run(&log);
                    epochs_run = trainer.epochs_run();
                    save_prompt_pack(prompts,
                                     (fs::path(out_dir) / "packs" / (cell_name + ".dptp")).string());
                }
                const double accuracy = evaluate(task, prompts, weights, variant);
                const double wall =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                rows.push_back(ResultsRow{variant_token, shots, static_cast<std::uint64_t>(seed),
                                          accuracy, epochs_run, wall});

                if (attmap_images > 0) {
                    EvalContext ctx = EvalContext::build(
                        variant, variant == Variant::ZeroShot ? nullptr : &prompts, weights, vocab);
                    const int count =
                        std::min<int>(attmap_images, static_cast<int>(task.query.size()));
                    for (int i = 0; i < count; ++i) {
                        char name[64];
                        std::snprintf(name, sizeof(name), "%s_q%03d.pgm", cell_name.c_str(), i);
                        export_attention_map(task.query[static_cast<std::size_t>(i)].image, ctx,
                                             (fs::path(out_dir) / "maps" / name).string());
                    }
                }
            }
        }
    }
    write_results(rows, (fs::path(out_dir) / "results.csv").string());
    return rows;
}

}  // namespace dmpt
