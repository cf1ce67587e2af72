// dmpt: desk-scale dual-modality prompt tuning lab.
//
//   dmpt gen-data --data_dir data/shapes [--key value ...]
//   dmpt train    --data_dir data/shapes [--key value ...]
//   dmpt eval     --data_dir data/shapes --pack runs/prompts.dptp [--key value ...]
//   dmpt attmap   --data_dir data/shapes --image img.ppm --out map.pgm [--pack ...]
//   dmpt sweep    --config lab.cfg [--key value ...]
//
// Every configuration key can come from a `key = value` config file
// (--config) or be overridden on the command line as `--key value`.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dmpt/errors.hpp"
#include "dmpt/harness.hpp"

namespace fs = std::filesystem;
using namespace dmpt;

namespace {

ConfigMap assemble_config(const std::string& config_path, const std::vector<std::string>& extras) {
    ConfigMap map = config_path.empty() ? ConfigMap{} : ConfigMap::from_file(config_path);
    for (std::size_t i = 0; i < extras.size(); ++i) {
        std::string token = extras[i];
        if (token.rfind("--", 0) != 0) {
            throw UsageError("expected '--key value' overrides, got '" + token + "'");
        }
        std::string key = token.substr(2);
        for (char& c : key) {
            if (c == '-') c = '_';
        }
        if (i + 1 >= extras.size()) throw UsageError("override '--" + key + "' is missing its value");
        map.set(key, extras[++i]);
    }
    return map;
}

struct LoadedLab {
    Dataset dataset;
    Vocabulary vocab;
    ExperimentConfig cfg;
    DualEncoderWeights weights;
};

LoadedLab load_lab(const ConfigMap& map) {
    Dataset dataset = Dataset::load(map.require("data_dir"));
    ExperimentConfig cfg = ExperimentConfig::from_map(map);
    if (dataset.image_size != cfg.backbone.image_size) {
        throw DataError("dataset images are " + std::to_string(dataset.image_size) +
                        "px but the backbone expects " + std::to_string(cfg.backbone.image_size));
    }
    Vocabulary vocab = Vocabulary::build(dataset.class_names);
    DualEncoderWeights weights =
        map.has("weights_path")
            ? load_weights(map.require("weights_path"), &cfg.backbone)
            : init_weights(cfg.backbone, static_cast<std::uint64_t>(map.get_i64("weights_seed", 7321)));
    return LoadedLab{std::move(dataset), std::move(vocab), cfg, std::move(weights)};
}

int cmd_gen_data(const ConfigMap& map) {
    const std::string data_dir = map.require("data_dir");
    SyntheticSpec spec = synthetic_spec_from_map(map);
    const std::uint64_t seed = static_cast<std::uint64_t>(map.get_i64("seed", 0));
    generate_synthetic_dataset(spec, seed, data_dir);
    std::printf("wrote %d classes x %d samples (%dpx) under %s\n",
                static_cast<int>(spec.classes.size()), spec.samples_per_class, spec.image_size,
                data_dir.c_str());
    return 0;
}

int cmd_train(const ConfigMap& map) {
    LoadedLab lab = load_lab(map);
    if (lab.cfg.variant == Variant::ZeroShot) {
        throw UsageError("the zeroshot variant needs no training; use 'dmpt eval'");
    }
    const std::string out_dir = map.get("out_dir", "runs");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir + "'");

    FewShotTask task = sample_few_shot(lab.dataset, lab.cfg.shots, lab.cfg.seed);
    PromptSet prompts = init_prompts(lab.cfg.variant, lab.cfg.prompts, lab.cfg.backbone, lab.vocab,
                                     lab.weights, lab.cfg.seed);

    const auto t0 = std::chrono::steady_clock::now();
    std::ofstream log(fs::path(out_dir) / "train_log.tsv", std::ios::trunc);
    Trainer trainer(lab.cfg, lab.weights, prompts, task, lab.vocab);
    trainer.run(&log);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    save_prompt_pack(prompts, (fs::path(out_dir) / "prompts.dptp").string());
    save_weights(lab.weights, (fs::path(out_dir) / "weights.dptw").string());

    EvalContext ctx = EvalContext::build(lab.cfg.variant, &prompts, lab.weights, lab.vocab);
    const double support_acc = evaluate_images(task.support, ctx);
    const double query_acc = evaluate(task, prompts, lab.weights, lab.cfg.variant);
    std::printf("variant=%s shots=%d seed=%llu epochs=%d support_acc=%.4f query_acc=%.4f seconds=%.1f\n",
                variant_name(lab.cfg.variant).c_str(), lab.cfg.shots,
                static_cast<unsigned long long>(lab.cfg.seed), trainer.epochs_run(), support_acc,
                query_acc, seconds);
    std::printf("outputs under %s: train_log.tsv, prompts.dptp, weights.dptw\n", out_dir.c_str());
    return 0;
}

int cmd_eval(const ConfigMap& map) {
    LoadedLab lab = load_lab(map);
    FewShotTask task = sample_few_shot(lab.dataset, lab.cfg.shots, lab.cfg.seed);
    PromptSet prompts;
    Variant variant = lab.cfg.variant;
    if (map.has("pack")) {
        prompts = load_prompt_pack(map.require("pack"));
        variant = prompts.variant;
    } else if (variant != Variant::ZeroShot) {
        throw UsageError("evaluating variant '" + variant_name(variant) + "' needs --pack");
    }
    const double acc = evaluate(task, prompts, lab.weights, variant);
    std::printf("variant=%s shots=%d seed=%llu query_images=%d accuracy=%.4f\n",
                variant_name(variant).c_str(), lab.cfg.shots,
                static_cast<unsigned long long>(lab.cfg.seed), static_cast<int>(task.query.size()),
                acc);
    return 0;
}

int cmd_attmap(const ConfigMap& map) {
    LoadedLab lab = load_lab(map);
    const std::string image_path = map.require("image");
    const std::string out_path = map.require("out");

    int w = 0, h = 0;
    std::vector<std::uint8_t> rgb = read_ppm(image_path, w, h);
    if (w != lab.cfg.backbone.image_size || h != lab.cfg.backbone.image_size) {
        throw DataError("image is " + std::to_string(w) + "x" + std::to_string(h) +
                        " but the backbone expects " + std::to_string(lab.cfg.backbone.image_size));
    }
    std::vector<float> chw(static_cast<std::size_t>(3) * w * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                chw[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    static_cast<float>(rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
    Tensor image({3, h, w}, std::move(chw));

    PromptSet prompts;
    Variant variant = Variant::ZeroShot;
    if (map.has("pack")) {
        prompts = load_prompt_pack(map.require("pack"));
        variant = prompts.variant;
    }
    EvalContext ctx = EvalContext::build(variant, variant == Variant::ZeroShot ? nullptr : &prompts,
                                         lab.weights, lab.vocab);
    export_attention_map(image, ctx, out_path);
    std::printf("wrote %s (%s attention)\n", out_path.c_str(), variant_name(variant).c_str());
    return 0;
}

int cmd_sweep(const ConfigMap& map) {
    std::vector<ResultsRow> rows = run_experiment(map);
    const std::string out_dir = map.get("out_dir", "runs");
    for (const ResultsRow& r : rows) {
        std::printf("%s shots=%d seed=%llu accuracy=%.4f (%.1fs)\n", r.variant.c_str(), r.shots,
                    static_cast<unsigned long long>(r.seed), r.accuracy, r.wall_seconds);
    }
    std::printf("results: %s/results.csv\n", out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale dual-modality prompt tuning lab"};
    app.require_subcommand(1);

    std::string config_path;
    struct Sub {
        CLI::App* cmd;
        int (*run)(const ConfigMap&);
    };
    std::vector<Sub> subs;
    auto add = [&](const char* name, const char* help, int (*run)(const ConfigMap&)) {
        CLI::App* cmd = app.add_subcommand(name, help);
        cmd->add_option("--config", config_path, "key = value config file");
        cmd->allow_extras();
        subs.push_back(Sub{cmd, run});
    };
    add("gen-data", "write a synthetic shape dataset", cmd_gen_data);
    add("train", "train one (variant, shots, seed) cell", cmd_train);
    add("eval", "evaluate a prompt pack on the query split", cmd_eval);
    add("attmap", "export a class-token attention map as PGM", cmd_attmap);
    add("sweep", "run the full variant x shots x seed grid", cmd_sweep);

    try {
        app.parse(argc, argv);
        for (const Sub& sub : subs) {
            if (sub.cmd->parsed()) {
                return sub.run(assemble_config(config_path, sub.cmd->remaining()));
            }
        }
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 1;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "numerical divergence: %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
