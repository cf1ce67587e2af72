#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmpt/errors.hpp"
#include "dmpt/harness.hpp"

using namespace dmpt;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& stem) {
    const fs::path dir = fs::temp_directory_path() / (stem + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<std::uint8_t> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

ConfigMap small_lab_map(const std::string& data_dir) {
    ConfigMap m;
    m.set("data_dir", data_dir);
    m.set("image_size", "16");
    m.set("patch_size", "8");
    m.set("d_visual", "32");
    m.set("d_text", "32");
    m.set("embed_dim", "32");
    m.set("visual_layers", "2");
    m.set("text_layers", "1");
    m.set("heads", "2");
    m.set("context_len", "4");
    m.set("prompt_len", "2");
    m.set("cavpt_len", "2");
    m.set("epochs", "2");
    m.set("warmup_epochs", "1");
    m.set("fixed_warmup_epochs", "1");
    m.set("batch_size", "8");
    return m;
}

std::string make_small_dataset(const fs::path& root, int image_size, int samples_per_class,
                               std::uint64_t seed) {
    SyntheticSpec spec;
    for (const char* name : {"red_square", "green_circle", "blue_triangle", "yellow_cross"}) {
        spec.classes.push_back(parse_class_spec(name));
    }
    spec.image_size = image_size;
    spec.samples_per_class = samples_per_class;
    spec.distractor_count = 1;
    spec.noise_std = 4.0f;
    generate_synthetic_dataset(spec, seed, root.string());
    return root.string();
}

// strips the trailing (seconds) column of every CSV line
std::string without_seconds_column(const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) {
        const auto comma = line.rfind(',');
        out += line.substr(0, comma);
        out += "\n";
    }
    return out;
}

}  // namespace

TEST_CASE("ppm and pgm files round-trip and reject bad magic") {
    const fs::path dir = fresh_dir("dmpt_pnm");
    std::vector<std::uint8_t> rgb(5 * 3 * 3);
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<std::uint8_t>(i * 7);
    write_ppm((dir / "x.ppm").string(), 5, 3, rgb);
    int w = 0, h = 0;
    CHECK(read_ppm((dir / "x.ppm").string(), w, h) == rgb);
    CHECK(w == 5);
    CHECK(h == 3);

    std::vector<std::uint8_t> gray(6 * 4);
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = static_cast<std::uint8_t>(255 - i);
    write_pgm((dir / "y.pgm").string(), 6, 4, gray);
    CHECK(read_pgm((dir / "y.pgm").string(), w, h) == gray);

    CHECK_THROWS_AS(read_pgm((dir / "x.ppm").string(), w, h), FormatError);
    CHECK_THROWS_AS(read_ppm((dir / "missing.ppm").string(), w, h), IoError);
    fs::remove_all(dir);
}

TEST_CASE("synthetic dataset generation: counts, bounds, determinism") {
    const fs::path root_a = fresh_dir("dmpt_gen_a");
    const fs::path root_b = fresh_dir("dmpt_gen_b");
    SyntheticSpec spec;
    for (const char* name : {"red_square", "green_circle", "blue_triangle", "yellow_cross"}) {
        spec.classes.push_back(parse_class_spec(name));
    }
    spec.samples_per_class = 20;
    generate_synthetic_dataset(spec, 77, root_a.string());
    generate_synthetic_dataset(spec, 77, root_b.string());

    int files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(root_a)) {
        if (entry.path().extension() == ".ppm") ++files;
    }
    CHECK(files == 80);

    Dataset ds = Dataset::load(root_a.string());
    CHECK(ds.class_names ==
          std::vector<std::string>{"red_square", "green_circle", "blue_triangle", "yellow_cross"});
    CHECK(static_cast<int>(ds.samples.size()) == 80);
    for (const DatasetSample& s : ds.samples) {
        CHECK(s.bbox.x0 >= 0);
        CHECK(s.bbox.y0 >= 0);
        CHECK(s.bbox.x1 < spec.image_size);
        CHECK(s.bbox.y1 < spec.image_size);
        CHECK(s.bbox.x0 <= s.bbox.x1);
        CHECK(s.bbox.y0 <= s.bbox.y1);
    }

    // identical seed, identical bytes
    for (const DatasetSample& s : ds.samples) {
        CHECK(slurp(root_a / s.relpath) == slurp(root_b / s.relpath));
    }
    CHECK(slurp(root_a / "manifest.tsv") == slurp(root_b / "manifest.tsv"));

    Tensor img = ds.load_image(0);
    CHECK(img.shape() == std::vector<int>{3, 32, 32});
    for (float v : img.values()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    SyntheticSpec dup = spec;
    dup.classes.push_back(parse_class_spec("red_square"));
    CHECK_THROWS_AS(generate_synthetic_dataset(dup, 1, root_b.string()), ValueError);
    fs::remove_all(root_a);
    fs::remove_all(root_b);
}

TEST_CASE("evaluate: degenerate one-class task scores 1.0") {
    const fs::path root = fresh_dir("dmpt_oneclass");
    SyntheticSpec spec;
    spec.classes.push_back(parse_class_spec("red_square"));
    spec.image_size = 16;
    spec.samples_per_class = 3;
    spec.distractor_count = 0;
    generate_synthetic_dataset(spec, 5, root.string());
    Dataset ds = Dataset::load(root.string());
    FewShotTask task = sample_few_shot(ds, 1, 0);

    BackboneConfig bc;
    bc.image_size = 16;
    bc.d_visual = 32;
    bc.d_text = 32;
    bc.embed_dim = 32;
    bc.visual_layers = 2;
    bc.text_layers = 1;
    bc.heads = 2;
    DualEncoderWeights w = init_weights(bc, 4);
    CHECK(evaluate(task, PromptSet{}, w, Variant::ZeroShot) == doctest::Approx(1.0));
    fs::remove_all(root);
}

TEST_CASE("evaluate matches a per-image recomputation and ignores support images") {
    const fs::path root = fresh_dir("dmpt_eval");
    make_small_dataset(root, 16, 4, 21);
    Dataset ds = Dataset::load(root.string());
    ConfigMap map = small_lab_map(root.string());
    ExperimentConfig cfg = ExperimentConfig::from_map(map);
    DualEncoderWeights weights = init_weights(cfg.backbone, 31);
    Vocabulary vocab = Vocabulary::build(ds.class_names);
    FewShotTask task = sample_few_shot(ds, 2, 9);
    PromptSet prompts = init_prompts(Variant::Dpt, cfg.prompts, cfg.backbone, vocab, weights, 17);

    const double acc = evaluate(task, prompts, weights, Variant::Dpt);
    CHECK(evaluate(task, prompts, weights, Variant::Dpt) == acc);  // deterministic

    // independent scoring pass, image by image
    EvalContext ctx = EvalContext::build(Variant::Dpt, &prompts, weights, vocab);
    int correct = 0;
    for (const LabeledImage& im : task.query) {
        Tensor feat = ctx.encode(im.image).feature;
        Tensor logits = zero_shot_logits(feat, ctx.class_feats, weights.temperature);
        int best = 0;
        for (int i = 1; i < logits.dim(0); ++i)
            if (logits.data()[i] > logits.data()[best]) best = i;
        if (best == im.label) ++correct;
    }
    CHECK(acc == doctest::Approx(static_cast<double>(correct) / task.query.size()));

    // support images are never read: poisoning them changes nothing
    FewShotTask poisoned = task;
    for (LabeledImage& im : poisoned.support) {
        std::fill(im.image.values().begin(), im.image.values().end(),
                  std::numeric_limits<float>::quiet_NaN());
    }
    CHECK(evaluate(poisoned, prompts, weights, Variant::Dpt) == acc);

    FewShotTask no_query = task;
    no_query.query.clear();
    CHECK_THROWS_AS(evaluate(no_query, prompts, weights, Variant::Dpt), DataError);
    fs::remove_all(root);
}

TEST_CASE("attention maps: dimensions, normalization span, patch count") {
    const fs::path root = fresh_dir("dmpt_attmap");
    make_small_dataset(root, 16, 2, 33);
    Dataset ds = Dataset::load(root.string());
    ConfigMap map = small_lab_map(root.string());
    ExperimentConfig cfg = ExperimentConfig::from_map(map);
    DualEncoderWeights weights = init_weights(cfg.backbone, 41);
    Vocabulary vocab = Vocabulary::build(ds.class_names);
    EvalContext ctx = EvalContext::build(Variant::ZeroShot, nullptr, weights, vocab);

    Tensor img = ds.load_image(0);
    PatchAttentionMap patches = class_attention_patches(ctx.encode(img), cfg.backbone);
    CHECK(patches.grid == 2);
    CHECK(static_cast<int>(patches.weights.size()) == cfg.backbone.n_patches());

    const fs::path out = root / "map.pgm";
    export_attention_map(img, ctx, out.string());
    int w = 0, h = 0;
    std::vector<std::uint8_t> gray = read_pgm(out.string(), w, h);
    CHECK(w == 16);
    CHECK(h == 16);
    CHECK(*std::min_element(gray.begin(), gray.end()) == 0);
    CHECK(*std::max_element(gray.begin(), gray.end()) == 255);
    fs::remove_all(root);
}

TEST_CASE("attention_focus weights patches by box overlap") {
    PatchAttentionMap map;
    map.grid = 2;
    map.weights = {1.0f, 0.0f, 0.0f, 0.0f};  // all mass on the top-left 8x8 patch
    BBox covering{0, 0, 7, 7};
    CHECK(attention_focus(map, covering, 8) == doctest::Approx(1.0));
    BBox elsewhere{8, 8, 15, 15};
    CHECK(attention_focus(map, elsewhere, 8) == doctest::Approx(0.0));
    BBox half{0, 0, 7, 3};  // top half of the patch
    CHECK(attention_focus(map, half, 8) == doctest::Approx(0.5));

    PatchAttentionMap uniform;
    uniform.grid = 2;
    uniform.weights = {0.25f, 0.25f, 0.25f, 0.25f};
    CHECK(attention_focus(uniform, covering, 8) == doctest::Approx(0.25));
}

TEST_CASE("write_results formats rows and appends one summary per group") {
    const fs::path dir = fresh_dir("dmpt_results");
    const fs::path csv = dir / "results.csv";

    std::vector<ResultsRow> one{{"dpt", 16, 0, 0.8125, 100, 12.3456}};
    write_results(one, csv.string());
    {
        std::ifstream in(csv);
        std::string header, data, summary, extra;
        REQUIRE(std::getline(in, header));
        REQUIRE(std::getline(in, data));
        REQUIRE(std::getline(in, summary));
        CHECK_FALSE(std::getline(in, extra));
        CHECK(header == "variant,shots,seed,accuracy,epochs,seconds");
        CHECK(data == "dpt,16,0,0.8125,100,12.346");
        CHECK(summary.rfind("dpt,16,mean/std,0.8125±0.0000,100,", 0) == 0);
    }

    // identical accuracies have zero spread, and the mean matches a
    // spreadsheet-style recomputation
    std::vector<ResultsRow> rows{{"coop", 4, 0, 0.5, 3, 1.0},
                                 {"coop", 4, 1, 0.5, 3, 1.0},
                                 {"coop", 4, 2, 0.5, 3, 1.0},
                                 {"dpt", 4, 0, 0.25, 3, 1.0},
                                 {"dpt", 4, 1, 0.75, 3, 1.0}};
    SummaryStat coop_stat = accuracy_summary({rows.begin(), rows.begin() + 3});
    CHECK(coop_stat.mean == doctest::Approx(0.5));
    CHECK(coop_stat.stddev == doctest::Approx(0.0));
    SummaryStat dpt_stat = accuracy_summary({rows.begin() + 3, rows.end()});
    CHECK(dpt_stat.mean == doctest::Approx((0.25 + 0.75) / 2.0).epsilon(1e-12));
    CHECK(dpt_stat.stddev == doctest::Approx(0.25));

    write_results(rows, csv.string());
    std::ifstream in(csv);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    CHECK(all.find("coop,4,mean/std,0.5000±0.0000,3,") != std::string::npos);
    CHECK(all.find("dpt,4,mean/std,0.5000±0.2500,3,") != std::string::npos);

    CHECK_THROWS_AS(write_results({}, csv.string()), ValueError);
    fs::remove_all(dir);
}

TEST_CASE("run_experiment: cartesian cells, seed means, byte determinism") {
    const fs::path root = fresh_dir("dmpt_sweep_data");
    make_small_dataset(root, 16, 4, 55);

    ConfigMap map = small_lab_map(root.string());
    map.set("variants", "coop,vpt,vlp,dpt");
    map.set("shots_list", "2");
    map.set("seeds", "0,1,2");
    map.set("attmap_images", "1");
    const fs::path out_a = fresh_dir("dmpt_sweep_a");
    const fs::path out_b = fresh_dir("dmpt_sweep_b");

    map.set("out_dir", out_a.string());
    std::vector<ResultsRow> rows = run_experiment(map);
    CHECK(rows.size() == 12);  // 4 variants x 1 shots x 3 seeds

    // reported mean equals the arithmetic mean of its rows
    std::vector<ResultsRow> dpt_rows;
    for (const ResultsRow& r : rows)
        if (r.variant == "dpt") dpt_rows.push_back(r);
    REQUIRE(dpt_rows.size() == 3);
    const SummaryStat stat = accuracy_summary(dpt_rows);
    const double manual = (dpt_rows[0].accuracy + dpt_rows[1].accuracy + dpt_rows[2].accuracy) / 3.0;
    CHECK(std::abs(stat.mean - manual) < 1e-9);

    CHECK(fs::exists(out_a / "results.csv"));
    CHECK(fs::exists(out_a / "weights.dptw"));
    CHECK(fs::exists(out_a / "logs" / "dpt_2shot_s0.tsv"));
    CHECK(fs::exists(out_a / "packs" / "dpt_2shot_s0.dptp"));
    CHECK(fs::exists(out_a / "maps" / "dpt_2shot_s0_q000.pgm"));

    map.set("out_dir", out_b.string());
    std::vector<ResultsRow> rows_b = run_experiment(map);
    REQUIRE(rows_b.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].accuracy == rows_b[i].accuracy);
    }
    std::ifstream fa(out_a / "results.csv"), fb(out_b / "results.csv");
    const std::string csv_a((std::istreambuf_iterator<char>(fa)), {});
    const std::string csv_b((std::istreambuf_iterator<char>(fb)), {});
    CHECK(without_seconds_column(csv_a) == without_seconds_column(csv_b));

    fs::remove_all(root);
    fs::remove_all(out_a);
    fs::remove_all(out_b);
}
