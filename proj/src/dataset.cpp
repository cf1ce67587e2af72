#include "dmpt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmpt/errors.hpp"
#include "dmpt/rng.hpp"

namespace dmpt {

namespace fs = std::filesystem;

// ---- PPM / PGM ---------------------------------------------------------------

namespace {

void write_pnm(const std::string& path, const char* magic, int width, int height, int channels,
               const std::vector<std::uint8_t>& bytes) {
    if (width <= 0 || height <= 0 ||
        bytes.size() != static_cast<std::size_t>(width) * height * channels) {
        throw ValueError("pnm write: byte count does not match dimensions");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << magic << "\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

std::vector<std::uint8_t> read_pnm(const std::string& path, const char* magic, int channels,
                                   int& width, int& height) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::string got_magic;
    in >> got_magic;
    if (got_magic != magic) {
        throw FormatError("'" + path + "' is not a " + std::string(magic) + " file", 0);
    }
    // header fields may be separated by arbitrary whitespace/comments
    auto next_int = [&](int& value) {
        while (true) {
            in >> std::ws;
            if (in.peek() == '#') {
                std::string comment;
                std::getline(in, comment);
                continue;
            }
            if (!(in >> value)) throw FormatError("truncated header in '" + path + "'", 2);
            return;
        }
    };
    int maxval = 0;
    next_int(width);
    next_int(height);
    next_int(maxval);
    if (width <= 0 || height <= 0 || maxval != 255) {
        throw FormatError("unsupported dimensions or maxval in '" + path + "'", 2);
    }
    in.get();  // the single whitespace after maxval
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width) * height * channels);
    if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
        throw FormatError("truncated pixel data in '" + path + "'",
                          static_cast<std::uint64_t>(in.gcount()));
    }
    return bytes;
}

}  // namespace

void write_ppm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
    write_pnm(path, "P6", width, height, 3, rgb);
}

std::vector<std::uint8_t> read_ppm(const std::string& path, int& width, int& height) {
    return read_pnm(path, "P6", 3, width, height);
}

void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& gray) {
    write_pnm(path, "P5", width, height, 1, gray);
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height) {
    return read_pnm(path, "P5", 1, width, height);
}

// ---- shapes ------------------------------------------------------------------

namespace {

struct Rgb {
    std::uint8_t r, g, b;
};

const std::pair<const char*, Rgb> kPalette[] = {
    {"red", {220, 40, 40}},    {"green", {40, 200, 60}},   {"blue", {50, 80, 220}},
    {"yellow", {230, 220, 50}}, {"magenta", {200, 60, 200}}, {"cyan", {60, 200, 200}},
    {"white", {230, 230, 230}}, {"orange", {240, 140, 40}},
};

Rgb color_of(const std::string& name) {
    for (const auto& [n, c] : kPalette)
        if (name == n) return c;
    throw ValueError("unknown color '" + name + "'");
}

// filled shape inside the s x s box at (x0, y0)
void raster_shape(std::vector<std::uint8_t>& rgb, int size, ShapeKind kind, Rgb color, int x0, int y0,
                  int s) {
    auto put = [&](int x, int y) {
        if (x < 0 || y < 0 || x >= size || y >= size) return;
        std::uint8_t* px = rgb.data() + (static_cast<std::size_t>(y) * size + x) * 3;
        px[0] = color.r;
        px[1] = color.g;
        px[2] = color.b;
    };
    const float half = (s - 1) / 2.0f;
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            bool inside = false;
            switch (kind) {
                case ShapeKind::Square:
                    inside = true;
                    break;
                case ShapeKind::Circle: {
                    const float dx = x - half, dy = y - half;
                    inside = dx * dx + dy * dy <= half * half + 0.25f;
                    break;
                }
                case ShapeKind::Triangle:
                    // apex on the top row, base along the bottom
                    inside = std::abs(x - half) * 2.0f <= static_cast<float>(y) + 0.5f;
                    break;
                case ShapeKind::Cross: {
                    const int arm = std::max(1, s / 3);
                    const int lo = (s - arm) / 2, hi = lo + arm - 1;
                    inside = (x >= lo && x <= hi) || (y >= lo && y <= hi);
                    break;
                }
                case ShapeKind::Stripe:
                    inside = std::abs(x - y) * 2 <= std::max(1, s / 3);
                    break;
            }
            if (inside) put(x0 + x, y0 + y);
        }
    }
}

bool boxes_intersect(int ax0, int ay0, int ax1, int ay1, int bx0, int by0, int bx1, int by1) {
    return ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1;
}

}  // namespace

ShapeKind parse_shape(const std::string& name) {
    if (name == "square") return ShapeKind::Square;
    if (name == "circle") return ShapeKind::Circle;
    if (name == "triangle") return ShapeKind::Triangle;
    if (name == "cross") return ShapeKind::Cross;
    if (name == "stripe") return ShapeKind::Stripe;
    throw ValueError("unknown shape '" + name + "' (square, circle, triangle, cross, stripe)");
}

std::vector<std::string> color_names() {
    std::vector<std::string> names;
    for (const auto& [n, c] : kPalette) names.push_back(n);
    return names;
}

bool is_known_color(const std::string& name) {
    for (const auto& [n, c] : kPalette)
        if (name == n) return true;
    return false;
}

SyntheticClass parse_class_spec(const std::string& token) {
    const auto sep = token.find('_');
    if (sep == std::string::npos) {
        throw ValueError("class spec '" + token + "' must look like <color>_<shape>");
    }
    SyntheticClass c;
    c.color = token.substr(0, sep);
    color_of(c.color);  // validates
    c.kind = parse_shape(token.substr(sep + 1));
    c.name = token;
    return c;
}

void generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed, const std::string& root) {
    if (spec.classes.empty()) throw ValueError("synthetic spec has no classes");
    for (std::size_t i = 0; i < spec.classes.size(); ++i) {
        for (std::size_t j = i + 1; j < spec.classes.size(); ++j) {
            if (spec.classes[i].kind == spec.classes[j].kind &&
                spec.classes[i].color == spec.classes[j].color) {
                throw ValueError("duplicate (shape,color) pair '" + spec.classes[i].name + "'");
            }
        }
    }

    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create dataset root '" + root + "': " + ec.message());

    // distractors come from (shape,color) pairs that define no class
    struct Combo {
        ShapeKind kind;
        Rgb color;
    };
    std::vector<Combo> distractor_pool;
    const ShapeKind all_shapes[] = {ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle,
                                    ShapeKind::Cross, ShapeKind::Stripe};
    for (ShapeKind kind : all_shapes) {
        for (const auto& [cname, rgb] : kPalette) {
            bool is_class = false;
            for (const SyntheticClass& cls : spec.classes) {
                if (cls.kind == kind && cls.color == cname) is_class = true;
            }
            if (!is_class) distractor_pool.push_back({kind, rgb});
        }
    }

    const int size = spec.image_size;
    std::ofstream manifest(fs::path(root) / "manifest.tsv", std::ios::trunc);
    if (!manifest) throw IoError("cannot write manifest under '" + root + "'");

    Rng rng(mix_seed(seed, 0xDA7A));
    for (std::size_t k = 0; k < spec.classes.size(); ++k) {
        const SyntheticClass& cls = spec.classes[k];
        const fs::path class_dir = fs::path(root) / cls.name;
        fs::create_directories(class_dir, ec);
        if (ec) throw IoError("cannot create class directory: " + ec.message());

        for (int sample = 0; sample < spec.samples_per_class; ++sample) {
            std::vector<std::uint8_t> rgb(static_cast<std::size_t>(size) * size * 3, 16);

            const int min_s = std::max(6, size / 4);
            const int max_s = std::max(min_s + 1, size / 2);
            const int ts = min_s + rng.uniform_int(max_s - min_s + 1);
            const int tx = rng.uniform_int(size - ts + 1);
            const int ty = rng.uniform_int(size - ts + 1);

            // distractors first, rejected if they touch the target box
            for (int d = 0; d < spec.distractor_count; ++d) {
                const Combo combo = distractor_pool[static_cast<std::size_t>(
                    rng.uniform_int(static_cast<int>(distractor_pool.size())))];
                for (int attempt = 0; attempt < 40; ++attempt) {
                    const int ds = min_s + rng.uniform_int(max_s - min_s + 1);
                    const int dx = rng.uniform_int(size - ds + 1);
                    const int dy = rng.uniform_int(size - ds + 1);
                    if (boxes_intersect(dx, dy, dx + ds - 1, dy + ds - 1, tx, ty, tx + ts - 1,
                                        ty + ts - 1)) {
                        continue;
                    }
                    raster_shape(rgb, size, combo.kind, combo.color, dx, dy, ds);
                    break;
                }
            }
            raster_shape(rgb, size, cls.kind, color_of(cls.color), tx, ty, ts);

            if (spec.noise_std > 0.0f) {
                for (auto& byte : rgb) {
                    const float v = static_cast<float>(byte) + rng.normal(0.0f, spec.noise_std);
                    byte = static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
                }
            }

            char id[16];
            std::snprintf(id, sizeof(id), "%03d.ppm", sample);
            const std::string relpath = cls.name + "/" + id;
            write_ppm((fs::path(root) / relpath).string(), size, size, rgb);
            manifest << cls.name << "\t" << relpath << "\t" << tx << "\t" << ty << "\t"
                     << tx + ts - 1 << "\t" << ty + ts - 1 << "\n";
        }
    }
    if (!manifest) throw IoError("short write to manifest under '" + root + "'");
}

// ---- loading -------------------------------------------------------------------

Dataset Dataset::load(const std::string& root) {
    std::ifstream manifest(fs::path(root) / "manifest.tsv");
    if (!manifest) throw DataError("no manifest.tsv under '" + root + "'");

    Dataset ds;
    ds.root = root;
    std::string line;
    int line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string class_name, relpath;
        BBox box;
        if (!(std::getline(fields, class_name, '\t') && std::getline(fields, relpath, '\t') &&
              fields >> box.x0 && fields.get() && fields >> box.y0 && fields.get() &&
              fields >> box.x1 && fields.get() && fields >> box.y1)) {
            throw DataError("malformed manifest line " + std::to_string(line_no) + " under '" + root +
                            "'");
        }
        int label = -1;
        for (std::size_t i = 0; i < ds.class_names.size(); ++i)
            if (ds.class_names[i] == class_name) label = static_cast<int>(i);
        if (label < 0) {
            label = static_cast<int>(ds.class_names.size());
            ds.class_names.push_back(class_name);
        }
        ds.samples.push_back(DatasetSample{relpath, label, box});
    }
    if (ds.samples.empty()) throw DataError("manifest under '" + root + "' lists no samples");

    int w = 0, h = 0;
    read_ppm((fs::path(root) / ds.samples.front().relpath).string(), w, h);
    if (w != h) throw DataError("dataset images must be square");
    ds.image_size = w;
    return ds;
}

Tensor Dataset::load_image(int sample_index) const {
    const DatasetSample& s = samples.at(static_cast<std::size_t>(sample_index));
    int w = 0, h = 0;
    std::vector<std::uint8_t> rgb = read_ppm((fs::path(root) / s.relpath).string(), w, h);
    std::vector<float> chw(static_cast<std::size_t>(3) * w * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                chw[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    static_cast<float>(rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
            }
        }
    }
    return Tensor({3, h, w}, std::move(chw));
}

std::vector<int> Dataset::samples_of_class(int label) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].label == label) out.push_back(static_cast<int>(i));
    return out;
}

}  // namespace dmpt
