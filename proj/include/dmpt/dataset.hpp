#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmpt/tensor.hpp"

namespace dmpt {

// ---- binary PPM (P6) / PGM (P5) ---------------------------------------------

void write_ppm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& rgb);
std::vector<std::uint8_t> read_ppm(const std::string& path, int& width, int& height);
void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& gray);
std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height);

// ---- synthetic shape dataset --------------------------------------------------

enum class ShapeKind { Square, Circle, Triangle, Cross, Stripe };

ShapeKind parse_shape(const std::string& name);
std::vector<std::string> color_names();
bool is_known_color(const std::string& name);

struct SyntheticClass {
    ShapeKind kind;
    std::string color;
    std::string name;  // "<color>_<shape>", a single vocabulary token
};

// "red_square" -> {Square, "red"}
SyntheticClass parse_class_spec(const std::string& token);

// Multi-object scenes: one class-determining shape plus distractors drawn
// from (shape, color) pairs that define no class.
struct SyntheticSpec {
    std::vector<SyntheticClass> classes;
    int image_size = 32;
    int distractor_count = 4;
    float noise_std = 4.0f;  // gaussian pixel noise, 0..255 units
    int samples_per_class = 24;
};

struct BBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel bounds
};

// Writes root/<class>/<id>.ppm plus root/manifest.tsv with one line per
// sample: class name, relative path, and the target shape's bounding box.
void generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed, const std::string& root);

struct DatasetSample {
    std::string relpath;
    int label = 0;
    BBox bbox;
};

struct Dataset {
    std::string root;
    int image_size = 0;
    std::vector<std::string> class_names;  // manifest order
    std::vector<DatasetSample> samples;

    static Dataset load(const std::string& root);
    Tensor load_image(int sample_index) const;  // {3,H,W}, values in [0,1]
    std::vector<int> samples_of_class(int label) const;
};

}  // namespace dmpt
