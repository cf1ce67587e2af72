#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dmpt/tensor.hpp"

namespace dmpt {

// Shared on-disk container for weight files ("DPTW0001") and prompt packs
// ("DPTP0001"): the 8-byte magic, a u32-LE length-prefixed UTF-8 header
// holding config lines and the ordered tensor manifest (name, rank, extents),
// then the float32-LE payloads concatenated in manifest order.
struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct TensorArchive {
    std::vector<std::pair<std::string, std::string>> config;  // ordered key/value
    std::vector<NamedTensor> tensors;

    void add_config(const std::string& key, const std::string& value);
    void add_config(const std::string& key, int value);
    void add_config(const std::string& key, float value);
    bool has_config(const std::string& key) const;
    const std::string& config_value(const std::string& key) const;  // FormatError if absent
    int config_int(const std::string& key) const;
    float config_float(const std::string& key) const;

    void add_tensor(const std::string& name, const Tensor& t);
    const NamedTensor& tensor(const std::string& name) const;  // FormatError if absent
    bool has_tensor(const std::string& name) const;

    void save(const std::string& path, const char magic[8]) const;
    static TensorArchive load(const std::string& path, const char magic[8]);
};

inline constexpr char kWeightsMagic[8] = {'D', 'P', 'T', 'W', '0', '0', '0', '1'};
inline constexpr char kPromptsMagic[8] = {'D', 'P', 'T', 'P', '0', '0', '0', '1'};

// %.9g round-trips any float32 exactly.
std::string format_float(float value);

}  // namespace dmpt
