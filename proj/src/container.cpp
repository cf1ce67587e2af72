#include "dmpt/container.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dmpt/errors.hpp"

namespace dmpt {

std::string format_float(float value) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(value));
    return buf;
}

void TensorArchive::add_config(const std::string& key, const std::string& value) {
    config.emplace_back(key, value);
}
void TensorArchive::add_config(const std::string& key, int value) {
    config.emplace_back(key, std::to_string(value));
}
void TensorArchive::add_config(const std::string& key, float value) {
    config.emplace_back(key, format_float(value));
}

bool TensorArchive::has_config(const std::string& key) const {
    for (const auto& [k, v] : config)
        if (k == key) return true;
    return false;
}

const std::string& TensorArchive::config_value(const std::string& key) const {
    for (const auto& [k, v] : config)
        if (k == key) return v;
    throw FormatError("archive header is missing config key '" + key + "'", 12);
}

int TensorArchive::config_int(const std::string& key) const {
    return std::stoi(config_value(key));
}

float TensorArchive::config_float(const std::string& key) const {
    return std::strtof(config_value(key).c_str(), nullptr);
}

void TensorArchive::add_tensor(const std::string& name, const Tensor& t) {
    tensors.push_back(NamedTensor{name, t.shape(), t.values()});
}

bool TensorArchive::has_tensor(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return true;
    return false;
}

const NamedTensor& TensorArchive::tensor(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw FormatError("archive is missing tensor '" + name + "'", 12);
}

void TensorArchive::save(const std::string& path, const char magic[8]) const {
    std::ostringstream header;
    for (const auto& [k, v] : config) header << "config " << k << "=" << v << "\n";
    for (const auto& t : tensors) {
        header << "tensor " << t.name << " " << t.shape.size();
        for (int e : t.shape) header << " " << e;
        header << "\n";
    }
    const std::string header_text = header.str();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(magic, 8);
    const std::uint32_t header_len = static_cast<std::uint32_t>(header_text.size());
    out.write(reinterpret_cast<const char*>(&header_len), 4);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& t : tensors) {
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!out) throw IoError("short write to '" + path + "'");
}

TensorArchive TensorArchive::load(const std::string& path, const char magic[8]) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");

    char got_magic[8];
    if (!in.read(got_magic, 8)) throw FormatError("file too short for magic", 0);
    if (std::memcmp(got_magic, magic, 8) != 0) {
        throw FormatError("bad magic, expected " + std::string(magic, 8) + " got " +
                              std::string(got_magic, 8),
                          0);
    }
    std::uint32_t header_len = 0;
    if (!in.read(reinterpret_cast<char*>(&header_len), 4)) {
        throw FormatError("file too short for header length", 8);
    }
    std::string header_text(header_len, '\0');
    if (!in.read(header_text.data(), header_len)) {
        throw FormatError("file too short for declared header", 12);
    }

    TensorArchive archive;
    std::uint64_t payload_offset = 12ULL + header_len;
    std::istringstream header(header_text);
    std::string line;
    std::uint64_t line_offset = 12;
    while (std::getline(header, line)) {
        const std::uint64_t this_offset = line_offset;
        line_offset += line.size() + 1;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string kind;
        fields >> kind;
        if (kind == "config") {
            std::string rest;
            std::getline(fields, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            const auto eq = rest.find('=');
            if (eq == std::string::npos) throw FormatError("config line lacks '='", this_offset);
            archive.config.emplace_back(rest.substr(0, eq), rest.substr(eq + 1));
        } else if (kind == "tensor") {
            NamedTensor t;
            int rank = -1;
            fields >> t.name >> rank;
            if (!fields || rank < 0 || rank > 8) {
                throw FormatError("bad tensor manifest line '" + line + "'", this_offset);
            }
            std::int64_t count = 1;
            for (int i = 0; i < rank; ++i) {
                int e = 0;
                fields >> e;
                if (!fields || e <= 0) throw FormatError("bad tensor extent in '" + line + "'", this_offset);
                t.shape.push_back(e);
                count *= e;
            }
            t.data.resize(static_cast<std::size_t>(count));
            archive.tensors.push_back(std::move(t));
        } else {
            throw FormatError("unknown header record '" + kind + "'", this_offset);
        }
    }

    for (auto& t : archive.tensors) {
        if (!in.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(float)))) {
            throw FormatError("payload truncated while reading tensor '" + t.name + "'", payload_offset);
        }
        payload_offset += t.data.size() * sizeof(float);
    }
    return archive;
}

}  // namespace dmpt
