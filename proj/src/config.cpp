#include "dmpt/config.hpp"

#include <fstream>
#include <sstream>

#include "dmpt/errors.hpp"

namespace dmpt {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

ConfigMap ConfigMap::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path + "'");
    ConfigMap map;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config line " + std::to_string(line_no) + " in '" + path +
                             "' is not 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw UsageError("config line " + std::to_string(line_no) + " in '" + path +
                             "' has an empty key");
        }
        map.set(key, value);
    }
    return map;
}

void ConfigMap::set(const std::string& key, const std::string& value) {
    entries_.emplace_back(key, value);
}

const std::string* ConfigMap::find(const std::string& key) const {
    const std::string* found = nullptr;
    for (const auto& [k, v] : entries_)
        if (k == key) found = &v;  // last assignment wins
    return found;
}

bool ConfigMap::has(const std::string& key) const { return find(key) != nullptr; }

std::string ConfigMap::get(const std::string& key, const std::string& fallback) const {
    const std::string* v = find(key);
    return v ? *v : fallback;
}

std::string ConfigMap::require(const std::string& key) const {
    const std::string* v = find(key);
    if (!v) throw UsageError("missing required config key '" + key + "'");
    return *v;
}

int ConfigMap::get_int(const std::string& key, int fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    try {
        return std::stoi(*v);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "' is not an integer: '" + *v + "'");
    }
}

std::int64_t ConfigMap::get_i64(const std::string& key, std::int64_t fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    try {
        return std::stoll(*v);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "' is not an integer: '" + *v + "'");
    }
}

float ConfigMap::get_float(const std::string& key, float fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    try {
        return std::stof(*v);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "' is not a number: '" + *v + "'");
    }
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    if (*v == "1" || *v == "true" || *v == "yes" || *v == "on") return true;
    if (*v == "0" || *v == "false" || *v == "no" || *v == "off") return false;
    throw UsageError("config key '" + key + "' is not a boolean: '" + *v + "'");
}

std::vector<int> ConfigMap::get_int_list(const std::string& key, const std::vector<int>& fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    std::vector<int> out;
    std::istringstream in(*v);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::istringstream one(item);
        int value = 0;
        if (one >> value) out.push_back(value);
    }
    return out;
}

std::vector<std::string> ConfigMap::get_list(const std::string& key,
                                             const std::vector<std::string>& fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    std::vector<std::string> out;
    std::istringstream in(*v);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto begin = item.find_first_not_of(" \t");
        if (begin == std::string::npos) continue;
        const auto end = item.find_last_not_of(" \t");
        out.push_back(item.substr(begin, end - begin + 1));
    }
    return out;
}

}  // namespace dmpt
