#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxfilter/errors.hpp"

namespace ctxfilter {

/// Reads newline-delimited JSON. Blank lines are skipped; a malformed line
/// raises ConfigError with its 1-based line number.
inline std::vector<nlohmann::json> read_ndjson(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void write_ndjson(const std::filesystem::path& path,
                         const std::vector<nlohmann::json>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    for (const auto& rec : records) out << rec.dump() << '\n';
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

} // namespace ctxfilter
