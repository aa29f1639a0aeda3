#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "leverlm/error.hpp"

namespace leverlm {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

// FNV-1a over the canonical (sorted-key, compact) dump.
inline std::string digest_of(const json& value) {
    const std::string text = value.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open for writing: " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open for reading: " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline json parse_json_document(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string(), 1, e.what());
    }
}

// Header checks shared by every file kind.
inline void expect_format(const json& header, const std::string& format, const std::string& where) {
    if (!header.is_object() || !header.contains("format") || header["format"] != format) {
        throw SchemaError(where + ": expected format '" + format + "'");
    }
    if (!header.contains("version") || !header["version"].is_number_integer()) {
        throw SchemaError(where + ": missing format version");
    }
    if (header["version"].get<int>() != kFormatVersion) {
        throw SchemaError(where + ": unsupported format version " + header["version"].dump());
    }
}

// Line-delimited file: header object on line 1, one record per following line.
inline std::string render_jsonl(const json& header, const std::vector<json>& records) {
    std::string out = header.dump();
    out += '\n';
    for (const auto& r : records) {
        out += r.dump();
        out += '\n';
    }
    return out;
}

struct JsonlFile {
    json header;
    std::vector<json> records;
    std::vector<std::size_t> line_numbers;  // parallel to records
};

inline JsonlFile read_jsonl(const std::filesystem::path& path, const std::string& format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open for reading: " + path.string());
    }
    JsonlFile file;
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        json value;
        try {
            value = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(path.string(), line_no, e.what());
        }
        if (!value.is_object()) {
            throw ParseError(path.string(), line_no, "expected a JSON object");
        }
        if (!have_header) {
            expect_format(value, format, path.string());
            file.header = std::move(value);
            have_header = true;
        } else {
            file.records.push_back(std::move(value));
            file.line_numbers.push_back(line_no);
        }
    }
    if (!have_header) {
        throw SchemaError(path.string() + ": missing header line");
    }
    return file;
}

}  // namespace leverlm
