#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "leverlm/error.hpp"
#include "leverlm/io.hpp"

namespace leverlm {

using ExampleId = std::int64_t;

// One supporting-set entry. `task` is kept for analysis only; nothing that
// scores or selects demonstrations reads it.
struct Example {
    ExampleId id = 0;
    std::vector<double> img_feat;
    std::optional<std::vector<double>> txt_feat;
    std::vector<int> label;
    int task = 0;

    friend bool operator==(const Example&, const Example&) = default;
};

// Same shape as Example; the label is the ground truth used for construction
// and evaluation and is never read by generation.
using QuerySample = Example;

struct ICDSequence {
    std::vector<ExampleId> icds;
    double score = 0.0;

    friend bool operator==(const ICDSequence&, const ICDSequence&) = default;
};

struct ConstructionRecord {
    ExampleId anchor_id = 0;
    std::vector<ICDSequence> sequences;  // descending by score

    friend bool operator==(const ConstructionRecord&, const ConstructionRecord&) = default;
};

// Index of the maximum; ties go to the lowest index.
inline int argmax_lowest(std::span<const double> values) {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<std::size_t>(best)]) {
            best = static_cast<int>(i);
        }
    }
    return best;
}

inline bool has_duplicates(std::span<const ExampleId> ids) {
    std::unordered_set<ExampleId> seen;
    for (ExampleId id : ids) {
        if (!seen.insert(id).second) {
            return true;
        }
    }
    return false;
}

inline void validate_example(const Example& e, std::size_t feature_dim, int num_classes) {
    if (e.img_feat.size() != feature_dim) {
        throw SchemaError("example " + std::to_string(e.id) + ": img_feat has length " +
                          std::to_string(e.img_feat.size()) + ", expected " + std::to_string(feature_dim));
    }
    if (e.txt_feat && e.txt_feat->size() != feature_dim) {
        throw SchemaError("example " + std::to_string(e.id) + ": txt_feat has length " +
                          std::to_string(e.txt_feat->size()) + ", expected " + std::to_string(feature_dim));
    }
    if (e.label.empty()) {
        throw SchemaError("example " + std::to_string(e.id) + ": empty label");
    }
    for (int tok : e.label) {
        if (tok < 0 || (num_classes > 0 && tok >= num_classes)) {
            throw SchemaError("example " + std::to_string(e.id) + ": label token " + std::to_string(tok) +
                              " out of range");
        }
    }
}

// Id-indexed view over a list of examples. Ids must be unique.
class ExampleIndex {
public:
    ExampleIndex() = default;

    explicit ExampleIndex(std::span<const Example> examples) : examples_(examples) {
        positions_.reserve(examples.size());
        for (std::size_t i = 0; i < examples.size(); ++i) {
            if (!positions_.emplace(examples[i].id, i).second) {
                throw SchemaError("duplicate example id " + std::to_string(examples[i].id));
            }
        }
    }

    const Example& at(ExampleId id) const {
        auto it = positions_.find(id);
        if (it == positions_.end()) {
            throw IndexError("unknown example id " + std::to_string(id));
        }
        return examples_[it->second];
    }

    bool contains(ExampleId id) const { return positions_.contains(id); }

    std::vector<const Example*> resolve(std::span<const ExampleId> ids) const {
        std::vector<const Example*> out;
        out.reserve(ids.size());
        for (ExampleId id : ids) {
            out.push_back(&at(id));
        }
        return out;
    }

    std::span<const Example> examples() const { return examples_; }

private:
    std::span<const Example> examples_;
    std::unordered_map<ExampleId, std::size_t> positions_;
};

// ---------------------------------------------------------------------------
// JSON mapping

inline json to_json(const Example& e) {
    json j = {{"id", e.id}, {"img", e.img_feat}, {"label", e.label}, {"task", e.task}};
    if (e.txt_feat) {
        j["txt"] = *e.txt_feat;
    }
    return j;
}

inline Example example_from_json(const json& j) {
    Example e;
    e.id = j.at("id").get<ExampleId>();
    e.img_feat = j.at("img").get<std::vector<double>>();
    if (j.contains("txt") && !j["txt"].is_null()) {
        e.txt_feat = j["txt"].get<std::vector<double>>();
    }
    e.label = j.at("label").get<std::vector<int>>();
    e.task = j.at("task").get<int>();
    return e;
}

inline json to_json(const ICDSequence& s) { return {{"icds", s.icds}, {"score", s.score}}; }

inline ICDSequence sequence_from_json(const json& j) {
    return ICDSequence{j.at("icds").get<std::vector<ExampleId>>(), j.at("score").get<double>()};
}

inline json to_json(const ConstructionRecord& r) {
    json seqs = json::array();
    for (const auto& s : r.sequences) {
        seqs.push_back(to_json(s));
    }
    return {{"anchor_id", r.anchor_id}, {"sequences", seqs}};
}

inline ConstructionRecord record_from_json(const json& j) {
    ConstructionRecord r;
    r.anchor_id = j.at("anchor_id").get<ExampleId>();
    for (const auto& s : j.at("sequences")) {
        r.sequences.push_back(sequence_from_json(s));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Example files

inline constexpr const char* kExamplesFormat = "leverlm.examples";
inline constexpr const char* kRecordsFormat = "leverlm.construction_records";

struct ExamplesFile {
    std::size_t feature_dim = 0;
    json provenance = json::object();
    std::vector<Example> examples;
};

inline std::string render_examples(std::span<const Example> examples, std::size_t feature_dim,
                                   const json& provenance = json::object()) {
    json header = {{"format", kExamplesFormat},
                   {"version", kFormatVersion},
                   {"feature_dim", feature_dim},
                   {"count", examples.size()},
                   {"provenance", provenance}};
    std::vector<json> rows;
    rows.reserve(examples.size());
    for (const auto& e : examples) {
        rows.push_back(to_json(e));
    }
    return render_jsonl(header, rows);
}

inline void serialize_examples(std::span<const Example> examples, std::size_t feature_dim,
                               const std::filesystem::path& destination,
                               const json& provenance = json::object()) {
    write_text_file(destination, render_examples(examples, feature_dim, provenance));
}

inline ExamplesFile deserialize_examples_file(const std::filesystem::path& path) {
    JsonlFile raw = read_jsonl(path, kExamplesFormat);
    ExamplesFile out;
    try {
        out.feature_dim = raw.header.at("feature_dim").get<std::size_t>();
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": bad header: " + e.what());
    }
    out.provenance = raw.header.value("provenance", json::object());
    out.examples.reserve(raw.records.size());
    std::unordered_set<ExampleId> ids;
    for (std::size_t i = 0; i < raw.records.size(); ++i) {
        Example e;
        try {
            e = example_from_json(raw.records[i]);
        } catch (const json::exception& ex) {
            throw ParseError(path.string(), raw.line_numbers[i], ex.what());
        }
        try {
            validate_example(e, out.feature_dim, 0);
        } catch (const SchemaError& ex) {
            throw SchemaError(path.string() + ":" + std::to_string(raw.line_numbers[i]) + ": " + ex.what());
        }
        if (!ids.insert(e.id).second) {
            throw SchemaError(path.string() + ":" + std::to_string(raw.line_numbers[i]) + ": duplicate id " +
                              std::to_string(e.id));
        }
        out.examples.push_back(std::move(e));
    }
    if (raw.header.contains("count") && raw.header["count"].get<std::size_t>() != out.examples.size()) {
        throw SchemaError(path.string() + ": header count does not match record count");
    }
    return out;
}

inline std::vector<Example> deserialize_examples(const std::filesystem::path& path) {
    return deserialize_examples_file(path).examples;
}

// ---------------------------------------------------------------------------
// Construction-record files (the training dataset)

struct RecordsFile {
    json provenance = json::object();
    std::vector<ConstructionRecord> records;
};

inline std::string render_records(std::span<const ConstructionRecord> records, const json& provenance) {
    json header = {{"format", kRecordsFormat},
                   {"version", kFormatVersion},
                   {"count", records.size()},
                   {"provenance", provenance}};
    std::vector<json> rows;
    rows.reserve(records.size());
    for (const auto& r : records) {
        rows.push_back(to_json(r));
    }
    return render_jsonl(header, rows);
}

inline void serialize_records(std::span<const ConstructionRecord> records, const std::filesystem::path& path,
                              const json& provenance = json::object()) {
    write_text_file(path, render_records(records, provenance));
}

inline RecordsFile deserialize_records_file(const std::filesystem::path& path) {
    JsonlFile raw = read_jsonl(path, kRecordsFormat);
    RecordsFile out;
    out.provenance = raw.header.value("provenance", json::object());
    for (std::size_t i = 0; i < raw.records.size(); ++i) {
        try {
            out.records.push_back(record_from_json(raw.records[i]));
        } catch (const json::exception& ex) {
            throw ParseError(path.string(), raw.line_numbers[i], ex.what());
        }
    }
    return out;
}

}  // namespace leverlm
