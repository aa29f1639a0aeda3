#pragma once

#include <filesystem>
#include <string>
#include <unordered_set>

#include "leverlm/error.hpp"
#include "leverlm/io.hpp"
#include "leverlm/lever_model.hpp"
#include "leverlm/tensor.hpp"

namespace leverlm {

inline constexpr const char* kCheckpointFormat = "leverlm.checkpoint";

inline json to_json(const ModelConfig& c) {
    return {{"arch", to_string(c.arch)},
            {"d_model", c.d_model},
            {"heads", c.heads},
            {"layers", c.layers},
            {"ffn_multiplier", c.ffn_multiplier},
            {"adapter", c.adapter},
            {"encoder_trainable", c.encoder_trainable},
            {"query_mode", to_string(c.query_mode)},
            {"max_shots", c.max_shots}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.arch = architecture_from_string(j.value("arch", to_string(c.arch)));
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.ffn_multiplier = j.value("ffn_multiplier", c.ffn_multiplier);
    c.adapter = j.value("adapter", c.adapter);
    c.encoder_trainable = j.value("encoder_trainable", c.encoder_trainable);
    c.query_mode = query_mode_from_string(j.value("query_mode", to_string(c.query_mode)));
    c.max_shots = j.value("max_shots", c.max_shots);
    return c;
}

struct Checkpoint {
    ModelConfig config;
    std::size_t feature_dim = 0;
    std::size_t vocab_size = 0;
    ParamSet params;
    json provenance = json::object();
};

inline std::string render_checkpoint(const LeverLM& model, const json& provenance = json::object()) {
    model.params.check_finite("checkpoint_save");
    json tensors = json::array();
    for (const auto& nt : model.params) {
        tensors.push_back(
            {{"name", nt.name}, {"shape", nt.tensor.shape}, {"trainable", nt.trainable}, {"data", nt.tensor.data}});
    }
    json doc = {{"format", kCheckpointFormat},
                {"version", kFormatVersion},
                {"model", to_json(model.config)},
                {"feature_dim", model.feature_dim},
                {"vocab_size", model.vocab.size()},
                {"provenance", provenance},
                {"tensors", tensors}};
    return doc.dump() + "\n";
}

inline void checkpoint_save(const LeverLM& model, const std::filesystem::path& path,
                            const json& provenance = json::object()) {
    write_text_file(path, render_checkpoint(model, provenance));
}

// Restores every tensor named by the config's layout; a missing, unexpected
// or wrongly shaped tensor is a SchemaError.
inline Checkpoint checkpoint_from_json(const json& doc, const std::string& where) {
    expect_format(doc, kCheckpointFormat, where);
    Checkpoint ck;
    try {
        ck.config = model_config_from_json(doc.at("model"));
        ck.feature_dim = doc.at("feature_dim").get<std::size_t>();
        ck.vocab_size = doc.at("vocab_size").get<std::size_t>();
        ck.provenance = doc.value("provenance", json::object());
    } catch (const json::exception& e) {
        throw SchemaError(where + ": " + e.what());
    }
    ck.params = make_param_layout(ck.config, ck.vocab_size, ck.feature_dim);
    std::unordered_set<std::string> seen;
    for (const auto& entry : doc.at("tensors")) {
        std::string name;
        std::vector<std::size_t> shape;
        std::vector<double> data;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<std::vector<std::size_t>>();
            data = entry.at("data").get<std::vector<double>>();
        } catch (const json::exception& e) {
            throw SchemaError(where + ": malformed tensor entry: " + e.what());
        }
        Tensor* t = ck.params.find(name);
        if (t == nullptr) throw SchemaError(where + ": unexpected tensor '" + name + "'");
        if (t->shape != shape) throw SchemaError(where + ": tensor '" + name + "' has the wrong shape");
        if (data.size() != t->numel()) throw SchemaError(where + ": tensor '" + name + "' has the wrong element count");
        t->data = std::move(data);
        seen.insert(name);
    }
    for (const auto& nt : ck.params) {
        if (!seen.contains(nt.name)) throw SchemaError(where + ": missing tensor '" + nt.name + "'");
    }
    return ck;
}

inline Checkpoint checkpoint_load(const std::filesystem::path& path) {
    return checkpoint_from_json(parse_json_document(path), path.string());
}

// Rebuilds a model from a checkpoint and the support set it was trained on.
inline LeverLM model_from_checkpoint(Checkpoint ck, Vocabulary vocab) {
    if (vocab.size() != ck.vocab_size) {
        throw SchemaError("checkpoint vocabulary size " + std::to_string(ck.vocab_size) +
                          " does not match the support set (" + std::to_string(vocab.size()) + ")");
    }
    LeverLM m;
    m.config = ck.config;
    m.feature_dim = ck.feature_dim;
    m.vocab = std::move(vocab);
    m.params = std::move(ck.params);
    return m;
}

}  // namespace leverlm
