#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "leverlm/checkpoint.hpp"
#include "leverlm/construct.hpp"
#include "leverlm/error.hpp"
#include "leverlm/icd_generate.hpp"
#include "leverlm/io.hpp"
#include "leverlm/lever_model.hpp"
#include "leverlm/synth_world.hpp"
#include "leverlm/trainer.hpp"

namespace leverlm {

struct DataConfig {
    std::size_t train_size = 512;  // anchors + supporting set
    std::size_t test_size = 400;

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct EvalConfig {
    std::vector<std::size_t> shots = {1, 2, 3, 4, 6, 8};
    DecodeConfig decode;
    GoldenMethod golden = GoldenMethod::NullQuery;
    std::uint64_t seed = 1;

    friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

namespace detail {

// End-to-end defaults sized for a single CPU. The component structs keep the
// published hyperparameters; a run scales them down here.
inline ConstructionConfig desk_construction() {
    ConstructionConfig k;
    k.sub_support = 32;
    k.strategy = SubSupportStrategy::SimImage;
    return k;
}

inline ModelConfig desk_model() {
    ModelConfig m;
    m.adapter = false;
    m.encoder_trainable = true;
    return m;
}

inline TrainConfig desk_training() {
    TrainConfig t;
    t.lr = 3e-3;
    t.weight_decay = 0.3;
    t.batch_size = 16;
    return t;
}

}  // namespace detail

struct RunConfig {
    WorldParams world;
    DataConfig data;
    ConstructionConfig construction = detail::desk_construction();
    ModelConfig model = detail::desk_model();
    TrainConfig training = detail::desk_training();
    EvalConfig evaluation;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct Violation {
    std::string field;
    std::string constraint;

    friend bool operator==(const Violation&, const Violation&) = default;
};

// ---------------------------------------------------------------------------
// JSON mapping. Every key is written; on read every key is required, so a
// config file is always complete and unknown keys are rejected.

inline json to_json(const RunConfig& c) {
    const WorldParams& w = c.world;
    const ConstructionConfig& k = c.construction;
    const TrainConfig& t = c.training;
    const EvalConfig& e = c.evaluation;
    return {
        {"world",
         {{"tasks", w.tasks},
          {"classes", w.classes},
          {"feature_dim", w.feature_dim},
          {"sigma", w.sigma},
          {"gamma", w.gamma},
          {"seed", w.seed},
          {"train_size", c.data.train_size},
          {"test_size", c.data.test_size}}},
        {"construction",
         {{"anchors", k.anchors},
          {"sub_support", k.sub_support},
          {"strategy", to_string(k.strategy)},
          {"shots", k.shots},
          {"beam", k.beam},
          {"scorer", to_string(k.scorer)},
          {"seed", k.seed}}},
        {"model", to_json(c.model)},
        {"training",
         {{"lr", t.lr},
          {"weight_decay", t.weight_decay},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"warmup_fraction", t.warmup_fraction},
          {"seed", t.seed},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"epsilon", t.epsilon}}},
        {"evaluation",
         {{"shots", e.shots},
          {"decode", to_string(e.decode.mode)},
          {"beam_width", e.decode.beam_width},
          {"no_repeat", e.decode.no_repeat},
          {"golden", to_string(e.golden)},
          {"seed", e.seed}}},
    };
}

namespace detail {

inline void require_keys(const json& section, const std::string& name, const json& reference) {
    if (!section.is_object()) throw ConfigError("config section '" + name + "' must be an object");
    for (const auto& [key, _] : reference.items()) {
        if (!section.contains(key)) throw ConfigError("config is missing '" + name + "." + key + "'");
    }
    for (const auto& [key, _] : section.items()) {
        if (!reference.contains(key)) throw ConfigError("unknown config key '" + name + "." + key + "'");
    }
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
    const json reference = to_json(RunConfig{});
    if (!j.is_object()) throw ConfigError("config must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!reference.contains(key)) throw ConfigError("unknown config section '" + key + "'");
    }
    for (const auto& [key, ref] : reference.items()) {
        if (!j.contains(key)) throw ConfigError("config is missing section '" + key + "'");
        detail::require_keys(j.at(key), key, ref);
    }
    RunConfig c;
    try {
        const json& w = j.at("world");
        c.world.tasks = w.at("tasks").get<int>();
        c.world.classes = w.at("classes").get<int>();
        c.world.feature_dim = w.at("feature_dim").get<int>();
        c.world.sigma = w.at("sigma").get<double>();
        c.world.gamma = w.at("gamma").get<double>();
        c.world.seed = w.at("seed").get<std::uint64_t>();
        c.data.train_size = w.at("train_size").get<std::size_t>();
        c.data.test_size = w.at("test_size").get<std::size_t>();

        const json& k = j.at("construction");
        c.construction.anchors = k.at("anchors").get<std::size_t>();
        c.construction.sub_support = k.at("sub_support").get<std::size_t>();
        c.construction.strategy = sub_support_strategy_from_string(k.at("strategy").get<std::string>());
        c.construction.shots = k.at("shots").get<std::size_t>();
        c.construction.beam = k.at("beam").get<std::size_t>();
        c.construction.scorer = scorer_kind_from_string(k.at("scorer").get<std::string>());
        c.construction.seed = k.at("seed").get<std::uint64_t>();

        c.model = model_config_from_json(j.at("model"));

        const json& t = j.at("training");
        c.training.lr = t.at("lr").get<double>();
        c.training.weight_decay = t.at("weight_decay").get<double>();
        c.training.epochs = t.at("epochs").get<std::size_t>();
        c.training.batch_size = t.at("batch_size").get<std::size_t>();
        c.training.warmup_fraction = t.at("warmup_fraction").get<double>();
        c.training.seed = t.at("seed").get<std::uint64_t>();
        c.training.beta1 = t.at("beta1").get<double>();
        c.training.beta2 = t.at("beta2").get<double>();
        c.training.epsilon = t.at("epsilon").get<double>();

        const json& e = j.at("evaluation");
        c.evaluation.shots = e.at("shots").get<std::vector<std::size_t>>();
        c.evaluation.decode.mode = decode_mode_from_string(e.at("decode").get<std::string>());
        c.evaluation.decode.beam_width = e.at("beam_width").get<std::size_t>();
        c.evaluation.decode.no_repeat = e.at("no_repeat").get<bool>();
        c.evaluation.golden = golden_method_from_string(e.at("golden").get<std::string>());
        c.evaluation.seed = e.at("seed").get<std::uint64_t>();
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("bad config value: ") + ex.what());
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    json j;
    try {
        j = parse_json_document(path);
    } catch (const ParseError& e) {
        throw ConfigError(e.what());
    }
    return run_config_from_json(j);
}

inline void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
    write_text_file(path, to_json(c).dump(2) + "\n");
}

// Applies "section.key=value" to a config. Only existing scalar keys can be
// overridden; the value is parsed as JSON and taken as a string otherwise.
inline RunConfig apply_override(const RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    const auto dot = path.find('.');
    if (dot == std::string::npos || path.find('.', dot + 1) != std::string::npos) {
        throw ConfigError("override key '" + path + "' must be section.key");
    }
    json j = to_json(c);
    const std::string section = path.substr(0, dot);
    const std::string key = path.substr(dot + 1);
    if (!j.contains(section) || !j[section].contains(key)) throw ConfigError("unknown config key '" + path + "'");
    json& slot = j[section][key];
    if (slot.is_structured()) throw ConfigError("config key '" + path + "' is not a scalar");
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    if (value.is_structured()) throw ConfigError("override value for '" + path + "' must be a scalar");
    if (slot.is_string() && !value.is_string()) value = text;
    if (slot.is_number() && !value.is_number()) {
        throw ConfigError("override value for '" + path + "' must be a number");
    }
    if (slot.is_boolean() && !value.is_boolean()) {
        throw ConfigError("override value for '" + path + "' must be true or false");
    }
    if (slot.is_number_unsigned() && !value.is_number_unsigned()) {
        throw ConfigError("override value for '" + path + "' must be a non-negative integer");
    }
    if (slot.is_number_integer() && value.is_number_float()) {
        throw ConfigError("override value for '" + path + "' must be an integer");
    }
    slot = value;
    return run_config_from_json(j);
}

// Sets every seed in the config.
inline RunConfig with_seed(RunConfig c, std::uint64_t seed) {
    c.world.seed = seed;
    c.construction.seed = seed;
    c.training.seed = seed;
    c.evaluation.seed = seed;
    return c;
}

inline std::vector<Violation> validate_config(const RunConfig& c) {
    std::vector<Violation> out;
    auto check = [&](bool ok, std::string field, std::string constraint) {
        if (!ok) out.push_back({std::move(field), std::move(constraint)});
    };
    const WorldParams& w = c.world;
    check(w.tasks >= 1, "world.tasks", "must be >= 1");
    check(w.classes >= 1, "world.classes", "must be >= 1");
    check(w.feature_dim >= 1, "world.feature_dim", "must be >= 1");
    check(w.sigma > 0.0 && std::isfinite(w.sigma), "world.sigma", "must be finite and > 0");
    check(w.gamma > 0.0 && w.gamma <= 1.0, "world.gamma", "must lie in (0, 1]");
    check(c.data.test_size >= 1, "world.test_size", "must be >= 1");

    const ConstructionConfig& k = c.construction;
    check(k.anchors >= 1, "construction.anchors", "must be >= 1");
    check(k.anchors < c.data.train_size, "construction.anchors/world.train_size",
          "anchors must be fewer than train_size so the supporting set is non-empty");
    check(k.sub_support >= 1, "construction.sub_support", "must be >= 1");
    check(k.shots >= 1, "construction.shots", "must be >= 1");
    check(k.beam >= 1, "construction.beam", "must be >= 1");
    check(k.shots <= k.sub_support, "construction.shots/construction.sub_support",
          "shots K must not exceed sub_support m");
    if (k.anchors < c.data.train_size) {
        check(k.sub_support <= c.data.train_size - k.anchors, "construction.sub_support/world.train_size",
              "sub_support m must not exceed the supporting-set size train_size - anchors");
    }

    const ModelConfig& m = c.model;
    check(m.d_model >= 1, "model.d_model", "must be >= 1");
    check(m.layers >= 1, "model.layers", "must be >= 1");
    check(m.max_shots >= 1, "model.max_shots", "must be >= 1");
    if (m.arch == Architecture::Transformer) {
        check(m.heads >= 1 && m.d_model % std::max<std::size_t>(m.heads, 1) == 0, "model.d_model/model.heads",
              "d_model must be divisible by heads");
        check(m.ffn_multiplier >= 1, "model.ffn_multiplier", "must be >= 1");
    }
    check(k.shots <= m.max_shots, "construction.shots/model.max_shots", "training length must fit the model");

    const TrainConfig& t = c.training;
    check(t.lr > 0.0 && std::isfinite(t.lr), "training.lr", "must be finite and > 0");
    check(t.weight_decay >= 0.0 && std::isfinite(t.weight_decay), "training.weight_decay", "must be >= 0");
    check(t.epochs >= 1, "training.epochs", "must be >= 1");
    check(t.batch_size >= 1, "training.batch_size", "must be >= 1");
    check(t.warmup_fraction >= 0.0 && t.warmup_fraction < 1.0, "training.warmup_fraction", "must lie in [0, 1)");
    check(t.beta1 >= 0.0 && t.beta1 < 1.0, "training.beta1", "must lie in [0, 1)");
    check(t.beta2 >= 0.0 && t.beta2 < 1.0, "training.beta2", "must lie in [0, 1)");
    check(t.epsilon > 0.0, "training.epsilon", "must be > 0");

    const EvalConfig& e = c.evaluation;
    check(!e.shots.empty(), "evaluation.shots", "must be non-empty");
    check(std::adjacent_find(e.shots.begin(), e.shots.end(), std::greater_equal<>()) == e.shots.end(),
          "evaluation.shots", "must be strictly increasing");
    check(e.shots.empty() || e.shots.front() >= 1, "evaluation.shots", "every shot count must be >= 1");
    if (!e.shots.empty()) {
        check(e.shots.back() <= m.max_shots, "evaluation.shots/model.max_shots",
              "largest shot count must not exceed max_shots");
        if (k.anchors < c.data.train_size) {
            check(e.shots.back() <= c.data.train_size - k.anchors, "evaluation.shots/world.train_size",
                  "largest shot count must not exceed the supporting-set size");
        }
    }
    check(e.decode.beam_width >= 1, "evaluation.beam_width", "must be >= 1");
    return out;
}

inline std::string describe(const std::vector<Violation>& violations) {
    std::string out;
    for (const auto& v : violations) out += v.field + ": " + v.constraint + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Stage digests. Each stage's digest covers the config sections it and its
// upstream stages read, so a change downstream leaves upstream artifacts valid.

enum class Stage { World, Dataset, Train, Generate, Evaluate };

inline std::string stage_digest(const RunConfig& c, Stage stage) {
    const json full = to_json(c);
    json part = json::object();
    part["world"] = full["world"];
    if (stage >= Stage::Dataset) part["construction"] = full["construction"];
    if (stage >= Stage::Train) {
        part["model"] = full["model"];
        part["training"] = full["training"];
    }
    if (stage >= Stage::Generate) part["evaluation"] = full["evaluation"];
    return digest_of(part);
}

inline std::string config_digest(const RunConfig& c) { return digest_of(to_json(c)); }

}  // namespace leverlm
