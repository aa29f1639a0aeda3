#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "leverlm/baselines.hpp"
#include "leverlm/checkpoint.hpp"
#include "leverlm/config.hpp"
#include "leverlm/construct.hpp"
#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/harness.hpp"
#include "leverlm/icd_generate.hpp"
#include "leverlm/io.hpp"
#include "leverlm/lever_model.hpp"
#include "leverlm/parallel.hpp"
#include "leverlm/synth_world.hpp"
#include "leverlm/trainer.hpp"

// Stage functions behind the command-line tool. Each stage reads the
// artifacts of earlier stages from a work directory and writes its own.
namespace leverlm::pipeline {

namespace fs = std::filesystem;

namespace files {
inline constexpr const char* kWorld = "world.json";
inline constexpr const char* kTrainExamples = "train_examples.jsonl";
inline constexpr const char* kTestExamples = "test_examples.jsonl";
inline constexpr const char* kAnchors = "anchors.jsonl";
inline constexpr const char* kSupport = "support.jsonl";
inline constexpr const char* kDataset = "dm.jsonl";
inline constexpr const char* kCheckpoint = "checkpoint.json";
inline constexpr const char* kLossHistory = "loss_history.jsonl";
inline constexpr const char* kGenerations = "generations.jsonl";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kReportMarkdown = "report.md";
}  // namespace files

inline constexpr const char* kGenerationsFormat = "leverlm.generations";
inline constexpr const char* kLossHistoryFormat = "leverlm.loss_history";

inline const std::vector<std::string> kMethodNames{"Lever-LM", "RS", "SIIR", "SITR", "STTR", "Golden"};

inline std::string stage_name(Stage s) {
    switch (s) {
        case Stage::World: return "worldgen";
        case Stage::Dataset: return "build-dataset";
        case Stage::Train: return "train";
        case Stage::Generate: return "generate";
        case Stage::Evaluate: return "evaluate";
    }
    return "?";
}

inline std::string config_world_digest(const RunConfig& c) { return digest_of(world_params_json(c.world)); }

inline json provenance(const RunConfig& c, Stage s) {
    return {{"stage", stage_name(s)}, {"config_digest", stage_digest(c, s)}, {"world_digest", config_world_digest(c)}};
}

inline fs::path require_artifact(const fs::path& dir, const char* name) {
    fs::path p = dir / name;
    if (!fs::exists(p)) throw ValidationError("missing input artifact: " + p.string());
    return p;
}

// An input artifact must come from the same world and from the config the
// current run would have used for the stage that wrote it.
inline void check_provenance(const json& prov, const RunConfig& c, Stage producer, const fs::path& path) {
    const std::string world = prov.value("world_digest", "");
    if (world != config_world_digest(c)) {
        throw ValidationError(path.string() + ": world digest " + world + " does not match the configured world " +
                              config_world_digest(c));
    }
    const std::string stage = prov.value("config_digest", "");
    if (stage != stage_digest(c, producer)) {
        throw ValidationError(path.string() + ": produced under config digest " + stage + ", expected " +
                              stage_digest(c, producer) + "; rerun " + stage_name(producer));
    }
}

inline void require_valid(const RunConfig& c) {
    const auto violations = validate_config(c);
    if (!violations.empty()) throw ConfigError("invalid config:\n" + describe(violations));
}

// ---------------------------------------------------------------------------
// Loading helpers

inline SynthWorld load_checked_world(const RunConfig& c, const fs::path& dir) {
    const fs::path p = require_artifact(dir, files::kWorld);
    SynthWorld w = load_world(p);
    if (world_digest(w) != config_world_digest(c)) {
        throw ValidationError(p.string() + ": world digest " + world_digest(w) + " does not match the configured world " +
                              config_world_digest(c));
    }
    return w;
}

inline std::vector<Example> load_checked_examples(const RunConfig& c, const fs::path& dir, const char* name,
                                                  Stage producer) {
    const fs::path p = require_artifact(dir, name);
    ExamplesFile f = deserialize_examples_file(p);
    check_provenance(f.provenance, c, producer, p);
    return std::move(f.examples);
}

inline std::vector<ConstructionRecord> load_checked_records(const RunConfig& c, const fs::path& dir) {
    const fs::path p = require_artifact(dir, files::kDataset);
    RecordsFile f = deserialize_records_file(p);
    check_provenance(f.provenance, c, Stage::Dataset, p);
    return std::move(f.records);
}

inline LeverLM load_checked_model(const RunConfig& c, const fs::path& dir, const std::vector<Example>& support) {
    const fs::path p = require_artifact(dir, files::kCheckpoint);
    Checkpoint ck = checkpoint_load(p);
    check_provenance(ck.provenance, c, Stage::Train, p);
    return model_from_checkpoint(std::move(ck), Vocabulary(support));
}

struct Generations {
    std::vector<std::size_t> shots;
    std::map<std::size_t, ICDSequence> golden;  // one fixed sequence per shot count
    std::map<std::pair<ExampleId, std::size_t>, ICDSequence> by_query;  // (query id, shots)
};

inline Generations load_checked_generations(const RunConfig& c, const fs::path& dir) {
    const fs::path p = require_artifact(dir, files::kGenerations);
    JsonlFile raw = read_jsonl(p, kGenerationsFormat);
    check_provenance(raw.header.value("provenance", json::object()), c, Stage::Generate, p);
    Generations g;
    try {
        g.shots = raw.header.at("shots").get<std::vector<std::size_t>>();
        for (const auto& e : raw.header.at("golden")) g.golden[e.at("shots").get<std::size_t>()] = sequence_from_json(e);
    } catch (const json::exception& e) {
        throw SchemaError(p.string() + ": bad header: " + e.what());
    }
    for (std::size_t i = 0; i < raw.records.size(); ++i) {
        try {
            const json& r = raw.records[i];
            g.by_query[{r.at("query_id").get<ExampleId>(), r.at("shots").get<std::size_t>()}] = sequence_from_json(r);
        } catch (const json::exception& e) {
            throw ParseError(p.string(), raw.line_numbers[i], e.what());
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Stages

inline void run_worldgen(const RunConfig& c, const fs::path& dir) {
    require_valid(c);
    fs::create_directories(dir);
    const SynthWorld world = world_generate(c.world);
    save_world(world, dir / files::kWorld);
    const auto prov = provenance(c, Stage::World);
    const auto train = sample_examples(world, c.data.train_size, derive_seed(c.world.seed, {0x747261696eULL}));
    const auto test = sample_examples(world, c.data.test_size, derive_seed(c.world.seed, {0x74657374ULL}),
                                      static_cast<ExampleId>(c.data.train_size));
    serialize_examples(train, world.feature_dim(), dir / files::kTrainExamples, prov);
    serialize_examples(test, world.feature_dim(), dir / files::kTestExamples, prov);
}

inline void run_build_dataset(const RunConfig& c, const fs::path& dir, std::size_t threads) {
    require_valid(c);
    const SynthWorld world = load_checked_world(c, dir);
    const auto pool = load_checked_examples(c, dir, files::kTrainExamples, Stage::World);
    const AnchorSplit split = split_anchor_set(pool, c.construction.anchors, c.construction.seed);
    const auto records = build_dataset(world, split.anchors, split.support, c.construction, threads);
    const auto prov = provenance(c, Stage::Dataset);
    serialize_examples(split.anchors, world.feature_dim(), dir / files::kAnchors, prov);
    serialize_examples(split.support, world.feature_dim(), dir / files::kSupport, prov);
    serialize_records(records, dir / files::kDataset, prov);
}

inline std::uint64_t init_seed(const RunConfig& c) { return derive_seed(c.training.seed, {0x696e6974ULL}); }

inline TrainResult run_train(const RunConfig& c, const fs::path& dir, std::size_t threads) {
    require_valid(c);
    const SynthWorld world = load_checked_world(c, dir);
    const auto anchors = load_checked_examples(c, dir, files::kAnchors, Stage::Dataset);
    const auto support = load_checked_examples(c, dir, files::kSupport, Stage::Dataset);
    const auto records = load_checked_records(c, dir);
    LeverLM model = init_lever_lm(c.model, Vocabulary(support), world.feature_dim(), init_seed(c));
    const ExampleIndex anchor_index(anchors);
    TrainResult result = train(model, records, anchor_index, c.training, threads);
    const auto prov = provenance(c, Stage::Train);
    checkpoint_save(model, dir / files::kCheckpoint, prov);
    std::vector<json> rows;
    rows.reserve(result.history.size());
    for (const auto& r : result.history) rows.push_back({{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}});
    write_text_file(dir / files::kLossHistory,
                    render_jsonl({{"format", kLossHistoryFormat}, {"version", kFormatVersion}, {"provenance", prov}},
                                 rows));
    return result;
}

inline Generations run_generate(const RunConfig& c, const fs::path& dir, std::size_t threads) {
    require_valid(c);
    load_checked_world(c, dir);
    const auto anchors = load_checked_examples(c, dir, files::kAnchors, Stage::Dataset);
    const auto support = load_checked_examples(c, dir, files::kSupport, Stage::Dataset);
    const auto test = load_checked_examples(c, dir, files::kTestExamples, Stage::World);
    const LeverLM model = load_checked_model(c, dir, support);
    const auto& shots = c.evaluation.shots;

    std::vector<std::vector<ICDSequence>> out(test.size());
    parallel_for(test.size(), threads, [&](std::size_t i) {
        for (std::size_t s : shots) out[i].push_back(generate(model, test[i], s, c.evaluation.decode));
    });
    Generations g;
    g.shots = shots;
    json golden = json::array();
    for (std::size_t s : shots) {
        g.golden[s] = golden_extract(model, anchors, s, c.evaluation.golden, c.evaluation.decode);
        json e = to_json(g.golden[s]);
        e["shots"] = s;
        golden.push_back(std::move(e));
    }

    std::vector<json> rows;
    for (std::size_t i = 0; i < test.size(); ++i) {
        for (std::size_t k = 0; k < shots.size(); ++k) {
            json r = to_json(out[i][k]);
            r["query_id"] = test[i].id;
            r["shots"] = shots[k];
            rows.push_back(std::move(r));
            g.by_query[{test[i].id, shots[k]}] = out[i][k];
        }
    }
    const json header = {{"format", kGenerationsFormat},
                         {"version", kFormatVersion},
                         {"provenance", provenance(c, Stage::Generate)},
                         {"shots", shots},
                         {"golden", golden},
                         {"golden_method", to_string(c.evaluation.golden)}};
    write_text_file(dir / files::kGenerations, render_jsonl(header, rows));
    return g;
}

// The six compared methods, in report order.
inline std::vector<Method> comparison_methods(const RunConfig& c, const Generations& gen,
                                              const std::vector<Example>& support) {
    std::vector<Method> methods;
    methods.push_back({"Lever-LM", [&gen](const QuerySample& q, std::size_t s) {
                           auto it = gen.by_query.find({q.id, s});
                           if (it == gen.by_query.end()) {
                               throw IndexError("no generated sequence for " + std::to_string(s) + " shots");
                           }
                           return it->second;
                       }});
    const std::uint64_t seed = c.evaluation.seed;
    for (BaselineKind kind : {BaselineKind::RS, BaselineKind::SIIR, BaselineKind::SITR, BaselineKind::STTR}) {
        methods.push_back({to_string(kind), [kind, seed, &support](const QuerySample& q, std::size_t s) {
                               const auto draw = derive_seed(seed, {0x7273ULL, static_cast<std::uint64_t>(q.id), s});
                               return retrieve(kind, q, support, s, draw);
                           }});
    }
    methods.push_back({"Golden", [&gen](const QuerySample&, std::size_t s) {
                           auto it = gen.golden.find(s);
                           if (it == gen.golden.end()) {
                               throw IndexError("no golden sequence for " + std::to_string(s) + " shots");
                           }
                           return it->second;
                       }});
    return methods;
}

inline ComparisonReport run_evaluate(const RunConfig& c, const fs::path& dir, std::size_t threads) {
    require_valid(c);
    const SynthWorld world = load_checked_world(c, dir);
    const auto support = load_checked_examples(c, dir, files::kSupport, Stage::Dataset);
    const auto test = load_checked_examples(c, dir, files::kTestExamples, Stage::World);
    const Generations gen = load_checked_generations(c, dir);
    const ExampleIndex support_index(support);
    const auto& shots = c.evaluation.shots;

    ComparisonReport report;
    report.shots = shots;
    report.config_digest = stage_digest(c, Stage::Evaluate);
    report.world_digest = config_world_digest(c);
    const std::vector<std::uint64_t> seeds{c.world.seed, c.construction.seed, c.training.seed, c.evaluation.seed};
    for (const Method& m : comparison_methods(c, gen, support)) {
        EvalReport r;
        try {
            r = evaluate_method(world, m, test, support_index, shots, threads);
        } catch (const Error& e) {
            r = EvalReport{};
            r.method = m.name;
            r.error = e.what();
        }
        r.seeds = seeds;
        r.config_digest = report.config_digest;
        report.methods.push_back(std::move(r));
    }
    for (std::size_t s : shots) {
        if (s < 2) continue;
        std::vector<GeneratedSequence> generated;
        for (const auto& q : test) {
            auto it = gen.by_query.find({q.id, s});
            if (it != gen.by_query.end()) generated.push_back({&q, it->second});
        }
        OrderAblation a = random_order_ablation(world, generated, support_index, derive_seed(c.evaluation.seed, {0x6f7264ULL, s}));
        a.method = "Lever-LM";
        a.shots = s;
        report.ablations.push_back(a);
    }
    emit_report(report, dir / files::kReport, ReportFormat::Structured);
    return report;
}

inline void run_report(const fs::path& dir) {
    const ComparisonReport r = load_report(require_artifact(dir, files::kReport));
    emit_report(r, dir / files::kReportMarkdown, ReportFormat::Markdown);
}

inline bool any_method_failed(const ComparisonReport& r) {
    for (const auto& m : r.methods) {
        if (m.error) return true;
    }
    return false;
}

// Finite-difference check of the configured model on a small synthetic batch
// drawn from the configured world.
inline GradCheckResult run_gradcheck(const RunConfig& c, std::size_t coordinates = 200, double step = 1e-5,
                                     std::size_t support_size = 12, std::size_t batch_size = 4) {
    const SynthWorld world = world_generate(c.world);
    const std::uint64_t seed = derive_seed(c.training.seed, {0x6772616463ULL});
    const auto pool = sample_examples(world, support_size + batch_size, seed);
    const std::vector<Example> support(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(support_size));
    const std::vector<Example> queries(pool.begin() + static_cast<std::ptrdiff_t>(support_size), pool.end());
    const LeverLM model = init_lever_lm(c.model, Vocabulary(support), world.feature_dim(), init_seed(c));
    const std::size_t K = std::min(c.construction.shots, std::min(c.model.max_shots, support_size));
    Rng rng(seed);
    std::vector<TrainingSample> batch;
    for (const auto& q : queries) {
        TrainingSample s{&q, {}};
        for (std::size_t i : rng.sample_without_replacement(support_size, K)) s.icds.push_back(support[i].id);
        batch.push_back(std::move(s));
    }
    return gradient_check(model, batch, coordinates, step, seed);
}

}  // namespace leverlm::pipeline
