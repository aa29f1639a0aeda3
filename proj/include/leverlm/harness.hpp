#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/io.hpp"
#include "leverlm/parallel.hpp"
#include "leverlm/rng.hpp"
#include "leverlm/scorer.hpp"
#include "leverlm/synth_world.hpp"

namespace leverlm {

inline const std::vector<std::size_t> kDefaultShots{1, 2, 3, 4, 6, 8};

// A demonstration-selection method: query and shot count to a sequence.
struct Method {
    std::string name;
    std::function<ICDSequence(const QuerySample&, std::size_t)> compose;
};

class MethodError : public Error {
public:
    using Error::Error;
};

struct ShotMetrics {
    std::size_t shots = 0;
    double accuracy = 0.0;
    double log_confidence = 0.0;

    friend bool operator==(const ShotMetrics&, const ShotMetrics&) = default;
};

// Means over the first two shots (interpolation), the remaining shots
// (extrapolation) and all shots. Empty groups are absent.
struct Aggregates {
    std::optional<double> interp;
    std::optional<double> extrap;
    std::optional<double> all;

    friend bool operator==(const Aggregates&, const Aggregates&) = default;
};

struct EvalReport {
    std::string method;
    std::vector<ShotMetrics> per_shot;
    Aggregates accuracy;
    Aggregates log_confidence;
    std::vector<std::uint64_t> seeds;
    std::string config_digest;
    std::optional<std::string> error;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline Aggregates aggregate(const std::map<std::size_t, double>& per_shot, std::span<const std::size_t> shot_list) {
    std::vector<double> values;
    for (std::size_t s : shot_list) {
        auto it = per_shot.find(s);
        if (it == per_shot.end()) throw SchemaError("aggregate: no value for shot " + std::to_string(s));
        values.push_back(it->second);
    }
    auto mean = [&](std::size_t begin, std::size_t end) -> std::optional<double> {
        if (begin >= end) return std::nullopt;
        double sum = 0.0;
        for (std::size_t i = begin; i < end; ++i) sum += values[i];
        return sum / static_cast<double>(end - begin);
    };
    const std::size_t split = std::min<std::size_t>(2, values.size());
    return Aggregates{mean(0, split), mean(split, values.size()), mean(0, values.size())};
}

inline void recompute_aggregates(EvalReport& r, std::span<const std::size_t> shot_list) {
    std::map<std::size_t, double> acc, conf;
    for (const auto& m : r.per_shot) {
        acc[m.shots] = m.accuracy;
        conf[m.shots] = m.log_confidence;
    }
    r.accuracy = aggregate(acc, shot_list);
    r.log_confidence = aggregate(conf, shot_list);
}

// Mean oracle accuracy and log-confidence over queries, per shot count.
inline EvalReport evaluate_method(const SynthWorld& world, const Method& method, std::span<const QuerySample> queries,
                                  const ExampleIndex& support, std::span<const std::size_t> shot_list,
                                  std::size_t threads = 1) {
    if (shot_list.empty()) throw ConfigError("evaluate_method: empty shot list");
    EvalReport report;
    report.method = method.name;
    for (std::size_t s : shot_list) {
        std::vector<int> acc(queries.size(), 0);
        std::vector<double> conf(queries.size(), 0.0);
        parallel_for(queries.size(), threads, [&](std::size_t i) {
            const QuerySample& q = queries[i];
            ICDSequence seq;
            std::vector<const Example*> icds;
            try {
                seq = method.compose(q, s);
                icds = support.resolve(seq.icds);
            } catch (const Error& e) {
                throw MethodError("method " + method.name + ", query " + std::to_string(q.id) + ", shots " +
                                  std::to_string(s) + ": " + e.what());
            }
            acc[i] = oracle_accuracy(world, icds, q);
            conf[i] = confidence(world, icds, q);
        });
        ShotMetrics m;
        m.shots = s;
        for (std::size_t i = 0; i < queries.size(); ++i) {
            m.accuracy += acc[i];
            m.log_confidence += conf[i];
        }
        if (!queries.empty()) {
            m.accuracy /= static_cast<double>(queries.size());
            m.log_confidence /= static_cast<double>(queries.size());
        }
        report.per_shot.push_back(m);
    }
    recompute_aggregates(report, shot_list);
    return report;
}

// Original order versus a seeded uniform permutation of the same ICDs.
struct OrderAblation {
    std::string method;
    std::size_t shots = 0;
    double original_accuracy = 0.0;
    double permuted_accuracy = 0.0;
    double delta = 0.0;  // original - permuted
    double original_log_confidence = 0.0;
    double permuted_log_confidence = 0.0;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;
    std::uint64_t seed = 0;

    friend bool operator==(const OrderAblation&, const OrderAblation&) = default;
};

struct GeneratedSequence {
    const QuerySample* query = nullptr;
    ICDSequence sequence;
};

inline std::vector<ExampleId> permuted_order(const ICDSequence& seq, ExampleId query_id, std::uint64_t seed) {
    std::vector<ExampleId> ids = seq.icds;
    Rng rng(derive_seed(seed, {0x7065726dULL, static_cast<std::uint64_t>(query_id)}));
    rng.shuffle(ids);
    return ids;
}

inline OrderAblation random_order_ablation(const SynthWorld& world, std::span<const GeneratedSequence> generated,
                                           const ExampleIndex& support, std::uint64_t seed) {
    OrderAblation out;
    out.seed = seed;
    for (const auto& g : generated) {
        if (g.sequence.icds.size() < 2) {
            ++out.skipped;
            continue;
        }
        out.shots = std::max(out.shots, g.sequence.icds.size());
        const auto original = support.resolve(g.sequence.icds);
        const auto shuffled_ids = permuted_order(g.sequence, g.query->id, seed);
        const auto shuffled = support.resolve(shuffled_ids);
        out.original_accuracy += oracle_accuracy(world, original, *g.query);
        out.permuted_accuracy += oracle_accuracy(world, shuffled, *g.query);
        out.original_log_confidence += confidence(world, original, *g.query);
        out.permuted_log_confidence += confidence(world, shuffled, *g.query);
        ++out.evaluated;
    }
    if (out.evaluated > 0) {
        const double n = static_cast<double>(out.evaluated);
        out.original_accuracy /= n;
        out.permuted_accuracy /= n;
        out.original_log_confidence /= n;
        out.permuted_log_confidence /= n;
    }
    out.delta = out.original_accuracy - out.permuted_accuracy;
    return out;
}

// ---------------------------------------------------------------------------
// Report files

inline constexpr const char* kReportFormat = "leverlm.report";

// Several method reports evaluated on the same queries, plus ablations.
struct ComparisonReport {
    std::vector<std::size_t> shots;
    std::vector<EvalReport> methods;
    std::vector<OrderAblation> ablations;
    std::string config_digest;
    std::string world_digest;

    friend bool operator==(const ComparisonReport&, const ComparisonReport&) = default;
};

namespace detail {

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> optional_from(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

inline json to_json(const Aggregates& a) {
    return {{"interp", optional_json(a.interp)}, {"extrap", optional_json(a.extrap)}, {"all", optional_json(a.all)}};
}

inline Aggregates aggregates_from_json(const json& j) {
    return {optional_from(j.at("interp")), optional_from(j.at("extrap")), optional_from(j.at("all"))};
}

}  // namespace detail

inline json to_json(const EvalReport& r) {
    json shots = json::array();
    for (const auto& m : r.per_shot) {
        shots.push_back({{"shots", m.shots}, {"accuracy", m.accuracy}, {"log_confidence", m.log_confidence}});
    }
    json j = {{"method", r.method},
              {"per_shot", shots},
              {"aggregates",
               {{"accuracy", detail::to_json(r.accuracy)}, {"log_confidence", detail::to_json(r.log_confidence)}}},
              {"seeds", r.seeds},
              {"config_digest", r.config_digest}};
    j["error"] = r.error ? json(*r.error) : json(nullptr);
    return j;
}

inline EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    r.method = j.at("method").get<std::string>();
    for (const auto& m : j.at("per_shot")) {
        r.per_shot.push_back(ShotMetrics{m.at("shots").get<std::size_t>(), m.at("accuracy").get<double>(),
                                         m.at("log_confidence").get<double>()});
    }
    r.accuracy = detail::aggregates_from_json(j.at("aggregates").at("accuracy"));
    r.log_confidence = detail::aggregates_from_json(j.at("aggregates").at("log_confidence"));
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.config_digest = j.at("config_digest").get<std::string>();
    if (j.contains("error") && !j["error"].is_null()) r.error = j["error"].get<std::string>();
    return r;
}

inline json to_json(const OrderAblation& a) {
    return {{"method", a.method},
            {"shots", a.shots},
            {"original_accuracy", a.original_accuracy},
            {"permuted_accuracy", a.permuted_accuracy},
            {"delta", a.delta},
            {"original_log_confidence", a.original_log_confidence},
            {"permuted_log_confidence", a.permuted_log_confidence},
            {"evaluated", a.evaluated},
            {"skipped", a.skipped},
            {"seed", a.seed}};
}

inline OrderAblation order_ablation_from_json(const json& j) {
    OrderAblation a;
    a.method = j.at("method").get<std::string>();
    a.shots = j.at("shots").get<std::size_t>();
    a.original_accuracy = j.at("original_accuracy").get<double>();
    a.permuted_accuracy = j.at("permuted_accuracy").get<double>();
    a.delta = j.at("delta").get<double>();
    a.original_log_confidence = j.at("original_log_confidence").get<double>();
    a.permuted_log_confidence = j.at("permuted_log_confidence").get<double>();
    a.evaluated = j.at("evaluated").get<std::size_t>();
    a.skipped = j.at("skipped").get<std::size_t>();
    a.seed = j.at("seed").get<std::uint64_t>();
    return a;
}

inline json to_json(const ComparisonReport& r) {
    json methods = json::array();
    for (const auto& m : r.methods) methods.push_back(to_json(m));
    json ablations = json::array();
    for (const auto& a : r.ablations) ablations.push_back(to_json(a));
    return {{"format", kReportFormat},
            {"version", kFormatVersion},
            {"shots", r.shots},
            {"config_digest", r.config_digest},
            {"world_digest", r.world_digest},
            {"methods", methods},
            {"ablations", ablations}};
}

inline constexpr double kAggregateTolerance = 1e-9;

// Parses a report and checks every stored aggregate against recomputation.
inline ComparisonReport comparison_report_from_json(const json& j, const std::string& where) {
    expect_format(j, kReportFormat, where);
    ComparisonReport r;
    try {
        r.shots = j.at("shots").get<std::vector<std::size_t>>();
        r.config_digest = j.at("config_digest").get<std::string>();
        r.world_digest = j.at("world_digest").get<std::string>();
        for (const auto& m : j.at("methods")) r.methods.push_back(eval_report_from_json(m));
        for (const auto& a : j.at("ablations")) r.ablations.push_back(order_ablation_from_json(a));
    } catch (const json::exception& e) {
        throw SchemaError(where + ": " + e.what());
    }
    for (const auto& m : r.methods) {
        if (m.error) continue;
        EvalReport check = m;
        recompute_aggregates(check, r.shots);
        auto close = [](const std::optional<double>& a, const std::optional<double>& b) {
            if (a.has_value() != b.has_value()) return false;
            return !a || std::abs(*a - *b) <= kAggregateTolerance;
        };
        for (auto [stored, fresh] : {std::pair{&m.accuracy, &check.accuracy}, std::pair{&m.log_confidence, &check.log_confidence}}) {
            if (!close(stored->interp, fresh->interp) || !close(stored->extrap, fresh->extrap) ||
                !close(stored->all, fresh->all)) {
                throw SchemaError(where + ": aggregates of method " + m.method + " disagree with its per-shot values");
            }
        }
    }
    return r;
}

enum class ReportFormat { Structured, Markdown };

namespace detail {

inline std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string cell(const std::optional<double>& v, double scale) { return v ? fixed2(*v * scale) : "-"; }

inline std::vector<std::string> aggregate_labels(std::span<const std::size_t> shots) {
    auto range = [&](std::size_t a, std::size_t b) {
        return "Avg:" + std::to_string(shots[a]) + "~" + std::to_string(shots[b]);
    };
    const std::size_t n = shots.size();
    const std::size_t split = std::min<std::size_t>(2, n);
    return {split > 0 ? range(0, split - 1) : "Avg:-", split < n ? range(split, n - 1) : "Avg:-",
            n > 0 ? range(0, n - 1) : "Avg:-"};
}

inline std::string metric_table(const ComparisonReport& r, bool accuracy) {
    const auto labels = aggregate_labels(r.shots);
    std::string out = "| Method |";
    std::string rule = "|---|";
    for (std::size_t s : r.shots) {
        out += " " + std::to_string(s) + " |";
        rule += "---:|";
    }
    for (const auto& l : labels) {
        out += " " + l + " |";
        rule += "---:|";
    }
    out += "\n" + rule + "\n";
    const double scale = accuracy ? 100.0 : 1.0;
    for (const auto& m : r.methods) {
        out += "| " + m.method + " |";
        if (m.error) {
            for (std::size_t i = 0; i < r.shots.size() + 3; ++i) out += " error |";
            out += "\n";
            continue;
        }
        for (const auto& s : m.per_shot) out += " " + fixed2((accuracy ? s.accuracy : s.log_confidence) * scale) + " |";
        const Aggregates& a = accuracy ? m.accuracy : m.log_confidence;
        out += " " + cell(a.interp, scale) + " | " + cell(a.extrap, scale) + " | " + cell(a.all, scale) + " |\n";
    }
    return out;
}

}  // namespace detail

inline std::string render_markdown(const ComparisonReport& r) {
    std::string out = "# ICD configuration report\n\n";
    out += "config digest `" + r.config_digest + "`, world digest `" + r.world_digest + "`\n\n";
    out += "## Accuracy (%)\n\n" + detail::metric_table(r, true) + "\n";
    out += "## Mean log-confidence\n\n" + detail::metric_table(r, false);
    if (!r.ablations.empty()) {
        out += "\n## Random-order ablation\n\n";
        out += "| Method | Shots | Original (%) | Permuted (%) | Delta | Evaluated | Skipped | Seed |\n";
        out += "|---|---:|---:|---:|---:|---:|---:|---:|\n";
        for (const auto& a : r.ablations) {
            out += "| " + a.method + " | " + std::to_string(a.shots) + " | " + detail::fixed2(a.original_accuracy * 100) +
                   " | " + detail::fixed2(a.permuted_accuracy * 100) + " | " + detail::fixed2(a.delta * 100) + " | " +
                   std::to_string(a.evaluated) + " | " + std::to_string(a.skipped) + " | " + std::to_string(a.seed) +
                   " |\n";
        }
    }
    std::vector<std::string> errors;
    for (const auto& m : r.methods) {
        if (m.error) errors.push_back("- " + m.method + ": " + *m.error);
    }
    if (!errors.empty()) {
        out += "\n## Errors\n\n";
        for (const auto& e : errors) out += e + "\n";
    }
    return out;
}

inline void emit_report(const ComparisonReport& r, const std::filesystem::path& path, ReportFormat format) {
    if (format == ReportFormat::Structured) {
        write_text_file(path, to_json(r).dump(1) + "\n");
    } else {
        write_text_file(path, render_markdown(r));
    }
}

inline ComparisonReport load_report(const std::filesystem::path& path) {
    return comparison_report_from_json(parse_json_document(path), path.string());
}

}  // namespace leverlm
