#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/io.hpp"
#include "leverlm/rng.hpp"

namespace leverlm {

struct WorldParams {
    int tasks = 8;
    int classes = 4;
    int feature_dim = 16;
    double sigma = 0.9;
    double gamma = 0.85;
    std::uint64_t seed = 1;

    friend bool operator==(const WorldParams&, const WorldParams&) = default;
};

// Stand-in for the frozen vision-language model: a Gaussian task mixture.
// Each (task, class) has a prototype; demonstrations update a posterior over
// tasks, with later demonstrations weighted more when gamma < 1.
struct SynthWorld {
    WorldParams params;
    std::vector<double> mu;         // tasks x classes x feature_dim
    std::vector<double> label_emb;  // classes x feature_dim

    int tasks() const { return params.tasks; }
    int classes() const { return params.classes; }
    std::size_t feature_dim() const { return static_cast<std::size_t>(params.feature_dim); }

    std::span<const double> prototype(int task, int cls) const {
        const std::size_t f = feature_dim();
        return {mu.data() + (static_cast<std::size_t>(task) * classes() + cls) * f, f};
    }

    std::span<const double> label_embedding(int cls) const {
        const std::size_t f = feature_dim();
        return {label_emb.data() + static_cast<std::size_t>(cls) * f, f};
    }

    friend bool operator==(const SynthWorld&, const SynthWorld&) = default;
};

inline SynthWorld world_generate(const WorldParams& p) {
    if (p.tasks < 1 || p.classes < 1 || p.feature_dim < 1) {
        throw ConfigError("world dimensions must be positive (tasks, classes, feature_dim)");
    }
    if (!(p.sigma >= 0.0) || !std::isfinite(p.sigma)) {
        throw ConfigError("world sigma must be finite and non-negative");
    }
    if (!(p.gamma > 0.0 && p.gamma <= 1.0)) {
        throw ConfigError("world gamma must lie in (0, 1]");
    }
    SynthWorld w;
    w.params = p;
    Rng rng(derive_seed(p.seed, {0x776f726cULL}));
    w.mu.resize(static_cast<std::size_t>(p.tasks) * p.classes * p.feature_dim);
    for (double& v : w.mu) {
        v = rng.normal();
    }
    w.label_emb.resize(static_cast<std::size_t>(p.classes) * p.feature_dim);
    for (double& v : w.label_emb) {
        v = rng.normal();
    }
    return w;
}

inline SynthWorld world_generate(int tasks, int classes, int feature_dim, double sigma, double gamma,
                                 std::uint64_t seed) {
    return world_generate(WorldParams{tasks, classes, feature_dim, sigma, gamma, seed});
}

// Task and class uniform; img_feat = prototype + sigma * N(0, I); txt_feat is
// the class's label embedding; ids run 0..count-1 (plus id_offset).
inline std::vector<Example> sample_examples(const SynthWorld& world, std::size_t count, std::uint64_t seed,
                                            ExampleId id_offset = 0) {
    Rng rng(derive_seed(seed, {0x73616d70ULL}));
    const std::size_t f = world.feature_dim();
    std::vector<Example> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Example e;
        e.id = id_offset + static_cast<ExampleId>(i);
        e.task = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(world.tasks())));
        const int cls = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(world.classes())));
        e.label = {cls};
        const auto proto = world.prototype(e.task, cls);
        e.img_feat.resize(f);
        for (std::size_t k = 0; k < f; ++k) {
            e.img_feat[k] = proto[k] + world.params.sigma * rng.normal();
        }
        const auto emb = world.label_embedding(cls);
        e.txt_feat = std::vector<double>(emb.begin(), emb.end());
        out.push_back(std::move(e));
    }
    return out;
}

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline void require_positive_sigma(const SynthWorld& world) {
    if (!(world.params.sigma > 0.0)) {
        throw ConfigError("oracle evaluation needs sigma > 0");
    }
}

// Normalizes log-weights in place into probabilities.
inline void softmax_in_place(std::vector<double>& logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double& v : logits) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : logits) {
        v /= sum;
    }
}

}  // namespace detail

// Posterior over tasks given demonstrations. Demonstration k (1-based) of K
// is weighted gamma^(K-k); each contributes -|x_k - mu[t][y]|^2 / (2 sigma^2)
// per label token. Gaussian normalizing constants cancel and are dropped.
inline std::vector<double> oracle_posterior(const SynthWorld& world, std::span<const Example* const> icds) {
    const int tasks = world.tasks();
    if (icds.empty() || tasks == 1) {
        return std::vector<double>(static_cast<std::size_t>(tasks), 1.0 / tasks);
    }
    std::vector<double> logq(static_cast<std::size_t>(tasks), 0.0);
    detail::require_positive_sigma(world);
    const double inv_two_var = 1.0 / (2.0 * world.params.sigma * world.params.sigma);
    const std::size_t count = icds.size();
    for (std::size_t k = 0; k < count; ++k) {
        const double weight = std::pow(world.params.gamma, static_cast<double>(count - 1 - k));
        const Example& d = *icds[k];
        for (int t = 0; t < tasks; ++t) {
            double ll = 0.0;
            for (int y : d.label) {
                ll -= detail::squared_distance(d.img_feat, world.prototype(t, y)) * inv_two_var;
            }
            logq[static_cast<std::size_t>(t)] += weight * ll;
        }
    }
    detail::softmax_in_place(logq);
    return logq;
}

// P(c | demonstrations, x') = sum_t q(t) softmax_c(-|x' - mu[t][c]|^2 / (2 sigma^2)).
inline std::vector<double> oracle_predict(const SynthWorld& world, std::span<const Example* const> icds,
                                          std::span<const double> query_img_feat) {
    const int classes = world.classes();
    std::vector<double> out(static_cast<std::size_t>(classes), 0.0);
    if (classes == 1) {
        out[0] = 1.0;
        return out;
    }
    detail::require_positive_sigma(world);
    const std::vector<double> q = oracle_posterior(world, icds);
    const double inv_two_var = 1.0 / (2.0 * world.params.sigma * world.params.sigma);
    std::vector<double> row(static_cast<std::size_t>(classes));
    for (int t = 0; t < world.tasks(); ++t) {
        for (int c = 0; c < classes; ++c) {
            row[static_cast<std::size_t>(c)] =
                -detail::squared_distance(query_img_feat, world.prototype(t, c)) * inv_two_var;
        }
        detail::softmax_in_place(row);
        for (int c = 0; c < classes; ++c) {
            out[static_cast<std::size_t>(c)] += q[static_cast<std::size_t>(t)] * row[static_cast<std::size_t>(c)];
        }
    }
    return out;
}

inline int oracle_accuracy(const SynthWorld& world, std::span<const Example* const> icds, const QuerySample& query) {
    if (query.label.empty()) {
        throw PreconditionError("oracle_accuracy: query has no ground-truth label");
    }
    const auto p = oracle_predict(world, icds, query.img_feat);
    return argmax_lowest(p) == query.label.front() ? 1 : 0;
}

// ---------------------------------------------------------------------------
// World file

inline constexpr const char* kWorldFormat = "leverlm.world";

inline json world_params_json(const WorldParams& p) {
    return {{"tasks", p.tasks},   {"classes", p.classes}, {"feature_dim", p.feature_dim},
            {"sigma", p.sigma},   {"gamma", p.gamma},     {"seed", p.seed}};
}

inline WorldParams world_params_from_json(const json& j) {
    WorldParams p;
    p.tasks = j.at("tasks").get<int>();
    p.classes = j.at("classes").get<int>();
    p.feature_dim = j.at("feature_dim").get<int>();
    p.sigma = j.at("sigma").get<double>();
    p.gamma = j.at("gamma").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
}

inline std::string world_digest(const SynthWorld& w) { return digest_of(world_params_json(w.params)); }

inline json world_to_json(const SynthWorld& w) {
    return {{"format", kWorldFormat},       {"version", kFormatVersion}, {"params", world_params_json(w.params)},
            {"digest", world_digest(w)},    {"mu", w.mu},                {"label_emb", w.label_emb}};
}

inline void save_world(const SynthWorld& w, const std::filesystem::path& path) {
    write_text_file(path, world_to_json(w).dump(1) + "\n");
}

// Loads a world file and checks it against regeneration from its own
// parameters; any difference in mu or label_emb is a schema error.
inline SynthWorld load_world(const std::filesystem::path& path) {
    const json j = parse_json_document(path);
    expect_format(j, kWorldFormat, path.string());
    SynthWorld w;
    try {
        w.params = world_params_from_json(j.at("params"));
        w.mu = j.at("mu").get<std::vector<double>>();
        w.label_emb = j.at("label_emb").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    const SynthWorld regenerated = world_generate(w.params);
    if (regenerated.mu != w.mu || regenerated.label_emb != w.label_emb) {
        throw SchemaError(path.string() + ": stored tensors differ from regeneration with the stored seed");
    }
    return w;
}

}  // namespace leverlm
