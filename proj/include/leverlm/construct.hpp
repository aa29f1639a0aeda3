#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/parallel.hpp"
#include "leverlm/rng.hpp"
#include "leverlm/scorer.hpp"
#include "leverlm/similarity.hpp"
#include "leverlm/synth_world.hpp"

namespace leverlm {

enum class SubSupportStrategy { Random, SimImage, SimText };

inline std::string to_string(SubSupportStrategy s) {
    switch (s) {
        case SubSupportStrategy::Random: return "random";
        case SubSupportStrategy::SimImage: return "sim_image";
        case SubSupportStrategy::SimText: return "sim_text";
    }
    return "random";
}

inline SubSupportStrategy sub_support_strategy_from_string(const std::string& s) {
    if (s == "random") return SubSupportStrategy::Random;
    if (s == "sim_image") return SubSupportStrategy::SimImage;
    if (s == "sim_text") return SubSupportStrategy::SimText;
    throw ConfigError("unknown sub-support strategy '" + s + "'");
}

struct ConstructionConfig {
    std::size_t anchors = 256;  // n
    std::size_t sub_support = 64;  // m
    SubSupportStrategy strategy = SubSupportStrategy::Random;
    std::size_t shots = 2;  // K
    std::size_t beam = 5;   // b
    ScorerKind scorer = ScorerKind::Confidence;
    std::uint64_t seed = 1;

    friend bool operator==(const ConstructionConfig&, const ConstructionConfig&) = default;
};

struct AnchorSplit {
    std::vector<QuerySample> anchors;
    std::vector<Example> support;
};

// Uniform seeded choice of n anchors; the support set is the complement.
// Both halves keep the input's id order.
inline AnchorSplit split_anchor_set(std::span<const Example> pool, std::size_t n, std::uint64_t seed) {
    if (n >= pool.size()) {
        throw ConfigError("anchor count " + std::to_string(n) + " must be smaller than the pool size " +
                          std::to_string(pool.size()));
    }
    Rng rng(derive_seed(seed, {0x616e6368ULL}));
    const auto picked = rng.sample_without_replacement(pool.size(), n);
    std::vector<bool> is_anchor(pool.size(), false);
    for (std::size_t i : picked) {
        is_anchor[i] = true;
    }
    AnchorSplit out;
    out.anchors.reserve(n);
    out.support.reserve(pool.size() - n);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        (is_anchor[i] ? out.anchors : out.support).push_back(pool[i]);
    }
    return out;
}

namespace detail {

// Indices of the m highest similarities; ties prefer the lowest id.
inline std::vector<std::size_t> top_m_by_similarity(std::span<const double> sims, std::span<const Example> set,
                                                    std::size_t m) {
    std::vector<std::size_t> order(sims.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    auto better = [&](std::size_t a, std::size_t b) {
        if (sims[a] != sims[b]) return sims[a] > sims[b];
        return set[a].id < set[b].id;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(), better);
    order.resize(m);
    return order;
}

}  // namespace detail

// Per-anchor candidate pool D_S^a of size m.
inline std::vector<Example> sample_sub_support(const QuerySample& anchor, std::span<const Example> support,
                                               SubSupportStrategy strategy, std::size_t m, std::uint64_t seed) {
    if (m > support.size()) {
        throw ConfigError("sub-support size " + std::to_string(m) + " exceeds support size " +
                          std::to_string(support.size()));
    }
    std::vector<std::size_t> chosen;
    if (strategy == SubSupportStrategy::Random) {
        Rng rng(seed);
        chosen = rng.sample_without_replacement(support.size(), m);
    } else {
        const bool text = strategy == SubSupportStrategy::SimText;
        if (text && !anchor.txt_feat) {
            throw CapabilityError("sim_text sub-support: anchor " + std::to_string(anchor.id) + " has no txt_feat");
        }
        std::vector<double> sims(support.size());
        for (std::size_t i = 0; i < support.size(); ++i) {
            if (text) {
                if (!support[i].txt_feat) {
                    throw CapabilityError("sim_text sub-support: example " + std::to_string(support[i].id) +
                                          " has no txt_feat");
                }
                sims[i] = cosine(*anchor.txt_feat, *support[i].txt_feat);
            } else {
                sims[i] = cosine(anchor.img_feat, support[i].img_feat);
            }
        }
        chosen = detail::top_m_by_similarity(sims, support, m);
    }
    std::vector<Example> out;
    out.reserve(m);
    for (std::size_t i : chosen) {
        out.push_back(support[i]);
    }
    return out;
}

// Beam search over ordered, repeat-free sequences of length K drawn from the
// sub-support. Every extension is scored from scratch; the b best survive
// each step (ties: lexicographically smallest id tuple). With b = 1 this is
// the greedy select_best chain.
inline ConstructionRecord beam_build(const SynthWorld& world, const QuerySample& anchor,
                                     std::span<const Example> sub_support, std::size_t K, std::size_t b,
                                     ScorerKind kind) {
    if (K < 1 || b < 1) {
        throw ConfigError("beam_build needs K >= 1 and b >= 1");
    }
    if (K > sub_support.size()) {
        throw ConfigError("shots K=" + std::to_string(K) + " exceed sub-support size m=" +
                          std::to_string(sub_support.size()));
    }
    struct Beam {
        std::vector<std::size_t> picks;  // indices into sub_support
        std::vector<ExampleId> ids;
        ScoreKey key;
    };
    auto ranks_before = [](const Beam& a, const Beam& b2) {
        if (a.key != b2.key) return a.key > b2.key;
        return a.ids < b2.ids;
    };

    std::vector<Beam> beams(1);
    std::vector<const Example*> scratch;
    for (std::size_t step = 0; step < K; ++step) {
        std::vector<Beam> expanded;
        expanded.reserve(beams.size() * sub_support.size());
        for (const Beam& beam : beams) {
            std::vector<bool> used(sub_support.size(), false);
            for (std::size_t p : beam.picks) {
                used[p] = true;
            }
            for (std::size_t c = 0; c < sub_support.size(); ++c) {
                if (used[c]) continue;
                Beam next = beam;
                next.picks.push_back(c);
                next.ids.push_back(sub_support[c].id);
                scratch.clear();
                for (std::size_t p : next.picks) {
                    scratch.push_back(&sub_support[p]);
                }
                next.key = score_sequence(world, scratch, anchor, kind);
                expanded.push_back(std::move(next));
            }
        }
        const std::size_t keep = std::min(b, expanded.size());
        std::partial_sort(expanded.begin(), expanded.begin() + static_cast<std::ptrdiff_t>(keep), expanded.end(),
                          ranks_before);
        expanded.resize(keep);
        beams = std::move(expanded);
    }

    ConstructionRecord record;
    record.anchor_id = anchor.id;
    for (Beam& beam : beams) {
        record.sequences.push_back(ICDSequence{std::move(beam.ids), beam.key.primary});
    }
    return record;
}

// One record per anchor, ordered by anchor id. Each anchor's sub-support is
// seeded from (run seed, anchor id), so the result does not depend on the
// processing order or thread count.
inline std::vector<ConstructionRecord> build_dataset(const SynthWorld& world, std::span<const QuerySample> anchors,
                                                     std::span<const Example> support, const ConstructionConfig& cfg,
                                                     std::size_t threads = 1) {
    if (cfg.shots > cfg.sub_support) {
        throw ConfigError("shots K=" + std::to_string(cfg.shots) + " exceed sub_support m=" +
                          std::to_string(cfg.sub_support));
    }
    std::vector<const QuerySample*> ordered;
    ordered.reserve(anchors.size());
    for (const auto& a : anchors) {
        ordered.push_back(&a);
    }
    std::sort(ordered.begin(), ordered.end(), [](const QuerySample* x, const QuerySample* y) { return x->id < y->id; });

    std::vector<ConstructionRecord> records(ordered.size());
    parallel_for(ordered.size(), threads, [&](std::size_t i) {
        const QuerySample& anchor = *ordered[i];
        const auto seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(anchor.id)});
        const auto pool = sample_sub_support(anchor, support, cfg.strategy, cfg.sub_support, seed);
        records[i] = beam_build(world, anchor, pool, cfg.shots, cfg.beam, cfg.scorer);
    });
    return records;
}

}  // namespace leverlm
