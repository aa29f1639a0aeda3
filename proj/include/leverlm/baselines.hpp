#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/rng.hpp"
#include "leverlm/similarity.hpp"

namespace leverlm {

// RS: random sampling. SIIR / SITR / STTR: similarity retrieval comparing
// query image to support image, query image to support text, and query text
// to support text.
enum class BaselineKind { RS, SIIR, SITR, STTR };

inline std::string to_string(BaselineKind k) {
    switch (k) {
        case BaselineKind::RS: return "RS";
        case BaselineKind::SIIR: return "SIIR";
        case BaselineKind::SITR: return "SITR";
        case BaselineKind::STTR: return "STTR";
    }
    return "RS";
}

inline BaselineKind baseline_kind_from_string(const std::string& s) {
    if (s == "RS") return BaselineKind::RS;
    if (s == "SIIR") return BaselineKind::SIIR;
    if (s == "SITR") return BaselineKind::SITR;
    if (s == "STTR") return BaselineKind::STTR;
    throw ConfigError("unknown baseline '" + s + "'");
}

// Similarity between the query and one support example for a similarity kind.
inline double baseline_similarity(BaselineKind kind, const QuerySample& query, const Example& d) {
    auto need_text = [](const Example& e, const char* who) -> const std::vector<double>& {
        if (!e.txt_feat) {
            throw CapabilityError(std::string(who) + " " + std::to_string(e.id) + " has no txt_feat");
        }
        return *e.txt_feat;
    };
    switch (kind) {
        case BaselineKind::SIIR: return cosine(query.img_feat, d.img_feat);
        case BaselineKind::SITR: return cosine(query.img_feat, need_text(d, "support example"));
        case BaselineKind::STTR: return cosine(need_text(query, "query"), need_text(d, "support example"));
        case BaselineKind::RS: break;
    }
    throw PreconditionError("baseline_similarity: RS has no similarity");
}

// k demonstrations for the query. RS keeps the draw order. Similarity kinds
// take the k most similar (ties: lowest id) and order them by ascending
// similarity, so the most similar example is rightmost; equal similarities
// place the lower id first.
inline ICDSequence retrieve(BaselineKind kind, const QuerySample& query, std::span<const Example> support,
                            std::size_t k, std::uint64_t seed) {
    if (k > support.size()) {
        throw ConfigError("retrieve: k=" + std::to_string(k) + " exceeds support size " +
                          std::to_string(support.size()));
    }
    ICDSequence out;
    if (kind == BaselineKind::RS) {
        Rng rng(seed);
        for (std::size_t i : rng.sample_without_replacement(support.size(), k)) out.icds.push_back(support[i].id);
        return out;
    }
    std::vector<std::size_t> order(support.size());
    std::vector<double> sims(support.size());
    for (std::size_t i = 0; i < support.size(); ++i) {
        order[i] = i;
        sims[i] = baseline_similarity(kind, query, support[i]);
    }
    auto more_similar = [&](std::size_t a, std::size_t b) {
        if (sims[a] != sims[b]) return sims[a] > sims[b];
        return support[a].id < support[b].id;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), more_similar);
    order.resize(k);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (sims[a] != sims[b]) return sims[a] < sims[b];
        return support[a].id < support[b].id;
    });
    for (std::size_t i : order) out.icds.push_back(support[i].id);
    if (!order.empty()) out.score = sims[order.back()];
    return out;
}

}  // namespace leverlm
