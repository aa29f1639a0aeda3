#pragma once

#include <cmath>
#include <compare>
#include <span>
#include <string>
#include <vector>

#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/synth_world.hpp"

namespace leverlm {

enum class ScorerKind { Confidence, Accuracy };

inline std::string to_string(ScorerKind k) { return k == ScorerKind::Confidence ? "confidence" : "accuracy"; }

inline ScorerKind scorer_kind_from_string(const std::string& s) {
    if (s == "confidence") return ScorerKind::Confidence;
    if (s == "accuracy") return ScorerKind::Accuracy;
    throw ConfigError("unknown scorer kind '" + s + "'");
}

// Log of the product over label tokens of P(y_j | demonstrations, x). Tokens
// are conditionally independent given the task mixture, so every factor is
// read from the same predictive vector.
inline double confidence(const SynthWorld& world, std::span<const Example* const> icds, const QuerySample& anchor) {
    if (anchor.label.empty()) {
        return 0.0;
    }
    const auto p = oracle_predict(world, icds, anchor.img_feat);
    double total = 0.0;
    for (int tok : anchor.label) {
        total += std::log(p[static_cast<std::size_t>(tok)]);
    }
    return total;
}

// Sequence quality under a scorer kind. For Accuracy the 0/1 value is the
// primary key and confidence breaks ties; for Confidence the secondary key is
// unused (zero).
struct ScoreKey {
    double primary = 0.0;
    double secondary = 0.0;

    friend auto operator<=>(const ScoreKey&, const ScoreKey&) = default;
};

inline ScoreKey score_sequence(const SynthWorld& world, std::span<const Example* const> icds,
                               const QuerySample& anchor, ScorerKind kind) {
    if (kind == ScorerKind::Confidence) {
        return {confidence(world, icds, anchor), 0.0};
    }
    return {static_cast<double>(oracle_accuracy(world, icds, anchor)), confidence(world, icds, anchor)};
}

inline double score_value(const SynthWorld& world, std::span<const Example* const> icds, const QuerySample& anchor,
                          ScorerKind kind) {
    return score_sequence(world, icds, anchor, kind).primary;
}

namespace detail {

inline void require_not_in(std::span<const Example* const> partial, const Example& candidate) {
    for (const Example* e : partial) {
        if (e->id == candidate.id) {
            throw PreconditionError("candidate " + std::to_string(candidate.id) + " already in the sequence");
        }
    }
}

inline std::vector<const Example*> appended(std::span<const Example* const> partial, const Example& candidate) {
    std::vector<const Example*> out(partial.begin(), partial.end());
    out.push_back(&candidate);
    return out;
}

}  // namespace detail

// I(partial + candidate) - I(partial); the candidate goes at the end.
inline double gain(const SynthWorld& world, std::span<const Example* const> partial, const Example& candidate,
                   const QuerySample& anchor, ScorerKind kind) {
    detail::require_not_in(partial, candidate);
    const auto extended = detail::appended(partial, candidate);
    return score_value(world, extended, anchor, kind) - score_value(world, partial, anchor, kind);
}

// Candidate with the largest gain. The baseline term is shared by all
// candidates, so extended-sequence keys are compared directly. Ties: for
// Accuracy the confidence decides, then the lowest id.
inline ExampleId select_best(const SynthWorld& world, std::span<const Example* const> partial,
                             std::span<const Example* const> candidates, const QuerySample& anchor, ScorerKind kind) {
    if (candidates.empty()) {
        throw PreconditionError("select_best: no candidates");
    }
    const Example* best = nullptr;
    ScoreKey best_key;
    for (const Example* c : candidates) {
        detail::require_not_in(partial, *c);
        const auto extended = detail::appended(partial, *c);
        const ScoreKey key = score_sequence(world, extended, anchor, kind);
        if (best == nullptr || key > best_key || (key == best_key && c->id < best->id)) {
            best = c;
            best_key = key;
        }
    }
    return best->id;
}

}  // namespace leverlm
