#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/lever_model.hpp"

namespace leverlm {

enum class DecodeMode { Greedy, Beam };

inline std::string to_string(DecodeMode m) { return m == DecodeMode::Greedy ? "greedy" : "beam"; }

inline DecodeMode decode_mode_from_string(const std::string& s) {
    if (s == "greedy") return DecodeMode::Greedy;
    if (s == "beam") return DecodeMode::Beam;
    throw ConfigError("unknown decode mode '" + s + "'");
}

struct DecodeConfig {
    DecodeMode mode = DecodeMode::Beam;
    std::size_t beam_width = 3;
    bool no_repeat = true;

    friend bool operator==(const DecodeConfig&, const DecodeConfig&) = default;
};

namespace detail {

struct Hypothesis {
    std::vector<int> tokens;  // emitted example tokens
    double score = 0.0;       // sum of masked log-probabilities
};

// Ranking: higher score first, then the lexicographically smaller token tuple
// (token order equals id order).
inline bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
}

// Log-probabilities of the next example token from the last position's
// logits, with specials (EOS is suppressed until K tokens exist, and decoding
// stops at K) and, under no_repeat, already emitted tokens masked to -inf.
inline std::vector<double> next_token_logprobs(const LeverLM& model, std::span<const double> last,
                                               const std::vector<int>& emitted, bool no_repeat) {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    std::vector<double> out(model.vocab.num_examples());
    for (std::size_t t = 0; t < out.size(); ++t) out[t] = last[t];
    if (no_repeat) {
        for (int t : emitted) out[static_cast<std::size_t>(t)] = neg_inf;
    }
    double mx = neg_inf;
    for (double v : out) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : out) {
        if (v != neg_inf) sum += std::exp(v - mx);
    }
    const double log_z = mx + std::log(sum);
    for (double& v : out) {
        if (v != neg_inf) v -= log_z;
    }
    return out;
}

// Decoder state after [BOS, QUERY] together with the logits at QUERY.
struct Prompt {
    IncrementalDecoder state;
    std::vector<double> logits;
};

inline Prompt start_prompt(const LeverLM& model, const QuerySample& query, QueryMode mode) {
    Prompt p{IncrementalDecoder(model), {}};
    p.state.step(embed_token(model, model.vocab.bos()));
    p.logits = p.state.step(embed_query(model, query, mode));
    return p;
}

inline Hypothesis decode_greedy(const LeverLM& model, const Prompt& prompt, std::size_t K, bool no_repeat) {
    Hypothesis h;
    IncrementalDecoder state = prompt.state;
    std::vector<double> logits = prompt.logits;
    for (std::size_t step = 0; step < K; ++step) {
        const auto lp = next_token_logprobs(model, logits, h.tokens, no_repeat);
        const int best = argmax_lowest(lp);
        h.tokens.push_back(best);
        h.score += lp[static_cast<std::size_t>(best)];
        if (step + 1 < K) logits = state.step(embed_token(model, best));
    }
    return h;
}

inline Hypothesis decode_beam(const LeverLM& model, const Prompt& prompt, std::size_t K, bool no_repeat,
                              std::size_t width) {
    struct Live {
        Hypothesis hyp;
        IncrementalDecoder state;
        std::vector<double> logits;
    };
    const double neg_inf = -std::numeric_limits<double>::infinity();
    std::vector<Live> beams{Live{Hypothesis{}, prompt.state, prompt.logits}};
    for (std::size_t step = 0; step < K; ++step) {
        // (beam index, hypothesis) pairs; states are advanced only for survivors
        std::vector<std::pair<std::size_t, Hypothesis>> expanded;
        for (std::size_t b = 0; b < beams.size(); ++b) {
            const auto lp = next_token_logprobs(model, beams[b].logits, beams[b].hyp.tokens, no_repeat);
            for (std::size_t t = 0; t < lp.size(); ++t) {
                if (lp[t] == neg_inf) continue;
                Hypothesis next = beams[b].hyp;
                next.tokens.push_back(static_cast<int>(t));
                next.score += lp[t];
                expanded.emplace_back(b, std::move(next));
            }
        }
        const std::size_t keep = std::min(width, expanded.size());
        std::partial_sort(expanded.begin(), expanded.begin() + static_cast<std::ptrdiff_t>(keep), expanded.end(),
                          [](const auto& a, const auto& b) { return ranks_before(a.second, b.second); });
        std::vector<Live> next;
        next.reserve(keep);
        for (std::size_t i = 0; i < keep; ++i) {
            Live live{std::move(expanded[i].second), beams[expanded[i].first].state, {}};
            if (step + 1 < K) live.logits = live.state.step(embed_token(model, live.hyp.tokens.back()));
            next.push_back(std::move(live));
        }
        beams = std::move(next);
    }
    return beams.front().hyp;
}

}  // namespace detail

// Decodes exactly K example ids for the query, starting from [BOS, QUERY+x'].
// Beam mode returns the better of its best hypothesis and the greedy path, so
// the beam result never scores below greedy decoding.
inline ICDSequence generate(const LeverLM& model, const QuerySample& query, std::size_t K, const DecodeConfig& cfg,
                            QueryMode mode) {
    if (K < 1) throw ConfigError("generate: K must be >= 1");
    if (K > model.vocab.num_examples()) {
        throw ConfigError("generate: K=" + std::to_string(K) + " exceeds the support size " +
                          std::to_string(model.vocab.num_examples()));
    }
    if (K + 2 > model.config.max_positions()) {
        throw LengthError("generate: K=" + std::to_string(K) + " needs more positions than the model has (" +
                          std::to_string(model.config.max_positions()) + ")");
    }
    if (cfg.mode == DecodeMode::Beam && cfg.beam_width < 1) throw ConfigError("generate: beam width must be >= 1");

    const detail::Prompt prompt = detail::start_prompt(model, query, mode);
    detail::Hypothesis best = detail::decode_greedy(model, prompt, K, cfg.no_repeat);
    if (cfg.mode == DecodeMode::Beam && cfg.beam_width > 1) {
        detail::Hypothesis beam = detail::decode_beam(model, prompt, K, cfg.no_repeat, cfg.beam_width);
        if (detail::ranks_before(beam, best)) best = std::move(beam);
    }
    ICDSequence out;
    out.score = best.score;
    for (int t : best.tokens) out.icds.push_back(model.vocab.id_of(t));
    return out;
}

inline ICDSequence generate(const LeverLM& model, const QuerySample& query, std::size_t K, const DecodeConfig& cfg) {
    return generate(model, query, K, cfg, model.config.query_mode);
}

enum class GoldenMethod { NullQuery, ModeOverAnchors };

inline std::string to_string(GoldenMethod m) { return m == GoldenMethod::NullQuery ? "null_query" : "mode_over_anchors"; }

inline GoldenMethod golden_method_from_string(const std::string& s) {
    if (s == "null_query") return GoldenMethod::NullQuery;
    if (s == "mode_over_anchors") return GoldenMethod::ModeOverAnchors;
    throw ConfigError("unknown golden method '" + s + "'");
}

// A single query-independent sequence. NullQuery decodes for an all-zero
// query; ModeOverAnchors decodes every anchor and keeps the most frequent
// sequence (ties: lexicographically smallest), scored by the mean log-score of
// the anchors that produced it.
inline ICDSequence golden_extract(const LeverLM& model, std::span<const QuerySample> anchors, std::size_t K,
                                  GoldenMethod method, const DecodeConfig& cfg) {
    if (method == GoldenMethod::NullQuery) {
        QuerySample null_query;
        null_query.id = -1;
        null_query.img_feat.assign(model.feature_dim, 0.0);
        null_query.txt_feat = std::vector<double>(model.feature_dim, 0.0);
        null_query.label = {0};
        return generate(model, null_query, K, cfg);
    }
    if (anchors.empty()) throw PreconditionError("golden_extract: no anchors");
    struct Tally {
        std::size_t count = 0;
        double score_sum = 0.0;
    };
    std::map<std::vector<ExampleId>, Tally> tally;
    for (const auto& a : anchors) {
        const auto seq = generate(model, a, K, cfg);
        auto& t = tally[seq.icds];
        ++t.count;
        t.score_sum += seq.score;
    }
    auto best = tally.begin();
    for (auto it = tally.begin(); it != tally.end(); ++it) {
        if (it->second.count > best->second.count) best = it;
    }
    return ICDSequence{best->first, best->second.score_sum / static_cast<double>(best->second.count)};
}

// First k ICDs in order. The score is reset: a prefix's score is not derivable
// from the full sequence's.
inline ICDSequence truncate_sequence(const ICDSequence& seq, std::size_t k) {
    if (k > seq.icds.size()) {
        throw PreconditionError("truncate_sequence: k=" + std::to_string(k) + " exceeds length " +
                                std::to_string(seq.icds.size()));
    }
    if (k == seq.icds.size()) return seq;
    return ICDSequence{std::vector<ExampleId>(seq.icds.begin(), seq.icds.begin() + static_cast<std::ptrdiff_t>(k)), 0.0};
}

}  // namespace leverlm
