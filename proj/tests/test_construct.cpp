#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include "leverlm/construct.hpp"

using namespace leverlm;

namespace {

struct Instance {
    SynthWorld world;
    std::vector<Example> pool;
    QuerySample anchor;
};

Instance make_instance(std::uint64_t seed, std::size_t m) {
    Instance in{world_generate(8, 4, 16, 0.9, 0.85, seed), {}, {}};
    auto examples = sample_examples(in.world, m + 1, seed + 1000);
    in.anchor = examples.back();
    examples.pop_back();
    in.pool = std::move(examples);
    return in;
}

struct Scored {
    std::vector<ExampleId> ids;
    ScoreKey key;
};

bool ranks_before(const Scored& a, const Scored& b) {
    if (a.key.primary != b.key.primary) return a.key.primary > b.key.primary;
    if (a.key.secondary != b.key.secondary) return a.key.secondary > b.key.secondary;
    return a.ids < b.ids;
}

// All ordered, repeat-free pairs scored from scratch and ranked.
std::vector<Scored> brute_force_pairs(const Instance& in, ScorerKind kind) {
    std::vector<Scored> all;
    for (std::size_t i = 0; i < in.pool.size(); ++i) {
        for (std::size_t j = 0; j < in.pool.size(); ++j) {
            if (i == j) continue;
            const std::vector<const Example*> seq{&in.pool[i], &in.pool[j]};
            all.push_back({{in.pool[i].id, in.pool[j].id}, score_sequence(in.world, seq, in.anchor, kind)});
        }
    }
    std::sort(all.begin(), all.end(), ranks_before);
    return all;
}

double plain_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace

TEST(SplitAnchorSet, PartitionsThePoolInIdOrder) {
    const SynthWorld w = world_generate(4, 3, 5, 0.9, 0.85, 1);
    const auto pool = sample_examples(w, 100, 2);
    const auto split = split_anchor_set(pool, 30, 9);
    ASSERT_EQ(split.anchors.size(), 30u);
    ASSERT_EQ(split.support.size(), 70u);
    std::set<ExampleId> ids;
    for (const auto& e : split.anchors) ids.insert(e.id);
    for (const auto& e : split.support) ids.insert(e.id);
    EXPECT_EQ(ids.size(), 100u);
    auto by_id = [](const Example& a, const Example& b) { return a.id < b.id; };
    EXPECT_TRUE(std::is_sorted(split.anchors.begin(), split.anchors.end(), by_id));
    EXPECT_TRUE(std::is_sorted(split.support.begin(), split.support.end(), by_id));
}

TEST(SplitAnchorSet, SeededAndSeedSensitive) {
    const SynthWorld w = world_generate(4, 3, 5, 0.9, 0.85, 1);
    const auto pool = sample_examples(w, 100, 2);
    EXPECT_EQ(split_anchor_set(pool, 30, 9).anchors, split_anchor_set(pool, 30, 9).anchors);
    EXPECT_NE(split_anchor_set(pool, 30, 9).anchors, split_anchor_set(pool, 30, 10).anchors);
}

TEST(SplitAnchorSet, AnchorCountMustLeaveASupportSet) {
    const SynthWorld w = world_generate(4, 3, 5, 0.9, 0.85, 1);
    const auto pool = sample_examples(w, 10, 2);
    EXPECT_THROW(split_anchor_set(pool, 10, 1), ConfigError);
    EXPECT_NO_THROW(split_anchor_set(pool, 0, 1));
}

TEST(SubSupport, SimImageMatchesAFullSort) {
    const SynthWorld w = world_generate(8, 4, 16, 0.9, 0.85, 3);
    const auto support = sample_examples(w, 200, 4);
    const auto queries = sample_examples(w, 10, 5, 1000);
    for (const auto& q : queries) {
        std::vector<std::pair<double, ExampleId>> ranked;
        for (const auto& e : support) ranked.emplace_back(-plain_cosine(q.img_feat, e.img_feat), e.id);
        std::sort(ranked.begin(), ranked.end());
        const auto got = sample_sub_support(q, support, SubSupportStrategy::SimImage, 32, 0);
        ASSERT_EQ(got.size(), 32u);
        for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i].id, ranked[i].second) << "rank " << i;
    }
}

TEST(SubSupport, SimTextUsesTextFeatures) {
    const SynthWorld w = world_generate(8, 4, 16, 0.9, 0.85, 3);
    const auto support = sample_examples(w, 50, 4);
    const auto q = sample_examples(w, 1, 6, 500)[0];
    const auto got = sample_sub_support(q, support, SubSupportStrategy::SimText, 5, 0);
    // Text features are label embeddings, so the closest entries share the query's label.
    for (const auto& e : got) EXPECT_EQ(e.label, q.label);
}

TEST(SubSupport, SimTextWithoutTextFeaturesIsCapabilityError) {
    const SynthWorld w = world_generate(2, 2, 4, 0.9, 0.85, 3);
    auto support = sample_examples(w, 10, 4);
    auto q = support.back();
    support.pop_back();
    q.txt_feat.reset();
    EXPECT_THROW(sample_sub_support(q, support, SubSupportStrategy::SimText, 3, 0), CapabilityError);
}

TEST(SubSupport, RandomIsDistinctSeededAndSized) {
    const SynthWorld w = world_generate(2, 2, 4, 0.9, 0.85, 3);
    const auto support = sample_examples(w, 40, 4);
    const auto q = sample_examples(w, 1, 5, 100)[0];
    const auto a = sample_sub_support(q, support, SubSupportStrategy::Random, 12, 77);
    ASSERT_EQ(a.size(), 12u);
    std::set<ExampleId> ids;
    for (const auto& e : a) ids.insert(e.id);
    EXPECT_EQ(ids.size(), 12u);
    EXPECT_EQ(a, sample_sub_support(q, support, SubSupportStrategy::Random, 12, 77));
    EXPECT_NE(a, sample_sub_support(q, support, SubSupportStrategy::Random, 12, 78));
    EXPECT_THROW(sample_sub_support(q, support, SubSupportStrategy::Random, 41, 77), ConfigError);
}

TEST(BeamBuild, FullWidthEqualsBruteForceOverAllPairs) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Instance in = make_instance(seed, 6);
        const auto expected = brute_force_pairs(in, ScorerKind::Confidence);
        ASSERT_EQ(expected.size(), 30u);
        const auto rec = beam_build(in.world, in.anchor, in.pool, 2, 30, ScorerKind::Confidence);
        ASSERT_EQ(rec.sequences.size(), 30u);
        EXPECT_EQ(rec.anchor_id, in.anchor.id);
        for (std::size_t i = 0; i < 30; ++i) {
            EXPECT_EQ(rec.sequences[i].icds, expected[i].ids) << "seed " << seed << " rank " << i;
            EXPECT_EQ(rec.sequences[i].score, expected[i].key.primary);
        }
    }
}

TEST(BeamBuild, AccuracyScorerMatchesBruteForce) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Instance in = make_instance(seed, 6);
        const auto expected = brute_force_pairs(in, ScorerKind::Accuracy);
        const auto rec = beam_build(in.world, in.anchor, in.pool, 2, 30, ScorerKind::Accuracy);
        EXPECT_EQ(rec.sequences.front().icds, expected.front().ids);
        for (const auto& s : rec.sequences) EXPECT_TRUE(s.score == 0.0 || s.score == 1.0);
    }
}

TEST(BeamBuild, WidthOneIsTheGreedyChain) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Instance in = make_instance(seed, 8);
        std::vector<const Example*> remaining, chain;
        for (const auto& e : in.pool) remaining.push_back(&e);
        std::vector<ExampleId> greedy;
        for (int step = 0; step < 3; ++step) {
            const ExampleId id = select_best(in.world, chain, remaining, in.anchor, ScorerKind::Confidence);
            auto it = std::find_if(remaining.begin(), remaining.end(), [&](const Example* e) { return e->id == id; });
            chain.push_back(*it);
            remaining.erase(it);
            greedy.push_back(id);
        }
        const auto rec = beam_build(in.world, in.anchor, in.pool, 3, 1, ScorerKind::Confidence);
        ASSERT_EQ(rec.sequences.size(), 1u);
        EXPECT_EQ(rec.sequences[0].icds, greedy) << "seed " << seed;
    }
}

TEST(BeamBuild, ExhaustiveWidthAtThreeShotsIsOptimal) {
    const Instance in = make_instance(41, 5);
    Scored best{{}, {-INFINITY, 0.0}};
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            for (std::size_t k = 0; k < 5; ++k) {
                if (i == j || j == k || i == k) continue;
                const std::vector<const Example*> seq{&in.pool[i], &in.pool[j], &in.pool[k]};
                Scored s{{in.pool[i].id, in.pool[j].id, in.pool[k].id},
                         score_sequence(in.world, seq, in.anchor, ScorerKind::Confidence)};
                if (best.ids.empty() || ranks_before(s, best)) best = s;
            }
        }
    }
    const auto rec = beam_build(in.world, in.anchor, in.pool, 3, 60, ScorerKind::Confidence);
    EXPECT_EQ(rec.sequences.size(), 60u);
    EXPECT_EQ(rec.sequences[0].icds, best.ids);
}

TEST(BeamBuild, WiderBeamNeverLowersTheTopScoreAtTwoShots) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Instance in = make_instance(seed, 10);
        double previous = -INFINITY;
        for (std::size_t b : {1, 2, 3, 5, 10}) {
            const double top = beam_build(in.world, in.anchor, in.pool, 2, b, ScorerKind::Confidence).sequences[0].score;
            EXPECT_GE(top, previous) << "seed " << seed << " b " << b;
            previous = top;
        }
    }
}

TEST(BeamBuild, StoredScoresReScoreFromIds) {
    const Instance in = make_instance(5, 10);
    const ExampleIndex index(in.pool);
    const auto rec = beam_build(in.world, in.anchor, in.pool, 3, 5, ScorerKind::Confidence);
    ASSERT_EQ(rec.sequences.size(), 5u);
    for (const auto& s : rec.sequences) {
        EXPECT_FALSE(has_duplicates(s.icds));
        EXPECT_EQ(s.score, confidence(in.world, index.resolve(s.icds), in.anchor));
    }
    for (std::size_t i = 1; i < rec.sequences.size(); ++i) EXPECT_GE(rec.sequences[i - 1].score, rec.sequences[i].score);
}

TEST(BeamBuild, ReturnsAllSequencesWhenFewerThanTheWidthExist) {
    const Instance in = make_instance(6, 3);
    EXPECT_EQ(beam_build(in.world, in.anchor, in.pool, 2, 10, ScorerKind::Confidence).sequences.size(), 6u);
}

TEST(BeamBuild, InvalidShapesAreConfigErrors) {
    const Instance in = make_instance(7, 3);
    EXPECT_THROW(beam_build(in.world, in.anchor, in.pool, 4, 2, ScorerKind::Confidence), ConfigError);
    EXPECT_THROW(beam_build(in.world, in.anchor, in.pool, 0, 2, ScorerKind::Confidence), ConfigError);
    EXPECT_THROW(beam_build(in.world, in.anchor, in.pool, 2, 0, ScorerKind::Confidence), ConfigError);
}

TEST(BuildDataset, IndependentOfThreadCountAndAnchorOrder) {
    const SynthWorld w = world_generate(8, 4, 16, 0.9, 0.85, 12);
    const auto pool = sample_examples(w, 120, 13);
    const auto split = split_anchor_set(pool, 20, 14);
    ConstructionConfig cfg;
    cfg.anchors = 20;
    cfg.sub_support = 12;
    cfg.beam = 3;
    cfg.seed = 15;
    const auto one = build_dataset(w, split.anchors, split.support, cfg, 1);
    EXPECT_EQ(one, build_dataset(w, split.anchors, split.support, cfg, 4));
    auto reversed = split.anchors;
    std::reverse(reversed.begin(), reversed.end());
    EXPECT_EQ(one, build_dataset(w, reversed, split.support, cfg, 3));
    ASSERT_EQ(one.size(), 20u);
    for (std::size_t i = 0; i < one.size(); ++i) {
        EXPECT_EQ(one[i].anchor_id, split.anchors[i].id);
        EXPECT_EQ(one[i].sequences.size(), 3u);
    }
    cfg.seed = 16;
    EXPECT_NE(one, build_dataset(w, split.anchors, split.support, cfg, 1));
}

TEST(BuildDataset, ShotsAboveSubSupportIsConfigError) {
    const SynthWorld w = world_generate(2, 2, 4, 0.9, 0.85, 12);
    const auto pool = sample_examples(w, 20, 13);
    const auto split = split_anchor_set(pool, 5, 14);
    ConstructionConfig cfg;
    cfg.sub_support = 2;
    cfg.shots = 3;
    EXPECT_THROW(build_dataset(w, split.anchors, split.support, cfg), ConfigError);
}

TEST(SubSupportStrategyNames, RoundTrip) {
    for (auto s : {SubSupportStrategy::Random, SubSupportStrategy::SimImage, SubSupportStrategy::SimText}) {
        EXPECT_EQ(sub_support_strategy_from_string(to_string(s)), s);
    }
    EXPECT_THROW(sub_support_strategy_from_string("sim_audio"), ConfigError);
}
