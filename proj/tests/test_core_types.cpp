#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <set>

#include "leverlm/core_types.hpp"
#include "leverlm/rng.hpp"
#include "test_util.hpp"

using namespace leverlm;

namespace {

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Example random_example(Rng& rng, ExampleId id, std::size_t f) {
    Example e;
    e.id = id;
    // Mix magnitudes so the rendering has to handle tiny, huge and negative values.
    for (std::size_t i = 0; i < f; ++i) {
        e.img_feat.push_back(rng.normal() * std::pow(10.0, static_cast<double>(rng.uniform_index(40)) - 20.0));
    }
    if (rng.uniform() < 0.7) {
        std::vector<double> t;
        for (std::size_t i = 0; i < f; ++i) t.push_back(rng.uniform() - 0.5);
        e.txt_feat = t;
    }
    e.label = {static_cast<int>(rng.uniform_index(4))};
    if (rng.uniform() < 0.2) e.label.push_back(static_cast<int>(rng.uniform_index(4)));
    e.task = static_cast<int>(rng.uniform_index(8));
    return e;
}

}  // namespace

TEST(Serialization, EmptyListRoundTrips) {
    TempDir dir;
    const auto path = dir.path() / "empty.jsonl";
    serialize_examples({}, 3, path);
    EXPECT_TRUE(deserialize_examples(path).empty());
}

TEST(Serialization, SingleExampleRoundTrips) {
    TempDir dir;
    const auto path = dir.path() / "one.jsonl";
    Example e;
    e.id = 4;
    e.img_feat = {0.5, -1.25};
    e.label = {1};
    serialize_examples(std::vector<Example>{e}, 2, path);
    const auto back = deserialize_examples(path);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0], e);
    EXPECT_FALSE(back[0].txt_feat.has_value());
}

TEST(Serialization, ThousandRandomExamplesRoundTripBitEqual) {
    TempDir dir;
    const auto path = dir.path() / "many.jsonl";
    Rng rng(2024);
    std::vector<Example> set;
    for (ExampleId i = 0; i < 1000; ++i) set.push_back(random_example(rng, i * 3 - 50, 6));
    serialize_examples(set, 6, path);
    const auto back = deserialize_examples(path);
    ASSERT_EQ(back.size(), set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        EXPECT_EQ(back[i].id, set[i].id);
        EXPECT_TRUE(bit_equal(back[i].img_feat, set[i].img_feat)) << "example " << i;
        ASSERT_EQ(back[i].txt_feat.has_value(), set[i].txt_feat.has_value());
        if (set[i].txt_feat) {
            EXPECT_TRUE(bit_equal(*back[i].txt_feat, *set[i].txt_feat));
        }
        EXPECT_EQ(back[i].label, set[i].label);
        EXPECT_EQ(back[i].task, set[i].task);
    }
}

TEST(Serialization, ExtremeDoublesSurvive) {
    TempDir dir;
    const auto path = dir.path() / "extreme.jsonl";
    Example e;
    e.id = 0;
    e.img_feat = {std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::max(), -0.0, 0.1,
                  1.0 / 3.0, std::nextafter(1.0, 2.0)};
    e.label = {0};
    serialize_examples(std::vector<Example>{e}, e.img_feat.size(), path);
    EXPECT_TRUE(bit_equal(deserialize_examples(path)[0].img_feat, e.img_feat));
}

TEST(Serialization, MalformedLineNamesTheLineNumber) {
    TempDir dir;
    const auto path = dir.path() / "bad.jsonl";
    Example e;
    e.img_feat = {1.0};
    e.label = {0};
    std::string text = render_examples(std::vector<Example>{e}, 1);
    text += "{\"id\": 1, \"img\": [1.0], \"label\": [0], \"task\": \n";
    write_text_file(path, text);
    try {
        deserialize_examples(path);
        FAIL() << "expected a parse error";
    } catch (const ParseError& err) {
        EXPECT_EQ(err.line(), 3u);
        EXPECT_NE(std::string(err.what()).find(":3:"), std::string::npos);
    }
}

TEST(Serialization, RecordMissingFieldIsParseErrorWithLine) {
    TempDir dir;
    const auto path = dir.path() / "bad2.jsonl";
    std::string text = render_examples({}, 2);
    text += "{\"id\": 1, \"label\": [0], \"task\": 0}\n";
    write_text_file(path, text);
    try {
        deserialize_examples(path);
        FAIL() << "expected a parse error";
    } catch (const ParseError& err) {
        EXPECT_EQ(err.line(), 2u);
    }
}

TEST(Serialization, DimensionMismatchIsSchemaError) {
    TempDir dir;
    const auto path = dir.path() / "dims.jsonl";
    Example e;
    e.img_feat = {1.0, 2.0, 3.0};
    e.label = {0};
    write_text_file(path, render_examples(std::vector<Example>{e}, 2));
    EXPECT_THROW(deserialize_examples(path), SchemaError);

    e.img_feat = {1.0, 2.0};
    e.txt_feat = std::vector<double>{1.0};
    write_text_file(path, render_examples(std::vector<Example>{e}, 2));
    EXPECT_THROW(deserialize_examples(path), SchemaError);
}

TEST(Serialization, DuplicateIdIsSchemaError) {
    TempDir dir;
    const auto path = dir.path() / "dup.jsonl";
    Example e;
    e.img_feat = {1.0};
    e.label = {0};
    write_text_file(path, render_examples(std::vector<Example>{e, e}, 1));
    EXPECT_THROW(deserialize_examples(path), SchemaError);
}

TEST(Serialization, UnknownVersionFailsLoudly) {
    TempDir dir;
    const auto path = dir.path() / "v2.jsonl";
    std::string text = render_examples({}, 1);
    const auto pos = text.find("\"version\":1");
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, std::strlen("\"version\":1"), "\"version\":2");
    write_text_file(path, text);
    EXPECT_THROW(deserialize_examples(path), SchemaError);
}

TEST(Serialization, WrongFormatTagIsRejected) {
    TempDir dir;
    const auto path = dir.path() / "records.jsonl";
    serialize_records({}, path);
    EXPECT_THROW(deserialize_examples(path), SchemaError);
}

TEST(Serialization, MissingFileIsIoError) {
    EXPECT_THROW(deserialize_examples("/nonexistent/dir/file.jsonl"), IoError);
}

TEST(Serialization, ConstructionRecordsRoundTrip) {
    TempDir dir;
    const auto path = dir.path() / "dm.jsonl";
    std::vector<ConstructionRecord> records{
        {3, {{{5, 7}, -0.125}, {{7, 5}, -0.5}}},
        {9, {{{1, 2}, 0.1}, {{2, 1}, std::nextafter(0.1, 0.0)}}},
    };
    const json prov = {{"config_digest", "abc"}};
    serialize_records(records, path, prov);
    const RecordsFile back = deserialize_records_file(path);
    EXPECT_EQ(back.records, records);
    EXPECT_EQ(back.provenance, prov);
}

TEST(Serialization, ProvenanceIsKept) {
    TempDir dir;
    const auto path = dir.path() / "p.jsonl";
    serialize_examples({}, 4, path, json{{"stage", "worldgen"}});
    const ExamplesFile f = deserialize_examples_file(path);
    EXPECT_EQ(f.feature_dim, 4u);
    EXPECT_EQ(f.provenance.at("stage"), "worldgen");
}

TEST(ExampleIndexTest, LooksUpAndRejectsUnknownIds) {
    std::vector<Example> set(3);
    for (int i = 0; i < 3; ++i) set[static_cast<std::size_t>(i)].id = 10 + i;
    const ExampleIndex index(set);
    EXPECT_EQ(index.at(11).id, 11);
    EXPECT_TRUE(index.contains(12));
    EXPECT_FALSE(index.contains(13));
    EXPECT_THROW(index.at(13), IndexError);
    const std::vector<ExampleId> ids{12, 10};
    const auto resolved = index.resolve(ids);
    EXPECT_EQ(resolved[0]->id, 12);
    EXPECT_EQ(resolved[1]->id, 10);
}

TEST(ExampleIndexTest, DuplicateIdsAreRejected) {
    std::vector<Example> set(2);
    EXPECT_THROW(ExampleIndex{set}, SchemaError);
}

TEST(ArgmaxLowest, TiesGoToTheLowestIndex) {
    const std::vector<double> v{0.2, 0.4, 0.4, 0.1};
    EXPECT_EQ(argmax_lowest(v), 1);
    const std::vector<double> flat{1.0, 1.0, 1.0};
    EXPECT_EQ(argmax_lowest(flat), 0);
}

TEST(RngTest, SameSeedSameStream) {
    Rng a(77), b(77), c(78);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs |= x != c.next_u64();
    }
    EXPECT_TRUE(differs);
}

TEST(RngTest, UniformIndexStaysInRangeAndCoversIt) {
    Rng rng(5);
    std::map<std::uint64_t, int> counts;
    for (int i = 0; i < 7000; ++i) {
        const auto v = rng.uniform_index(7);
        ASSERT_LT(v, 7u);
        ++counts[v];
    }
    for (std::uint64_t v = 0; v < 7; ++v) {
        EXPECT_NEAR(counts[v], 1000, 5 * std::sqrt(1000.0 * 6.0 / 7.0));
    }
}

TEST(RngTest, NormalHasUnitMoments) {
    Rng rng(11);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.015);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(RngTest, SampleWithoutReplacementIsDistinct) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto picks = rng.sample_without_replacement(20, 8);
        ASSERT_EQ(picks.size(), 8u);
        const std::set<std::size_t> unique(picks.begin(), picks.end());
        EXPECT_EQ(unique.size(), 8u);
        for (auto p : picks) EXPECT_LT(p, 20u);
    }
}

TEST(RngTest, DeriveSeedSeparatesTags) {
    EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
    EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
    EXPECT_NE(derive_seed(1, {2}), derive_seed(2, {2}));
}

TEST(Digest, IsStableAndKeyOrderIndependent) {
    const json a = json::parse(R"({"b": 1, "a": [1.5, 2]})");
    const json b = json::parse(R"({"a": [1.5, 2], "b": 1})");
    EXPECT_EQ(digest_of(a), digest_of(b));
    EXPECT_EQ(digest_of(a).size(), 16u);
    EXPECT_NE(digest_of(a), digest_of(json::parse(R"({"a": [1.5, 2], "b": 2})")));
}
