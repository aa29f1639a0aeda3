// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Criteria 5-8 and 10 drive the command-line tool over the default config.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "leverlm/baselines.hpp"
#include "leverlm/config.hpp"
#include "leverlm/construct.hpp"
#include "leverlm/harness.hpp"
#include "leverlm/pipeline.hpp"
#include "test_util.hpp"

using namespace leverlm;
namespace pl = leverlm::pipeline;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and bars.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr std::size_t kGradCoordinates = 200;
constexpr double kGradSeconds = 30.0;
constexpr double kBeamSeconds = 10.0;
constexpr double kOrderInvariance = 1e-10;
constexpr double kWitnessTv = 1e-6;
constexpr double kNormalization = 1e-12;
constexpr double kTableTolerance = 0.005 + 1e-9;  // half a unit in the last printed place
constexpr double kRsMargin = 0.05;
constexpr double kEndToEndSeconds = 600.0;
constexpr double kGammaOneAgreement = 0.01;
constexpr double kSortTolerance = 1e-12;
constexpr std::uint64_t kSeeds[] = {1, 2, 3};

struct Outcome {
    bool pass;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::vector<const Example*> ptrs(const std::vector<Example>& v) {
    std::vector<const Example*> out;
    for (const auto& e : v) out.push_back(&e);
    return out;
}

// ---------------------------------------------------------------------------

Outcome gradient_exactness() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string where;
    for (auto arch : {Architecture::Transformer, Architecture::LSTM}) {
        for (bool trainable : {false, true}) {
            RunConfig c;
            c.model.arch = arch;
            c.model.d_model = 16;
            c.model.layers = 2;
            c.model.adapter = true;
            c.model.encoder_trainable = trainable;
            const auto r = pl::run_gradcheck(c, kGradCoordinates, kGradStep);
            if (r.coordinates < kGradCoordinates) return {false, "too few coordinates sampled"};
            if (r.max_relative_error >= worst) {
                worst = r.max_relative_error;
                where = to_string(arch) + (trainable ? "/trainable" : "/frozen");
            }
        }
    }
    const double secs = seconds_since(t0);
    return {worst < kGradTolerance && secs < kGradSeconds,
            fmt("max relative error %.2e", worst) + " (" + where + "), " + fmt("%.1f s", secs)};
}

Outcome beam_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t exact = 0, greedy_equal = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const SynthWorld w = world_generate(8, 4, 16, 0.9, 0.85, 500 + seed);
        auto pool = sample_examples(w, 7, 900 + seed);
        const QuerySample anchor = pool.back();
        pool.pop_back();

        // Brute force: all 30 ordered pairs, best key first, ties to the smaller id tuple.
        std::vector<ExampleId> best_ids;
        ScoreKey best{};
        bool have = false;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            for (std::size_t j = 0; j < pool.size(); ++j) {
                if (i == j) continue;
                const std::vector<ExampleId> ids{pool[i].id, pool[j].id};
                const std::vector<const Example*> seq{&pool[i], &pool[j]};
                const ScoreKey k = score_sequence(w, seq, anchor, ScorerKind::Confidence);
                const bool better = !have || k.primary > best.primary ||
                                    (k.primary == best.primary &&
                                     (k.secondary > best.secondary || (k.secondary == best.secondary && ids < best_ids)));
                if (better) best = k, best_ids = ids, have = true;
            }
        }
        const auto rec = beam_build(w, anchor, pool, 2, 30, ScorerKind::Confidence);
        exact += rec.sequences.front().icds == best_ids;

        std::vector<const Example*> chain, remaining = ptrs(pool);
        std::vector<ExampleId> greedy;
        for (int step = 0; step < 2; ++step) {
            const ExampleId id = select_best(w, chain, remaining, anchor, ScorerKind::Confidence);
            auto it = std::find_if(remaining.begin(), remaining.end(), [&](const Example* e) { return e->id == id; });
            chain.push_back(*it);
            remaining.erase(it);
            greedy.push_back(id);
        }
        greedy_equal += beam_build(w, anchor, pool, 2, 1, ScorerKind::Confidence).sequences.front().icds == greedy;
    }
    const double secs = seconds_since(t0);
    return {exact == 20 && greedy_equal == 20 && secs < kBeamSeconds,
            std::to_string(exact) + "/20 brute-force matches, " + std::to_string(greedy_equal) +
                "/20 greedy matches, " + fmt("%.2f s", secs)};
}

Outcome oracle_properties() {
    // Order invariance at gamma = 1.
    const SynthWorld flat = world_generate(8, 4, 16, 0.9, 1.0, 31);
    const auto pool = sample_examples(flat, 64, 32);
    Rng rng(33);
    double invariance = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<const Example*> icds;
        for (auto i : rng.sample_without_replacement(pool.size(), 2 + rng.uniform_index(7))) icds.push_back(&pool[i]);
        auto shuffled = icds;
        rng.shuffle(shuffled);
        const auto& x = pool[rng.uniform_index(pool.size())].img_feat;
        const auto a = oracle_predict(flat, icds, x), b = oracle_predict(flat, shuffled, x);
        const auto qa = oracle_posterior(flat, icds), qb = oracle_posterior(flat, shuffled);
        for (std::size_t c = 0; c < a.size(); ++c) invariance = std::max(invariance, std::abs(a[c] - b[c]));
        for (std::size_t t = 0; t < qa.size(); ++t) invariance = std::max(invariance, std::abs(qa[t] - qb[t]));
    }

    // Witness: demonstrations on prototypes of two different tasks, swapped.
    const SynthWorld w = world_generate(4, 2, 4, 0.9, 0.85, 34);
    Example a, b;
    a.id = 1;
    a.img_feat.assign(w.prototype(0, 0).begin(), w.prototype(0, 0).end());
    a.label = {0};
    b.id = 2;
    b.img_feat.assign(w.prototype(1, 1).begin(), w.prototype(1, 1).end());
    b.label = {1};
    const std::vector<const Example*> ab{&a, &b}, ba{&b, &a};
    const auto qab = oracle_posterior(w, ab), qba = oracle_posterior(w, ba);
    double tv = 0.0;
    for (std::size_t t = 0; t < qab.size(); ++t) tv += 0.5 * std::abs(qab[t] - qba[t]);

    // Normalization of posterior and predictive.
    const SynthWorld d = world_generate(8, 4, 16, 0.9, 0.85, 35);
    const auto dpool = sample_examples(d, 64, 36);
    double norm = 0.0;
    bool nonnegative = true;
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<const Example*> icds;
        for (auto i : rng.sample_without_replacement(dpool.size(), rng.uniform_index(9))) icds.push_back(&dpool[i]);
        const auto q = oracle_posterior(d, icds);
        const auto p = oracle_predict(d, icds, dpool[static_cast<std::size_t>(trial) % dpool.size()].img_feat);
        norm = std::max(norm, std::abs(std::accumulate(q.begin(), q.end(), 0.0) - 1.0));
        norm = std::max(norm, std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0));
        for (double v : q) nonnegative &= v >= 0.0;
        for (double v : p) nonnegative &= v >= 0.0;
    }
    return {invariance <= kOrderInvariance && tv > kWitnessTv && norm <= kNormalization && nonnegative,
            fmt("gamma=1 deviation %.1e", invariance) + fmt(", witness TV %.3e", tv) +
                fmt(", normalization error %.1e", norm)};
}

Outcome aggregate_fidelity() {
    const std::vector<std::size_t> shots{1, 2, 3, 4, 6, 8};
    auto row = [&](std::vector<double> v) {
        std::map<std::size_t, double> m;
        for (std::size_t i = 0; i < shots.size(); ++i) m[shots[i]] = v[i];
        return aggregate(m, shots);
    };
    const Aggregates rs = row({73.32, 82.95, 87.72, 93.65, 95.81, 97.42});
    const Aggregates lm = row({46.66, 50.83, 51.91, 52.15, 53.29, 53.01});
    auto near = [](const std::optional<double>& got, double want) {
        return got && std::abs(*got - want) <= kTableTolerance;
    };
    const bool ok = near(rs.interp, 78.14) && near(rs.extrap, 93.65) && near(rs.all, 88.48) &&
                    near(lm.interp, 48.75) && near(lm.extrap, 52.59) && near(lm.all, 51.31);
    char buf[200];
    std::snprintf(buf, sizeof buf, "RS (%.3f, %.3f, %.3f), Lever-LM (%.3f, %.3f, %.3f)", *rs.interp, *rs.extrap,
                  *rs.all, *lm.interp, *lm.extrap, *lm.all);
    return {ok, buf};
}

Outcome baseline_contracts() {
    const SynthWorld w = world_generate(8, 4, 16, 0.9, 0.85, 41);
    const auto support = sample_examples(w, 200, 42);
    const auto queries = sample_examples(w, 20, 43, 1000);
    std::size_t checked = 0, bad = 0;
    for (auto kind : {BaselineKind::SIIR, BaselineKind::SITR, BaselineKind::STTR}) {
        for (const auto& q : queries) {
            const auto& qv = kind == BaselineKind::STTR ? *q.txt_feat : q.img_feat;
            std::map<ExampleId, double> sim;
            std::vector<double> all;
            for (const auto& e : support) {
                const auto& ev = kind == BaselineKind::SIIR ? e.img_feat : *e.txt_feat;
                double dot = 0, na = 0, nb = 0;
                for (std::size_t i = 0; i < qv.size(); ++i) dot += qv[i] * ev[i], na += qv[i] * qv[i], nb += ev[i] * ev[i];
                sim[e.id] = dot / std::sqrt(na * nb);
                all.push_back(sim[e.id]);
            }
            std::sort(all.rbegin(), all.rend());
            for (std::size_t k : {1u, 4u, 8u}) {
                const auto got = retrieve(kind, q, support, k, 0).icds;
                ++checked;
                bool ok = got.size() == k;
                std::vector<double> chosen;
                for (std::size_t i = 0; ok && i < k; ++i) {
                    chosen.push_back(sim[got[i]]);
                    if (i > 0) ok &= chosen[i - 1] <= chosen[i] + kSortTolerance;
                }
                // The chosen similarities are the top k of the full sort, most similar rightmost.
                std::sort(chosen.rbegin(), chosen.rend());
                for (std::size_t i = 0; ok && i < k; ++i) ok &= std::abs(chosen[i] - all[i]) <= kSortTolerance;
                ok &= std::abs(sim[got.back()] - all.front()) <= kSortTolerance;
                bad += !ok;
            }
        }
    }

    const auto small = sample_examples(w, 10, 44);
    std::map<ExampleId, int> counts;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        for (ExampleId id : retrieve(BaselineKind::RS, small[0], small, 2, derive_seed(45, {static_cast<std::uint64_t>(i)})).icds) {
            ++counts[id];
        }
    }
    const double p = 0.2, sd = std::sqrt(draws * p * (1 - p));
    double worst_z = 0.0;
    for (const auto& e : small) worst_z = std::max(worst_z, std::abs(counts[e.id] - draws * p) / sd);
    return {bad == 0 && worst_z <= 3.0,
            std::to_string(checked - bad) + "/" + std::to_string(checked) + " retrievals match the full sort" +
                fmt(", RS worst |z| %.2f", worst_z)};
}

// ---------------------------------------------------------------------------
// End-to-end runs through the command-line tool.

struct SeedRun {
    std::uint64_t seed;
    fs::path dir;
    double seconds;
    int exit_code;
    ComparisonReport report;
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(LEVERLM_CLI) + " " + args + " >/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

SeedRun run_seed(std::uint64_t seed, const fs::path& dir, std::size_t threads) {
    const auto t0 = std::chrono::steady_clock::now();
    const int code = run_cli("all --seed " + std::to_string(seed) + " --threads " + std::to_string(threads) + " -o " +
                             dir.string());
    SeedRun r{seed, dir, seconds_since(t0), code, {}};
    if (code == 0) r.report = load_report(dir / pl::files::kReport);
    return r;
}

const EvalReport* method(const ComparisonReport& r, const std::string& name) {
    for (const auto& m : r.methods) {
        if (m.method == name && !m.error) return &m;
    }
    return nullptr;
}

std::optional<double> accuracy_at(const ComparisonReport& r, const std::string& name, std::size_t shots) {
    const EvalReport* m = method(r, name);
    if (!m) return std::nullopt;
    for (const auto& s : m->per_shot) {
        if (s.shots == shots) return s.accuracy;
    }
    return std::nullopt;
}

// Mean over seeds of a per-run quantity; nullopt if any run lacks it.
std::optional<double> seed_mean(const std::vector<SeedRun>& runs,
                                const std::function<std::optional<double>(const SeedRun&)>& f) {
    double total = 0.0;
    for (const auto& r : runs) {
        const auto v = f(r);
        if (!v) return std::nullopt;
        total += *v;
    }
    return total / static_cast<double>(runs.size());
}

bool all_ok(const std::vector<SeedRun>& runs) {
    return std::all_of(runs.begin(), runs.end(), [](const SeedRun& r) { return r.exit_code == 0; });
}

std::string per_seed(const std::vector<SeedRun>& runs, const std::string& name, std::size_t shots) {
    std::string out;
    for (const auto& r : runs) {
        const auto v = accuracy_at(r.report, name, shots);
        out += (out.empty() ? "" : "/") + (v ? fmt("%.4f", *v) : std::string("n/a"));
    }
    return out;
}

Outcome comparative_claim(const std::vector<SeedRun>& runs) {
    if (!all_ok(runs)) return {false, "a pipeline run failed"};
    const auto lm = seed_mean(runs, [](const SeedRun& r) { return accuracy_at(r.report, "Lever-LM", 2); });
    const auto rs = seed_mean(runs, [](const SeedRun& r) { return accuracy_at(r.report, "RS", 2); });
    const auto siir = seed_mean(runs, [](const SeedRun& r) { return accuracy_at(r.report, "SIIR", 2); });
    double secs = 0.0;
    for (const auto& r : runs) secs += r.seconds;
    if (!lm || !rs || !siir) return {false, "missing 2-shot rows"};
    char buf[400];
    std::snprintf(buf, sizeof buf,
                  "2-shot mean Lever-LM %.4f (%s), RS %.4f, SIIR %.4f (%s); margin over RS %+.4f, over SIIR %+.4f; "
                  "%.0f s for 3 seeds",
                  *lm, per_seed(runs, "Lever-LM", 2).c_str(), *rs, *siir, per_seed(runs, "SIIR", 2).c_str(), *lm - *rs,
                  *lm - *siir, secs);
    return {*lm >= *rs + kRsMargin && *lm >= *siir && secs < kEndToEndSeconds, buf};
}

Outcome extrapolation(const std::vector<SeedRun>& runs) {
    if (!all_ok(runs)) return {false, "a pipeline run failed"};
    const auto lm = seed_mean(runs, [](const SeedRun& r) { return accuracy_at(r.report, "Lever-LM", 4); });
    const auto rs = seed_mean(runs, [](const SeedRun& r) { return accuracy_at(r.report, "RS", 4); });
    if (!lm || !rs) return {false, "missing 4-shot rows"};
    char buf[200];
    std::snprintf(buf, sizeof buf, "4-shot mean Lever-LM %.4f (%s), RS %.4f (%s)", *lm,
                  per_seed(runs, "Lever-LM", 4).c_str(), *rs, per_seed(runs, "RS", 4).c_str());
    return {*lm >= *rs, buf};
}

Outcome ordering(const std::vector<SeedRun>& runs) {
    if (!all_ok(runs)) return {false, "a pipeline run failed"};
    double original = 0, permuted = 0, flat_gap = 0;
    for (const auto& run : runs) {
        const OrderAblation* at2 = nullptr;
        for (const auto& a : run.report.ablations) {
            if (a.shots == 2) at2 = &a;
        }
        if (!at2) return {false, "no 2-shot ablation in the report"};
        original += at2->original_accuracy;
        permuted += at2->permuted_accuracy;

        // The same generated sequences judged by the oracle with gamma = 1.
        const RunConfig c = with_seed(RunConfig{}, run.seed);
        SynthWorld flat = pl::load_checked_world(c, run.dir);
        flat.params.gamma = 1.0;
        const auto test = pl::load_checked_examples(c, run.dir, pl::files::kTestExamples, Stage::World);
        const auto support = pl::load_checked_examples(c, run.dir, pl::files::kSupport, Stage::Dataset);
        const pl::Generations gen = pl::load_checked_generations(c, run.dir);
        std::vector<GeneratedSequence> generated;
        for (const auto& q : test) generated.push_back({&q, gen.by_query.at({q.id, 2})});
        const OrderAblation a = random_order_ablation(flat, generated, ExampleIndex(support), at2->seed);
        flat_gap = std::max(flat_gap, std::abs(a.delta));
    }
    const double n = static_cast<double>(runs.size());
    original /= n;
    permuted /= n;
    char buf[200];
    std::snprintf(buf, sizeof buf, "gamma=0.85: generated %.4f vs permuted %.4f; gamma=1: largest |delta| %.4f",
                  original, permuted, flat_gap);
    return {original >= permuted && flat_gap <= kGammaOneAgreement, buf};
}

Outcome golden_set(const std::vector<SeedRun>& runs, const SeedRun& rerun) {
    if (!all_ok(runs) || rerun.exit_code != 0) return {false, "a pipeline run failed"};
    bool rows = true, fixed = true, deterministic = true;
    for (const auto& run : runs) {
        const EvalReport* g = method(run.report, "Golden");
        rows &= g != nullptr && g->per_shot.size() == run.report.shots.size();
        const RunConfig c = with_seed(RunConfig{}, run.seed);
        const pl::Generations gen = pl::load_checked_generations(c, run.dir);
        fixed &= gen.golden.size() == run.report.shots.size();
        const auto anchors = pl::load_checked_examples(c, run.dir, pl::files::kAnchors, Stage::Dataset);
        const auto support = pl::load_checked_examples(c, run.dir, pl::files::kSupport, Stage::Dataset);
        const LeverLM model = pl::load_checked_model(c, run.dir, support);
        for (const auto& [shots, seq] : gen.golden) {
            fixed &= seq.icds.size() == shots;
            const auto again = golden_extract(model, anchors, shots, GoldenMethod::NullQuery, c.evaluation.decode);
            deterministic &= again == seq;
            deterministic &= golden_extract(model, anchors, shots, GoldenMethod::NullQuery, c.evaluation.decode) == again;
        }
    }
    const RunConfig c1 = with_seed(RunConfig{}, rerun.seed);
    deterministic &= pl::load_checked_generations(c1, runs.front().dir).golden ==
                     pl::load_checked_generations(c1, rerun.dir).golden;
    return {rows && fixed && deterministic, std::string("report rows ") + (rows ? "present" : "missing") +
                                                 ", one sequence per shot count " + (fixed ? "yes" : "no") +
                                                 ", deterministic " + (deterministic ? "yes" : "no")};
}

Outcome reproducibility(const SeedRun& a, const SeedRun& b) {
    if (a.exit_code != 0 || b.exit_code != 0) return {false, "a pipeline run failed"};
    std::vector<std::string> differing;
    for (const char* name : {pl::files::kDataset, pl::files::kCheckpoint, pl::files::kGenerations, pl::files::kReport,
                             pl::files::kReportMarkdown, pl::files::kLossHistory}) {
        if (read_text_file(a.dir / name) != read_text_file(b.dir / name)) differing.push_back(name);
    }
    std::string detail = "seed 1 with --threads 1 and --threads 4: ";
    if (differing.empty()) {
        detail += "all artifacts byte-identical";
    } else {
        detail += "differs in";
        for (const auto& d : differing) detail += " " + d;
    }
    return {differing.empty(), detail};
}

}  // namespace

int main() {
    TempDir work;
    int failed = 0;
    auto report = [&](int number, const char* name, const Outcome& o) {
        std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", number, name, o.detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    };
    auto guarded = [](const std::function<Outcome()>& f) {
        try {
            return f();
        } catch (const std::exception& e) {
            return Outcome{false, std::string("threw: ") + e.what()};
        }
    };

    report(1, "gradient exactness", guarded(gradient_exactness));
    report(2, "beam correctness", guarded(beam_correctness));
    report(3, "oracle properties", guarded(oracle_properties));
    report(4, "aggregate fidelity", guarded(aggregate_fidelity));

    std::vector<SeedRun> runs;
    for (std::uint64_t seed : kSeeds) {
        runs.push_back(run_seed(seed, work.path() / ("seed" + std::to_string(seed)), 1));
    }
    const SeedRun rerun = run_seed(kSeeds[0], work.path() / "seed1_threads4", 4);

    report(5, "end-to-end comparison", guarded([&] { return comparative_claim(runs); }));
    report(6, "extrapolation", guarded([&] { return extrapolation(runs); }));
    report(7, "ordering", guarded([&] { return ordering(runs); }));
    report(8, "golden set", guarded([&] { return golden_set(runs, rerun); }));
    report(9, "baseline contracts", guarded(baseline_contracts));
    report(10, "reproducibility", guarded([&] { return reproducibility(runs.front(), rerun); }));

    std::printf("%d of 10 criteria passed\n", 10 - failed);
    return failed == 0 ? 0 : 1;
}
