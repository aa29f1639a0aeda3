// Command-line front end: one subcommand per pipeline stage.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "leverlm/config.hpp"
#include "leverlm/error.hpp"
#include "leverlm/parallel.hpp"
#include "leverlm/pipeline.hpp"

namespace {

using namespace leverlm;
namespace pl = leverlm::pipeline;

struct Options {
    std::string config_path;
    std::string workdir = "run";
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 0;
    std::size_t coordinates = 200;
};

// LEVERLM_THREADS sets the default for --threads; otherwise all cores.
std::size_t default_threads() {
    if (const char* env = std::getenv("LEVERLM_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return default_thread_count();
}

RunConfig resolve_config(const Options& o) {
    RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
    if (o.seed) c = with_seed(c, *o.seed);
    for (const auto& ov : o.overrides) c = apply_override(c, ov);
    return c;
}

int run_command(const std::string& command, const Options& o) {
    const RunConfig c = resolve_config(o);
    const std::size_t threads = o.threads > 0 ? o.threads : default_threads();
    const std::filesystem::path dir = o.workdir;
    if (command == "validate") {
        const auto violations = validate_config(c);
        std::cout << (violations.empty() ? "config ok\n" : describe(violations));
        std::cout << "config digest " << config_digest(c) << "\n";
        return violations.empty() ? 0 : 1;
    }
    if (command == "worldgen") {
        pl::run_worldgen(c, dir);
    } else if (command == "build-dataset") {
        pl::run_build_dataset(c, dir, threads);
    } else if (command == "train") {
        const TrainResult r = pl::run_train(c, dir, threads);
        if (!r.history.empty()) {
            std::printf("trained %zu steps, final loss %.6f\n", r.history.size(), r.history.back().loss);
        }
    } else if (command == "generate") {
        pl::run_generate(c, dir, threads);
    } else if (command == "evaluate") {
        const ComparisonReport r = pl::run_evaluate(c, dir, threads);
        for (const auto& m : r.methods) {
            if (m.error) std::fprintf(stderr, "method %s failed: %s\n", m.method.c_str(), m.error->c_str());
        }
        if (pl::any_method_failed(r)) return 2;
    } else if (command == "report") {
        pl::run_report(dir);
        std::cout << read_text_file(dir / pl::files::kReportMarkdown);
    } else if (command == "gradcheck") {
        const GradCheckResult r = pl::run_gradcheck(c, o.coordinates);
        std::printf("max relative error %.3e over %zu coordinates (worst: %s[%zu])\n", r.max_relative_error,
                    r.coordinates, r.worst_tensor.c_str(), r.worst_index);
        return r.max_relative_error < 1e-4 ? 0 : 2;
    } else if (command == "all") {
        pl::run_worldgen(c, dir);
        pl::run_build_dataset(c, dir, threads);
        pl::run_train(c, dir, threads);
        pl::run_generate(c, dir, threads);
        const ComparisonReport r = pl::run_evaluate(c, dir, threads);
        pl::run_report(dir);
        if (pl::any_method_failed(r)) return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lever-LM: learn to compose in-context demonstration sequences against a synthetic oracle"};
    app.require_subcommand(1);
    Options o;

    const std::vector<std::pair<std::string, std::string>> commands{
        {"worldgen", "generate the world and the train/test example files"},
        {"build-dataset", "split anchors/support and build the ICD-sequence dataset"},
        {"train", "train the sequence model; writes checkpoint and loss history"},
        {"generate", "generate ICD sequences for every test query and shot count"},
        {"evaluate", "compare Lever-LM, RS, SIIR, SITR, STTR and Golden; writes report.json"},
        {"report", "render report.json as markdown"},
        {"gradcheck", "finite-difference gradient check of the configured model"},
        {"validate", "validate the resolved config"},
        {"all", "run every stage in order"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("-c,--config", o.config_path, "config file (JSON); built-in defaults if omitted");
        sub->add_option("-o,--out,--workdir", o.workdir, "work directory holding the stage artifacts")
            ->capture_default_str();
        sub->add_option("--set", o.overrides, "override a scalar config value, e.g. --set world.gamma=1.0");
        sub->add_option("--seed", o.seed, "set every seed in the config");
        sub->add_option("--threads", o.threads, "worker threads (default: LEVERLM_THREADS or all cores)");
        if (name == "gradcheck") {
            sub->add_option("--coordinates", o.coordinates, "number of sampled coordinates")->capture_default_str();
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        return run_command(command, o);
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
