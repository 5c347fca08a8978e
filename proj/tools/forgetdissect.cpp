// forgetdissect command-line interface.
//
//   forgetdissect [--config FILE] [--out DIR] [--seed N] [--force] [--parallel-arms N] <command>
//
// Commands: gen-data, train-base, train-incr, dissect, report, run.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "forgetdissect/error.hpp"
#include "forgetdissect/pipeline.hpp"
#include "forgetdissect/store.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
namespace fd = forgetdissect;
namespace pl = forgetdissect::pipeline;
using json = nlohmann::json;

namespace {

struct GlobalFlags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool force = false;
    std::optional<int> parallel_arms;
};

pl::PipelineConfig effective_config(const GlobalFlags& flags) {
    auto config = flags.config.empty() ? pl::PipelineConfig{} : pl::load_config(flags.config);
    if (!flags.out.empty()) config.output_root = flags.out;
    if (flags.seed) config.seed = *flags.seed;
    if (flags.force) config.force = true;
    if (flags.parallel_arms) config.parallel_arms = *flags.parallel_arms;
    config.output_root = pl::output_root(config).string();
    config.validate();
    return config;
}

void print_result(const std::string& stage, const pl::StageResult& r) {
    std::cout << stage << ": " << r.dir.string() << (r.skipped ? " (verified, reused)" : "") << "\n";
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

void report_error(const fd::Error& e, const std::string& command, const std::string& out_root) {
    const json record = {{"error", fd::to_string(e.kind())},
                         {"exit_code", fd::exit_code(e.kind())},
                         {"command", command},
                         {"message", e.what()}};
    std::cerr << record.dump() << "\n";
    if (!out_root.empty() && fs::is_directory(out_root)) {
        try {
            fd::store::write_json_atomic(fs::path(out_root) / "error.json", record);
        } catch (const std::exception&) {
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dissect catastrophic forgetting in a small captioning model and compare freezing policies"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalFlags flags;
    app.add_option("--config", flags.config, "pipeline config (JSON)");
    app.add_option("--out", flags.out, "output root (default: $FORGETDISSECT_OUT, then ./runs)");
    app.add_option("--seed", flags.seed, "master seed");
    app.add_flag("--force", flags.force, "recompute stages whose outputs already exist");
    app.add_option("--parallel-arms", flags.parallel_arms, "policy arms trained concurrently")
        ->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset and its splits");
    auto* base = app.add_subcommand("train-base", "train the original model on the base classes");

    auto* incr = app.add_subcommand("train-incr", "run class-incremental training for policy arms");
    std::vector<std::string> policies;
    incr->add_option("--policy", policies,
                     "arm label, e.g. fine-tune or decoder-component-freeze:linear (repeatable; default: all)");

    auto* dis = app.add_subcommand("dissect", "locate fragile encoder blocks between two models");
    std::string old_model, new_model;
    std::optional<int> k_per_class;
    dis->add_option("--old", old_model, "old model snapshot (default: base model)");
    dis->add_option("--new", new_model, "new model snapshot (default: first fine-tune step)");
    dis->add_option("--k-per-class", k_per_class, "sample-set images per base class")->check(CLI::PositiveNumber);

    auto* rep = app.add_subcommand("report", "consolidate experiment records into tables and plots");
    std::vector<std::string> records;
    rep->add_option("--records", records, "experiment record directories (default: every arm under incr/)");

    auto* run = app.add_subcommand("run", "all stages in order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    std::string out_root = flags.out;
    try {
        auto config = effective_config(flags);
        out_root = config.output_root;
        if (*gen) {
            print_result("gen-data", pl::gen_data(config));
        } else if (*base) {
            print_result("train-base", pl::train_base(config));
        } else if (*incr) {
            const auto labels = policies.empty() ? pl::arm_labels(config) : policies;
            const auto results = pl::train_incremental(config, labels);
            for (std::size_t i = 0; i < results.size(); ++i) print_result("train-incr " + labels[i], results[i]);
        } else if (*dis) {
            if (!old_model.empty()) config.old_model = old_model;
            if (!new_model.empty()) config.new_model = new_model;
            if (k_per_class) config.k_per_class = *k_per_class;
            print_result("dissect", pl::run_dissect(config));
        } else if (*rep) {
            if (!records.empty()) config.records = records;
            print_result("report", pl::run_report(config));
        } else if (*run) {
            for (const auto& r : pl::run_all(config)) print_result("run", r);
        }
    } catch (const fd::Error& e) {
        report_error(e, command, out_root);
        return fd::exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "internal"}, {"exit_code", 1}, {"command", command}, {"message", e.what()}}.dump()
                  << "\n";
        return 1;
    }
    return 0;
}
