#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>

#include "doctest.h"
#include "forgetdissect/error.hpp"
#include "forgetdissect/pipeline.hpp"
#include "forgetdissect/plots.hpp"
#include "forgetdissect/store.hpp"
#include "test_util.hpp"

using namespace forgetdissect;
using namespace forgetdissect::pipeline;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config(const fs::path& root) {
    PipelineConfig c;
    c.seed = 3;
    c.output_root = root.string();
    c.dataset = testutil::small_dataset_config(10);
    c.split_ratios = {0.6, 0.2, 0.2};
    c.train_base = {12, 0.1, 8};
    c.train_incremental = {1, 0.02, 8};
    c.schedule = synthdata::ClassSchedule{{0, 1, 2, 3}, {4, 5, 6, 7}};
    c.pda.laplace_n = 20;
    c.pda.num_samples = 2;
    c.k_per_class = 1;
    c.policies = {"fine-tune", "critical-freeze"};
    c.decoder_components = {"linear"};
    return c;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::Io;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config round-trips through json and rejects unknown keys") {
    const auto c = tiny_config("/tmp/x");
    const auto back = PipelineConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(kind_of([] { PipelineConfig::from_json({{"sede", 1}}); }) == ErrorKind::Config);
    CHECK(kind_of([] { PipelineConfig::from_json({{"pda", {{"seed", 4}}}}); }) == ErrorKind::Config);
    CHECK(kind_of([] { PipelineConfig::from_json({{"split_ratios", {0.5, 0.5, 0.5}}}); }) == ErrorKind::Config);
    CHECK(kind_of([] { PipelineConfig::from_json({{"policies", {"thaw"}}}); }) == ErrorKind::Config);
    CHECK(kind_of([] { PipelineConfig::from_json({{"schema_version", 9}}); }) == ErrorKind::Format);
    CHECK(kind_of([] { load_config("/nonexistent/config.json"); }) == ErrorKind::Io);
    const auto dir = testutil::scratch_dir("pipeline_cfg");
    store::write_file_atomic(dir / "bad.json", "{not json");
    CHECK(kind_of([&] { load_config(dir / "bad.json"); }) == ErrorKind::Config);
}

TEST_CASE("seeds are distinct and derived from the master seed") {
    const auto a = derive_seeds(7);
    const auto b = derive_seeds(7);
    CHECK(a.to_json() == b.to_json());
    std::set<std::uint64_t> all = {a.data, a.split, a.init, a.base_train, a.incremental, a.pda};
    CHECK(all.size() == 6);
    CHECK(derive_seeds(8).data != a.data);
}

TEST_CASE("output root precedence and arm names") {
    PipelineConfig c;
    c.output_root = "explicit";
    CHECK(output_root(c) == fs::path("explicit"));
    c.output_root.clear();
    ::setenv(kOutputEnv, "/tmp/from_env", 1);
    CHECK(output_root(c) == fs::path("/tmp/from_env"));
    ::unsetenv(kOutputEnv);
    CHECK(output_root(c) == fs::path(kDefaultOutputRoot));
    CHECK(arm_dir_name("decoder-component-freeze:linear") == "decoder-component-freeze-linear");
    const auto labels = arm_labels(tiny_config("x"));
    CHECK(labels == std::vector<std::string>{"fine-tune", "critical-freeze", "decoder-component-freeze:linear"});
}

TEST_CASE("stages in the wrong order report missing inputs") {
    const auto root = testutil::scratch_dir("pipeline_order");
    const auto c = tiny_config(root);
    CHECK(kind_of([&] { train_base(c); }) == ErrorKind::Input);
    CHECK(kind_of([&] { run_dissect(c); }) == ErrorKind::Input);
    CHECK(kind_of([&] { run_report(c); }) == ErrorKind::Input);
}

TEST_CASE("full run is idempotent and detects tampering and config drift") {
    const auto root = testutil::scratch_dir("pipeline_full");
    auto c = tiny_config(root);
    const auto first = run_all(c);
    REQUIRE(first.size() == 7);
    for (const auto& r : first) {
        CHECK_FALSE(r.skipped);
        CHECK(store::verify_checksum_index(r.dir));
        CHECK(fs::exists(r.dir / store::kRunManifest));
    }
    const Layout layout{root};
    for (const auto& p : {layout.base_model(), layout.dissect_report(), layout.arm("critical-freeze") / "summary.json",
                          layout.arm("decoder-component-freeze:linear") / "metrics.csv",
                          layout.report() / "policies.csv", layout.report() / "report.json"}) {
        CHECK(fs::exists(p));
    }
    const auto sums = store::read_file(layout.report() / store::kChecksumIndex);

    const auto second = run_all(c);
    for (const auto& r : second) CHECK(r.skipped);
    CHECK(store::read_file(layout.report() / store::kChecksumIndex) == sums);

    // Parallel arms reproduce the sequential bytes.
    auto par = tiny_config(testutil::scratch_dir("pipeline_parallel"));
    par.parallel_arms = 2;
    run_all(par);
    for (const auto& l : arm_labels(c)) {
        CHECK(store::read_file(layout.arm(l) / store::kChecksumIndex) ==
              store::read_file(Layout{par.output_root}.arm(l) / store::kChecksumIndex));
    }

    store::write_file_atomic(layout.report() / "policies.csv", "tampered\n");
    CHECK(kind_of([&] { run_report(c); }) == ErrorKind::Format);
    c.force = true;
    CHECK_FALSE(run_report(c).skipped);
    c.force = false;
    CHECK(run_report(c).skipped);

    auto drifted = c;
    drifted.train_base.learning_rate = 0.05;
    CHECK(kind_of([&] { train_base(drifted); }) == ErrorKind::Config);
}

TEST_CASE("svg charts are well formed") {
    const auto line = plots::line_chart_svg("t", "y", {{"a", {0.1, 0.5, 0.9}}, {"b", {1.0, 0.0, 0.5}}});
    CHECK(line.rfind("<svg", 0) == 0);
    CHECK(line.find("</svg>") != std::string::npos);
    CHECK(line.find("polyline") != std::string::npos);
    const auto hist = plots::histogram_svg("h", {{2, 3}, {4, 1}}, 4);
    CHECK(hist.find("</svg>") != std::string::npos);
    CHECK(hist.find("<rect") != std::string::npos);
}

}  // TEST_SUITE
