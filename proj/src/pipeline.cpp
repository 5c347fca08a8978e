#include "forgetdissect/pipeline.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include "forgetdissect/error.hpp"
#include "forgetdissect/metrics.hpp"
#include "forgetdissect/plots.hpp"
#include "forgetdissect/random.hpp"
#include "forgetdissect/store.hpp"

namespace forgetdissect::pipeline {

namespace {

const std::set<std::string> kConfigKeys = {
    "schema_version", "seed",  "output_root", "force",       "parallel_arms",    "dataset",
    "split_ratios",   "model", "schedule",    "train_base",  "train_incremental", "pda",
    "dissect",        "critical_freeze",      "policies",    "decoder_components", "report"};

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

void PipelineConfig::validate() const {
    require(parallel_arms >= 1, ErrorKind::Config, "parallel_arms must be at least 1");
    require(k_per_class >= 1, ErrorKind::Config, "dissect.k_per_class must be at least 1");
    dataset.validate();
    double sum = 0.0;
    for (double r : split_ratios) {
        require(r > 0.0, ErrorKind::Config, "split ratios must be positive");
        sum += r;
    }
    require(std::abs(sum - 1.0) < 1e-9, ErrorKind::Config, "split ratios must sum to 1");
    if (model) model->validate();
    if (schedule) schedule->validate(static_cast<int>(dataset.classes.size()));
    for (const auto* hp : {&train_base, &train_incremental}) {
        require(hp->epochs >= 1 && hp->learning_rate > 0.0 && hp->batch_size >= 1, ErrorKind::Config,
                "training epochs, learning_rate and batch_size must be positive");
    }
    require(pda.num_samples >= 1, ErrorKind::Config, "pda.num_samples must be at least 1");
    require(pda.window >= 1 && pda.window % 2 == 1, ErrorKind::Config, "pda.window must be odd and positive");
    require(pda.threads >= 1, ErrorKind::Config, "pda.threads must be at least 1");
    require(critical_multiplier >= 0.0 && critical_multiplier <= 1.0, ErrorKind::Config,
            "critical_freeze.multiplier must lie in [0, 1]");
    for (const auto& p : policies) {
        try {
            const auto policy = freeze::policy_from_string(p);
            require(policy != freeze::Policy::DecoderComponentFreeze, ErrorKind::Config,
                    "decoder-component-freeze arms are listed under decoder_components");
        } catch (const Error& e) {
            fail(ErrorKind::Config, e.what());
        }
    }
    for (const auto& c : decoder_components) {
        require(nets::is_decoder_group(c), ErrorKind::Config, "unknown decoder component '" + c + "'");
    }
}

json PipelineConfig::to_json() const {
    json pda_json = pda.to_json();
    pda_json.erase("seed");
    json dissect_json = dissect.to_json();
    dissect_json["k_per_class"] = k_per_class;
    dissect_json["old_model"] = old_model;
    dissect_json["new_model"] = new_model;
    return {{"schema_version", kConfigSchemaVersion},
            {"seed", seed},
            {"output_root", output_root},
            {"force", force},
            {"parallel_arms", parallel_arms},
            {"dataset", dataset.to_json()},
            {"split_ratios", split_ratios},
            {"model", model ? model->to_json() : json(nullptr)},
            {"schedule", schedule ? schedule->to_json() : json(nullptr)},
            {"train_base", train_base.to_json()},
            {"train_incremental", train_incremental.to_json()},
            {"pda", pda_json},
            {"dissect", dissect_json},
            {"critical_freeze", {{"multiplier", critical_multiplier}}},
            {"policies", policies},
            {"decoder_components", decoder_components},
            {"report", {{"records", records}}}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
    require(j.is_object(), ErrorKind::Config, "pipeline config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        require(kConfigKeys.count(key) == 1, ErrorKind::Config, "unknown config key '" + key + "'");
    }
    PipelineConfig c;
    try {
        require(j.value("schema_version", kConfigSchemaVersion) == kConfigSchemaVersion, ErrorKind::Format,
                "unsupported config schema_version");
        c.seed = j.value("seed", c.seed);
        c.output_root = j.value("output_root", c.output_root);
        c.force = j.value("force", c.force);
        c.parallel_arms = j.value("parallel_arms", c.parallel_arms);
        if (j.contains("dataset")) c.dataset = synthdata::DatasetConfig::from_json(j.at("dataset"));
        c.split_ratios = j.value("split_ratios", c.split_ratios);
        if (j.contains("model") && !j.at("model").is_null()) c.model = nets::ModelConfig::from_json(j.at("model"));
        if (j.contains("schedule") && !j.at("schedule").is_null()) {
            c.schedule = synthdata::ClassSchedule::from_json(j.at("schedule"));
        }
        if (j.contains("train_base")) c.train_base = nets::TrainHyperparams::from_json(j.at("train_base"), c.train_base);
        if (j.contains("train_incremental")) {
            c.train_incremental = nets::TrainHyperparams::from_json(j.at("train_incremental"), c.train_incremental);
        }
        if (j.contains("pda")) {
            require(!j.at("pda").contains("seed"), ErrorKind::Config, "pda.seed is derived from the top-level seed");
            c.pda = pda::PdaParams::from_json(j.at("pda"), c.pda);
        }
        if (j.contains("dissect")) {
            const auto& d = j.at("dissect");
            c.dissect = dissect::DissectParams::from_json(d, c.dissect);
            c.k_per_class = d.value("k_per_class", c.k_per_class);
            c.old_model = d.value("old_model", c.old_model);
            c.new_model = d.value("new_model", c.new_model);
        }
        if (j.contains("critical_freeze")) {
            c.critical_multiplier = j.at("critical_freeze").value("multiplier", c.critical_multiplier);
        }
        c.policies = j.value("policies", c.policies);
        c.decoder_components = j.value("decoder_components", c.decoder_components);
        if (j.contains("report")) c.records = j.at("report").value("records", c.records);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("invalid pipeline config: ") + e.what());
    }
    c.validate();
    return c;
}

PipelineConfig load_config(const fs::path& path) {
    require(fs::exists(path), ErrorKind::Io, "config file not found: " + path.string());
    json j;
    try {
        j = json::parse(store::read_file(path));
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, "config is not valid JSON: " + std::string(e.what()));
    }
    return PipelineConfig::from_json(j);
}

json Seeds::to_json() const {
    return {{"data", data}, {"split", split}, {"init", init}, {"base_train", base_train},
            {"incremental", incremental}, {"pda", pda}};
}

Seeds derive_seeds(std::uint64_t seed) {
    return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3),
            derive_seed(seed, 4), derive_seed(seed, 5), derive_seed(seed, 6)};
}

fs::path output_root(const PipelineConfig& config) {
    if (!config.output_root.empty()) return config.output_root;
    if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
    return kDefaultOutputRoot;
}

std::string arm_dir_name(const std::string& label) {
    std::string out = label;
    std::replace(out.begin(), out.end(), ':', '-');
    return out;
}

fs::path Layout::arm(const std::string& label) const { return incr() / arm_dir_name(label); }

std::vector<std::string> arm_labels(const PipelineConfig& config) {
    std::vector<std::string> out = config.policies;
    for (const auto& c : config.decoder_components) out.push_back("decoder-component-freeze:" + c);
    return out;
}

namespace {

/// A stage in progress: its directory and the manifest it will commit.
struct Stage {
    fs::path dir;
    store::RunManifest manifest;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

Stage plan(const PipelineConfig& config, const fs::path& dir, const std::string& command, json key,
           std::vector<std::string> inputs) {
    Stage s;
    s.dir = dir;
    s.manifest.command = "forgetdissect " + command;
    s.manifest.config = std::move(key);
    s.manifest.effective_config = config.to_json();
    s.manifest.seeds = derive_seeds(config.seed).to_json();
    s.manifest.seeds["master"] = config.seed;
    s.manifest.inputs = std::move(inputs);
    return s;
}

/// True when the stage already completed with the same key and inputs and
/// its checksums still verify. Otherwise clears the directory for a fresh run.
bool reuse(const Stage& s, bool force) {
    if (force) {
        fs::remove_all(s.dir);
        return false;
    }
    const auto manifest_path = s.dir / store::kRunManifest;
    if (!fs::exists(manifest_path)) {
        fs::remove_all(s.dir);  // incomplete earlier attempt
        return false;
    }
    const auto doc = store::read_json(manifest_path);
    require(doc.value("run_id", std::string()) == store::run_id(s.manifest), ErrorKind::Config,
            s.dir.string() + " was produced from a different configuration or inputs; rerun with --force");
    require(store::verify_checksum_index(s.dir), ErrorKind::Format,
            "checksums under " + s.dir.string() + " do not match; rerun with --force");
    return true;
}

void commit(Stage& s) {
    store::write_checksum_index(s.dir);
    std::vector<std::string> outputs;
    for (const auto& e : fs::recursive_directory_iterator(s.dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), s.dir).generic_string();
        if (rel != store::kRunManifest) outputs.push_back(rel);
    }
    std::sort(outputs.begin(), outputs.end());
    s.manifest.outputs = std::move(outputs);
    s.manifest.timings_seconds["total"] = seconds_since(s.start);
    store::write_run_manifest(s.dir, s.manifest);
}

std::string upstream_id(const fs::path& dir, const std::string& hint) {
    const auto path = dir / store::kRunManifest;
    require(fs::exists(path), ErrorKind::Input, "missing " + dir.string() + "; run `" + hint + "` first");
    return store::read_json(path).at("run_id").get<std::string>();
}

struct Context {
    synthdata::Dataset dataset;
    synthdata::Splits splits;
    synthdata::ClassSchedule schedule;
    nets::ModelConfig model_config;
};

Context load_context(const PipelineConfig& config, const Layout& layout) {
    require(fs::exists(layout.dataset() / "manifest.json"), ErrorKind::Input,
            "dataset not found under " + layout.data().string() + "; run `gen-data` first");
    Context c;
    c.dataset = synthdata::load_dataset(layout.dataset());
    c.splits = synthdata::Splits::from_json(store::read_json(layout.splits()));
    c.schedule = config.schedule ? *config.schedule : synthdata::default_schedule(c.dataset.num_classes());
    c.schedule.validate(c.dataset.num_classes());
    c.model_config = config.model ? *config.model
                                  : nets::ModelConfig::desk_default(c.dataset.vocabulary.size(),
                                                                    c.dataset.config.image_size);
    return c;
}

std::vector<Image> donor_images(const Context& c) {
    std::vector<Image> donors;
    for (int id : synthdata::ids_with_labels(c.dataset, c.splits.train, c.schedule.base_classes)) {
        donors.push_back(c.dataset.sample(id).image);
    }
    return donors;
}

void write_text(const fs::path& path, const std::string& text) { store::write_file_atomic(path, text); }

json warnings_json(const std::vector<std::string>& warnings) { return json(warnings); }

StageResult run_arm(const PipelineConfig& config, const std::string& label) {
    const Layout layout{output_root(config)};
    const auto seeds = derive_seeds(config.seed);
    const bool critical = label == freeze::to_string(freeze::Policy::CriticalFreeze);
    json key = {{"label", label},
                {"train_incremental", config.train_incremental.to_json()},
                {"seed", seeds.incremental},
                {"base", upstream_id(layout.base(), "train-base")}};
    std::vector<std::string> inputs = {layout.base_model().string()};
    if (critical) {
        key["dissect"] = upstream_id(layout.dissect(), "dissect");
        key["multiplier"] = config.critical_multiplier;
        inputs.push_back(layout.dissect_report().string());
    }
    Stage s = plan(config, layout.arm(label), "train-incr --policy " + label, key, inputs);
    StageResult result{s.dir, false, {}};
    if (reuse(s, config.force)) {
        result.skipped = true;
        return result;
    }
    const auto ctx = load_context(config, layout);
    const auto base = nets::load_snapshot(layout.base_model());
    freeze::FreezeSpec spec;
    if (critical) {
        const auto report = dissect::ForgettingReport::from_json(store::read_json(layout.dissect_report()));
        spec = freeze::critical_freeze_spec(report, config.critical_multiplier, &result.warnings);
    } else {
        spec = freeze::spec_from_label(label, base.num_blocks());
    }
    fs::create_directories(s.dir);
    freeze::run_incremental_experiment(base, ctx.dataset, ctx.splits, ctx.schedule, spec, config.train_incremental,
                                       seeds.incremental, s.dir);
    store::write_json_atomic(s.dir / "warnings.json", warnings_json(result.warnings));
    commit(s);
    return result;
}

}  // namespace

StageResult gen_data(const PipelineConfig& config) {
    config.validate();
    const Layout layout{output_root(config)};
    const auto seeds = derive_seeds(config.seed);
    json key = {{"dataset", config.dataset.to_json()},
                {"split_ratios", config.split_ratios},
                {"seed", seeds.data},
                {"split_seed", seeds.split}};
    Stage s = plan(config, layout.data(), "gen-data", key, {});
    if (reuse(s, config.force)) return {s.dir, true, {}};
    const auto dataset = synthdata::generate_dataset(config.dataset, seeds.data);
    const auto splits = synthdata::split_dataset(dataset, config.split_ratios, seeds.split);
    fs::create_directories(s.dir);
    synthdata::save_dataset(layout.dataset(), dataset);
    store::write_json_atomic(layout.splits(), splits.to_json());
    commit(s);
    return {s.dir, false, {}};
}

StageResult train_base(const PipelineConfig& config) {
    config.validate();
    const Layout layout{output_root(config)};
    const auto seeds = derive_seeds(config.seed);
    const auto data_id = upstream_id(layout.data(), "gen-data");
    const auto ctx = load_context(config, layout);
    json key = {{"model", ctx.model_config.to_json()},
                {"schedule", ctx.schedule.to_json()},
                {"train_base", config.train_base.to_json()},
                {"init_seed", seeds.init},
                {"train_seed", seeds.base_train},
                {"data", data_id}};
    Stage s = plan(config, layout.base(), "train-base", key,
                   {(layout.dataset() / "manifest.json").string(), layout.splits().string()});
    if (reuse(s, config.force)) return {s.dir, true, {}};

    auto model = nets::build_model(ctx.model_config, ctx.schedule.base_classes, seeds.init);
    auto trained = nets::train_task(model, ctx.dataset, ctx.splits.train, ctx.schedule.base_classes, {},
                                    config.train_base, seeds.base_train);
    fs::create_directories(s.dir);
    nets::save_snapshot(trained.model, layout.base_model());

    std::ostringstream losses;
    losses << "epoch,loss\n";
    char buf[64];
    for (std::size_t e = 0; e < trained.epoch_losses.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", e + 1, trained.epoch_losses[e]);
        losses << buf;
    }
    write_text(s.dir / "losses.csv", losses.str());

    const auto train_ids = synthdata::ids_with_labels(ctx.dataset, ctx.splits.train, ctx.schedule.base_classes);
    int with_word = 0;
    for (int id : train_ids) {
        const auto& sample = ctx.dataset.sample(id);
        const auto caption = nets::decode_caption(trained.model, sample.image);
        const int word = synthdata::class_word(ctx.dataset, sample.label);
        with_word += std::find(caption.begin(), caption.end(), word) != caption.end();
    }
    const auto train_metrics = metrics::evaluate_scope(trained.model, ctx.dataset, ctx.splits.train,
                                                       ctx.schedule.base_classes, metrics::Scope::Past);
    const auto test_metrics = metrics::evaluate_scope(trained.model, ctx.dataset, ctx.splits.test,
                                                      ctx.schedule.base_classes, metrics::Scope::Past);
    store::write_json_atomic(
        s.dir / "metrics.json",
        {{"train", train_metrics.to_json()},
         {"test", test_metrics.to_json()},
         {"train_class_word_rate", static_cast<double>(with_word) / static_cast<double>(train_ids.size())},
         {"schedule", ctx.schedule.to_json()}});
    commit(s);
    return {s.dir, false, {}};
}

StageResult run_dissect(const PipelineConfig& config) {
    config.validate();
    const Layout layout{output_root(config)};
    const auto seeds = derive_seeds(config.seed);
    const auto data_id = upstream_id(layout.data(), "gen-data");
    const fs::path old_path = config.old_model.empty() ? layout.base_model() : fs::path(config.old_model);
    const fs::path new_path =
        config.new_model.empty() ? layout.arm(freeze::to_string(freeze::Policy::FineTune)) / "step1.fdsnap"
                                 : fs::path(config.new_model);
    require(fs::exists(old_path), ErrorKind::Input,
            "old model not found: " + old_path.string() + " (run `train-base` first)");
    require(fs::exists(new_path), ErrorKind::Input,
            "new model not found: " + new_path.string() + " (run `train-incr --policy fine-tune` first)");
    auto pda_params = config.pda;
    pda_params.seed = seeds.pda;
    json key = {{"pda", pda_params.to_json()},
                {"dissect", config.dissect.to_json()},
                {"k_per_class", config.k_per_class},
                {"old_model", store::sha256_file(old_path)},
                {"new_model", store::sha256_file(new_path)},
                {"data", data_id}};
    Stage s = plan(config, layout.dissect(), "dissect", key, {old_path.string(), new_path.string()});
    StageResult result{s.dir, false, {}};
    if (reuse(s, config.force)) {
        result.skipped = true;
        return result;
    }
    const auto ctx = load_context(config, layout);
    const auto old_model = nets::load_snapshot(old_path);
    const auto new_model = nets::load_snapshot(new_path);
    dissect::require_same_architecture(old_model, new_model);

    const auto sample_set = synthdata::select_sample_set(
        ctx.dataset, ctx.splits.test, ctx.schedule.base_classes,
        [&](const Image& image) { return nets::classify(old_model, image); }, config.k_per_class, &result.warnings);
    const auto sampler = pda::make_sampler(pda_params.sampler, donor_images(ctx), pda_params.window);

    fs::create_directories(s.dir);
    const auto report = dissect::auto_deepvis(sample_set, ctx.dataset, old_model, new_model, pda_params, *sampler,
                                              config.dissect, s.dir / "archives");
    store::write_json_atomic(layout.dissect_report(), report.to_json());
    store::write_json_atomic(s.dir / "sample_set.json", {{"sample_ids", sample_set.sample_ids}});
    store::write_json_atomic(s.dir / "warnings.json", warnings_json(result.warnings));
    write_text(s.dir / "curves.csv", dissect::curves_csv(report.curves));

    std::vector<dissect::BlockIoUCurve> old_gt, new_old;
    for (const auto& c : report.curves) {
        (c.comparison == dissect::Comparison::VsGroundTruth ? old_gt : new_old).push_back(c);
    }
    const auto new_gt = dissect::curves_vs_gt("new", new_model, sample_set, ctx.dataset, pda_params, *sampler,
                                              config.dissect);
    write_text(s.dir / "iou_vs_gt_old.csv", dissect::curves_csv(old_gt));
    write_text(s.dir / "iou_vs_gt_new.csv", dissect::curves_csv(new_gt.curves));

    write_text(s.dir / "iou_vs_gt.svg",
               plots::line_chart_svg("IoU with ground truth", "mean IoU",
                                     {{"old", dissect::mean_curve(old_gt)}, {"new", new_gt.block_means}}));
    write_text(s.dir / "iou_vs_old.svg",
               plots::line_chart_svg("IoU with the old model", "mean IoU", {{"new", dissect::mean_curve(new_old)}}));
    write_text(s.dir / "fragile_blocks.svg",
               plots::histogram_svg("Fragile block verdicts", report.histogram, report.num_blocks));
    commit(s);
    return result;
}

std::vector<StageResult> train_incremental(const PipelineConfig& config, const std::vector<std::string>& labels) {
    config.validate();
    require(!labels.empty(), ErrorKind::Config, "no policy arms requested");
    std::set<std::string> seen;
    for (const auto& l : labels) {
        freeze::policy_from_string(l.substr(0, l.find(':')));
        require(seen.insert(l).second, ErrorKind::Config, "duplicate policy arm '" + l + "'");
    }
    std::vector<StageResult> results;
    if (config.parallel_arms <= 1 || labels.size() == 1) {
        for (const auto& l : labels) results.push_back(run_arm(config, l));
        return results;
    }

    // One child process per arm, at most parallel_arms at a time.
    std::cout.flush();
    std::cerr.flush();
    std::vector<std::pair<pid_t, std::string>> running;
    std::optional<Error> first_error;
    auto reap_one = [&]() {
        int status = 0;
        const pid_t pid = ::wait(&status);
        if (pid < 0) fail(ErrorKind::Io, "waiting for an arm process failed");
        const auto it = std::find_if(running.begin(), running.end(), [&](const auto& r) { return r.first == pid; });
        if (it == running.end()) return;
        const std::string label = it->second;
        running.erase(it);
        const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
        if (code != 0 && !first_error) {
            ErrorKind kind = ErrorKind::Io;
            kind_from_exit_code(code, kind);
            first_error = Error(kind, "arm '" + label + "' failed with exit code " + std::to_string(code));
        }
    };
    for (const auto& l : labels) {
        while (static_cast<int>(running.size()) >= config.parallel_arms) reap_one();
        const pid_t pid = ::fork();
        if (pid < 0) fail(ErrorKind::Io, "could not start an arm process");
        if (pid == 0) {
            int code = 0;
            try {
                for (const auto& w : run_arm(config, l).warnings) std::cerr << "warning: " << w << "\n";
            } catch (const Error& e) {
                std::cerr << "{\"error\": \"" << to_string(e.kind()) << "\", \"arm\": \"" << l << "\", \"message\": "
                          << json(e.what()).dump() << "}\n";
                code = exit_code(e.kind());
            } catch (const std::exception& e) {
                std::cerr << e.what() << "\n";
                code = 1;
            }
            std::cerr.flush();
            ::_exit(code);
        }
        running.emplace_back(pid, l);
    }
    while (!running.empty()) reap_one();
    if (first_error) throw *first_error;

    const Layout layout{output_root(config)};
    for (const auto& l : labels) {
        StageResult r{layout.arm(l), false, {}};
        const auto w = layout.arm(l) / "warnings.json";
        if (fs::exists(w)) r.warnings = store::read_json(w).get<std::vector<std::string>>();
        results.push_back(std::move(r));
    }
    return results;
}

StageResult run_report(const PipelineConfig& config) {
    config.validate();
    const Layout layout{output_root(config)};
    std::vector<fs::path> records;
    if (!config.records.empty()) {
        for (const auto& r : config.records) records.emplace_back(r);
    } else if (fs::exists(layout.incr())) {
        for (const auto& l : arm_labels(config)) {
            if (fs::exists(layout.arm(l) / "summary.json")) records.push_back(layout.arm(l));
        }
    }
    require(!records.empty(), ErrorKind::Input, "no experiment records found; run `train-incr` first");
    json key = json::array();
    std::vector<std::string> inputs;
    for (const auto& r : records) {
        require(fs::exists(r / "summary.json"), ErrorKind::Input, "not an experiment record: " + r.string());
        key.push_back(upstream_id(r, "train-incr"));
        inputs.push_back((r / "summary.json").string());
    }
    Stage s = plan(config, layout.report(), "report", {{"records", key}}, inputs);
    if (reuse(s, config.force)) return {s.dir, true, {}};

    const char* columns =
        "arm,past_accuracy,past_bleu1,past_bleu4,past_rouge_l,past_n,new_accuracy,new_bleu1,new_bleu4,new_rouge_l,new_n\n";
    std::string policy_table = std::string("policy") + (columns + 3);
    std::string component_table = std::string("frozen_component") + (columns + 3);
    std::string all_metrics = std::string(metrics::kMetricsCsvHeader) + "\n";
    json consolidated = {{"policies", json::object()}, {"decoder_components", json::object()}};
    std::vector<plots::Series> past_bleu1, past_accuracy;
    char buf[512];
    for (const auto& r : records) {
        const auto summary = store::read_json(r / "summary.json");
        require(summary.size() == 1, ErrorKind::Format, "malformed summary in " + r.string());
        const std::string label = summary.begin().key();
        const auto& body = summary.begin().value();
        const auto& past = body.at("final").at("past");
        const auto& fresh = body.at("final").at("new");
        const auto spec = freeze::FreezeSpec::from_json(body.at("spec"));
        const bool component = spec.policy == freeze::Policy::DecoderComponentFreeze;
        const std::string row_name = component ? spec.component : label;
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%d,%.6f,%.6f,%.6f,%.6f,%d\n", row_name.c_str(),
                      past.at("accuracy").get<double>(), past.at("bleu1").get<double>(),
                      past.at("bleu4").get<double>(), past.at("rouge_l").get<double>(), past.at("n").get<int>(),
                      fresh.at("accuracy").get<double>(), fresh.at("bleu1").get<double>(),
                      fresh.at("bleu4").get<double>(), fresh.at("rouge_l").get<double>(), fresh.at("n").get<int>());
        (component ? component_table : policy_table) += buf;
        consolidated[component ? "decoder_components" : "policies"][row_name] = {
            {"label", label}, {"spec", body.at("spec")}, {"final", body.at("final")}};

        const auto csv = store::read_file(r / "metrics.csv");
        all_metrics += csv.substr(csv.find('\n') + 1);
        plots::Series b1{label, {}}, acc{label, {}};
        for (const auto& step : body.at("steps")) {
            b1.values.push_back(step.at("past").at("bleu1").get<double>());
            acc.values.push_back(step.at("past").at("accuracy").get<double>());
        }
        past_bleu1.push_back(std::move(b1));
        past_accuracy.push_back(std::move(acc));
    }
    if (fs::exists(layout.dissect_report())) {
        const auto report = store::read_json(layout.dissect_report());
        consolidated["forgetting_set"] = report.at("forgetting_set");
        consolidated["forgetting_status"] = report.at("status");
        consolidated["report_id"] = report.at("report_id");
    }
    fs::create_directories(s.dir);
    write_text(s.dir / "policies.csv", policy_table);
    write_text(s.dir / "decoder_components.csv", component_table);
    write_text(s.dir / "metrics.csv", all_metrics);
    store::write_json_atomic(s.dir / "report.json", consolidated);
    write_text(s.dir / "past_bleu1.svg", plots::line_chart_svg("Past-task BLEU-1 per step", "BLEU-1", past_bleu1, "step"));
    write_text(s.dir / "past_accuracy.svg",
               plots::line_chart_svg("Past-task accuracy per step", "accuracy", past_accuracy, "step"));
    commit(s);
    return {s.dir, false, {}};
}

std::vector<StageResult> run_all(const PipelineConfig& config) {
    std::vector<StageResult> results;
    results.push_back(gen_data(config));
    results.push_back(train_base(config));
    const std::string fine_tune = freeze::to_string(freeze::Policy::FineTune);
    auto labels = arm_labels(config);
    if (config.new_model.empty()) {
        for (auto& r : train_incremental(config, {fine_tune})) results.push_back(std::move(r));
        labels.erase(std::remove(labels.begin(), labels.end(), fine_tune), labels.end());
    }
    results.push_back(run_dissect(config));
    if (!labels.empty()) {
        for (auto& r : train_incremental(config, labels)) results.push_back(std::move(r));
    }
    results.push_back(run_report(config));
    return results;
}

}  // namespace forgetdissect::pipeline
