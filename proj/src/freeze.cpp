#include "forgetdissect/freeze.hpp"

#include <algorithm>
#include <sstream>

#include "forgetdissect/error.hpp"
#include "forgetdissect/random.hpp"
#include "forgetdissect/store.hpp"

namespace forgetdissect::freeze {

namespace fs = std::filesystem;

namespace {

struct PolicyName {
    Policy policy;
    const char* tag;
};

constexpr PolicyName kPolicies[] = {
    {Policy::FineTune, "fine-tune"},
    {Policy::EncoderFreeze, "encoder-freeze"},
    {Policy::DecoderFreeze, "decoder-freeze"},
    {Policy::CriticalFreeze, "critical-freeze"},
    {Policy::DecoderComponentFreeze, "decoder-component-freeze"},
};

nets::LrMultipliers all_ones(int num_blocks) {
    nets::LrMultipliers m;
    for (const auto& g : nets::group_names(num_blocks)) m[g] = 1.0;
    return m;
}

}  // namespace

const char* to_string(Policy policy) {
    for (const auto& p : kPolicies) {
        if (p.policy == policy) return p.tag;
    }
    return "unknown";
}

Policy policy_from_string(const std::string& tag) {
    for (const auto& p : kPolicies) {
        if (tag == p.tag) return p.policy;
    }
    fail(ErrorKind::Parameter, "unknown policy '" + tag + "'");
}

std::string FreezeSpec::label() const {
    std::string out = to_string(policy);
    if (policy == Policy::DecoderComponentFreeze) out += ":" + component;
    return out;
}

std::vector<std::string> FreezeSpec::frozen_groups() const {
    std::vector<std::string> out;
    for (const auto& [g, m] : multipliers) {
        if (m == 0.0) out.push_back(g);
    }
    return out;
}

void FreezeSpec::validate(const nets::ModelSnapshot& model) const {
    for (const auto& [g, m] : multipliers) {
        require(model.has_group(g), ErrorKind::Config, "freeze spec references unknown group '" + g + "'");
        require(m >= 0.0 && m <= 1.0, ErrorKind::Parameter, "multiplier of '" + g + "' outside [0, 1]");
    }
    const auto it = multipliers.find(nets::kClassifierGroup);
    require(it == multipliers.end() || it->second == 1.0, ErrorKind::Config, "the classifier head is never frozen");
}

json FreezeSpec::to_json() const {
    return {{"policy", to_string(policy)},
            {"component", component},
            {"label", label()},
            {"multipliers", multipliers},
            {"source_report_id", source_report_id}};
}

FreezeSpec FreezeSpec::from_json(const json& j) {
    FreezeSpec s;
    try {
        s.policy = policy_from_string(j.at("policy").get<std::string>());
        s.component = j.value("component", std::string());
        s.multipliers = j.at("multipliers").get<nets::LrMultipliers>();
        s.source_report_id = j.value("source_report_id", std::string());
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("invalid freeze spec: ") + e.what());
    }
    return s;
}

FreezeSpec baseline_spec(Policy policy, int num_blocks, const std::string& component) {
    FreezeSpec s;
    s.policy = policy;
    s.multipliers = all_ones(num_blocks);
    switch (policy) {
        case Policy::FineTune:
            break;
        case Policy::EncoderFreeze:
            for (auto& [g, m] : s.multipliers) {
                if (nets::is_encoder_group(g)) m = 0.0;
            }
            break;
        case Policy::DecoderFreeze:
            for (auto& [g, m] : s.multipliers) {
                if (nets::is_decoder_group(g)) m = 0.0;
            }
            break;
        case Policy::DecoderComponentFreeze:
            require(nets::is_decoder_group(component), ErrorKind::Parameter,
                    "unknown decoder component '" + component + "'");
            s.component = component;
            for (auto& [g, m] : s.multipliers) {
                if (nets::is_encoder_group(g) || g == component) m = 0.0;
            }
            break;
        case Policy::CriticalFreeze:
            fail(ErrorKind::Parameter, "critical freezing is derived from a forgetting report");
    }
    return s;
}

FreezeSpec critical_freeze_spec(const dissect::ForgettingReport& report, double multiplier,
                                std::vector<std::string>* warnings) {
    require(multiplier >= 0.0 && multiplier <= 1.0, ErrorKind::Parameter, "multiplier must lie in [0, 1]");
    if (report.forgetting_set.empty()) {
        if (warnings) warnings->push_back("forgetting set is empty; critical freezing falls back to fine-tuning");
        auto s = baseline_spec(Policy::FineTune, report.num_blocks);
        s.source_report_id = report.report_id;
        return s;
    }
    FreezeSpec s;
    s.policy = Policy::CriticalFreeze;
    s.multipliers = all_ones(report.num_blocks);
    s.source_report_id = report.report_id;
    for (int b : report.forgetting_set) {
        require(b >= 1 && b <= report.num_blocks, ErrorKind::Input, "forgetting set names an unknown block");
        s.multipliers[nets::block_group(b)] = multiplier;
    }
    return s;
}

FreezeSpec spec_from_label(const std::string& label, int num_blocks) {
    const auto colon = label.find(':');
    const auto policy = policy_from_string(label.substr(0, colon));
    const std::string component = colon == std::string::npos ? "" : label.substr(colon + 1);
    require(policy == Policy::DecoderComponentFreeze || component.empty(), ErrorKind::Parameter,
            "only decoder-component-freeze takes a component");
    return baseline_spec(policy, num_blocks, component);
}

json StepRecord::to_json() const {
    return {{"step", step},
            {"class_id", class_id},
            {"past", past.to_json()},
            {"new", fresh.to_json()},
            {"epoch_losses", epoch_losses},
            {"snapshot", snapshot}};
}

std::string ExperimentRecord::metrics_csv() const {
    std::ostringstream out;
    out << metrics::kMetricsCsvHeader << '\n';
    for (const auto& s : steps) {
        out << metrics::csv_row(s.step, spec.label(), s.past) << '\n';
        out << metrics::csv_row(s.step, spec.label(), s.fresh) << '\n';
    }
    return out.str();
}

json ExperimentRecord::summary_json() const {
    json step_list = json::array();
    for (const auto& s : steps) step_list.push_back(s.to_json());
    return {{spec.label(),
             {{"spec", spec.to_json()},
              {"seed", seed},
              {"final", {{"past", final_past.to_json()}, {"new", final_new.to_json()}}},
              {"steps", step_list}}}};
}

ExperimentRecord run_incremental_experiment(const nets::ModelSnapshot& base, const synthdata::Dataset& dataset,
                                            const synthdata::Splits& splits, const synthdata::ClassSchedule& schedule,
                                            const FreezeSpec& spec, const nets::TrainHyperparams& hyperparams,
                                            std::uint64_t seed, const std::optional<fs::path>& out_dir,
                                            std::vector<nets::ModelSnapshot>* snapshots) {
    schedule.validate(dataset.num_classes());
    spec.validate(base);
    bool trainable = false;
    for (const auto& g : nets::group_names(base.num_blocks())) {
        if (g == nets::kClassifierGroup) continue;
        const auto it = spec.multipliers.find(g);
        trainable = trainable || it == spec.multipliers.end() || it->second > 0.0;
    }
    require(trainable, ErrorKind::Config, "freeze spec leaves no encoder or decoder group trainable");
    for (int c : schedule.base_classes) {
        require(base.head_row(c) >= 0, ErrorKind::Model, "base snapshot was not trained on class " + std::to_string(c));
    }

    ExperimentRecord record;
    record.spec = spec;
    record.seed = seed;
    if (out_dir) {
        fs::create_directories(*out_dir);
        store::write_json_atomic(*out_dir / "config.json", {{"spec", spec.to_json()},
                                                             {"hyperparams", hyperparams.to_json()},
                                                             {"schedule", schedule.to_json()},
                                                             {"seed", seed},
                                                             {"base_tasks", base.provenance.tasks}});
    }

    nets::ModelSnapshot model = base;
    std::vector<int> seen = schedule.base_classes;
    for (std::size_t i = 0; i < schedule.incremental_classes.size(); ++i) {
        const int step = static_cast<int>(i) + 1;
        const int c = schedule.incremental_classes[i];
        nets::widen_head(model, {c}, derive_seed(seed, static_cast<std::uint64_t>(step), 1));
        auto trained = nets::train_task(model, dataset, splits.train, {c}, spec.multipliers, hyperparams,
                                        derive_seed(seed, static_cast<std::uint64_t>(step), 2));
        model = std::move(trained.model);

        StepRecord s;
        s.step = step;
        s.class_id = c;
        std::tie(s.past, s.fresh) = metrics::evaluate_model(model, dataset, splits.test, seen, {c});
        s.epoch_losses = std::move(trained.epoch_losses);
        s.snapshot = "step" + std::to_string(step) + ".fdsnap";
        if (out_dir) nets::save_snapshot(model, *out_dir / s.snapshot);
        if (snapshots) snapshots->push_back(model);
        record.steps.push_back(std::move(s));
        seen.push_back(c);
    }
    std::tie(record.final_past, record.final_new) =
        metrics::evaluate_model(model, dataset, splits.test, schedule.base_classes, schedule.incremental_classes);

    if (out_dir) {
        store::write_file_atomic(*out_dir / "metrics.csv", record.metrics_csv());
        store::write_json_atomic(*out_dir / "summary.json", record.summary_json());
    }
    return record;
}

}  // namespace forgetdissect::freeze
