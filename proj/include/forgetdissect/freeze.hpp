#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forgetdissect/dissect.hpp"
#include "forgetdissect/metrics.hpp"
#include "forgetdissect/nets.hpp"
#include "forgetdissect/synthdata.hpp"
#include "json.hpp"

namespace forgetdissect::freeze {

using json = nlohmann::json;

enum class Policy { FineTune, EncoderFreeze, DecoderFreeze, CriticalFreeze, DecoderComponentFreeze };

const char* to_string(Policy policy);
Policy policy_from_string(const std::string& tag);

/// Multiplier used when critical freezing trains the fragile blocks slowly
/// instead of stopping them.
inline constexpr double kTinyMultiplier = 0.01;

struct FreezeSpec {
    Policy policy = Policy::FineTune;
    std::string component;  // decoder-component-freeze only
    nets::LrMultipliers multipliers;  // every group, classifier included
    std::string source_report_id;

    /// Policy tag, with the component appended as "tag:component".
    std::string label() const;
    std::vector<std::string> frozen_groups() const;
    /// Every referenced group exists and every multiplier lies in [0, 1].
    void validate(const nets::ModelSnapshot& model) const;

    json to_json() const;
    static FreezeSpec from_json(const json& j);
};

FreezeSpec baseline_spec(Policy policy, int num_blocks, const std::string& component = "");

/// `multiplier` on every block of the forgetting set, 1 elsewhere. An empty
/// set yields the fine-tune spec and a warning.
FreezeSpec critical_freeze_spec(const dissect::ForgettingReport& report, double multiplier = 0.0,
                                std::vector<std::string>* warnings = nullptr);

/// Parses "fine-tune", "encoder-freeze", "decoder-freeze" or
/// "decoder-component-freeze:<group>"; critical freezing needs a report.
FreezeSpec spec_from_label(const std::string& label, int num_blocks);

struct StepRecord {
    int step = 0;
    int class_id = 0;
    metrics::TaskMetrics past;
    metrics::TaskMetrics fresh;
    std::vector<double> epoch_losses;
    std::string snapshot;  // file name inside the experiment directory

    json to_json() const;
};

struct ExperimentRecord {
    FreezeSpec spec;
    std::uint64_t seed = 0;
    std::vector<StepRecord> steps;
    /// After the last step: base classes vs all incremental classes.
    metrics::TaskMetrics final_past;
    metrics::TaskMetrics final_new;

    std::string metrics_csv() const;
    json summary_json() const;
};

/// One incremental step per schedule class: widen the head, train on that
/// class only under the freeze spec, evaluate on the test split. Writes
/// config.json, metrics.csv, step snapshots and summary.json when
/// `out_dir` is given.
ExperimentRecord run_incremental_experiment(const nets::ModelSnapshot& base, const synthdata::Dataset& dataset,
                                            const synthdata::Splits& splits, const synthdata::ClassSchedule& schedule,
                                            const FreezeSpec& spec, const nets::TrainHyperparams& hyperparams,
                                            std::uint64_t seed,
                                            const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                            std::vector<nets::ModelSnapshot>* snapshots = nullptr);

}  // namespace forgetdissect::freeze
