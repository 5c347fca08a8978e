#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forgetdissect/dissect.hpp"
#include "forgetdissect/freeze.hpp"
#include "forgetdissect/nets.hpp"
#include "forgetdissect/pda.hpp"
#include "forgetdissect/synthdata.hpp"
#include "json.hpp"

namespace forgetdissect::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kOutputEnv = "FORGETDISSECT_OUT";
inline constexpr const char* kDefaultOutputRoot = "runs";

struct PipelineConfig {
    std::uint64_t seed = 7;
    std::string output_root;  // empty: $FORGETDISSECT_OUT, then "runs"
    bool force = false;
    int parallel_arms = 1;

    synthdata::DatasetConfig dataset;
    std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
    std::optional<nets::ModelConfig> model;  // empty: desk default for the vocabulary
    std::optional<synthdata::ClassSchedule> schedule;

    nets::TrainHyperparams train_base{60, 0.1, 16};
    nets::TrainHyperparams train_incremental{20, 0.01, 16};

    pda::PdaParams pda;
    dissect::DissectParams dissect;
    int k_per_class = 5;
    std::string old_model;  // dissect inputs; empty: base snapshot / first fine-tune step
    std::string new_model;

    double critical_multiplier = 0.0;
    std::vector<std::string> policies = {"fine-tune", "encoder-freeze", "decoder-freeze", "critical-freeze"};
    std::vector<std::string> decoder_components = {"recurrent", "embedding", "linear"};
    std::vector<std::string> records;  // report inputs; empty: every arm below incr/

    void validate() const;
    json to_json() const;
    static PipelineConfig from_json(const json& j);
};

PipelineConfig load_config(const fs::path& path);

struct Seeds {
    std::uint64_t data, split, init, base_train, incremental, pda;

    json to_json() const;
};

Seeds derive_seeds(std::uint64_t seed);

fs::path output_root(const PipelineConfig& config);

struct Layout {
    fs::path root;

    fs::path data() const { return root / "data"; }
    fs::path dataset() const { return data() / "dataset"; }
    fs::path splits() const { return data() / "splits.json"; }
    fs::path base() const { return root / "base"; }
    fs::path base_model() const { return base() / "model.fdsnap"; }
    fs::path dissect() const { return root / "dissect"; }
    fs::path dissect_report() const { return dissect() / "report.json"; }
    fs::path incr() const { return root / "incr"; }
    fs::path arm(const std::string& label) const;
    fs::path report() const { return root / "report"; }
};

/// Arm labels the pipeline trains: every policy, then one
/// decoder-component-freeze arm per component.
std::vector<std::string> arm_labels(const PipelineConfig& config);

struct StageResult {
    fs::path dir;
    bool skipped = false;  // outputs already present and verified
    std::vector<std::string> warnings;
};

StageResult gen_data(const PipelineConfig& config);
StageResult train_base(const PipelineConfig& config);
/// Trains the given arms; critical-freeze needs a dissection report.
std::vector<StageResult> train_incremental(const PipelineConfig& config, const std::vector<std::string>& labels);
StageResult run_dissect(const PipelineConfig& config);
StageResult run_report(const PipelineConfig& config);

/// gen-data, train-base, fine-tune arm, dissect, remaining arms, report.
std::vector<StageResult> run_all(const PipelineConfig& config);

/// Policy label to directory name ("decoder-component-freeze:linear" ->
/// "decoder-component-freeze-linear").
std::string arm_dir_name(const std::string& label);

}  // namespace forgetdissect::pipeline
