#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forgetdissect/grid.hpp"
#include "forgetdissect/nets.hpp"
#include "forgetdissect/pda.hpp"
#include "forgetdissect/synthdata.hpp"
#include "json.hpp"

namespace forgetdissect::dissect {

using json = nlohmann::json;

/// |a & b| / |a | b|; 0 when both are empty.
double iou(const Mask& a, const Mask& b);

struct Representative {
    int map_index = 0;
    double iou = 0.0;
};

/// Argmax of IoU against `reference`; ties go to the smallest index.
Representative best_match(std::span<const Mask> candidates, const Mask& reference);

enum class Comparison { VsGroundTruth, VsOldModel };
const char* to_string(Comparison c);

struct CurveEntry {
    int block_id = 1;
    int map_index = 0;
    double iou = 0.0;
};

struct BlockIoUCurve {
    int image_id = 0;
    Comparison comparison = Comparison::VsOldModel;
    std::string model;  // label of the model the curve describes
    std::vector<CurveEntry> entries;

    std::vector<double> ious() const;
    json to_json() const;
};

/// Per-block IoU drop: 1.0 - iou_1 for block 1, iou_{j-1} - iou_j after.
std::vector<double> iou_drops(const BlockIoUCurve& curve);

/// Block with the largest drop (ties: smallest id), or none when the
/// largest drop is <= epsilon.
std::optional<int> fragile_block(const BlockIoUCurve& curve, double epsilon = 1e-6);

/// Evidence masks of every map of every block: stack[b][m].
using EvidenceStack = std::vector<std::vector<Mask>>;

struct DissectParams {
    int top_j = 2;
    double epsilon = 1e-6;
    pda::ThresholdRule rule = pda::ThresholdRule::Sign;
    double q = 0.0;

    json to_json() const;
    static DissectParams from_json(const json& j);
    static DissectParams from_json(const json& j, const DissectParams& defaults);
};

EvidenceStack evidence_stack(const std::vector<std::vector<pda::RelevanceMap>>& relevance, const DissectParams& params);

/// PDA sweep of every block followed by binarization.
EvidenceStack model_evidence(const nets::ModelSnapshot& model, const Image& image, const pda::PdaParams& pda_params,
                             const pda::Sampler& sampler, const DissectParams& params,
                             std::vector<std::vector<pda::RelevanceMap>>* relevance_out = nullptr);

Representative representative_vs_gt(const nets::ModelSnapshot& model, const Image& image, const Mask& gt_mask,
                                    int block_id, const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                                    const DissectParams& params = {});

Representative representative_vs_old(const nets::ModelSnapshot& new_model, const Image& image, const Mask& old_rm_mask,
                                     int block_id, const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                                     const DissectParams& params = {});

struct Verdict {
    int image_id = 0;
    std::optional<int> fragile_block;
    double drop = 0.0;
};

struct ImageDissection {
    BlockIoUCurve old_vs_gt;  // representative maps of the old model
    BlockIoUCurve new_vs_old;
    Verdict verdict;
};

/// One image of Algorithm 1 on precomputed evidence.
ImageDissection dissect_image(int image_id, const Mask& gt, const EvidenceStack& old_stack,
                              const EvidenceStack& new_stack, double epsilon);

struct ForgettingReport {
    std::string report_id;
    int num_blocks = 0;
    std::vector<Verdict> verdicts;
    std::map<int, int> histogram;      // block id -> verdict count
    std::vector<int> forgetting_set;   // descending frequency, ties by block id
    std::string status;                // "forgetting detected" | "no forgetting detected"
    std::vector<BlockIoUCurve> curves;
    json provenance = json::object();

    json to_json() const;
    static ForgettingReport from_json(const json& j);
};

/// Histogram of decided verdicts and the top_j most frequent blocks.
void aggregate(ForgettingReport& report, int top_j);

struct StackInput {
    int image_id = 0;
    const Mask* gt = nullptr;
    const EvidenceStack* old_stack = nullptr;
    const EvidenceStack* new_stack = nullptr;
};

/// Algorithm 1 over precomputed evidence stacks.
ForgettingReport auto_deepvis_stacks(std::span<const StackInput> images, int num_blocks, const DissectParams& params);

/// Algorithm 1 end to end. When `archive_dir` is set, per-image relevance
/// archives of both models are written below it.
ForgettingReport auto_deepvis(const synthdata::SampleSet& sample_set, const synthdata::Dataset& dataset,
                              const nets::ModelSnapshot& old_model, const nets::ModelSnapshot& new_model,
                              const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                              const DissectParams& params,
                              const std::optional<std::filesystem::path>& archive_dir = std::nullopt);

void require_same_architecture(const nets::ModelSnapshot& a, const nets::ModelSnapshot& b);

struct ModelCurves {
    std::string model;
    std::vector<BlockIoUCurve> curves;  // vs ground truth, one per image
    std::vector<double> block_means;
};

std::vector<double> mean_curve(const std::vector<BlockIoUCurve>& curves);

ModelCurves curves_vs_gt(const std::string& label, const nets::ModelSnapshot& model, const synthdata::SampleSet& sample_set,
                         const synthdata::Dataset& dataset, const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                         const DissectParams& params);

std::vector<ModelCurves> iou_gt_across_models(const std::vector<std::pair<std::string, const nets::ModelSnapshot*>>& models,
                                              const synthdata::SampleSet& sample_set, const synthdata::Dataset& dataset,
                                              const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                                              const DissectParams& params);

/// image_id,block_id,map_index,iou,comparison
std::string curves_csv(const std::vector<BlockIoUCurve>& curves);

}  // namespace forgetdissect::dissect
