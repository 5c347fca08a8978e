#include "forgetdissect/dissect.hpp"

#include <algorithm>
#include <cstdio>

#include "forgetdissect/error.hpp"
#include "forgetdissect/store.hpp"

namespace forgetdissect::dissect {

double iou(const Mask& a, const Mask& b) {
    require(a.same_shape(b), ErrorKind::Input, "IoU masks differ in shape");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool x = a.data[i] != 0;
        const bool y = b.data[i] != 0;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Representative best_match(std::span<const Mask> candidates, const Mask& reference) {
    require(!candidates.empty(), ErrorKind::Input, "no candidate maps");
    Representative best{0, iou(candidates[0], reference)};
    for (std::size_t m = 1; m < candidates.size(); ++m) {
        const double v = iou(candidates[m], reference);
        if (v > best.iou) best = {static_cast<int>(m), v};
    }
    return best;
}

const char* to_string(Comparison c) { return c == Comparison::VsGroundTruth ? "vs-gt" : "vs-old-model"; }

std::vector<double> BlockIoUCurve::ious() const {
    std::vector<double> out;
    for (const auto& e : entries) out.push_back(e.iou);
    return out;
}

json BlockIoUCurve::to_json() const {
    json e = json::array();
    for (const auto& x : entries) e.push_back({{"block_id", x.block_id}, {"map_index", x.map_index}, {"iou", x.iou}});
    return {{"image_id", image_id}, {"comparison", to_string(comparison)}, {"model", model}, {"entries", e}};
}

namespace {

BlockIoUCurve curve_from_json(const json& j) {
    BlockIoUCurve c;
    c.image_id = j.at("image_id").get<int>();
    c.comparison = j.at("comparison").get<std::string>() == "vs-gt" ? Comparison::VsGroundTruth : Comparison::VsOldModel;
    c.model = j.value("model", std::string());
    for (const auto& e : j.at("entries")) {
        c.entries.push_back({e.at("block_id").get<int>(), e.at("map_index").get<int>(), e.at("iou").get<double>()});
    }
    return c;
}

}  // namespace

std::vector<double> iou_drops(const BlockIoUCurve& curve) {
    require(curve.entries.size() >= 2, ErrorKind::Input, "a block curve needs at least 2 blocks");
    std::vector<double> drops;
    double previous = 1.0;
    for (const auto& e : curve.entries) {
        drops.push_back(previous - e.iou);
        previous = e.iou;
    }
    return drops;
}

std::optional<int> fragile_block(const BlockIoUCurve& curve, double epsilon) {
    const auto drops = iou_drops(curve);
    std::size_t best = 0;
    for (std::size_t j = 1; j < drops.size(); ++j) {
        if (drops[j] > drops[best]) best = j;
    }
    if (drops[best] <= epsilon) return std::nullopt;
    return curve.entries[best].block_id;
}

json DissectParams::to_json() const {
    return {{"top_j", top_j},
            {"epsilon", epsilon},
            {"rule", rule == pda::ThresholdRule::Sign ? "sign" : "percentile"},
            {"q", q}};
}

DissectParams DissectParams::from_json(const json& j) { return from_json(j, DissectParams{}); }

DissectParams DissectParams::from_json(const json& j, const DissectParams& defaults) {
    DissectParams p = defaults;
    try {
        p.top_j = j.value("top_j", p.top_j);
        p.epsilon = j.value("epsilon", p.epsilon);
        if (j.contains("rule")) {
            const auto r = j.at("rule").get<std::string>();
            require(r == "sign" || r == "percentile", ErrorKind::Config, "unknown evidence rule '" + r + "'");
            p.rule = r == "sign" ? pda::ThresholdRule::Sign : pda::ThresholdRule::Percentile;
        }
        p.q = j.value("q", p.q);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("invalid dissection parameters: ") + e.what());
    }
    require(p.top_j >= 1, ErrorKind::Config, "top_j must be positive");
    require(p.epsilon >= 0.0, ErrorKind::Config, "epsilon must be non-negative");
    return p;
}

EvidenceStack evidence_stack(const std::vector<std::vector<pda::RelevanceMap>>& relevance, const DissectParams& params) {
    EvidenceStack stack;
    for (const auto& block : relevance) {
        std::vector<Mask> masks;
        for (const auto& map : block) masks.push_back(pda::evidence_mask(map, params.rule, params.q).mask);
        stack.push_back(std::move(masks));
    }
    return stack;
}

EvidenceStack model_evidence(const nets::ModelSnapshot& model, const Image& image, const pda::PdaParams& pda_params,
                             const pda::Sampler& sampler, const DissectParams& params,
                             std::vector<std::vector<pda::RelevanceMap>>* relevance_out) {
    auto relevance = pda::model_relevance_sweep(model, image, pda_params, sampler);
    auto stack = evidence_stack(relevance, params);
    if (relevance_out) *relevance_out = std::move(relevance);
    return stack;
}

Representative representative_vs_gt(const nets::ModelSnapshot& model, const Image& image, const Mask& gt_mask,
                                    int block_id, const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                                    const DissectParams& params) {
    require(gt_mask.height == image.height && gt_mask.width == image.width, ErrorKind::Input,
            "ground-truth mask does not match the image");
    const auto maps = pda::block_relevance_sweep(model, image, block_id, pda_params, sampler);
    std::vector<Mask> masks;
    for (const auto& m : maps) masks.push_back(pda::evidence_mask(m, params.rule, params.q).mask);
    return best_match(masks, gt_mask);
}

Representative representative_vs_old(const nets::ModelSnapshot& new_model, const Image& image, const Mask& old_rm_mask,
                                     int block_id, const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                                     const DissectParams& params) {
    return representative_vs_gt(new_model, image, old_rm_mask, block_id, pda_params, sampler, params);
}

ImageDissection dissect_image(int image_id, const Mask& gt, const EvidenceStack& old_stack, const EvidenceStack& new_stack,
                              double epsilon) {
    require(old_stack.size() == new_stack.size() && old_stack.size() >= 2, ErrorKind::Model,
            "evidence stacks disagree in block count");
    ImageDissection out;
    out.old_vs_gt = {image_id, Comparison::VsGroundTruth, "old", {}};
    out.new_vs_old = {image_id, Comparison::VsOldModel, "new", {}};
    for (std::size_t b = 0; b < old_stack.size(); ++b) {
        require(old_stack[b].size() == new_stack[b].size(), ErrorKind::Model, "evidence stacks disagree in map count");
        const int block_id = static_cast<int>(b) + 1;
        const auto rm_old = best_match(old_stack[b], gt);
        out.old_vs_gt.entries.push_back({block_id, rm_old.map_index, rm_old.iou});
        const auto& reference = old_stack[b][static_cast<std::size_t>(rm_old.map_index)];
        const auto rm_new = best_match(new_stack[b], reference);
        out.new_vs_old.entries.push_back({block_id, rm_new.map_index, rm_new.iou});
    }
    out.verdict.image_id = image_id;
    out.verdict.fragile_block = fragile_block(out.new_vs_old, epsilon);
    const auto drops = iou_drops(out.new_vs_old);
    out.verdict.drop = *std::max_element(drops.begin(), drops.end());
    return out;
}

void aggregate(ForgettingReport& report, int top_j) {
    require(top_j >= 1, ErrorKind::Parameter, "top_j must be positive");
    std::sort(report.verdicts.begin(), report.verdicts.end(),
              [](const Verdict& a, const Verdict& b) { return a.image_id < b.image_id; });
    report.histogram.clear();
    for (const auto& v : report.verdicts) {
        if (v.fragile_block) ++report.histogram[*v.fragile_block];
    }
    std::vector<std::pair<int, int>> ranked(report.histogram.begin(), report.histogram.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    report.forgetting_set.clear();
    for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < top_j; ++i) {
        report.forgetting_set.push_back(ranked[i].first);
    }
    report.status = report.forgetting_set.empty() ? "no forgetting detected" : "forgetting detected";
}

namespace {

std::string compute_report_id(const ForgettingReport& r) {
    json key = r.to_json();
    key.erase("report_id");
    return store::sha256_hex(key.dump()).substr(0, 16);
}

}  // namespace

json ForgettingReport::to_json() const {
    json verdict_list = json::array();
    for (const auto& v : verdicts) {
        verdict_list.push_back({{"image_id", v.image_id},
                                {"fragile_block", v.fragile_block ? json(*v.fragile_block) : json(nullptr)},
                                {"drop", v.drop}});
    }
    json hist = json::object();
    for (const auto& [b, n] : histogram) hist[std::to_string(b)] = n;
    json curve_list = json::array();
    for (const auto& c : curves) curve_list.push_back(c.to_json());
    return {{"schema", "forgetdissect.report"},
            {"schema_version", 1},
            {"report_id", report_id},
            {"num_blocks", num_blocks},
            {"verdicts", verdict_list},
            {"histogram", hist},
            {"forgetting_set", forgetting_set},
            {"status", status},
            {"curves", curve_list},
            {"provenance", provenance}};
}

ForgettingReport ForgettingReport::from_json(const json& j) {
    ForgettingReport r;
    try {
        require(j.at("schema") == "forgetdissect.report", ErrorKind::Format, "not a forgetting report");
        require(j.at("schema_version") == 1, ErrorKind::Format, "forgetting report schema version mismatch");
        r.report_id = j.at("report_id").get<std::string>();
        r.num_blocks = j.at("num_blocks").get<int>();
        for (const auto& v : j.at("verdicts")) {
            Verdict verdict;
            verdict.image_id = v.at("image_id").get<int>();
            if (!v.at("fragile_block").is_null()) verdict.fragile_block = v.at("fragile_block").get<int>();
            verdict.drop = v.at("drop").get<double>();
            r.verdicts.push_back(verdict);
        }
        for (const auto& [k, n] : j.at("histogram").items()) r.histogram[std::stoi(k)] = n.get<int>();
        r.forgetting_set = j.at("forgetting_set").get<std::vector<int>>();
        r.status = j.at("status").get<std::string>();
        for (const auto& c : j.at("curves")) r.curves.push_back(curve_from_json(c));
        r.provenance = j.at("provenance");
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, std::string("corrupt forgetting report: ") + e.what());
    }
    return r;
}

ForgettingReport auto_deepvis_stacks(std::span<const StackInput> images, int num_blocks, const DissectParams& params) {
    require(!images.empty(), ErrorKind::Input, "sample set is empty");
    require(num_blocks >= 2, ErrorKind::Input, "Auto DeepVis needs at least 2 blocks");
    ForgettingReport report;
    report.num_blocks = num_blocks;
    for (const auto& in : images) {
        require(in.gt && in.old_stack && in.new_stack, ErrorKind::Input, "incomplete dissection input");
        require(static_cast<int>(in.old_stack->size()) == num_blocks, ErrorKind::Model, "stack block count mismatch");
        auto d = dissect_image(in.image_id, *in.gt, *in.old_stack, *in.new_stack, params.epsilon);
        report.verdicts.push_back(d.verdict);
        report.curves.push_back(std::move(d.old_vs_gt));
        report.curves.push_back(std::move(d.new_vs_old));
    }
    aggregate(report, params.top_j);
    report.provenance["dissect"] = params.to_json();
    report.report_id = compute_report_id(report);
    return report;
}

void require_same_architecture(const nets::ModelSnapshot& a, const nets::ModelSnapshot& b) {
    require(a.config.to_json() == b.config.to_json(), ErrorKind::Model, "models do not share an architecture");
}

ForgettingReport auto_deepvis(const synthdata::SampleSet& sample_set, const synthdata::Dataset& dataset,
                              const nets::ModelSnapshot& old_model, const nets::ModelSnapshot& new_model,
                              const pda::PdaParams& pda_params, const pda::Sampler& sampler, const DissectParams& params,
                              const std::optional<std::filesystem::path>& archive_dir) {
    require_same_architecture(old_model, new_model);
    require(!sample_set.sample_ids.empty(), ErrorKind::Input, "sample set is empty");
    std::vector<int> ids = sample_set.sample_ids;
    std::sort(ids.begin(), ids.end());

    std::vector<EvidenceStack> old_stacks, new_stacks;
    for (int id : ids) {
        const auto& s = dataset.sample(id);
        std::vector<std::vector<pda::RelevanceMap>> rel_old, rel_new;
        old_stacks.push_back(model_evidence(old_model, s.image, pda_params, sampler, params, &rel_old));
        new_stacks.push_back(model_evidence(new_model, s.image, pda_params, sampler, params, &rel_new));
        if (archive_dir) {
            char name[32];
            std::snprintf(name, sizeof name, "img%06d", id);
            for (const auto& [label, rel, stack] :
                 {std::tuple{"old", &rel_old, &old_stacks.back()}, std::tuple{"new", &rel_new, &new_stacks.back()}}) {
                std::vector<pda::RelevanceMap> maps;
                std::vector<pda::EvidenceMask> masks;
                for (std::size_t b = 0; b < rel->size(); ++b) {
                    for (std::size_t m = 0; m < (*rel)[b].size(); ++m) {
                        maps.push_back((*rel)[b][m]);
                        masks.push_back(pda::EvidenceMask{(*stack)[b][m], params.rule, params.q});
                    }
                }
                pda::write_relevance_archive(*archive_dir / (std::string(label) + "_" + name), maps, masks,
                                             {{"image_id", id}, {"model", label}, {"pda", pda_params.to_json()}});
            }
        }
    }
    std::vector<StackInput> inputs;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        inputs.push_back({ids[i], &dataset.sample(ids[i]).seg_mask, &old_stacks[i], &new_stacks[i]});
    }
    auto report = auto_deepvis_stacks(inputs, old_model.num_blocks(), params);
    report.provenance["pda"] = pda_params.to_json();
    report.provenance["sample_set"] = ids;
    report.provenance["old_model_tasks"] = old_model.provenance.tasks;
    report.provenance["new_model_tasks"] = new_model.provenance.tasks;
    report.report_id = compute_report_id(report);
    return report;
}

std::vector<double> mean_curve(const std::vector<BlockIoUCurve>& curves) {
    require(!curves.empty(), ErrorKind::Input, "no curves to average");
    std::vector<double> sum(curves.front().entries.size(), 0.0);
    for (const auto& c : curves) {
        require(c.entries.size() == sum.size(), ErrorKind::Input, "curves differ in block count");
        for (std::size_t b = 0; b < sum.size(); ++b) sum[b] += c.entries[b].iou;
    }
    for (auto& v : sum) v /= static_cast<double>(curves.size());
    return sum;
}

ModelCurves curves_vs_gt(const std::string& label, const nets::ModelSnapshot& model, const synthdata::SampleSet& sample_set,
                         const synthdata::Dataset& dataset, const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                         const DissectParams& params) {
    require(!sample_set.sample_ids.empty(), ErrorKind::Input, "sample set is empty");
    ModelCurves out;
    out.model = label;
    std::vector<int> ids = sample_set.sample_ids;
    std::sort(ids.begin(), ids.end());
    for (int id : ids) {
        const auto& s = dataset.sample(id);
        const auto stack = model_evidence(model, s.image, pda_params, sampler, params);
        BlockIoUCurve curve{id, Comparison::VsGroundTruth, label, {}};
        for (std::size_t b = 0; b < stack.size(); ++b) {
            const auto rm = best_match(stack[b], s.seg_mask);
            curve.entries.push_back({static_cast<int>(b) + 1, rm.map_index, rm.iou});
        }
        out.curves.push_back(std::move(curve));
    }
    out.block_means = mean_curve(out.curves);
    return out;
}

std::vector<ModelCurves> iou_gt_across_models(const std::vector<std::pair<std::string, const nets::ModelSnapshot*>>& models,
                                              const synthdata::SampleSet& sample_set, const synthdata::Dataset& dataset,
                                              const pda::PdaParams& pda_params, const pda::Sampler& sampler,
                                              const DissectParams& params) {
    require(!models.empty(), ErrorKind::Input, "no models to compare");
    for (const auto& [label, m] : models) require_same_architecture(*models.front().second, *m);
    std::vector<ModelCurves> out;
    for (const auto& [label, m] : models) {
        out.push_back(curves_vs_gt(label, *m, sample_set, dataset, pda_params, sampler, params));
    }
    return out;
}

std::string curves_csv(const std::vector<BlockIoUCurve>& curves) {
    std::string out = "image_id,block_id,map_index,iou,comparison\n";
    char buf[128];
    for (const auto& c : curves) {
        for (const auto& e : c.entries) {
            std::snprintf(buf, sizeof buf, "%d,%d,%d,%.17g,%s\n", c.image_id, e.block_id, e.map_index, e.iou,
                          to_string(c.comparison));
            out += buf;
        }
    }
    return out;
}

}  // namespace forgetdissect::dissect
