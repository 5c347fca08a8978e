#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "forgetdissect/nets.hpp"
#include "forgetdissect/synthdata.hpp"
#include "json.hpp"

namespace forgetdissect::metrics {

using json = nlohmann::json;
using Tokens = std::vector<int>;

/// Modified n-gram precision up to order n (geometric mean) times brevity
/// penalty. With smoothing, orders without any match count (0+1)/(total+1).
double bleu_n(std::span<const int> candidate, const std::vector<Tokens>& references, int n, bool smoothing = false);

/// Counts pooled over the corpus before the geometric mean; one entry of
/// `references` per candidate.
double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references, int n);

/// Longest common subsequence length.
std::size_t lcs_length(std::span<const int> a, std::span<const int> b);

inline constexpr double kRougeBeta = 1.2;

/// LCS F-measure, max over references.
double rouge_l(std::span<const int> candidate, const std::vector<Tokens>& references, double beta = kRougeBeta);

/// Drops PAD, BOS and EOS.
Tokens strip_special(std::span<const int> tokens);

enum class Scope { Past, New };
const char* to_string(Scope scope);

struct TaskMetrics {
    Scope scope = Scope::Past;
    double accuracy = 0.0;
    double bleu1 = 0.0;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    int n = 0;

    json to_json() const;
};

/// Metrics over the ids whose label is in `classes`.
TaskMetrics evaluate_scope(const nets::ModelSnapshot& model, const synthdata::Dataset& dataset,
                           const std::vector<int>& ids, const std::vector<int>& classes, Scope scope);

std::pair<TaskMetrics, TaskMetrics> evaluate_model(const nets::ModelSnapshot& model, const synthdata::Dataset& dataset,
                                                   const std::vector<int>& test_ids,
                                                   const std::vector<int>& past_classes,
                                                   const std::vector<int>& new_classes);

inline constexpr const char* kMetricsCsvHeader = "step,policy,scope,accuracy,bleu1,bleu4,rouge_l,n";

std::string csv_row(int step, const std::string& policy, const TaskMetrics& m);

}  // namespace forgetdissect::metrics
