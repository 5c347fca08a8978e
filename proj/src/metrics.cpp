#include "forgetdissect/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "forgetdissect/error.hpp"

namespace forgetdissect::metrics {

namespace {

using Gram = std::vector<int>;

std::map<Gram, int> ngram_counts(std::span<const int> tokens, int n) {
    std::map<Gram, int> counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[Gram(tokens.begin() + i, tokens.begin() + i + n)];
    }
    return counts;
}

struct OrderCounts {
    double matched = 0.0;
    double total = 0.0;
};

OrderCounts clipped_counts(std::span<const int> candidate, const std::vector<Tokens>& references, int n) {
    const auto cand = ngram_counts(candidate, n);
    std::map<Gram, int> max_ref;
    for (const auto& r : references) {
        for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    OrderCounts out;
    for (const auto& [g, c] : cand) {
        const auto it = max_ref.find(g);
        out.matched += std::min(c, it == max_ref.end() ? 0 : it->second);
        out.total += c;
    }
    return out;
}

std::size_t closest_ref_length(std::size_t c, const std::vector<Tokens>& references) {
    std::size_t best = references.front().size();
    for (const auto& r : references) {
        const auto d = [&](std::size_t x) { return x > c ? x - c : c - x; };
        if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    return best;
}

double brevity_penalty(double c, double r) {
    if (c > r) return 1.0;
    return std::exp(1.0 - r / c);
}

double bleu_from_counts(const std::vector<OrderCounts>& orders, double c, double r, bool smoothing) {
    double log_sum = 0.0;
    for (const auto& o : orders) {
        double p;
        if (o.matched > 0.0) {
            p = o.matched / o.total;
        } else if (smoothing) {
            p = 1.0 / (o.total + 1.0);
        } else {
            return 0.0;
        }
        log_sum += std::log(p);
    }
    return brevity_penalty(c, r) * std::exp(log_sum / static_cast<double>(orders.size()));
}

}  // namespace

double bleu_n(std::span<const int> candidate, const std::vector<Tokens>& references, int n, bool smoothing) {
    require(n >= 1, ErrorKind::Parameter, "BLEU order must be at least 1");
    require(!references.empty(), ErrorKind::Input, "BLEU needs at least one reference");
    if (candidate.empty()) return 0.0;
    std::vector<OrderCounts> orders;
    for (int k = 1; k <= n; ++k) orders.push_back(clipped_counts(candidate, references, k));
    const double c = static_cast<double>(candidate.size());
    const double r = static_cast<double>(closest_ref_length(candidate.size(), references));
    return bleu_from_counts(orders, c, r, smoothing);
}

double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references, int n) {
    require(n >= 1, ErrorKind::Parameter, "BLEU order must be at least 1");
    require(candidates.size() == references.size(), ErrorKind::Input, "one reference list per candidate is required");
    std::vector<OrderCounts> orders(static_cast<std::size_t>(n));
    double c = 0.0;
    double r = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        require(!references[i].empty(), ErrorKind::Input, "BLEU needs at least one reference");
        for (int k = 1; k <= n; ++k) {
            const auto o = clipped_counts(candidates[i], references[i], k);
            orders[k - 1].matched += o.matched;
            orders[k - 1].total += o.total;
        }
        c += static_cast<double>(candidates[i].size());
        r += static_cast<double>(closest_ref_length(candidates[i].size(), references[i]));
    }
    if (c == 0.0) return 0.0;
    return bleu_from_counts(orders, c, r, false);
}

std::size_t lcs_length(std::span<const int> a, std::span<const int> b) {
    std::vector<std::size_t> row(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = 0;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = a[i - 1] == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
            diag = up;
        }
    }
    return row[b.size()];
}

double rouge_l(std::span<const int> candidate, const std::vector<Tokens>& references, double beta) {
    require(!references.empty(), ErrorKind::Input, "ROUGE-L needs at least one reference");
    if (candidate.empty()) return 0.0;
    double best = 0.0;
    for (const auto& r : references) {
        const auto l = static_cast<double>(lcs_length(candidate, r));
        if (l == 0.0) continue;
        const double p = l / static_cast<double>(candidate.size());
        const double rec = l / static_cast<double>(r.size());
        const double f = (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
        best = std::max(best, f);
    }
    return best;
}

Tokens strip_special(std::span<const int> tokens) {
    Tokens out;
    for (int t : tokens) {
        if (t != synthdata::kPad && t != synthdata::kBos && t != synthdata::kEos) out.push_back(t);
    }
    return out;
}

const char* to_string(Scope scope) { return scope == Scope::Past ? "past" : "new"; }

json TaskMetrics::to_json() const {
    return {{"scope", to_string(scope)}, {"accuracy", accuracy}, {"bleu1", bleu1},
            {"bleu4", bleu4},            {"rouge_l", rouge_l},   {"n", n}};
}

TaskMetrics evaluate_scope(const nets::ModelSnapshot& model, const synthdata::Dataset& dataset,
                           const std::vector<int>& ids, const std::vector<int>& classes, Scope scope) {
    const auto selected = synthdata::ids_with_labels(dataset, ids, classes);
    require(!selected.empty(), ErrorKind::Input,
            std::string("no evaluation samples for the ") + to_string(scope) + " scope");
    TaskMetrics m;
    m.scope = scope;
    m.n = static_cast<int>(selected.size());
    std::vector<Tokens> candidates;
    std::vector<std::vector<Tokens>> references;
    double correct = 0.0;
    double rouge_sum = 0.0;
    for (int id : selected) {
        const auto& s = dataset.sample(id);
        if (nets::classify(model, s.image) == s.label) correct += 1.0;
        candidates.push_back(strip_special(nets::decode_caption(model, s.image)));
        references.push_back({strip_special(s.caption)});
        rouge_sum += rouge_l(candidates.back(), references.back());
    }
    m.accuracy = correct / m.n;
    m.bleu1 = corpus_bleu(candidates, references, 1);
    m.bleu4 = corpus_bleu(candidates, references, 4);
    m.rouge_l = rouge_sum / m.n;
    return m;
}

std::pair<TaskMetrics, TaskMetrics> evaluate_model(const nets::ModelSnapshot& model, const synthdata::Dataset& dataset,
                                                   const std::vector<int>& test_ids,
                                                   const std::vector<int>& past_classes,
                                                   const std::vector<int>& new_classes) {
    for (int c : past_classes) {
        require(std::find(new_classes.begin(), new_classes.end(), c) == new_classes.end(), ErrorKind::Input,
                "past and new scopes overlap");
    }
    return {evaluate_scope(model, dataset, test_ids, past_classes, Scope::Past),
            evaluate_scope(model, dataset, test_ids, new_classes, Scope::New)};
}

std::string csv_row(int step, const std::string& policy, const TaskMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%s,%s,%.17g,%.17g,%.17g,%.17g,%d", step, policy.c_str(), to_string(m.scope),
                  m.accuracy, m.bleu1, m.bleu4, m.rouge_l, m.n);
    return buf;
}

}  // namespace forgetdissect::metrics
