#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "forgetdissect/grid.hpp"
#include "forgetdissect/nets.hpp"
#include "forgetdissect/random.hpp"
#include "json.hpp"

namespace forgetdissect::pda {

using json = nlohmann::json;
using nets::Rect;

inline constexpr int kDefaultWindow = 5;
inline constexpr int kDefaultSamples = 10;

enum class SamplerKind { Marginal, Conditional };
const char* to_string(SamplerKind kind);
SamplerKind sampler_from_string(const std::string& name);

/// Either a hidden feature map (block_id, map_index) or an output class.
struct Target {
    enum class Kind { Hidden, Class };
    Kind kind = Kind::Hidden;
    int block_id = 1;
    int map_index = 0;
    int class_id = 0;

    static Target hidden(int block_id, int map_index) { return {Kind::Hidden, block_id, map_index, 0}; }
    static Target output_class(int class_id) { return {Kind::Class, 0, 0, class_id}; }

    std::string tag() const;  // "block2/map5" or "class3"
    json to_json() const;
    friend bool operator==(const Target&, const Target&) = default;
};

struct PdaParams {
    int window = kDefaultWindow;
    SamplerKind sampler = SamplerKind::Marginal;
    int num_samples = kDefaultSamples;
    std::uint64_t seed = 0;
    int threads = 1;
    /// Training-set size N for the Laplace correction; <= 0 takes it from the
    /// model's provenance.
    std::int64_t laplace_n = 0;

    void validate(int height, int width) const;
    json to_json() const;
    static PdaParams from_json(const json& j);
    static PdaParams from_json(const json& j, const PdaParams& defaults);
};

struct RelevanceMap {
    Target target;
    ScoreGrid scores;  // input resolution
    int window = kDefaultWindow;
    SamplerKind sampler = SamplerKind::Marginal;
    int num_samples = kDefaultSamples;
    std::uint64_t seed = 0;
};

enum class ThresholdRule { Sign, Percentile };

struct EvidenceMask {
    Mask mask;
    ThresholdRule rule = ThresholdRule::Sign;
    double q = 0.0;  // fraction kept under the percentile rule

    std::string rule_tag() const;
};

/// Imputes the pixels of a window. Implementations are immutable after
/// construction and safe to share across threads.
class Sampler {
public:
    virtual ~Sampler() = default;
    virtual SamplerKind kind() const = 0;
    /// Writes window.rows() x window.cols() x channels values (row-major, channel-last).
    virtual void sample(const Image& image, const Rect& window, Rng& rng, std::span<double> out) const = 0;
};

/// Copies the same window from a randomly drawn donor image.
class MarginalSampler : public Sampler {
public:
    explicit MarginalSampler(std::vector<Image> donors);
    SamplerKind kind() const override { return SamplerKind::Marginal; }
    void sample(const Image& image, const Rect& window, Rng& rng, std::span<double> out) const override;

private:
    std::vector<Image> donors_;
};

/// Gaussian patch model fitted on donor images; draws the window conditioned
/// on a surrounding border of `border` pixels (edge pixels replicated).
class ConditionalSampler : public Sampler {
public:
    ConditionalSampler(const std::vector<Image>& donors, int window, int border = 2, int stride = 3);
    SamplerKind kind() const override { return SamplerKind::Conditional; }
    void sample(const Image& image, const Rect& window, Rng& rng, std::span<double> out) const override;

    int window() const { return window_; }

private:
    int window_, border_, channels_;
    Eigen::VectorXd mean_inner_, mean_border_;
    Eigen::MatrixXd gain_;      // Sigma_wb * Sigma_bb^-1
    Eigen::MatrixXd cond_chol_; // lower Cholesky factor of the conditional covariance
};

std::unique_ptr<Sampler> make_sampler(SamplerKind kind, const std::vector<Image>& donors, int window);

/// Quantities observed for one (possibly imputed) input.
struct Probe {
    Eigen::VectorXd hidden;       // summed like activations
    Eigen::VectorXd class_probs;  // averaged, then converted to weight of evidence
};

/// A model seen through PDA: a base evaluation plus evaluations with one
/// window replaced.
class ProbeModel {
public:
    virtual ~ProbeModel() = default;
    virtual std::unique_ptr<ProbeModel> clone() const = 0;
    virtual const Probe& base() const = 0;
    virtual void evaluate(const Rect& window, std::span<const double> patch, Probe& out) = 0;
};

/// Hidden quantities are every block's per-channel spatial sums, in block
/// then channel order; class probabilities follow the head rows.
class NetworkProbe : public ProbeModel {
public:
    NetworkProbe(const nets::ModelSnapshot& model, const Image& image);
    std::unique_ptr<ProbeModel> clone() const override;
    const Probe& base() const override { return base_; }
    void evaluate(const Rect& window, std::span<const double> patch, Probe& out) override;

private:
    nets::IncrementalEncoder encoder_;
    nets::ProbeResult scratch_;
    Probe base_;
};

/// Wraps an arbitrary function of the full image; re-evaluates it on every probe.
class FunctionProbe : public ProbeModel {
public:
    using Fn = std::function<Probe(const Image&)>;
    FunctionProbe(Fn fn, const Image& image);
    std::unique_ptr<ProbeModel> clone() const override;
    const Probe& base() const override { return base_; }
    void evaluate(const Rect& window, std::span<const double> patch, Probe& out) override;

private:
    Fn fn_;
    Image image_;
    Image work_;
    Probe base_;
};

/// Relevance for every quantity of a probe model.
struct RelevanceSet {
    std::vector<ScoreGrid> hidden;
    std::vector<ScoreGrid> classes;
};

/// Core sweep: every k x k window (stride 1) is imputed num_samples times.
/// Window relevance = base quantity - imputed quantity (hidden: mean of the
/// imputed sums; class: Laplace-corrected log2-odds of the mean imputed
/// probability). Pixel score = mean over the windows covering it.
RelevanceSet relevance_all(const ProbeModel& probe, const Image& image, const PdaParams& params,
                           const Sampler& sampler, std::int64_t laplace_n);

/// Laplace-corrected log2-odds with N training samples and C classes.
double weight_of_evidence(double p, std::int64_t n, int num_classes);

RelevanceMap pda_relevance(const nets::ModelSnapshot& model, const Image& image, const Target& target,
                           const PdaParams& params, const Sampler& sampler);

/// One map per channel of the block, from a single shared set of imputations.
std::vector<RelevanceMap> block_relevance_sweep(const nets::ModelSnapshot& model, const Image& image,
                                                int block_id, const PdaParams& params, const Sampler& sampler);

/// Every block at once: result[b] holds the maps of block b + 1.
std::vector<std::vector<RelevanceMap>> model_relevance_sweep(const nets::ModelSnapshot& model, const Image& image,
                                                             const PdaParams& params, const Sampler& sampler);

EvidenceMask evidence_mask(const RelevanceMap& relevance, ThresholdRule rule = ThresholdRule::Sign, double q = 0.0);
EvidenceMask evidence_mask(const ScoreGrid& scores, ThresholdRule rule = ThresholdRule::Sign, double q = 0.0);

/// Relevance archive: scores (float32) and evidence masks (uint8) per target.
void write_relevance_archive(const std::filesystem::path& dir, const std::vector<RelevanceMap>& maps,
                             const std::vector<EvidenceMask>& masks, const json& meta = json::object());

}  // namespace forgetdissect::pda
