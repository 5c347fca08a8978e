#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "forgetdissect/grid.hpp"
#include "json.hpp"

namespace forgetdissect::synthdata {
struct Dataset;
}

namespace forgetdissect::nets {

using json = nlohmann::json;

inline constexpr int kSnapshotSchemaVersion = 1;
inline constexpr char kSnapshotMagic[8] = {'F', 'D', 'S', 'N', 'A', 'P', '0', '1'};

enum class Activation { Relu, Identity, Tanh };

struct ConvLayerSpec {
    int channels = 8;
    int kernel = 3;
    Activation activation = Activation::Relu;
    bool pool = true;  // 2x2 max pool, stride 2
};

struct BlockSpec {
    int block_id = 1;
    std::vector<ConvLayerSpec> layers;
};

struct DecoderConfig {
    int embed_dim = 16;
    int hidden_dim = 32;
    int vocab_size = 0;
    int max_length = 12;
};

struct ModelConfig {
    int input_size = 48;
    int input_channels = 3;
    std::vector<BlockSpec> blocks;
    bool use_bias = true;
    DecoderConfig decoder;

    /// Four single-conv blocks of 16 channels with halving pools.
    static ModelConfig desk_default(int vocab_size, int input_size = 48);

    void validate() const;
    int num_blocks() const { return static_cast<int>(blocks.size()); }
    /// Spatial side of each block's output.
    std::vector<int> block_sizes() const;
    std::vector<int> block_channels() const;

    json to_json() const;
    static ModelConfig from_json(const json& j);
};

struct Tensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct ParamGroup {
    std::string name;
    std::vector<Tensor> tensors;

    Tensor& tensor(const std::string& name);
    const Tensor& tensor(const std::string& name) const;
    std::size_t parameter_count() const;

    friend bool operator==(const ParamGroup&, const ParamGroup&) = default;
};

struct Provenance {
    std::vector<std::vector<int>> tasks;  // class ids of every training task, in order
    std::uint64_t seed = 0;
    std::int64_t train_samples = 0;       // size of the most recent training set

    json to_json() const;
    static Provenance from_json(const json& j);
};

/// Group names, in snapshot order: block1..blockK, projection, classifier,
/// embedding, recurrent, linear. The encoder is the blocks plus the
/// projection of the features into the decoder's input space.
std::vector<std::string> group_names(int num_blocks);
std::string block_group(int block_id);
bool is_encoder_group(const std::string& name);
bool is_decoder_group(const std::string& name);
inline constexpr const char* kClassifierGroup = "classifier";
inline constexpr const char* kProjectionGroup = "projection";

struct ModelSnapshot {
    ModelConfig config;
    std::vector<int> head_classes;  // dataset class id of each classifier row
    std::vector<ParamGroup> groups;
    Provenance provenance;

    ParamGroup& group(const std::string& name);
    const ParamGroup& group(const std::string& name) const;
    bool has_group(const std::string& name) const;
    int num_blocks() const { return config.num_blocks(); }
    int head_row(int class_id) const;  // -1 when the class has no row
    std::size_t parameter_count() const;

    friend bool operator==(const ModelSnapshot& a, const ModelSnapshot& b) {
        return a.head_classes == b.head_classes && a.groups == b.groups;
    }
};

/// Deterministic initialization; parameters are float32-representable.
ModelSnapshot build_model(const ModelConfig& config, const std::vector<int>& head_classes, std::uint64_t seed);

/// Appends freshly initialized classifier rows for classes not yet in the head.
void widen_head(ModelSnapshot& model, const std::vector<int>& classes, std::uint64_t seed);

/// Same structure as the model's groups, all values zero.
std::vector<ParamGroup> zeros_like(const ModelSnapshot& model);

struct BlockOutput {
    int height = 0;
    int width = 0;
    Eigen::MatrixXd maps;  // channels x (height * width), pixel index r * width + c
};

struct Features {
    std::vector<BlockOutput> blocks;
    Eigen::VectorXd logits;  // one per head row
};

Features forward_features(const ModelSnapshot& model, const Image& image);

/// Dataset class id with the highest logit.
int classify(const ModelSnapshot& model, const Image& image);

/// Greedy decoding after BOS; stops at EOS (included) or max_length tokens.
std::vector<int> decode_caption(const ModelSnapshot& model, const Image& image);

/// -ln p[target]. `probabilities` must be a distribution.
double cross_entropy(std::span<const double> probabilities, int target);

struct LossBreakdown {
    double caption = 0.0;         // mean per-token cross-entropy
    double classification = 0.0;
    double total = 0.0;           // equal-weight sum
};

LossBreakdown compute_loss(const ModelSnapshot& model, const Image& image, int label,
                           const std::vector<int>& caption);

/// Adds d(total loss)/d(params) into `gradients` (shaped by zeros_like).
LossBreakdown accumulate_gradients(const ModelSnapshot& model, const Image& image, int label,
                                   const std::vector<int>& caption, std::vector<ParamGroup>& gradients);

using LrMultipliers = std::map<std::string, double>;

struct TrainHyperparams {
    int epochs = 20;
    double learning_rate = 0.05;
    int batch_size = 16;

    json to_json() const;
    static TrainHyperparams from_json(const json& j);
    static TrainHyperparams from_json(const json& j, const TrainHyperparams& defaults);
};

struct TrainResult {
    ModelSnapshot model;
    std::vector<double> epoch_losses;
};

/// Plain SGD over `train_ids`. Groups with multiplier 0 are left untouched;
/// groups missing from `multipliers` train at 1.0. All task classes must
/// already have classifier rows.
TrainResult train_task(const ModelSnapshot& model, const synthdata::Dataset& dataset,
                       const std::vector<int>& train_ids, const std::vector<int>& task_classes,
                       const LrMultipliers& multipliers, const TrainHyperparams& hyperparams,
                       std::uint64_t seed);

void save_snapshot(const ModelSnapshot& model, const std::filesystem::path& path);
ModelSnapshot load_snapshot(const std::filesystem::path& path);

/// Pixel rectangle [row0, row1) x [col0, col1).
struct Rect {
    int row0 = 0, row1 = 0, col0 = 0, col1 = 0;

    int rows() const { return row1 - row0; }
    int cols() const { return col1 - col0; }
    bool empty() const { return row1 <= row0 || col1 <= col0; }
};

struct ProbeResult {
    std::vector<Eigen::VectorXd> block_sums;  // per block, spatial sum of every channel
    Eigen::VectorXd logits;
};

/// Re-evaluates the encoder and classifier head for copies of a fixed base
/// image in which one rectangle has been replaced, recomputing only the
/// affected region of each layer. Not thread-safe; give each thread its own copy.
class IncrementalEncoder {
public:
    IncrementalEncoder(const ModelSnapshot& model, const Image& base);

    const ProbeResult& base() const { return base_result_; }

    /// `patch` holds rect.rows() x rect.cols() x channels values, row-major, channel-last.
    void evaluate(const Rect& rect, std::span<const double> patch, ProbeResult& out);

private:
    struct Layer {
        int in_height, in_width, in_channels;
        int out_height, out_width, out_channels;
        int kernel;
        Activation activation;
        bool pool;
        Eigen::MatrixXd weight;  // out_channels x (kernel * kernel * in_channels)
        Eigen::VectorXd bias;
        int block_index;         // block whose output this layer produces, or -1
    };

    std::vector<Layer> layers_;
    std::vector<Eigen::MatrixXd> base_outputs_;     // [0] is the input image
    std::vector<Eigen::MatrixXd> scratch_outputs_;
    Eigen::MatrixXd classifier_weight_;
    Eigen::VectorXd classifier_bias_;
    ProbeResult base_result_;
    Eigen::MatrixXd cols_;
};

}  // namespace forgetdissect::nets
