#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "forgetdissect/grid.hpp"
#include "json.hpp"

namespace forgetdissect::synthdata {

using json = nlohmann::json;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kDatasetSchemaVersion = 1;

struct ColorSpec {
    std::string name;
    std::array<float, 3> rgb{};
};

/// Shapes the renderer knows; a dataset class is one shape.
const std::vector<std::string>& known_shapes();

struct DatasetConfig {
    int image_size = 48;
    std::vector<std::string> classes = known_shapes();
    int samples_per_class = 100;
    std::vector<ColorSpec> colors = {{"red", {0.90f, 0.15f, 0.15f}},
                                     {"green", {0.15f, 0.80f, 0.20f}},
                                     {"blue", {0.20f, 0.30f, 0.95f}},
                                     {"yellow", {0.95f, 0.90f, 0.15f}}};
    std::vector<std::string> textures = {"plain", "striped", "dotted", "checkered"};
    double noise = 0.03;

    void validate() const;
    json to_json() const;
    static DatasetConfig from_json(const json& j);
};

class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> words);

    /// PAD/BOS/EOS/UNK followed by the template words in config order.
    static Vocabulary for_config(const DatasetConfig& config);

    int id(const std::string& word) const;  // kUnk when absent
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }

    std::string render(const std::vector<int>& tokens) const;

private:
    std::vector<std::string> words_;
};

struct ImageSample {
    int sample_id = 0;
    int label = 0;
    Image image;      // H x W x 3
    Mask seg_mask;    // H x W, 1 = object
    std::vector<int> caption;  // ends with kEos

    friend bool operator==(const ImageSample&, const ImageSample&) = default;
};

struct Dataset {
    DatasetConfig config;
    std::uint64_t seed = 0;
    Vocabulary vocabulary;
    std::vector<ImageSample> samples;  // samples[i].sample_id == i

    const ImageSample& sample(int id) const;
    int num_classes() const { return static_cast<int>(config.classes.size()); }
};

/// Renders one sample. `texture_override` replaces only the background; all
/// random draws are made before it applies, so geometry and mask are unchanged.
ImageSample render_sample(const DatasetConfig& config, const Vocabulary& vocabulary, int label,
                          int sample_id, std::uint64_t sample_seed,
                          std::optional<int> texture_override = std::nullopt);

Dataset generate_dataset(const DatasetConfig& config, std::uint64_t seed);

/// Caption words that belong to a class (the shape word).
int class_word(const Dataset& dataset, int label);

struct Splits {
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;

    json to_json() const;
    static Splits from_json(const json& j);
};

/// Stratified per class; each split sorted by id.
Splits split_dataset(const Dataset& dataset, const std::array<double, 3>& ratios, std::uint64_t seed);

struct ClassSchedule {
    std::vector<int> base_classes;
    std::vector<int> incremental_classes;

    void validate(int num_classes) const;
    json to_json() const;
    static ClassSchedule from_json(const json& j);
};

/// First half of the classes as base, the rest one per step.
ClassSchedule default_schedule(int num_classes);

struct SampleSet {
    std::vector<int> sample_ids;
};

using Classifier = std::function<int(const Image&)>;

/// Up to `k_per_class` correctly classified candidates of each base class, in
/// ascending id order. Classes without any hit are skipped with a warning.
SampleSet select_sample_set(const Dataset& dataset, const std::vector<int>& candidate_ids,
                            const std::vector<int>& base_classes, const Classifier& classify,
                            int k_per_class, std::vector<std::string>* warnings = nullptr);

std::vector<int> ids_with_labels(const Dataset& dataset, const std::vector<int>& ids,
                                 const std::vector<int>& labels);

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace forgetdissect::synthdata
