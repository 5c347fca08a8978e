#include "forgetdissect/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <set>

#include "forgetdissect/error.hpp"
#include "forgetdissect/random.hpp"
#include "forgetdissect/store.hpp"

namespace forgetdissect::synthdata {

namespace fs = std::filesystem;

const std::vector<std::string>& known_shapes() {
    static const std::vector<std::string> shapes = {"circle", "square", "triangle", "star",
                                                    "cross",  "diamond", "ring",   "hexagon"};
    return shapes;
}

void DatasetConfig::validate() const {
    require(image_size >= 16, ErrorKind::Config, "image_size must be at least 16 px");
    require(classes.size() >= 2, ErrorKind::Config, "at least 2 classes are required");
    require(samples_per_class >= 1, ErrorKind::Config, "samples_per_class must be positive");
    require(!colors.empty(), ErrorKind::Config, "at least one color is required");
    require(!textures.empty(), ErrorKind::Config, "at least one texture is required");
    require(noise >= 0.0 && noise < 0.5, ErrorKind::Config, "noise must lie in [0, 0.5)");
    std::set<std::string> seen;
    for (const auto& c : classes) {
        require(std::find(known_shapes().begin(), known_shapes().end(), c) != known_shapes().end(),
                ErrorKind::Config, "unknown shape class '" + c + "'");
        require(seen.insert(c).second, ErrorKind::Config, "duplicate class '" + c + "'");
    }
    static const std::set<std::string> textures_known = {"plain", "striped", "dotted", "checkered"};
    for (const auto& t : textures) {
        require(textures_known.count(t) == 1, ErrorKind::Config, "unknown texture '" + t + "'");
    }
}

json DatasetConfig::to_json() const {
    json cols = json::array();
    for (const auto& c : colors) cols.push_back({{"name", c.name}, {"rgb", c.rgb}});
    return {{"image_size", image_size}, {"classes", classes},   {"samples_per_class", samples_per_class},
            {"colors", cols},           {"textures", textures}, {"noise", noise}};
}

DatasetConfig DatasetConfig::from_json(const json& j) {
    DatasetConfig c;
    try {
        c.image_size = j.value("image_size", c.image_size);
        c.classes = j.value("classes", c.classes);
        c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
        c.textures = j.value("textures", c.textures);
        c.noise = j.value("noise", c.noise);
        if (j.contains("colors")) {
            c.colors.clear();
            for (const auto& item : j.at("colors")) {
                c.colors.push_back({item.at("name").get<std::string>(), item.at("rgb").get<std::array<float, 3>>()});
            }
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("invalid dataset config: ") + e.what());
    }
    return c;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {}

Vocabulary Vocabulary::for_config(const DatasetConfig& config) {
    std::vector<std::string> words = {"<pad>", "<bos>", "<eos>", "<unk>", "a", "on", "background"};
    auto add = [&](const std::string& w) {
        if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
    };
    for (const auto& c : config.colors) add(c.name);
    for (const auto& c : config.classes) add(c);
    for (const auto& t : config.textures) add(t);
    return Vocabulary(std::move(words));
}

int Vocabulary::id(const std::string& word) const {
    const auto it = std::find(words_.begin(), words_.end(), word);
    return it == words_.end() ? kUnk : static_cast<int>(it - words_.begin());
}

const std::string& Vocabulary::word(int id) const {
    require(id >= 0 && id < size(), ErrorKind::Input, "token id out of vocabulary range");
    return words_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::render(const std::vector<int>& tokens) const {
    std::string out;
    for (int t : tokens) {
        if (t == kEos) break;
        if (t == kPad || t == kBos) continue;
        if (!out.empty()) out += ' ';
        out += word(t);
    }
    return out;
}

namespace {

struct Point {
    double x, y;
};

bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) inside = !inside;
    }
    return inside;
}

std::vector<Point> regular_polygon(int sides, double radius, double inner_ratio = 1.0) {
    std::vector<Point> pts;
    const int n = inner_ratio < 1.0 ? 2 * sides : sides;
    for (int i = 0; i < n; ++i) {
        const double angle = -std::numbers::pi / 2 + 2 * std::numbers::pi * i / n;
        const double r = (inner_ratio < 1.0 && i % 2 == 1) ? radius * inner_ratio : radius;
        pts.push_back({r * std::cos(angle), r * std::sin(angle)});
    }
    return pts;
}

/// Point (x, y) is already translated to the shape center and un-rotated.
bool inside_shape(const std::string& shape, double radius, double x, double y) {
    const double d = std::hypot(x, y);
    if (shape == "circle") return d <= radius;
    if (shape == "ring") return d <= radius && d >= 0.55 * radius;
    if (shape == "square") return std::abs(x) <= 0.8 * radius && std::abs(y) <= 0.8 * radius;
    if (shape == "cross") {
        const double arm = 0.33 * radius;
        return (std::abs(x) <= radius && std::abs(y) <= arm) || (std::abs(y) <= radius && std::abs(x) <= arm);
    }
    if (shape == "diamond") return std::abs(x) / (0.6 * radius) + std::abs(y) / radius <= 1.0;
    if (shape == "triangle") {
        static const auto tri = regular_polygon(3, 1.0);
        return inside_polygon(tri, x / radius, y / radius);
    }
    if (shape == "hexagon") {
        static const auto hex = regular_polygon(6, 1.0);
        return inside_polygon(hex, x / radius, y / radius);
    }
    if (shape == "star") {
        static const auto star = regular_polygon(5, 1.0, 0.45);
        return inside_polygon(star, x / radius, y / radius);
    }
    fail(ErrorKind::Config, "unknown shape '" + shape + "'");
}

float background_value(const std::string& texture, double gray, double contrast, int phase, bool vertical,
                       int r, int c) {
    constexpr int period = 6;
    const int u = (vertical ? c : r) + phase;
    const int v = (vertical ? r : c) + phase;
    double value = gray;
    if (texture == "striped") {
        value += (u / (period / 2)) % 2 == 0 ? contrast : -contrast;
    } else if (texture == "dotted") {
        value += (u % period < 2 && v % period < 2) ? 2 * contrast : 0.0;
    } else if (texture == "checkered") {
        value += ((u / period) + (v / period)) % 2 == 0 ? contrast : -contrast;
    }
    return static_cast<float>(value);
}

}  // namespace

ImageSample render_sample(const DatasetConfig& config, const Vocabulary& vocabulary, int label, int sample_id,
                          std::uint64_t sample_seed, std::optional<int> texture_override) {
    require(label >= 0 && label < static_cast<int>(config.classes.size()), ErrorKind::Input, "label out of range");
    const int size = config.image_size;
    const auto& shape = config.classes[static_cast<std::size_t>(label)];
    Rng rng(sample_seed);

    ImageSample s;
    s.sample_id = sample_id;
    s.label = label;
    for (int attempt = 0;; ++attempt) {
        require(attempt < 100, ErrorKind::Config, "cannot place a valid shape; image too small");
        const double radius = rng.uniform(0.25, 0.38) * size;
        const double cx = rng.uniform(radius + 1.0, size - radius - 1.0);
        const double cy = rng.uniform(radius + 1.0, size - radius - 1.0);
        const double rotation = rng.uniform(-0.4, 0.4);
        const double cos_r = std::cos(rotation);
        const double sin_r = std::sin(rotation);
        s.seg_mask = Mask(size, size, 1, 0);
        for (int r = 0; r < size; ++r) {
            for (int c = 0; c < size; ++c) {
                const double dx = c + 0.5 - cx;
                const double dy = r + 0.5 - cy;
                const double x = cos_r * dx + sin_r * dy;
                const double y = -sin_r * dx + cos_r * dy;
                s.seg_mask.at(r, c) = inside_shape(shape, radius, x, y) ? 1 : 0;
            }
        }
        const auto set = count_set(s.seg_mask);
        if (set >= 1 && set + 1 <= s.seg_mask.pixels()) break;
    }

    const auto color_index = rng.below(config.colors.size());
    int texture_index = static_cast<int>(rng.below(config.textures.size()));
    const double gray = rng.uniform(0.35, 0.6);
    const double contrast = rng.uniform(0.08, 0.15);
    const int phase = static_cast<int>(rng.below(6));
    const bool vertical = rng.below(2) == 1;
    std::array<double, 3> jitter{};
    for (auto& j : jitter) j = rng.uniform(-0.05, 0.05);
    if (texture_override) texture_index = *texture_override;
    const auto& color = config.colors[color_index];
    const auto& texture = config.textures[static_cast<std::size_t>(texture_index)];

    s.image = Image(size, size, 3, 0.0f);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            const bool object = s.seg_mask.at(r, c) != 0;
            const float bg = background_value(texture, gray, contrast, phase, vertical, r, c);
            for (int ch = 0; ch < 3; ++ch) {
                double v = object ? color.rgb[static_cast<std::size_t>(ch)] + jitter[static_cast<std::size_t>(ch)] : bg;
                v += config.noise * rng.uniform(-1.0, 1.0);
                s.image.at(r, c, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }

    s.caption = {vocabulary.id("a"),  vocabulary.id(color.name), vocabulary.id(shape),
                 vocabulary.id("on"), vocabulary.id("a"),        vocabulary.id(texture),
                 vocabulary.id("background"), kEos};
    return s;
}

Dataset generate_dataset(const DatasetConfig& config, std::uint64_t seed) {
    config.validate();
    Dataset d;
    d.config = config;
    d.seed = seed;
    d.vocabulary = Vocabulary::for_config(config);
    const int n_classes = static_cast<int>(config.classes.size());
    d.samples.reserve(static_cast<std::size_t>(n_classes) * config.samples_per_class);
    for (int label = 0; label < n_classes; ++label) {
        for (int i = 0; i < config.samples_per_class; ++i) {
            const int id = static_cast<int>(d.samples.size());
            d.samples.push_back(render_sample(config, d.vocabulary, label, id,
                                              derive_seed(seed, static_cast<std::uint64_t>(id))));
        }
    }
    return d;
}

const ImageSample& Dataset::sample(int id) const {
    require(id >= 0 && id < static_cast<int>(samples.size()), ErrorKind::Input,
            "sample id " + std::to_string(id) + " not in dataset");
    return samples[static_cast<std::size_t>(id)];
}

int class_word(const Dataset& dataset, int label) {
    return dataset.vocabulary.id(dataset.config.classes.at(static_cast<std::size_t>(label)));
}

json Splits::to_json() const { return {{"train", train}, {"val", val}, {"test", test}}; }

Splits Splits::from_json(const json& j) {
    try {
        return {j.at("train").get<std::vector<int>>(), j.at("val").get<std::vector<int>>(),
                j.at("test").get<std::vector<int>>()};
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, std::string("invalid splits: ") + e.what());
    }
}

Splits split_dataset(const Dataset& dataset, const std::array<double, 3>& ratios, std::uint64_t seed) {
    double total = 0.0;
    for (double r : ratios) {
        require(r > 0.0, ErrorKind::Config, "split ratios must be positive");
        total += r;
    }
    require(std::abs(total - 1.0) < 1e-9, ErrorKind::Config, "split ratios must sum to 1");

    std::map<int, std::vector<int>> by_class;
    for (const auto& s : dataset.samples) by_class[s.label].push_back(s.sample_id);

    Splits out;
    for (auto& [label, ids] : by_class) {
        Rng rng(derive_seed(seed, 0x5b117u, static_cast<std::uint64_t>(label)));
        rng.shuffle(ids.begin(), ids.end());
        const auto n = static_cast<double>(ids.size());
        const auto n_train = static_cast<std::size_t>(std::llround(n * ratios[0]));
        const auto n_val = static_cast<std::size_t>(std::llround(n * ratios[1]));
        require(n_train >= 1 && n_val >= 1 && n_train + n_val < ids.size(), ErrorKind::Config,
                "class " + std::to_string(label) + " would leave a split without samples");
        out.train.insert(out.train.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
        out.val.insert(out.val.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                       ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
        out.test.insert(out.test.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

void ClassSchedule::validate(int num_classes) const {
    require(!base_classes.empty() && !incremental_classes.empty(), ErrorKind::Config,
            "schedule needs base and incremental classes");
    std::set<int> seen;
    for (int c : base_classes) {
        require(c >= 0 && c < num_classes, ErrorKind::Config, "schedule class " + std::to_string(c) + " absent from dataset");
        require(seen.insert(c).second, ErrorKind::Config, "schedule lists class " + std::to_string(c) + " twice");
    }
    for (int c : incremental_classes) {
        require(c >= 0 && c < num_classes, ErrorKind::Config, "schedule class " + std::to_string(c) + " absent from dataset");
        require(seen.insert(c).second, ErrorKind::Config, "schedule lists class " + std::to_string(c) + " twice");
    }
    require(static_cast<int>(seen.size()) == num_classes, ErrorKind::Config, "schedule does not cover all classes");
}

json ClassSchedule::to_json() const {
    return {{"base_classes", base_classes}, {"incremental_classes", incremental_classes}};
}

ClassSchedule ClassSchedule::from_json(const json& j) {
    try {
        return {j.at("base_classes").get<std::vector<int>>(), j.at("incremental_classes").get<std::vector<int>>()};
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("invalid schedule: ") + e.what());
    }
}

ClassSchedule default_schedule(int num_classes) {
    ClassSchedule s;
    const int base = num_classes / 2;
    for (int c = 0; c < num_classes; ++c) (c < base ? s.base_classes : s.incremental_classes).push_back(c);
    return s;
}

std::vector<int> ids_with_labels(const Dataset& dataset, const std::vector<int>& ids, const std::vector<int>& labels) {
    std::vector<int> out;
    for (int id : ids) {
        if (std::find(labels.begin(), labels.end(), dataset.sample(id).label) != labels.end()) out.push_back(id);
    }
    return out;
}

SampleSet select_sample_set(const Dataset& dataset, const std::vector<int>& candidate_ids,
                            const std::vector<int>& base_classes, const Classifier& classify, int k_per_class,
                            std::vector<std::string>* warnings) {
    require(k_per_class >= 1, ErrorKind::Parameter, "k_per_class must be positive");
    std::vector<int> sorted = candidate_ids;
    std::sort(sorted.begin(), sorted.end());
    SampleSet out;
    for (int label : base_classes) {
        int taken = 0;
        for (int id : sorted) {
            if (taken == k_per_class) break;
            const auto& s = dataset.sample(id);
            if (s.label != label) continue;
            if (classify(s.image) == label) {
                out.sample_ids.push_back(id);
                ++taken;
            }
        }
        if (taken == 0 && warnings) {
            warnings->push_back("class " + std::to_string(label) + " has no correctly classified test image; skipped");
        }
    }
    require(!out.sample_ids.empty(), ErrorKind::Model, "sample set is empty: no base-class image is classified correctly");
    std::sort(out.sample_ids.begin(), out.sample_ids.end());
    return out;
}

namespace {

std::string sample_stem(int id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06d", id);
    return buf;
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& dataset) {
    fs::create_directories(dir / "samples");
    json index = json::array();
    for (const auto& s : dataset.samples) {
        const auto stem = sample_stem(s.sample_id);
        std::string image_bytes;
        store::append_f32_le(image_bytes, s.image.data);
        store::write_file_atomic(dir / "samples" / (stem + ".image.f32"), image_bytes);
        store::write_file_atomic(dir / "samples" / (stem + ".mask.u8"),
                                 std::string(s.seg_mask.data.begin(), s.seg_mask.data.end()));
        index.push_back({{"id", s.sample_id},
                         {"label", s.label},
                         {"caption", s.caption},
                         {"image", "samples/" + stem + ".image.f32"},
                         {"mask", "samples/" + stem + ".mask.u8"}});
    }
    json manifest = {{"schema", "forgetdissect.dataset"},
                     {"schema_version", kDatasetSchemaVersion},
                     {"seed", dataset.seed},
                     {"config", dataset.config.to_json()},
                     {"image_layout", "float32 little-endian, row-major, channel-last HxWx3"},
                     {"mask_layout", "uint8, row-major HxW"},
                     {"vocabulary", dataset.vocabulary.words()},
                     {"samples", index}};
    store::write_json_atomic(dir / "manifest.json", manifest);
}

Dataset load_dataset(const fs::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    require(fs::exists(manifest_path), ErrorKind::Io, "missing dataset manifest " + manifest_path.string());
    const auto m = store::read_json(manifest_path);
    Dataset d;
    try {
        require(m.at("schema") == "forgetdissect.dataset", ErrorKind::Format, "not a dataset manifest");
        require(m.at("schema_version") == kDatasetSchemaVersion, ErrorKind::Format, "dataset schema version mismatch");
        d.config = DatasetConfig::from_json(m.at("config"));
        d.seed = m.at("seed").get<std::uint64_t>();
        d.vocabulary = Vocabulary(m.at("vocabulary").get<std::vector<std::string>>());
        const int size = d.config.image_size;
        for (const auto& item : m.at("samples")) {
            ImageSample s;
            s.sample_id = item.at("id").get<int>();
            s.label = item.at("label").get<int>();
            s.caption = item.at("caption").get<std::vector<int>>();
            const auto image_bytes = store::read_file(dir / item.at("image").get<std::string>());
            require(image_bytes.size() == static_cast<std::size_t>(size) * size * 3 * 4, ErrorKind::Format,
                    "truncated image buffer for sample " + std::to_string(s.sample_id));
            s.image = Image(size, size, 3);
            s.image.data = store::decode_f32_le(image_bytes);
            const auto mask_bytes = store::read_file(dir / item.at("mask").get<std::string>());
            require(mask_bytes.size() == static_cast<std::size_t>(size) * size, ErrorKind::Format,
                    "truncated mask buffer for sample " + std::to_string(s.sample_id));
            s.seg_mask = Mask(size, size, 1);
            s.seg_mask.data.assign(mask_bytes.begin(), mask_bytes.end());
            require(s.sample_id == static_cast<int>(d.samples.size()), ErrorKind::Format, "sample index out of order");
            d.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("corrupt dataset manifest: ") + e.what());
    }
    return d;
}

}  // namespace forgetdissect::synthdata
