#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace forgetdissect::store {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kArchiveSchemaVersion = 1;
inline constexpr const char* kChecksumIndex = "SHA256SUMS";
inline constexpr const char* kRunManifest = "run_manifest.json";

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

std::string read_file(const fs::path& path);

/// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const fs::path& path, std::string_view bytes);
void write_json_atomic(const fs::path& path, const json& value);
json read_json(const fs::path& path);

/// `<path>.sha256` in sha256sum format.
void write_sidecar(const fs::path& path);
bool verify_sidecar(const fs::path& path);

// Little-endian encoding helpers, independent of host byte order.
void append_f32_le(std::string& out, std::span<const float> values);
std::vector<float> decode_f32_le(std::string_view bytes);

enum class DType { F32, U8 };
const char* to_string(DType dtype);
DType dtype_from_string(const std::string& name);

struct TensorEntry {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::vector<float> f32;         // populated when dtype == F32
    std::vector<std::uint8_t> u8;   // populated when dtype == U8

    static TensorEntry floats(std::string name, std::vector<std::int64_t> shape,
                              std::vector<float> values);
    static TensorEntry bytes(std::string name, std::vector<std::int64_t> shape,
                             std::vector<std::uint8_t> values);

    std::size_t element_count() const;
    std::size_t byte_size() const;
};

struct TensorArchive {
    json meta = json::object();
    std::vector<TensorEntry> entries;

    const TensorEntry& at(const std::string& name) const;
};

/// Writes `dir/manifest.json`, `dir/data.bin` and a sidecar for the blob.
/// Rejects duplicate entry names.
void write_archive(const fs::path& dir, const TensorArchive& archive);
/// Verifies the manifest bounds and the blob checksum.
TensorArchive read_archive(const fs::path& dir);

/// Writes `dir/SHA256SUMS` over every regular file below `dir` except the
/// run manifest, sidecars and the index itself, sorted by relative path.
void write_checksum_index(const fs::path& dir);
bool verify_checksum_index(const fs::path& dir);

struct RunManifest {
    std::string command;
    json config = json::object();  // stage key; part of the run id
    json effective_config = json::object();
    json seeds = json::object();
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;  // relative to the output directory
    std::map<std::string, double> timings_seconds;
};

json module_versions();

/// Deterministic id derived from command, config and inputs.
std::string run_id(const RunManifest& manifest);

/// Fails if any listed output does not exist.
void write_run_manifest(const fs::path& dir, const RunManifest& manifest);

}  // namespace forgetdissect::store
