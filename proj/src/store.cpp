#include "forgetdissect/store.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "forgetdissect/error.hpp"

namespace forgetdissect::store {

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kBlobName = "data.bin";
constexpr const char* kSidecarSuffix = ".sha256";

std::string hex(const unsigned char* digest, unsigned length) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(length * 2, '0');
    for (unsigned i = 0; i < length; ++i) {
        out[2 * i] = digits[digest[i] >> 4];
        out[2 * i + 1] = digits[digest[i] & 0xf];
    }
    return out;
}

bool is_excluded_from_index(const fs::path& relative) {
    const auto name = relative.filename().string();
    if (name == kChecksumIndex || name == kRunManifest || name == "error.json") return true;
    if (name.ends_with(".tmp")) return true;
    return name.ends_with(kSidecarSuffix);
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
        fail(ErrorKind::Io, "sha256 computation failed");
    }
    return hex(digest, length);
}

std::string sha256_hex(std::string_view bytes) {
    return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require(static_cast<bool>(out), ErrorKind::Io, "short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    require(!ec, ErrorKind::Io, "cannot rename " + tmp.string() + ": " + ec.message());
}

void write_json_atomic(const fs::path& path, const json& value) {
    write_file_atomic(path, value.dump(2) + "\n");
}

json read_json(const fs::path& path) {
    const auto text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, "invalid JSON in " + path.string() + ": " + e.what());
    }
}

void write_sidecar(const fs::path& path) {
    fs::path sidecar = path;
    sidecar += kSidecarSuffix;
    write_file_atomic(sidecar, sha256_file(path) + "  " + path.filename().string() + "\n");
}

bool verify_sidecar(const fs::path& path) {
    fs::path sidecar = path;
    sidecar += kSidecarSuffix;
    if (!fs::exists(sidecar) || !fs::exists(path)) return false;
    const auto line = read_file(sidecar);
    return line.substr(0, 64) == sha256_file(path);
}

void append_f32_le(std::string& out, std::span<const float> values) {
    const auto start = out.size();
    out.resize(start + values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) {
            out[start + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
        }
    }
}

std::vector<float> decode_f32_le(std::string_view bytes) {
    require(bytes.size() % 4 == 0, ErrorKind::Format, "float32 buffer size not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
        }
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

const char* to_string(DType dtype) { return dtype == DType::F32 ? "float32" : "uint8"; }

DType dtype_from_string(const std::string& name) {
    if (name == "float32") return DType::F32;
    if (name == "uint8") return DType::U8;
    fail(ErrorKind::Format, "unknown dtype '" + name + "'");
}

TensorEntry TensorEntry::floats(std::string name, std::vector<std::int64_t> shape,
                                std::vector<float> values) {
    TensorEntry e;
    e.name = std::move(name);
    e.dtype = DType::F32;
    e.shape = std::move(shape);
    e.f32 = std::move(values);
    require(e.element_count() == e.f32.size(), ErrorKind::Input, "entry '" + e.name + "': shape/size mismatch");
    return e;
}

TensorEntry TensorEntry::bytes(std::string name, std::vector<std::int64_t> shape,
                               std::vector<std::uint8_t> values) {
    TensorEntry e;
    e.name = std::move(name);
    e.dtype = DType::U8;
    e.shape = std::move(shape);
    e.u8 = std::move(values);
    require(e.element_count() == e.u8.size(), ErrorKind::Input, "entry '" + e.name + "': shape/size mismatch");
    return e;
}

std::size_t TensorEntry::element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::size_t TensorEntry::byte_size() const {
    return element_count() * (dtype == DType::F32 ? 4 : 1);
}

const TensorEntry& TensorArchive::at(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return e;
    }
    fail(ErrorKind::Input, "archive has no entry '" + name + "'");
}

void write_archive(const fs::path& dir, const TensorArchive& archive) {
    std::set<std::string> names;
    for (const auto& e : archive.entries) {
        require(names.insert(e.name).second, ErrorKind::Input, "duplicate archive entry '" + e.name + "'");
        const auto stored = e.dtype == DType::F32 ? e.f32.size() : e.u8.size();
        require(stored == e.element_count(), ErrorKind::Input, "entry '" + e.name + "': shape/size mismatch");
    }

    std::string blob;
    json entries = json::array();
    for (const auto& e : archive.entries) {
        const auto offset = blob.size();
        if (e.dtype == DType::F32) {
            append_f32_le(blob, e.f32);
        } else {
            blob.append(reinterpret_cast<const char*>(e.u8.data()), e.u8.size());
        }
        entries.push_back({{"name", e.name},
                           {"dtype", to_string(e.dtype)},
                           {"shape", e.shape},
                           {"offset", offset},
                           {"nbytes", e.byte_size()}});
    }

    fs::create_directories(dir);
    write_file_atomic(dir / kBlobName, blob);
    write_sidecar(dir / kBlobName);
    json manifest = {{"schema", "forgetdissect.archive"},
                     {"schema_version", kArchiveSchemaVersion},
                     {"meta", archive.meta},
                     {"blob", kBlobName},
                     {"blob_size", blob.size()},
                     {"blob_sha256", sha256_hex(blob)},
                     {"entries", entries}};
    write_json_atomic(dir / kManifestName, manifest);
}

TensorArchive read_archive(const fs::path& dir) {
    const auto manifest_path = dir / kManifestName;
    require(fs::exists(manifest_path), ErrorKind::Io, "missing archive manifest " + manifest_path.string());
    const json manifest = read_json(manifest_path);
    TensorArchive archive;
    try {
        require(manifest.at("schema") == "forgetdissect.archive", ErrorKind::Format, "not a tensor archive");
        require(manifest.at("schema_version") == kArchiveSchemaVersion, ErrorKind::Format,
                "archive schema version mismatch");
        const auto blob = read_file(dir / manifest.at("blob").get<std::string>());
        require(blob.size() == manifest.at("blob_size").get<std::size_t>(), ErrorKind::Format,
                "truncated archive blob in " + dir.string());
        require(sha256_hex(blob) == manifest.at("blob_sha256").get<std::string>(), ErrorKind::Format,
                "archive blob checksum mismatch in " + dir.string());
        archive.meta = manifest.at("meta");
        std::set<std::string> names;
        for (const auto& item : manifest.at("entries")) {
            TensorEntry e;
            e.name = item.at("name").get<std::string>();
            require(names.insert(e.name).second, ErrorKind::Format, "duplicate archive entry '" + e.name + "'");
            e.dtype = dtype_from_string(item.at("dtype").get<std::string>());
            e.shape = item.at("shape").get<std::vector<std::int64_t>>();
            const auto offset = item.at("offset").get<std::size_t>();
            const auto nbytes = item.at("nbytes").get<std::size_t>();
            require(nbytes == e.byte_size(), ErrorKind::Format, "entry '" + e.name + "' size disagrees with shape");
            require(offset <= blob.size() && nbytes <= blob.size() - offset, ErrorKind::Format,
                    "entry '" + e.name + "' lies outside the blob");
            const std::string_view view(blob.data() + offset, nbytes);
            if (e.dtype == DType::F32) {
                e.f32 = decode_f32_le(view);
            } else {
                e.u8.assign(view.begin(), view.end());
            }
            archive.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, "corrupt archive manifest in " + dir.string() + ": " + e.what());
    }
    return archive;
}

namespace {

std::vector<std::pair<std::string, std::string>> checksum_entries(const fs::path& dir) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& item : fs::recursive_directory_iterator(dir)) {
        if (!item.is_regular_file()) continue;
        const auto rel = fs::relative(item.path(), dir);
        if (is_excluded_from_index(rel)) continue;
        out.emplace_back(rel.generic_string(), sha256_file(item.path()));
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

void write_checksum_index(const fs::path& dir) {
    std::string text;
    for (const auto& [rel, digest] : checksum_entries(dir)) {
        text += digest + "  " + rel + "\n";
    }
    write_file_atomic(dir / kChecksumIndex, text);
}

bool verify_checksum_index(const fs::path& dir) {
    const auto index = dir / kChecksumIndex;
    if (!fs::exists(index)) return false;
    std::string expected;
    for (const auto& [rel, digest] : checksum_entries(dir)) {
        expected += digest + "  " + rel + "\n";
    }
    return read_file(index) == expected;
}

json module_versions() {
    return {{"synthdata", 1}, {"nets", 1}, {"pda", 1}, {"dissect", 1},
            {"freeze", 1},    {"metrics", 1}, {"store", 1}, {"cli", 1}};
}

std::string run_id(const RunManifest& manifest) {
    json key = {{"command", manifest.command}, {"config", manifest.config}, {"inputs", manifest.inputs}};
    return sha256_hex(key.dump()).substr(0, 16);
}

void write_run_manifest(const fs::path& dir, const RunManifest& manifest) {
    for (const auto& out : manifest.outputs) {
        require(fs::exists(dir / out), ErrorKind::Io, "run manifest references missing output " + out);
    }
    for (const auto& in : manifest.inputs) {
        require(fs::exists(in), ErrorKind::Io, "run manifest references missing input " + in);
    }
    json timings = json::object();
    for (const auto& [k, v] : manifest.timings_seconds) timings[k] = v;
    json doc = {{"schema", "forgetdissect.run"},
                {"schema_version", 1},
                {"run_id", run_id(manifest)},
                {"command", manifest.command},
                {"config", manifest.config},
                {"effective_config", manifest.effective_config},
                {"seeds", manifest.seeds},
                {"module_versions", module_versions()},
                {"inputs", manifest.inputs},
                {"outputs", manifest.outputs},
                {"timings_seconds", timings}};
    write_json_atomic(dir / kRunManifest, doc);
}

}  // namespace forgetdissect::store
