#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "diffattn/tensor.hpp"

namespace diffattn {

// Raised on unreadable or corrupt checkpoint files.
class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Named-tensor container: a little-endian u64 length prefix, a UTF-8 JSON
// header listing {name, shape, dtype, offset, length} per tensor plus free-
// form metadata, then the concatenated raw float32 blobs. Tensor entries are
// ordered by name so save -> load -> save is byte-identical.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    nlohmann::json metadata = nlohmann::json::object();
};

namespace ckpt {

inline void save(const std::filesystem::path& path, const Checkpoint& c) {
    nlohmann::json entries = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : c.tensors) {
        const std::uint64_t bytes = t.numel() * sizeof(float);
        entries.push_back({{"name", name},
                           {"shape", t.shape()},
                           {"dtype", "f32"},
                           {"offset", offset},
                           {"length", bytes}});
        offset += bytes;
    }
    nlohmann::json header = {{"tensors", entries}, {"metadata", c.metadata}};
    const std::string header_str = header.dump();

    // Atomic write: temp file in the same directory, then rename.
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
        const std::uint64_t len = header_str.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
        for (const auto& [name, t] : c.tensors)
            out.write(reinterpret_cast<const char*>(t.data().data()),
                      static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!out) throw CheckpointError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len == 0 || len > (1ull << 32))
        throw CheckpointError("corrupt checkpoint header length in " + path.string());
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!in) throw CheckpointError("truncated checkpoint header in " + path.string());

    nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
    if (header.is_discarded() || !header.contains("tensors"))
        throw CheckpointError("unparseable checkpoint header in " + path.string());

    Checkpoint c;
    if (header.contains("metadata")) c.metadata = header["metadata"];
    const std::streampos blob_start = in.tellg();
    for (const auto& e : header["tensors"]) {
        const std::string name = e.at("name").get<std::string>();
        const Shape shape = e.at("shape").get<Shape>();
        const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
        const std::uint64_t bytes = e.at("length").get<std::uint64_t>();
        if (e.at("dtype").get<std::string>() != "f32")
            throw CheckpointError("unsupported dtype for tensor " + name);
        if (shape_numel(shape) * sizeof(float) != bytes)
            throw CheckpointError("shape/length mismatch for tensor " + name);
        Tensor t{shape};
        in.seekg(blob_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(bytes));
        if (!in) throw CheckpointError("truncated tensor data for " + name);
        c.tensors.emplace(name, std::move(t));
    }
    return c;
}

// FNV-1a over a tensor's raw bytes; used to assert frozen weights never move.
inline std::uint64_t content_hash(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ull;
    const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.numel() * sizeof(float); ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace ckpt
}  // namespace diffattn
