#pragma once

// Checkpoint layout: 8-byte magic, a little-endian u64 manifest length, a
// JSON manifest (format version, stage tag, seed, config echo, tensor table
// with per-tensor FNV-1a checksums), then every tensor's doubles back to
// back, little-endian, in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deltafusion/config.hpp"
#include "deltafusion/errors.hpp"
#include "deltafusion/fusion.hpp"
#include "deltafusion/tensor.hpp"

namespace deltafusion {

inline constexpr char kCheckpointMagic[8] = {'D', 'F', 'C', 'H', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

inline std::string tensor_bytes(const Tensor& t) {
    std::string out;
    out.reserve(t.size() * 8);
    for (double d : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(d));
    return out;
}

inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

} // namespace detail

struct CheckpointMeta {
    int format_version = kCheckpointVersion;
    std::string stage;
    std::uint64_t seed = 0;
    ModelConfig config;
};

inline void save_checkpoint(const std::string& path, FusionModel& model, const std::string& stage,
                            std::uint64_t seed) {
    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    model.visit_params([&](const std::string& name, Tensor& t) {
        const std::string bytes = detail::tensor_bytes(t);
        tensors.push_back({{"name", name},
                           {"shape", t.shape()},
                           {"checksum", detail::hex64(detail::fnv1a(bytes))}});
        payload += bytes;
    });
    nlohmann::json manifest{{"format_version", kCheckpointVersion},
                            {"stage", stage},
                            {"seed", seed},
                            {"config", model.cfg},
                            {"tensors", std::move(tensors)}};
    const std::string mtext = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
    out.write(kCheckpointMagic, 8);
    std::string len;
    detail::put_u64(len, mtext.size());
    out.write(len.data(), 8);
    out.write(mtext.data(), std::streamsize(mtext.size()));
    out.write(payload.data(), std::streamsize(payload.size()));
    if (!out) throw CheckpointError("short write to '" + path + "'");
}

inline nlohmann::json read_manifest(std::ifstream& in, const std::string& path) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw CheckpointError("'" + path + "' is not a checkpoint");
    char lenbuf[8];
    in.read(lenbuf, 8);
    if (!in) throw CheckpointError("'" + path + "': truncated header");
    const std::uint64_t mlen = detail::get_u64(lenbuf);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), std::streamsize(mlen));
    if (!in) throw CheckpointError("'" + path + "': truncated manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError("'" + path + "': bad manifest: " + e.what());
    }
    if (!manifest.contains("format_version") || manifest["format_version"].get<int>() != kCheckpointVersion)
        throw CheckpointError("'" + path + "': unsupported format version");
    return manifest;
}

inline CheckpointMeta peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open '" + path + "'");
    nlohmann::json manifest = read_manifest(in, path);
    CheckpointMeta meta;
    meta.format_version = manifest["format_version"].get<int>();
    meta.stage = manifest["stage"].get<std::string>();
    meta.seed = manifest["seed"].get<std::uint64_t>();
    meta.config = manifest["config"].get<ModelConfig>();
    return meta;
}

// Loads into an existing model; tensor names and shapes must match the
// model's exactly, and every payload checksum is verified. When
// `expect_stage` is non-empty, a different stage tag is an error.
inline CheckpointMeta load_checkpoint(const std::string& path, FusionModel& model,
                                      const std::string& expect_stage = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open '" + path + "'");
    nlohmann::json manifest = read_manifest(in, path);
    CheckpointMeta meta;
    meta.format_version = manifest["format_version"].get<int>();
    meta.stage = manifest["stage"].get<std::string>();
    meta.seed = manifest["seed"].get<std::uint64_t>();
    meta.config = manifest["config"].get<ModelConfig>();
    if (!expect_stage.empty() && meta.stage != expect_stage)
        throw CheckpointError("'" + path + "': stage is '" + meta.stage + "', expected '" +
                              expect_stage + "'");

    std::vector<std::pair<std::string, Tensor*>> slots;
    model.visit_params([&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });
    const auto& tensors = manifest["tensors"];
    if (!tensors.is_array() || tensors.size() != slots.size())
        throw CheckpointError("'" + path + "': tensor table does not match the model");
    for (std::size_t k = 0; k < slots.size(); ++k) {
        const auto& entry = tensors[k];
        const std::string name = entry["name"].get<std::string>();
        if (name != slots[k].first)
            throw CheckpointError("'" + path + "': tensor '" + name + "' where '" + slots[k].first +
                                  "' was expected");
        const Shape shape = entry["shape"].get<Shape>();
        Tensor& t = *slots[k].second;
        if (shape != t.shape())
            throw CheckpointError("'" + path + "': shape mismatch for '" + name + "'");
        std::string bytes(t.size() * 8, '\0');
        in.read(bytes.data(), std::streamsize(bytes.size()));
        if (!in) throw CheckpointError("'" + path + "': truncated payload at '" + name + "'");
        if (detail::hex64(detail::fnv1a(bytes)) != entry["checksum"].get<std::string>())
            throw CheckpointError("'" + path + "': checksum mismatch for '" + name + "'");
        for (std::size_t i = 0; i < t.size(); ++i)
            t.data()[i] = std::bit_cast<double>(detail::get_u64(bytes.data() + i * 8));
    }
    return meta;
}

} // namespace deltafusion
