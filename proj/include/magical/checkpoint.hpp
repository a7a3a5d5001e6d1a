// SPDX-License-Identifier: Apache-2.0
//
// Tensor checkpoints on disk.
//
// A checkpoint is a directory holding `manifest.json` and one raw blob per
// tensor. The manifest is
//
//   { "format": "magical-tensors", "version": 1, "dtype": "float32",
//     "tensors": [ { "name": ..., "shape": [...], "file": ... }, ... ],
//     "meta": { ... } }
//
// Each blob is the tensor in row-major order, little-endian IEEE-754, either
// 4 bytes (float32, rounded to nearest on save) or 8 bytes (float64) per
// element, with no header. Files are named after the tensor.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "magical/grad_check.hpp"
#include "magical/tensor.hpp"

namespace magical {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class DType { Float32, Float64 };

inline const char* dtype_name(DType d) { return d == DType::Float32 ? "float32" : "float64"; }

struct Checkpoint {
    DType dtype = DType::Float32;
    std::vector<NamedTensor> tensors;
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();

    const Tensor& get(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t.tensor;
        throw CheckpointError("checkpoint has no tensor '" + name + "'");
    }
};

namespace detail {

template <class T>
void write_le(std::ostream& out, T v) {
    static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(const unsigned char* p) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["format"] = "magical-tensors";
    manifest["version"] = 1;
    manifest["dtype"] = dtype_name(ckpt.dtype);
    manifest["tensors"] = nlohmann::ordered_json::array();
    for (const auto& [name, t] : ckpt.tensors) {
        const std::string file = name + ".bin";
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) throw CheckpointError("cannot write " + (dir / file).string());
        for (double v : t.data()) {
            if (ckpt.dtype == DType::Float32) {
                detail::write_le(out, static_cast<float>(v));
            } else {
                detail::write_le(out, v);
            }
        }
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
    }
    manifest["meta"] = ckpt.meta;
    std::ofstream m(dir / "manifest.json", std::ios::binary);
    if (!m) throw CheckpointError("cannot write manifest in " + dir.string());
    m << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream m(dir / "manifest.json", std::ios::binary);
    if (!m) throw CheckpointError("no manifest.json in " + dir.string());
    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "magical-tensors") throw CheckpointError("unknown checkpoint format");
    Checkpoint ckpt;
    const std::string dtype = manifest.value("dtype", "");
    if (dtype == "float32") {
        ckpt.dtype = DType::Float32;
    } else if (dtype == "float64") {
        ckpt.dtype = DType::Float64;
    } else {
        throw CheckpointError("unsupported dtype '" + dtype + "'");
    }
    const std::size_t width = ckpt.dtype == DType::Float32 ? 4 : 8;
    for (const auto& entry : manifest.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<Shape>();
        std::ifstream in(dir / entry.at("file").get<std::string>(), std::ios::binary);
        if (!in) throw CheckpointError("missing blob for tensor '" + name + "'");
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const std::size_t n = shape_numel(shape);
        if (bytes.size() != n * width) {
            throw CheckpointError("blob for '" + name + "' has " + std::to_string(bytes.size()) + " bytes, expected " +
                                  std::to_string(n * width));
        }
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            values[i] = width == 4 ? static_cast<double>(detail::read_le<float>(bytes.data() + 4 * i))
                                   : detail::read_le<double>(bytes.data() + 8 * i);
        }
        ckpt.tensors.push_back({name, Tensor(shape, std::move(values))});
    }
    if (manifest.contains("meta")) ckpt.meta = manifest["meta"];
    return ckpt;
}

/// Copies checkpoint values into live tensors by name; every target must be
/// present with a matching shape.
inline void restore_into(const std::vector<NamedTensor>& targets, const Checkpoint& ckpt) {
    for (const auto& [name, t] : targets) {
        const Tensor& src = ckpt.get(name);
        if (src.shape() != t.shape()) {
            throw CheckpointError("tensor '" + name + "' has shape " + shape_str(src.shape()) + " in checkpoint, " +
                                  shape_str(t.shape()) + " in model");
        }
        Tensor handle = t;
        std::copy(src.data().begin(), src.data().end(), handle.data().begin());
    }
}

}  // namespace magical
