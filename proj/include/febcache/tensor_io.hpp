// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "febcache/errors.hpp"

namespace febcache {

/// A named dense tensor of 64-bit floats.
struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;

    std::size_t expected_size() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }
};

/// Tensor bundle on disk: a flat little-endian float64 binary holding the
/// tensors back to back, plus a JSON sidecar
/// {"format": "febcache-f64", "tensors": [{"name", "shape"}...], "meta": {...}}.
struct TensorBundle {
    std::vector<NamedTensor> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const NamedTensor* find(const std::string& name) const {
        for (const NamedTensor& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }
};

inline constexpr const char* kTensorFormat = "febcache-f64";

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) noexcept {
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0x00000000FFFFFFFFULL) << 32) | ((v & 0xFFFFFFFF00000000ULL) >> 32);
        v = ((v & 0x0000FFFF0000FFFFULL) << 16) | ((v & 0xFFFF0000FFFF0000ULL) >> 16);
        v = ((v & 0x00FF00FF00FF00FFULL) << 8) | ((v & 0xFF00FF00FF00FF00ULL) >> 8);
    }
    return v;
}

}  // namespace detail

/// Sidecar path for a binary file: "weights.bin" -> "weights.bin.json".
inline std::filesystem::path sidecar_path(const std::filesystem::path& bin) {
    return std::filesystem::path(bin.string() + ".json");
}

inline void write_tensor_bundle(const std::filesystem::path& bin, const TensorBundle& bundle) {
    std::ofstream out(bin, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + bin.string() + " for writing");
    nlohmann::json index = nlohmann::json::array();
    for (const NamedTensor& t : bundle.tensors) {
        if (t.data.size() != t.expected_size()) {
            throw std::invalid_argument("tensor " + t.name + " length does not match its shape");
        }
        for (double v : t.data) {
            const std::uint64_t le = detail::to_little_endian(std::bit_cast<std::uint64_t>(v));
            out.write(reinterpret_cast<const char*>(&le), sizeof le);
        }
        index.push_back({{"name", t.name}, {"shape", t.shape}});
    }
    if (!out) throw IoError("write failed for " + bin.string());
    std::ofstream side(sidecar_path(bin), std::ios::trunc);
    if (!side) throw IoError("cannot open " + sidecar_path(bin).string() + " for writing");
    side << nlohmann::json{{"format", kTensorFormat}, {"tensors", index}, {"meta", bundle.meta}}.dump(2) << '\n';
    if (!side) throw IoError("write failed for " + sidecar_path(bin).string());
}

/// Loads a bundle; the binary length must equal the sum of the declared
/// tensor sizes exactly.
inline TensorBundle read_tensor_bundle(const std::filesystem::path& bin) {
    std::ifstream side(sidecar_path(bin));
    if (!side) throw IoError("cannot open sidecar " + sidecar_path(bin).string());
    nlohmann::json j;
    try {
        side >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed sidecar " + sidecar_path(bin).string() + ": " + e.what());
    }
    if (j.value("format", std::string{}) != kTensorFormat || !j.contains("tensors")) {
        throw IoError("sidecar " + sidecar_path(bin).string() + " is not a " + kTensorFormat + " index");
    }
    TensorBundle bundle;
    bundle.meta = j.value("meta", nlohmann::json::object());
    std::size_t total = 0;
    for (const auto& entry : j["tensors"]) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<std::vector<std::size_t>>();
        total += t.expected_size();
        bundle.tensors.push_back(std::move(t));
    }

    std::ifstream in(bin, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open " + bin.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != total * sizeof(double)) {
        throw IoError(bin.string() + " holds " + std::to_string(bytes) + " bytes, index declares " +
                      std::to_string(total * sizeof(double)));
    }
    in.seekg(0);
    for (NamedTensor& t : bundle.tensors) {
        t.data.resize(t.expected_size());
        for (double& v : t.data) {
            std::uint64_t le = 0;
            in.read(reinterpret_cast<char*>(&le), sizeof le);
            v = std::bit_cast<double>(detail::to_little_endian(le));
        }
    }
    if (!in) throw IoError("short read from " + bin.string());
    return bundle;
}

}  // namespace febcache
