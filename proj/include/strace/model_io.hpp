// SPDX-License-Identifier: Apache-2.0
//
// STRACE-WB v1 weight files:
//
//   offset 0   8 bytes   magic "STRACEWB"
//   offset 8   1 byte    version 0x01
//   offset 9   4 bytes   header length H, little-endian uint32
//   offset 13  H bytes   UTF-8 JSON header: ModelConfig fields + "tensors": [{name, shape}, ...]
//   then                 float32 little-endian payloads, row-major, manifest order

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include <json.hpp>

#include "strace/model.hpp"

namespace strace {

class ModelFileError : public std::runtime_error {
public:
    enum class Kind { io, unexpected_eof, bad_magic, bad_version, bad_header, validation, shape_mismatch, non_finite };

    ModelFileError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::string_view kWeightMagic = "STRACEWB";
inline constexpr std::uint8_t kWeightVersion = 0x01;

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["d_head"] = c.d_head;
    j["d_ff"] = c.d_ff;
    j["vocab_size"] = c.vocab_size;
    j["max_seq"] = c.max_seq;
    j["norm_eps"] = c.norm_eps;
    j["activation"] = to_string(c.activation);
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.activation = activation_from_string(j.at("activation").get<std::string>());
    return c;
}

}  // namespace detail

inline std::string serialize_model(const ModelConfig& config, const Weights& weights) {
    std::vector<NamedTensor<const Tensor*>> manifest;
    try {
        manifest = tensor_manifest(config, weights);
    } catch (const std::invalid_argument& e) {
        throw ModelFileError(ModelFileError::Kind::shape_mismatch, e.what());
    }

    auto header = detail::config_to_json(config);
    header["tensors"] = nlohmann::ordered_json::array();
    for (const auto& nt : manifest) {
        if (nt.tensor->shape != nt.shape) {
            throw ModelFileError(ModelFileError::Kind::shape_mismatch, "tensor '" + nt.name + "' has wrong shape");
        }
        header["tensors"].push_back({{"name", nt.name}, {"shape", nt.shape}});
    }
    const std::string text = header.dump();

    std::string out(kWeightMagic);
    out.push_back(static_cast<char>(kWeightVersion));
    detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (const auto& nt : manifest) {
        for (float f : nt.tensor->data) {
            detail::put_u32_le(out, std::bit_cast<std::uint32_t>(f));
        }
    }
    return out;
}

inline std::pair<ModelConfig, Weights> parse_model(std::string_view bytes) {
    using Kind = ModelFileError::Kind;
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t prefix = kWeightMagic.size() + 1 + 4;
    if (bytes.size() < kWeightMagic.size()) {
        throw ModelFileError(Kind::unexpected_eof, "unexpected end of file in magic");
    }
    if (bytes.substr(0, kWeightMagic.size()) != kWeightMagic) {
        throw ModelFileError(Kind::bad_magic, "bad magic: not a STRACE-WB file");
    }
    if (bytes.size() < prefix) {
        throw ModelFileError(Kind::unexpected_eof, "unexpected end of file in preamble");
    }
    if (p[kWeightMagic.size()] != kWeightVersion) {
        throw ModelFileError(Kind::bad_version, "unsupported STRACE-WB version " +
                                                    std::to_string(static_cast<int>(p[kWeightMagic.size()])));
    }
    const std::uint32_t header_len = detail::get_u32_le(p + kWeightMagic.size() + 1);
    if (bytes.size() < prefix + header_len) {
        throw ModelFileError(Kind::unexpected_eof, "unexpected end of file in header");
    }

    nlohmann::json header;
    ModelConfig config;
    try {
        header = nlohmann::json::parse(bytes.substr(prefix, header_len));
        config = detail::config_from_json(header);
    } catch (const std::exception& e) {
        throw ModelFileError(Kind::bad_header, std::string("malformed header: ") + e.what());
    }
    try {
        config.validate();
    } catch (const std::invalid_argument& e) {
        throw ModelFileError(Kind::validation, e.what());
    }

    Weights weights;
    auto manifest = tensor_manifest(config, weights);
    const auto& listed = header.contains("tensors") ? header["tensors"] : nlohmann::json::array();
    if (!listed.is_array() || listed.size() != manifest.size()) {
        throw ModelFileError(Kind::shape_mismatch, "tensor manifest does not match model config");
    }

    std::size_t offset = prefix + header_len;
    for (std::size_t t = 0; t < manifest.size(); ++t) {
        auto& nt = manifest[t];
        std::vector<std::size_t> shape;
        try {
            if (listed[t].at("name").get<std::string>() != nt.name) {
                throw ModelFileError(Kind::shape_mismatch, "expected tensor '" + nt.name + "' at position " +
                                                               std::to_string(t));
            }
            shape = listed[t].at("shape").get<std::vector<std::size_t>>();
        } catch (const nlohmann::json::exception& e) {
            throw ModelFileError(Kind::bad_header, std::string("malformed tensor entry: ") + e.what());
        }
        if (shape != nt.shape) {
            throw ModelFileError(Kind::shape_mismatch, "tensor '" + nt.name + "' shape does not match config");
        }
        *nt.tensor = Tensor(shape);
        const std::size_t need = nt.tensor->data.size() * 4;
        if (bytes.size() < offset + need) {
            throw ModelFileError(Kind::unexpected_eof, "unexpected end of file in tensor '" + nt.name + "'");
        }
        for (float& f : nt.tensor->data) {
            f = std::bit_cast<float>(detail::get_u32_le(p + offset));
            if (!std::isfinite(f)) {
                throw ModelFileError(Kind::non_finite, "non-finite value in tensor '" + nt.name + "'");
            }
            offset += 4;
        }
    }
    if (offset != bytes.size()) {
        throw ModelFileError(Kind::bad_header, "trailing bytes after last tensor");
    }
    return {config, std::move(weights)};
}

inline void save_model(const std::string& path, const ModelConfig& config, const Weights& weights) {
    const std::string bytes = serialize_model(config, weights);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ModelFileError(ModelFileError::Kind::io, "cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ModelFileError(ModelFileError::Kind::io, "write failed for '" + path + "'");
}

inline std::pair<ModelConfig, Weights> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelFileError(ModelFileError::Kind::io, "cannot open '" + path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_model(bytes);
}

/// FNV-1a 64 over the serialized model, as 16 hex digits.
inline std::string model_hash(const ModelConfig& config, const Weights& weights) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : serialize_model(config, weights)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace strace
