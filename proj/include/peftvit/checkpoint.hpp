// SPDX-License-Identifier: Apache-2.0
#pragma once

// Single-file checkpoint:
//
//   "PVIT" | u32 LE version | u64 LE manifest length | JSON manifest | payload
//
// The payload is every parameter tensor as little-endian f32, concatenated in
// manifest order. The manifest carries the model config, the freeze mask
// strategy, adapter and expansion specs, block origins and a tensor table of
// {name, shape, offset, frozen, origin}; offsets are relative to the start of
// the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peftvit/error.hpp"
#include "peftvit/freeze_mask.hpp"
#include "peftvit/vit.hpp"

namespace peftvit {

inline constexpr char kCheckpointMagic[4] = {'P', 'V', 'I', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ViTModel<float> model;
    FreezeMask mask;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

inline nlohmann::json config_to_json(const ViTConfig& c) {
    return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
            {"dim", c.dim},               {"depth", c.depth},           {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}, {"eps", c.eps}};
}

inline ViTConfig config_from_json(const nlohmann::json& j) {
    ViTConfig c;
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.eps = j.at("eps").get<double>();
    return c;
}

inline std::string tensor_origin(const std::string& name, const std::vector<BlockOrigin>& origins) {
    if (name.find(".lora_") != std::string::npos) return "adapter";
    if (name.rfind("head.", 0) == 0) return "head";
    if (name.rfind("blocks.", 0) == 0) {
        const auto idx = std::stoul(name.substr(7, name.find('.', 7) - 7));
        return to_string(origins.at(idx));
    }
    return "original";
}

}  // namespace detail

/// Encodes a model and its freeze mask as checkpoint bytes. Parameters are
/// stored as f32 whatever T is.
template <Real T>
std::string serialize_checkpoint(const ViTModel<T>& model, const FreezeMask& mask) {
    const auto names = model.parameter_names();
    if (mask.names != names) throw UsageError("freeze mask does not match the model's parameters");

    std::vector<BlockOrigin> origins;
    for (const auto& b : model.blocks) origins.push_back(b.origin);

    nlohmann::json m;
    m["config"] = detail::config_to_json(model.config);
    m["strategy"] = mask.strategy.tag();
    m["adapter"] = model.lora ? nlohmann::json{{"rank", model.lora->rank},
                                               {"alpha", model.lora->alpha},
                                               {"init_std", model.lora->init_std}}
                              : nlohmann::json(nullptr);
    m["expansions"] = nlohmann::json::array();
    for (const auto& e : model.expansions) m["expansions"].push_back(e.p);
    m["block_origins"] = nlohmann::json::array();
    for (auto o : origins) m["block_origins"].push_back(to_string(o));

    const auto counts = param_count(model, mask);
    m["total_params"] = counts.total;
    m["trainable_params"] = counts.trainable;

    std::string payload;
    auto table = nlohmann::json::array();
    std::size_t i = 0;
    model.visit_parameters([&](const std::string& name, const Tensor<T>& t) {
        table.push_back({{"name", name},
                         {"shape", t.shape()},
                         {"offset", payload.size()},
                         {"frozen", !mask[i]},
                         {"origin", detail::tensor_origin(name, origins)}});
        for (const T v : t.data()) detail::put_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        ++i;
    });
    m["tensors"] = std::move(table);
    m["payload_bytes"] = payload.size();

    const std::string manifest = m.dump();
    std::string out(kCheckpointMagic, 4);
    detail::put_le(out, kCheckpointVersion);
    detail::put_le(out, static_cast<std::uint64_t>(manifest.size()));
    out += manifest;
    out += payload;
    return out;
}

/// Decodes checkpoint bytes. `source` only labels error messages.
inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16) throw FormatError(source + ": file too short for a checkpoint header");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError(source + ": bad magic (expected PVIT)");
    const auto version = detail::get_le<std::uint32_t>(p + 4);
    if (version != kCheckpointVersion)
        throw VersionError(source + ": unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                           std::to_string(kCheckpointVersion) + ")");
    const auto manifest_len = detail::get_le<std::uint64_t>(p + 8);
    if (manifest_len > bytes.size() - 16) throw FormatError(source + ": truncated manifest");

    nlohmann::json m;
    try {
        m = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(source + ": manifest is not valid JSON (" + e.what() + ")");
    }
    const std::size_t payload_start = 16 + manifest_len;

    Checkpoint ck;
    try {
        const ViTConfig cfg = detail::config_from_json(m.at("config"));
        ViTConfig base = cfg;
        const auto& origins = m.at("block_origins");
        if (origins.size() != cfg.depth) throw FormatError(source + ": block_origins length differs from depth");
        auto model = build_vit<float>(base, 0, WeightInit::structure_only);
        for (std::size_t i = 0; i < cfg.depth; ++i) {
            const auto o = origins[i].get<std::string>();
            if (o != "original" && o != "expanded") throw FormatError(source + ": unknown block origin '" + o + "'");
            model.blocks[i].origin = o == "expanded" ? BlockOrigin::expanded : BlockOrigin::original;
        }
        for (const auto& e : m.at("expansions")) model.expansions.push_back({e.get<std::size_t>()});
        if (!m.at("adapter").is_null()) {
            const auto& a = m.at("adapter");
            AdapterSpec spec{a.at("rank").get<std::size_t>(), a.at("alpha").get<double>(),
                             a.at("init_std").get<double>()};
            spec.validate();
            const std::size_t d = cfg.dim, r = spec.rank;
            for (auto& b : model.blocks) {
                b.lora_q = LoraPair<float>{Tensor<float>::zeros({d, r}), Tensor<float>::zeros({r, d})};
                b.lora_v = LoraPair<float>{Tensor<float>::zeros({d, r}), Tensor<float>::zeros({r, d})};
            }
            model.lora = spec;
        }

        const auto& table = m.at("tensors");
        const std::size_t payload_bytes = m.at("payload_bytes").get<std::size_t>();
        if (bytes.size() - payload_start != payload_bytes)
            throw FormatError(source + ": payload is " + std::to_string(bytes.size() - payload_start) +
                              " bytes, manifest declares " + std::to_string(payload_bytes));

        std::size_t i = 0, expected_offset = 0;
        std::vector<bool> trainable;
        std::vector<std::string> names;
        model.visit_parameters([&](const std::string& name, Tensor<float>& t) {
            if (i >= table.size()) throw FormatError(source + ": tensor table is missing '" + name + "'");
            const auto& e = table[i++];
            if (e.at("name").get<std::string>() != name)
                throw FormatError(source + ": expected tensor '" + name + "', found '" + e.at("name").get<std::string>() +
                                  "'");
            if (e.at("shape").get<Shape>() != t.shape())
                throw FormatError(source + ": tensor '" + name + "' has shape " + shape_str(e.at("shape").get<Shape>()) +
                                  ", config implies " + shape_str(t.shape()));
            const auto offset = e.at("offset").get<std::size_t>();
            if (offset != expected_offset) throw FormatError(source + ": tensor '" + name + "' offset is not contiguous");
            const std::size_t nbytes = t.numel() * 4;
            if (offset + nbytes > payload_bytes) throw FormatError(source + ": tensor '" + name + "' runs past the payload");
            const unsigned char* src = p + payload_start + offset;
            auto dst = t.data();
            for (std::size_t j = 0; j < dst.size(); ++j)
                dst[j] = std::bit_cast<float>(detail::get_le<std::uint32_t>(src + 4 * j));
            expected_offset = offset + nbytes;
            names.push_back(name);
            trainable.push_back(!e.at("frozen").get<bool>());
        });
        if (i != table.size()) throw FormatError(source + ": tensor table has entries the config does not account for");
        if (expected_offset != payload_bytes) throw FormatError(source + ": payload has trailing bytes");

        ck.model = std::move(model);
        ck.mask = FreezeMask{MaskStrategy::parse(m.at("strategy").get<std::string>()), std::move(names),
                             std::move(trainable)};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(source + ": malformed manifest (" + e.what() + ")");
    } catch (const ConfigError& e) {
        throw FormatError(source + ": " + e.what());
    } catch (const SpecError& e) {
        throw FormatError(source + ": " + e.what());
    } catch (const InputError& e) {
        throw FormatError(source + ": " + e.what());
    }
    return ck;
}

template <Real T>
void save_checkpoint(const ViTModel<T>& model, const FreezeMask& mask, const std::string& path) {
    const std::string bytes = serialize_checkpoint(model, mask);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw IoError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading " + path);
    return parse_checkpoint(bytes, path);
}

}  // namespace peftvit
