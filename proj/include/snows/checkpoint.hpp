#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "snows/masks.hpp"
#include "snows/netgraph.hpp"

namespace snows {

// Checkpoint container, bit-exact by construction:
//
//   bytes 0..3   magic "SNWS"
//   bytes 4..7   version, u32 little-endian (currently 1)
//   bytes 8..15  header length, u64 little-endian
//   header       UTF-8 JSON: dtype-tagged tensor directory
//                (name/shape/dtype/offset), mask kind annotations,
//                manifest hash
//   blobs        raw little-endian IEEE-754 scalars, in directory order
//
// Masks ride as tensors named "mask:<weight>" holding exact 0/1 values, with
// their kind recorded in the header. Writes are atomic
// (write-temp-then-rename).

inline constexpr char kCheckpointMagic[4] = {'S', 'N', 'W', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
struct dtype_name;
template <>
struct dtype_name<float> {
    static constexpr const char* value = "f32";
};
template <>
struct dtype_name<double> {
    static constexpr const char* value = "f64";
};

template <typename S>
struct CheckpointData {
    std::map<std::string, Tensor<S>> tensors;     // plain tensors (weights, caches)
    std::map<std::string, Mask> masks;            // stored under "mask:<name>"
    std::uint64_t manifest_hash = 0;
};

namespace detail {

inline nlohmann::json mask_kind_json(const MaskKind& k) {
    if (k.tag == MaskKindTag::unstructured) return {{"kind", "unstructured"}, {"s", k.sparsity}};
    return {{"kind", "n_of_m"}, {"n", k.n}, {"m", k.m}};
}

inline MaskKind mask_kind_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "unstructured") return MaskKind::unstructured(j.at("s").get<double>());
    if (kind == "n_of_m") return MaskKind::n_of_m(j.at("n").get<int>(), j.at("m").get<int>());
    throw ValueError("unknown mask kind '" + kind + "'");
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const CheckpointData<S>& data) {
    static_assert(std::endian::native == std::endian::little, "blob format is little-endian");
    nlohmann::json dir = nlohmann::json::array();
    nlohmann::json mask_kinds = nlohmann::json::object();

    std::uint64_t offset = 0;
    std::vector<const void*> blobs;
    std::vector<std::uint64_t> sizes;
    std::vector<Tensor<S>> mask_tensors;  // keep alive until written

    auto push = [&](const std::string& name, const Shape& shape, const void* ptr, std::uint64_t bytes) {
        dir.push_back({{"name", name}, {"shape", shape}, {"dtype", dtype_name<S>::value}, {"offset", offset}});
        blobs.push_back(ptr);
        sizes.push_back(bytes);
        offset += bytes;
    };

    for (const auto& [name, t] : data.tensors)
        push(name, t.shape(), t.data(), sizeof(S) * static_cast<std::uint64_t>(t.numel()));
    for (const auto& [name, mask] : data.masks) {
        Tensor<S> t(mask.shape);
        for (index_t i = 0; i < t.numel(); ++i) t[i] = mask.pattern[static_cast<std::size_t>(i)] ? S(1) : S(0);
        mask_tensors.push_back(std::move(t));
        const Tensor<S>& ref = mask_tensors.back();
        push("mask:" + name, ref.shape(), ref.data(), sizeof(S) * static_cast<std::uint64_t>(ref.numel()));
        mask_kinds["mask:" + name] = detail::mask_kind_json(mask.kind);
    }

    nlohmann::json header = {{"tensors", dir}, {"mask_kinds", mask_kinds}};
    {
        char hex[17];
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(data.manifest_hash));
        header["manifest_hash"] = hex;
    }
    const std::string hbytes = header.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint '" + path + "'");
        out.write(kCheckpointMagic, 4);
        std::uint32_t ver = kCheckpointVersion;
        out.write(reinterpret_cast<const char*>(&ver), 4);
        std::uint64_t hlen = hbytes.size();
        out.write(reinterpret_cast<const char*>(&hlen), 8);
        out.write(hbytes.data(), static_cast<std::streamsize>(hbytes.size()));
        for (std::size_t i = 0; i < blobs.size(); ++i)
            out.write(static_cast<const char*>(blobs[i]), static_cast<std::streamsize>(sizes[i]));
        if (!out) throw IoError("short write on checkpoint '" + path + "'");
    }
    std::filesystem::rename(tmp, path);
}

template <typename S>
CheckpointData<S> load_checkpoint(const std::string& path) {
    static_assert(std::endian::native == std::endian::little, "blob format is little-endian");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");

    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw IoError("'" + path + "' is not a SNWS checkpoint (bad magic)");
    std::uint32_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), 4);
    if (!in || ver != kCheckpointVersion)
        throw IoError("checkpoint '" + path + "' has version " + std::to_string(ver) + ", expected " +
                      std::to_string(kCheckpointVersion));
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in) throw IoError("truncated checkpoint header in '" + path + "'");
    std::string hbytes(hlen, '\0');
    in.read(hbytes.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("truncated checkpoint header in '" + path + "'");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hbytes);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header in '" + path + "': " + e.what());
    }

    CheckpointData<S> data;
    if (header.contains("manifest_hash"))
        data.manifest_hash = std::stoull(header.at("manifest_hash").get<std::string>(), nullptr, 16);

    const std::streampos blob0 = in.tellg();
    std::uint64_t expected_off = 0;
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        const Shape shape = e.at("shape").get<Shape>();
        const std::string dt = e.at("dtype").get<std::string>();
        if (dt != dtype_name<S>::value)
            throw ValueError("tensor '" + name + "' in '" + path + "' has dtype " + dt + ", expected " +
                             dtype_name<S>::value);
        const std::uint64_t off = e.at("offset").get<std::uint64_t>();
        if (off != expected_off)
            throw IoError("checkpoint '" + path + "': blob for '" + name + "' at offset " + std::to_string(off) +
                          ", directory implies " + std::to_string(expected_off));
        expected_off += sizeof(S) * static_cast<std::uint64_t>(shape_numel(shape));
        Tensor<S> t(shape);
        in.seekg(blob0 + static_cast<std::streamoff>(off));
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizeof(S) * t.numel()));
        if (!in) throw IoError("truncated blob for tensor '" + name + "' in '" + path + "'");

        if (name.rfind("mask:", 0) == 0) {
            Mask mask;
            mask.shape = shape;
            mask.pattern.resize(static_cast<std::size_t>(t.numel()));
            for (index_t i = 0; i < t.numel(); ++i) {
                if (t[i] == S(0))
                    mask.pattern[static_cast<std::size_t>(i)] = 0;
                else if (t[i] == S(1))
                    mask.pattern[static_cast<std::size_t>(i)] = 1;
                else
                    throw ValueError("mask tensor '" + name + "' holds a non-binary value");
            }
            if (header.contains("mask_kinds") && header.at("mask_kinds").contains(name))
                mask.kind = detail::mask_kind_from_json(header.at("mask_kinds").at(name));
            data.masks.emplace(name.substr(5), std::move(mask));
        } else {
            data.tensors.emplace(name, std::move(t));
        }
    }
    return data;
}

// Single-mask convenience files (how externally selected masks arrive).
inline void export_mask(const Mask& mask, const std::string& weight_name, const std::string& path) {
    CheckpointData<double> data;
    data.masks.emplace(weight_name, mask);
    save_checkpoint(path, data);
}

// Loads a mask for `weight_name`; a file holding exactly one mask matches
// any name. The mask is validated (N:M group counts etc.) before returning.
inline Mask import_mask(const std::string& path, const std::string& weight_name) {
    std::map<std::string, Mask> masks;
    try {
        masks = load_checkpoint<double>(path).masks;
    } catch (const ValueError&) {
        masks = load_checkpoint<float>(path).masks;  // f32 container
    }
    const Mask* found = nullptr;
    auto it = masks.find(weight_name);
    if (it != masks.end())
        found = &it->second;
    else if (masks.size() == 1)
        found = &masks.begin()->second;
    if (!found)
        throw ValueError("'" + path + "' holds no mask for weight '" + weight_name + "'");
    validate_mask(*found, found->shape);
    return *found;
}

}  // namespace snows
