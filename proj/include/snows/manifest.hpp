#pragma once

#include <fstream>
#include <json.hpp>

#include "snows/netgraph.hpp"

namespace snows {

// Network manifest schema (normative, see README):
// {
//   "input_shape": [1, 3, 8, 8],
//   "ops": [
//     {"kind": "conv2d", "kernel": [3, 3], "stride": 1, "pad": 1,
//      "out_channels": 16, "weights": ["c1.w", "c1.b"], "target": false},
//     {"kind": "relu", "target": true},
//     ...
//   ],
//   "prunable": ["c2.w", "fc.w"]
// }
// Optional keys default as in OpSpec; "weights" defaults to [] and "target"
// to false.

inline nlohmann::json manifest_to_json(const GraphManifest& m) {
    nlohmann::json j;
    j["input_shape"] = m.input_shape;
    j["prunable"] = m.prunable;
    nlohmann::json ops = nlohmann::json::array();
    for (const OpSpec& op : m.ops) {
        nlohmann::json o;
        o["kind"] = op_kind_name(op.kind);
        switch (op.kind) {
            case OpKind::conv2d:
                o["kernel"] = {op.kernel_h, op.kernel_w};
                o["stride"] = op.stride;
                o["pad"] = op.pad;
                o["out_channels"] = op.out_channels;
                break;
            case OpKind::avgpool:
            case OpKind::maxpool:
                o["kernel"] = {op.kernel_h, op.kernel_w};
                o["stride"] = op.stride;
                break;
            case OpKind::dense:
            case OpKind::attention_out:
                o["out_features"] = op.out_features;
                break;
            case OpKind::attention_qkv:
                o["heads"] = op.heads;
                o["head_dim"] = op.head_dim;
                break;
            case OpKind::batchnorm_affine:
                o["eps"] = op.eps;
                break;
            default:
                break;
        }
        if (!op.weight_names.empty()) o["weights"] = op.weight_names;
        if (op.is_target) o["target"] = true;
        ops.push_back(std::move(o));
    }
    j["ops"] = std::move(ops);
    return j;
}

inline GraphManifest manifest_from_json(const nlohmann::json& j) {
    GraphManifest m;
    try {
        m.input_shape = j.at("input_shape").get<Shape>();
        if (j.contains("prunable")) m.prunable = j.at("prunable").get<std::vector<std::string>>();
        for (const auto& o : j.at("ops")) {
            OpSpec op;
            op.kind = op_kind_from_name(o.at("kind").get<std::string>());
            if (o.contains("kernel")) {
                auto k = o.at("kernel");
                op.kernel_h = k.at(0).get<int>();
                op.kernel_w = k.at(1).get<int>();
            }
            op.stride = o.value("stride", 1);
            op.pad = o.value("pad", 0);
            op.out_channels = o.value("out_channels", index_t{0});
            op.out_features = o.value("out_features", index_t{0});
            op.heads = o.value("heads", 0);
            op.head_dim = o.value("head_dim", 0);
            op.eps = o.value("eps", 1e-5);
            if (o.contains("weights")) op.weight_names = o.at("weights").get<std::vector<std::string>>();
            op.is_target = o.value("target", false);
            m.ops.push_back(std::move(op));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("malformed manifest: ") + e.what());
    }
    analyze(m);  // structural errors surface at parse time
    return m;
}

// Canonical content hash used to pair checkpoints with manifests. nlohmann
// serializes object keys in sorted order, so the dump is a stable canonical
// form.
inline std::uint64_t manifest_hash(const GraphManifest& m) {
    return fnv1a64(manifest_to_json(m).dump());
}

inline GraphManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("cannot parse manifest '" + path + "': " + e.what());
    }
    return manifest_from_json(j);
}

inline void save_manifest(const GraphManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest '" + path + "'");
    out << manifest_to_json(m).dump(2) << '\n';
}

}  // namespace snows
