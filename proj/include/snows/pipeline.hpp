#pragma once

#include <iomanip>

#include "snows/checkpoint.hpp"
#include "snows/data.hpp"
#include "snows/manifest.hpp"
#include "snows/newton.hpp"

namespace snows {

// Per-weight mask selection: build by magnitude (unstructured or N:M) or
// import from a mask file.
struct MaskSpec {
    enum class Kind { unstructured, nm, import_file } kind = Kind::nm;
    double s = 0.5;
    int n = 2, m = 4;
    std::string path;

    static MaskSpec unstructured(double s) { return {Kind::unstructured, s, 0, 0, {}}; }
    static MaskSpec nm(int n, int m) { return {Kind::nm, 0.0, n, m, {}}; }
    static MaskSpec import_file(std::string p) { return {Kind::import_file, 0.0, 0, 0, std::move(p)}; }
};

// "unstructured:0.5" | "nm:2:4" | "import:/path/to/mask.snws"
inline MaskSpec parse_mask_spec(const std::string& s) {
    if (s.rfind("unstructured:", 0) == 0) return MaskSpec::unstructured(std::stod(s.substr(13)));
    if (s.rfind("nm:", 0) == 0) {
        auto rest = s.substr(3);
        auto colon = rest.find(':');
        if (colon == std::string::npos) throw ValueError("mask spec '" + s + "': expected nm:N:M");
        return MaskSpec::nm(std::stoi(rest.substr(0, colon)), std::stoi(rest.substr(colon + 1)));
    }
    if (s.rfind("import:", 0) == 0) return MaskSpec::import_file(s.substr(7));
    throw ValueError("mask spec '" + s + "': expected unstructured:S, nm:N:M or import:PATH");
}

inline std::string mask_spec_str(const MaskSpec& ms) {
    switch (ms.kind) {
        case MaskSpec::Kind::unstructured: return "unstructured:" + std::to_string(ms.s);
        case MaskSpec::Kind::nm: return "nm:" + std::to_string(ms.n) + ":" + std::to_string(ms.m);
        case MaskSpec::Kind::import_file: return "import:" + ms.path;
    }
    return "?";
}

struct PruneConfig {
    int K = 3;
    NewtonConfig newton;
    MaskSpec default_mask = MaskSpec::nm(2, 4);
    std::map<std::string, MaskSpec> mask_overrides;  // per prunable weight
    index_t calib_n = 0;  // 0 = use all provided samples
    std::uint64_t seed = 0;
    int eval_threads = 1;
    bool deterministic = false;  // zero wall-clock fields in emitted rows
    std::string resume_path;     // where to drop a checkpoint on layer failure

    const MaskSpec& spec_for(const std::string& weight) const {
        auto it = mask_overrides.find(weight);
        return it == mask_overrides.end() ? default_mask : it->second;
    }
};

struct LayerReport {
    std::string weights;  // "+"-joined names for joint groups
    int k_used = 0;
    double loss_before = 0.0;
    double loss_after = 0.0;
    index_t zeros = 0;
    index_t numel = 0;
    int steps = 0;
    long cg_iters_total = 0;
};

struct PruneReport {
    std::vector<LayerReport> layers;
    std::vector<TrajectoryRow> trajectory;
    std::map<std::string, Mask> masks;  // the masks actually applied
    index_t total_zeros = 0;
    index_t total_prunable = 0;
    std::uint64_t seed = 0;

    double total_sparsity() const {
        return total_prunable ? static_cast<double>(total_zeros) / static_cast<double>(total_prunable) : 0.0;
    }
};

// ---------------------------------------------------------------------------
// Cascading forward state: the activation entering op `cursor` plus all open
// residual branches (begins whose adds lie at or beyond cursor).

template <typename S>
struct CascadeState {
    Tensor<S> x;
    std::map<int, Tensor<S>> open_branches;
    int cursor = 0;
};

template <typename S>
void cascade_to(const NetworkGraph<S>& g, const GraphAnalysis& an, CascadeState<S>& st, int stop_op) {
    WeightStore<S> W = window_weights<S>(g, st.cursor, stop_op > st.cursor ? stop_op - 1 : st.cursor);
    for (; st.cursor < stop_op; ++st.cursor)
        st.x = op_forward(g.m.ops, an, st.cursor, st.x, W, st.open_branches);
}

// Residual branches entering the window [start, last]: any residual_add in
// the window whose begin precedes `start` reads the branch captured from the
// cascaded forward.
template <typename S>
std::map<int, Tensor<S>> window_side_inputs(const GraphAnalysis& an, const CascadeState<S>& st, int start,
                                            int last) {
    std::map<int, Tensor<S>> sides;
    for (int i = start; i <= last; ++i) {
        auto it = an.residual_partner.find(i);
        if (it != an.residual_partner.end() && it->second < start) {
            auto br = st.open_branches.find(it->second);
            if (br == st.open_branches.end())
                throw ValueError("residual branch for op #" + std::to_string(i) + " not open at cascade point");
            sides.emplace(i, br->second);
        }
    }
    return sides;
}

// Dense target capture for layer ℓ: forward_capture of the window from the
// current cascaded inputs, with the weights at ℓ and downstream still dense.
template <typename S>
std::vector<Tensor<S>> capture_targets(const NetworkGraph<S>& g, const SubNetwork& sub, const Tensor<S>& x,
                                       const std::map<int, Tensor<S>>& sides = {}) {
    return forward_capture(g, sub, x, sides);
}

template <typename S>
Mask build_mask(const NetworkGraph<S>& g, const std::string& weight, const MaskSpec& ms) {
    const Tensor<S>& w = g.weight(weight);
    switch (ms.kind) {
        case MaskSpec::Kind::unstructured: return magnitude_mask_unstructured(w, ms.s);
        case MaskSpec::Kind::nm: return magnitude_mask_nm(w, ms.n, ms.m);
        case MaskSpec::Kind::import_file: {
            Mask mask = import_mask(ms.path, weight);
            if (mask.shape != w.shape())
                throw ValueError("imported mask for '" + weight + "' has shape " + shape_str(mask.shape) +
                                 ", weight is " + shape_str(w.shape()));
            return mask;
        }
    }
    throw ValueError("unreachable mask spec kind");
}

// ---------------------------------------------------------------------------
// Full-network pruning (cascading over layers). Mutates `g` in place,
// committing each optimized layer before moving on. Layers are processed in
// manifest order; weights downstream of the layer being optimized are still
// dense when its targets are captured.

// Seeded calibration subset: the first n samples after a shuffle driven by
// the "calibration" sub-stream.
template <typename S>
Tensor<S> select_calibration(const Tensor<S>& features, index_t n, const Rng& run_rng) {
    if (n <= 0 || n >= features.dim(0)) return features;
    std::vector<index_t> order(static_cast<std::size_t>(features.dim(0)));
    for (index_t i = 0; i < features.dim(0); ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng = run_rng.substream("calibration");
    shuffle_rng.shuffle(order);
    order.resize(static_cast<std::size_t>(n));
    return gather_dim0(features, order);
}

template <typename S>
PruneReport prune_network(NetworkGraph<S>& g, const PruneConfig& cfg, const Tensor<S>& calibration,
                          const Rng& run_rng) {
    GraphAnalysis an = validate(g);
    PruneReport report;
    report.seed = run_rng.seed();

    Tensor<S> calib = select_calibration(calibration, cfg.calib_n, run_rng);

    // prunable groups in op order
    std::vector<std::pair<int, std::vector<std::string>>> groups;
    for (const auto& name : g.m.prunable) {
        int op = an.owner.at(name);
        auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& p) { return p.first == op; });
        if (it == groups.end())
            groups.emplace_back(op, std::vector<std::string>{name});
        else
            it->second.push_back(name);
    }
    std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    CascadeState<S> st;
    st.x = calib;

    for (const auto& [op_idx, names] : groups) {
        std::string label;
        for (const auto& n : names) label += (label.empty() ? "" : "+") + n;
        try {
            cascade_to(g, an, st, op_idx);
            SubNetwork sub = make_subnetwork(g.m, op_idx, cfg.K);
            auto sides = window_side_inputs(an, st, sub.start, sub.last());
            std::vector<Tensor<S>> targets = capture_targets(g, sub, st.x, sides);

            std::vector<Mask> masks;
            masks.reserve(names.size());
            for (std::size_t i = 0; i < names.size(); ++i) {
                masks.push_back(build_mask(g, names[i], cfg.spec_for(names[i])));
                report.masks.emplace(names[i], masks.back());
            }

            ReconstructionTask<S> task = make_task(g, names, masks, cfg.K, st.x, std::move(targets), sides);
            task.eval_threads = cfg.eval_threads;

            Rng layer_rng = run_rng.substream("newton." + label);
            NewtonState<S> state = optimize_layer(task, cfg.newton, layer_rng, label);

            LayerReport lr;
            lr.weights = label;
            lr.k_used = sub.horizon;
            lr.loss_before = static_cast<double>(loss(task, initial_masked(task)));
            lr.loss_after = static_cast<double>(loss(task, state.w_hat));
            lr.numel = task.logical_numel();
            lr.zeros = lr.numel - task.active_count();
            lr.steps = static_cast<int>(state.trajectory.size());
            for (const auto& row : state.trajectory) lr.cg_iters_total += row.cg_iters;
            report.total_zeros += lr.zeros;
            report.total_prunable += lr.numel;
            report.layers.push_back(std::move(lr));
            for (auto& row : state.trajectory) {
                if (cfg.deterministic) row.wall_ms = 0.0;
                report.trajectory.push_back(std::move(row));
            }

            // commit
            auto parts = split_logical(task, state.w_hat);
            for (auto& [name, tensor] : parts) g.replace_weight(name, std::move(tensor));
        } catch (const std::exception& e) {
            if (!cfg.resume_path.empty()) {
                CheckpointData<S> ck;
                ck.tensors = g.weights;
                ck.manifest_hash = manifest_hash(g.m);
                save_checkpoint(cfg.resume_path, ck);
                log_message(LogLevel::error, "layer '" + label + "' failed (" + e.what() +
                                                 "); resumable checkpoint at " + cfg.resume_path);
            }
            throw;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Evaluation against a dense reference: top-1 accuracy plus per-layer K-step
// reconstruction losses. Each network is cascaded with its own weights; the
// targets always come from the dense reference, so the per-layer loss
// measures accumulated drift from the dense activations.

struct EvalLayerRow {
    std::string weights;
    int k_used = 0;
    double recon_loss = 0.0;
};

struct EvalReport {
    double accuracy = 0.0;
    double dense_accuracy = 0.0;
    std::vector<EvalLayerRow> layers;
};

template <typename S>
EvalReport eval_network(const NetworkGraph<S>& pruned, const NetworkGraph<S>& dense, const Dataset<S>& data,
                        int K) {
    if (manifest_hash(pruned.m) != manifest_hash(dense.m))
        throw ValueError("eval: pruned and dense checkpoints use different manifests");
    GraphAnalysis an = validate(pruned);
    validate(dense);

    EvalReport rep;
    rep.accuracy = accuracy(pruned, data);
    rep.dense_accuracy = accuracy(dense, data);

    std::map<int, std::vector<std::string>> groups;
    for (const auto& name : pruned.m.prunable) groups[an.owner.at(name)].push_back(name);

    CascadeState<S> st_pruned{data.features, {}, 0};
    CascadeState<S> st_dense{data.features, {}, 0};
    for (const auto& [op_idx, names] : groups) {
        cascade_to(pruned, an, st_pruned, op_idx);
        cascade_to(dense, an, st_dense, op_idx);
        SubNetwork subnet = make_subnetwork(pruned.m, op_idx, K);
        auto sides_pruned = window_side_inputs(an, st_pruned, subnet.start, subnet.last());
        auto sides_dense = window_side_inputs(an, st_dense, subnet.start, subnet.last());
        std::vector<Tensor<S>> targets = forward_capture(dense, subnet, st_dense.x, sides_dense);
        std::vector<Tensor<S>> outputs = forward_capture(pruned, subnet, st_pruned.x, sides_pruned);
        double l = 0;
        for (std::size_t k = 0; k < targets.size(); ++k)
            l += static_cast<double>(sumsq(sub(targets[k], outputs[k])));
        std::string label;
        for (const auto& n : names) label += (label.empty() ? "" : "+") + n;
        rep.layers.push_back({label, subnet.horizon, l});
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Report emission. Doubles print with round-trip precision so equal values
// give byte-identical files.

inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "layer,batch,loss_pre,loss_post,alpha,cg_iters,delta_norm,wall_ms\n";
    for (const auto& r : rows)
        out << r.weight << ',' << r.batch << ',' << fmt_double(r.loss_pre) << ',' << fmt_double(r.loss_post)
            << ',' << fmt_double(r.alpha) << ',' << r.cg_iters << ',' << fmt_double(r.delta_norm) << ','
            << fmt_double(r.wall_ms) << '\n';
}

inline nlohmann::json prune_report_json(const PruneReport& rep) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : rep.layers)
        layers.push_back({{"weights", l.weights},
                          {"k", l.k_used},
                          {"loss_before", l.loss_before},
                          {"loss_after", l.loss_after},
                          {"zeros", l.zeros},
                          {"numel", l.numel},
                          {"sparsity", static_cast<double>(l.zeros) / static_cast<double>(l.numel)},
                          {"steps", l.steps},
                          {"cg_iters_total", l.cg_iters_total}});
    return {{"seed", rep.seed},
            {"layers", layers},
            {"total_zeros", rep.total_zeros},
            {"total_prunable", rep.total_prunable},
            {"total_sparsity", rep.total_sparsity()}};
}

inline nlohmann::json eval_report_json(const EvalReport& rep) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : rep.layers)
        layers.push_back({{"weights", l.weights}, {"k", l.k_used}, {"recon_loss", l.recon_loss}});
    return {{"accuracy", rep.accuracy},
            {"dense_accuracy", rep.dense_accuracy},
            {"accuracy_delta", rep.accuracy - rep.dense_accuracy},
            {"layers", layers}};
}

}  // namespace snows
