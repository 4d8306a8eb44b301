#pragma once

#include <thread>

#include "snows/masks.hpp"
#include "snows/netgraph.hpp"

namespace snows {

// One layer's pruning problem: the window f^{l:l+K}, the pruned weight(s),
// their masks, the cascaded inputs X^l and the dense targets Y^{l+k}.
//
// Most tasks optimize a single weight tensor. Jointly optimized groups (the
// attention QKV triple) list several names; the "logical weight" is then the
// concatenation of the tensors, each flattened row-major, in list order.
// Gradients, masks and Newton updates all use this flat logical coordinate
// system, with the active set in ascending flat order.
template <typename S>
struct ReconstructionTask {
    const NetworkGraph<S>* graph = nullptr;
    GraphAnalysis analysis;
    SubNetwork sub;
    std::vector<std::string> weight_names;
    std::vector<Shape> weight_shapes;
    std::vector<Mask> masks;
    Tensor<S> inputs;                      // dim 0 = calibration samples
    std::vector<Tensor<S>> targets;        // K+1 tensors, dim 0 = samples
    std::map<int, Tensor<S>> side_inputs;  // residual branches entering the window
    std::vector<index_t> active;           // cached active-set indices
    std::vector<index_t> sample_order;     // batch partition order; empty = identity
    int eval_threads = 1;

    index_t n_samples() const { return inputs.dim(0); }
    index_t logical_numel() const {
        index_t n = 0;
        for (const auto& s : weight_shapes) n += shape_numel(s);
        return n;
    }
    index_t active_count() const { return static_cast<index_t>(active.size()); }
};

// Builds a task. All weight names must be owned by the same op (the window
// start); targets must already be captured from the dense weights.
template <typename S>
ReconstructionTask<S> make_task(const NetworkGraph<S>& graph, const std::vector<std::string>& weight_names,
                                std::vector<Mask> masks, int K, Tensor<S> inputs,
                                std::vector<Tensor<S>> targets, std::map<int, Tensor<S>> side_inputs = {}) {
    if (weight_names.empty()) throw ValueError("task needs at least one weight");
    if (weight_names.size() != masks.size())
        throw ValueError("got " + std::to_string(masks.size()) + " masks for " +
                         std::to_string(weight_names.size()) + " weights");
    ReconstructionTask<S> t;
    t.graph = &graph;
    t.analysis = analyze(graph.m);
    int start = -1;
    for (const auto& name : weight_names) {
        auto it = t.analysis.owner.find(name);
        if (it == t.analysis.owner.end()) throw ValueError("weight '" + name + "' not owned by any op");
        if (start < 0) start = it->second;
        if (it->second != start)
            throw ValueError("jointly optimized weights must share one op ('" + name + "' does not)");
    }
    t.sub = make_subnetwork(graph.m, start, K);
    t.weight_names = weight_names;
    for (std::size_t i = 0; i < weight_names.size(); ++i) {
        const Shape& ws = graph.weight(weight_names[i]).shape();
        validate_mask(masks[i], ws);
        t.weight_shapes.push_back(ws);
    }
    t.masks = std::move(masks);
    t.active = active_indices(t.masks);
    if (static_cast<index_t>(targets.size()) != static_cast<index_t>(t.sub.target_indices.size()))
        throw DimensionError("expected " + std::to_string(t.sub.target_indices.size()) + " targets, got " +
                             std::to_string(targets.size()));
    t.inputs = std::move(inputs);
    t.targets = std::move(targets);
    t.side_inputs = std::move(side_inputs);
    return t;
}

// The masked starting point W ⊙ Z as a flat logical vector.
template <typename S>
Tensor<S> initial_masked(const ReconstructionTask<S>& t) {
    std::vector<Tensor<S>> parts;
    parts.reserve(t.weight_names.size());
    for (std::size_t i = 0; i < t.weight_names.size(); ++i)
        parts.push_back(apply(t.graph->weight(t.weight_names[i]), t.masks[i]));
    return concat_flat(parts);
}

template <typename S>
Tensor<S> dense_logical(const ReconstructionTask<S>& t) {
    std::vector<Tensor<S>> parts;
    parts.reserve(t.weight_names.size());
    for (const auto& name : t.weight_names) parts.push_back(t.graph->weight(name));
    return concat_flat(parts);
}

// Split a flat logical vector into named override tensors.
template <typename SOut, typename S>
std::map<std::string, Tensor<SOut>> split_logical(const ReconstructionTask<S>& t, const Tensor<SOut>& w_flat) {
    if (w_flat.numel() != t.logical_numel())
        throw DimensionError("logical weight has " + std::to_string(w_flat.numel()) + " elements, task expects " +
                             std::to_string(t.logical_numel()));
    auto parts = split_flat(w_flat, t.weight_shapes);
    std::map<std::string, Tensor<SOut>> out;
    for (std::size_t i = 0; i < t.weight_names.size(); ++i) out.emplace(t.weight_names[i], std::move(parts[i]));
    return out;
}

namespace detail {

template <typename S>
void check_task_consistent(const ReconstructionTask<S>& t, const Tensor<S>& w_flat) {
    auto parts = split_flat(w_flat, t.weight_shapes);
    for (std::size_t i = 0; i < parts.size(); ++i)
        if (!mask_consistent(parts[i], t.masks[i]))
            throw ValueError("weights for '" + t.weight_names[i] +
                             "' are not mask-consistent (nonzero at a pruned position)");
}

// One contiguous sample chunk of the task evaluated with candidate weights,
// optionally traced. Scalar type SE may be a Dual lift of S.
template <typename SE>
struct ChunkEval {
    WeightStore<SE> W;
    std::map<int, Tensor<SE>> sides;
    WindowEval<SE> ev;
};

template <typename SE, typename S>
ChunkEval<SE> eval_chunk(const ReconstructionTask<S>& t, const std::map<std::string, Tensor<SE>>& overrides,
                         index_t row0, index_t rows, bool keep_trace) {
    ChunkEval<SE> ce;
    ce.W = window_weights<SE>(*t.graph, t.sub.start, t.sub.last(), overrides);
    Tensor<SE> x;
    if constexpr (std::is_same_v<SE, S>) {
        x = slice_dim0(t.inputs, row0, rows);
        for (const auto& [k, v] : t.side_inputs) ce.sides.emplace(k, slice_dim0(v, row0, rows));
    } else {
        x = lift(slice_dim0(t.inputs, row0, rows));
        for (const auto& [k, v] : t.side_inputs) ce.sides.emplace(k, lift(slice_dim0(v, row0, rows)));
    }
    ce.ev = window_forward(t.graph->m.ops, t.analysis, t.sub, x, ce.W, ce.sides, keep_trace);
    return ce;
}

// Fixed deterministic chunking: `threads` contiguous chunks regardless of
// hardware; partial results reduce in chunk order. threads == 1 is a single
// chunk and therefore bitwise reproducible.
inline std::vector<std::pair<index_t, index_t>> chunk_rows(index_t n, int threads) {
    int t = std::max(1, threads);
    t = static_cast<int>(std::min<index_t>(t, n));
    std::vector<std::pair<index_t, index_t>> out;
    index_t base = n / t, extra = n % t, row = 0;
    for (int i = 0; i < t; ++i) {
        index_t len = base + (i < extra ? 1 : 0);
        out.emplace_back(row, len);
        row += len;
    }
    return out;
}

template <typename F>
void run_chunks(const std::vector<std::pair<index_t, index_t>>& chunks, F&& fn) {
    if (chunks.size() == 1) {
        fn(0);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(chunks.size());
    for (std::size_t i = 0; i < chunks.size(); ++i) pool.emplace_back([&fn, i] { fn(i); });
    for (auto& th : pool) th.join();
}

}  // namespace detail

// K-step reconstruction loss: sum over k of the squared Frobenius error
// against the dense targets. Raw sum, no 1/n factor; damping and tolerances
// elsewhere are calibrated to this convention.
template <typename S>
S loss(const ReconstructionTask<S>& t, const Tensor<S>& w_hat) {
    detail::check_task_consistent(t, w_hat);
    auto overrides = split_logical(t, w_hat);
    auto chunks = detail::chunk_rows(t.n_samples(), t.eval_threads);
    std::vector<S> partial(chunks.size(), S(0));
    detail::run_chunks(chunks, [&](std::size_t ci) {
        auto [row0, rows] = chunks[ci];
        auto ce = detail::eval_chunk(t, overrides, row0, rows, false);
        S acc = S(0);
        for (std::size_t k = 0; k < ce.ev.outputs.size(); ++k)
            acc += sumsq(sub(slice_dim0(t.targets[k], row0, rows), ce.ev.outputs[k]));
        partial[ci] = acc;
    });
    S total = S(0);
    for (S p : partial) total += p;
    return total;
}

// Scalar-generic gradient core. SE == S is the production gradient; SE ==
// Dual<S> runs the same reverse pass in tangent arithmetic, which is how
// exact Hessian-vector products are formed.
template <typename SE, typename S>
Tensor<SE> grad_active_core(const ReconstructionTask<S>& t, const Tensor<SE>& w_hat) {
    auto overrides = split_logical(t, w_hat);
    auto chunks = detail::chunk_rows(t.n_samples(), t.eval_threads);
    std::vector<std::map<std::string, Tensor<SE>>> partial(chunks.size());
    detail::run_chunks(chunks, [&](std::size_t ci) {
        auto [row0, rows] = chunks[ci];
        auto ce = detail::eval_chunk(t, overrides, row0, rows, true);
        std::vector<Tensor<SE>> adj;
        adj.reserve(ce.ev.outputs.size());
        for (std::size_t k = 0; k < ce.ev.outputs.size(); ++k) {
            Tensor<SE> tgt;
            if constexpr (std::is_same_v<SE, S>) {
                tgt = slice_dim0(t.targets[k], row0, rows);
            } else {
                tgt = lift(slice_dim0(t.targets[k], row0, rows));
            }
            adj.push_back(sub_grad_seed(ce.ev.outputs[k], tgt));
        }
        partial[ci] = window_backward(t.graph->m.ops, t.analysis, ce.ev, adj, t.weight_names, ce.W);
    });
    std::vector<Tensor<SE>> parts;
    parts.reserve(t.weight_names.size());
    for (const auto& name : t.weight_names) {
        Tensor<SE> g = std::move(partial[0].at(name));
        for (std::size_t ci = 1; ci < partial.size(); ++ci) axpy(SE(1), partial[ci].at(name), g);
        parts.push_back(std::move(g));
    }
    return gather_active(concat_flat(parts), t.active);
}

// Gradient restricted to the active set, flattened in canonical order.
// Components at masked positions are identically dropped.
template <typename S>
Tensor<S> grad_active(const ReconstructionTask<S>& t, const Tensor<S>& w_hat) {
    detail::check_task_consistent(t, w_hat);
    return grad_active_core(t, w_hat);
}

// Restriction of the task to one mini-batch. Batches tile the (optionally
// seed-shuffled) sample order; the last batch may be short.
template <typename S>
ReconstructionTask<S> batch_view(const ReconstructionTask<S>& t, index_t batch_index, index_t batch_size) {
    if (batch_size <= 0) throw ValueError("batch_size must be positive");
    const index_t n = t.n_samples();
    const index_t batches = (n + batch_size - 1) / batch_size;
    if (batch_index < 0 || batch_index >= batches)
        throw ValueError("batch index " + std::to_string(batch_index) + " out of range (have " +
                         std::to_string(batches) + ")");
    const index_t row0 = batch_index * batch_size;
    const index_t rows = std::min(batch_size, n - row0);

    std::vector<index_t> pick(static_cast<std::size_t>(rows));
    for (index_t i = 0; i < rows; ++i)
        pick[static_cast<std::size_t>(i)] = t.sample_order.empty() ? row0 + i : t.sample_order[static_cast<std::size_t>(row0 + i)];

    ReconstructionTask<S> b = t;
    b.sample_order.clear();
    b.inputs = gather_dim0(t.inputs, pick);
    for (std::size_t k = 0; k < t.targets.size(); ++k) b.targets[k] = gather_dim0(t.targets[k], pick);
    for (auto& [idx, v] : b.side_inputs) v = gather_dim0(t.side_inputs.at(idx), pick);
    return b;
}

template <typename S>
index_t batch_count(const ReconstructionTask<S>& t, index_t batch_size) {
    return (t.n_samples() + batch_size - 1) / batch_size;
}

}  // namespace snows
