#pragma once

#include <memory>

#include "snows/recon.hpp"

namespace snows {

// Desk-scale transformer-block reconstruction problems: joint QKV, output
// projection, and the two MLP linears with the GeLU in between. Tasks run in
// double precision at toy sizes (d <= 16, a few heads, short sequences).

struct AttentionBlockSpec {
    index_t d = 8;      // embedding dim
    int heads = 2;
    int head_dim = 4;   // attention scale is 1/sqrt(head_dim)
    index_t seq = 6;

    index_t qkv_out() const { return static_cast<index_t>(heads) * head_dim; }
};

template <typename S>
struct VitProblem {
    std::unique_ptr<NetworkGraph<S>> graph;  // task borrows this
    ReconstructionTask<S> task;
};

namespace detail {

template <typename S>
void add_weight(NetworkGraph<S>& g, const std::string& name, const Shape& shape, Rng& rng, double stddev) {
    g.weights.emplace(name, random_normal<S>(shape, rng, stddev));
}

inline std::vector<Mask> ones_masks(const std::vector<Shape>& shapes) {
    std::vector<Mask> masks;
    for (const auto& s : shapes)
        masks.push_back(Mask{s, std::vector<std::uint8_t>(static_cast<std::size_t>(shape_numel(s)), 1),
                             MaskKind::unstructured(0.0)});
    return masks;
}

}  // namespace detail

// Full toy block: MHSA with residual, then the FFN with residual. Targets
// sit on the block outputs (the residual adds); LayerNorm-style rescaling is
// absorbed rather than modeled, mirroring how BN is treated in conv stacks.
template <typename S = double>
std::unique_ptr<NetworkGraph<S>> make_vit_block_graph(const AttentionBlockSpec& spec, index_t n_samples,
                                                      Rng& rng) {
    auto g = std::make_unique<NetworkGraph<S>>();
    g->m.input_shape = Shape{n_samples, spec.seq, spec.d};
    const index_t dq = spec.qkv_out();

    OpSpec begin1{.kind = OpKind::residual_begin};
    OpSpec qkv;
    qkv.kind = OpKind::attention_qkv;
    qkv.heads = spec.heads;
    qkv.head_dim = spec.head_dim;
    qkv.weight_names = {"wq", "wk", "wv"};
    OpSpec proj;
    proj.kind = OpKind::attention_out;
    proj.out_features = spec.d;
    proj.weight_names = {"wo"};
    OpSpec add1{.kind = OpKind::residual_add};
    add1.is_target = true;  // attention block output

    OpSpec begin2{.kind = OpKind::residual_begin};
    OpSpec mlp0;
    mlp0.kind = OpKind::dense;
    mlp0.out_features = 2 * spec.d;
    mlp0.weight_names = {"mlp0.w", "mlp0.b"};
    OpSpec act{.kind = OpKind::gelu};
    OpSpec mlp3;
    mlp3.kind = OpKind::dense;
    mlp3.out_features = spec.d;
    mlp3.weight_names = {"mlp3.w", "mlp3.b"};
    OpSpec add2{.kind = OpKind::residual_add};
    add2.is_target = true;  // MLP block output

    g->m.ops = {begin1, qkv, proj, add1, begin2, mlp0, act, mlp3, add2};
    if (dq != spec.d)
        throw ValueError("toy block needs heads*head_dim == d for the residual around attention");

    const double sw = 1.0 / std::sqrt(static_cast<double>(spec.d));
    detail::add_weight(*g, "wq", Shape{spec.d, dq}, rng, sw);
    detail::add_weight(*g, "wk", Shape{spec.d, dq}, rng, sw);
    detail::add_weight(*g, "wv", Shape{spec.d, dq}, rng, sw);
    detail::add_weight(*g, "wo", Shape{dq, spec.d}, rng, 1.0 / std::sqrt(static_cast<double>(dq)));
    detail::add_weight(*g, "mlp0.w", Shape{spec.d, 2 * spec.d}, rng, sw);
    g->weights.emplace("mlp0.b", random_normal<S>(Shape{2 * spec.d}, rng, 0.1));
    detail::add_weight(*g, "mlp3.w", Shape{2 * spec.d, spec.d}, rng,
                       1.0 / std::sqrt(2.0 * static_cast<double>(spec.d)));
    g->weights.emplace("mlp3.b", random_normal<S>(Shape{spec.d}, rng, 0.1));
    g->m.prunable = {"wq", "wk", "wv", "wo", "mlp0.w", "mlp3.w"};
    return g;
}

namespace detail {

template <typename S>
VitProblem<S> finish_problem(std::unique_ptr<NetworkGraph<S>> g, const std::vector<std::string>& names,
                             std::vector<Mask> masks, int K, index_t n_samples, Rng& rng) {
    Tensor<S> x0 = random_normal<S>(Shape{n_samples, g->m.input_shape[1], g->m.input_shape[2]}, rng, 1.0);
    GraphAnalysis an = analyze(g->m);
    SubNetwork sub = make_subnetwork(g->m, an.owner.at(names[0]), K);

    // cascade to the window start and collect residual branches that enter
    // the window from upstream
    Tensor<S> x = x0;
    std::map<int, Tensor<S>> open;
    if (sub.start > 0) {
        WeightStore<S> W = window_weights<S>(*g, 0, sub.start - 1);
        for (int i = 0; i < sub.start; ++i)
            x = op_forward(g->m.ops, an, i, x, W, open);
    }
    std::map<int, Tensor<S>> sides;
    for (int i = sub.start; i <= sub.last(); ++i) {
        auto it = an.residual_partner.find(i);
        if (it != an.residual_partner.end() && it->second < sub.start) sides.emplace(i, open.at(it->second));
    }

    std::vector<Tensor<S>> targets = forward_capture(*g, sub, x, sides);
    if (masks.empty()) {
        std::vector<Shape> shapes;
        for (const auto& n : names) shapes.push_back(g->weight(n).shape());
        masks = ones_masks(shapes);
    }
    VitProblem<S> p;
    p.graph = std::move(g);
    p.task = make_task(*p.graph, names, std::move(masks), K, std::move(x), std::move(targets), std::move(sides));
    return p;
}

}  // namespace detail

// Joint reconstruction over (W_Q, W_K, W_V) across all heads. The logical
// weight is the concatenation Q then K then V, each flattened row-major;
// masks apply per matrix. The K = 0 target is softmax(Q K'/sqrt(d_k)) V.
template <typename S = double>
VitProblem<S> qkv_joint_task(const AttentionBlockSpec& spec, int K, index_t n_samples, Rng rng,
                             std::vector<Mask> masks = {}) {
    auto g = make_vit_block_graph<S>(spec, n_samples, rng);
    return detail::finish_problem(std::move(g), {"wq", "wk", "wv"}, std::move(masks), K, n_samples, rng);
}

// Output-projection reconstruction; at K = 0 this is a plain linear least
// squares problem in W_O.
template <typename S = double>
VitProblem<S> out_proj_task(const AttentionBlockSpec& spec, int K, index_t n_samples, Rng rng,
                            std::vector<Mask> masks = {}) {
    auto g = make_vit_block_graph<S>(spec, n_samples, rng);
    return detail::finish_problem(std::move(g), {"wo"}, std::move(masks), K, n_samples, rng);
}

enum class MlpLayer { mlp0, mlp3 };

// MLP0 / MLP3 reconstruction on a focused FFN graph [dense, gelu, dense].
// MLP0 at K = 1 reconstructs the GeLU output (the nonlinear case); MLP3 at
// K = 0 is linear least squares. Biases are carried but never pruned or
// updated.
template <typename S = double>
VitProblem<S> mlp_task(const AttentionBlockSpec& spec, MlpLayer which, int K, index_t n_samples, Rng rng,
                       std::vector<Mask> masks = {}) {
    auto g = std::make_unique<NetworkGraph<S>>();
    g->m.input_shape = Shape{n_samples, spec.seq, spec.d};
    OpSpec mlp0;
    mlp0.kind = OpKind::dense;
    mlp0.out_features = 2 * spec.d;
    mlp0.weight_names = {"mlp0.w", "mlp0.b"};
    OpSpec act{.kind = OpKind::gelu};
    act.is_target = true;
    OpSpec mlp3;
    mlp3.kind = OpKind::dense;
    mlp3.out_features = spec.d;
    mlp3.weight_names = {"mlp3.w", "mlp3.b"};
    mlp3.is_target = true;
    g->m.ops = {mlp0, act, mlp3};
    const double sw = 1.0 / std::sqrt(static_cast<double>(spec.d));
    detail::add_weight(*g, "mlp0.w", Shape{spec.d, 2 * spec.d}, rng, sw);
    g->weights.emplace("mlp0.b", random_normal<S>(Shape{2 * spec.d}, rng, 0.1));
    detail::add_weight(*g, "mlp3.w", Shape{2 * spec.d, spec.d}, rng,
                       1.0 / std::sqrt(2.0 * static_cast<double>(spec.d)));
    g->weights.emplace("mlp3.b", random_normal<S>(Shape{spec.d}, rng, 0.1));
    g->m.prunable = {"mlp0.w", "mlp3.w"};
    const std::string name = which == MlpLayer::mlp0 ? "mlp0.w" : "mlp3.w";
    return detail::finish_problem(std::move(g), {name}, std::move(masks), K, n_samples, rng);
}

}  // namespace snows
