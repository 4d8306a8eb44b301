#pragma once

#include "snows/data.hpp"

namespace snows {

// Desk-scale fixture training: produces the small trained networks the
// pruning studies and evaluations run against. Plain SGD with momentum on
// softmax cross-entropy over the final op's output (logits).

template <typename S>
void he_init(NetworkGraph<S>& g, Rng rng) {
    GraphAnalysis an = analyze(g.m);
    for (const auto& op : g.m.ops) {
        switch (op.kind) {
            case OpKind::dense:
            case OpKind::attention_out: {
                const Shape& ws = an.weight_shapes.at(op.weight_names[0]);
                g.weights[op.weight_names[0]] =
                    random_normal<S>(ws, rng, std::sqrt(2.0 / static_cast<double>(ws[0])));
                if (op.weight_names.size() == 2) g.weights[op.weight_names[1]] = Tensor<S>(Shape{ws[1]});
                break;
            }
            case OpKind::conv2d: {
                const Shape& ws = an.weight_shapes.at(op.weight_names[0]);
                const double fan_in = static_cast<double>(ws[1] * ws[2] * ws[3]);
                g.weights[op.weight_names[0]] = random_normal<S>(ws, rng, std::sqrt(2.0 / fan_in));
                if (op.weight_names.size() == 2) g.weights[op.weight_names[1]] = Tensor<S>(Shape{ws[0]});
                break;
            }
            case OpKind::attention_qkv: {
                for (const auto& name : op.weight_names) {
                    const Shape& ws = an.weight_shapes.at(name);
                    g.weights[name] = random_normal<S>(ws, rng, 1.0 / std::sqrt(static_cast<double>(ws[0])));
                }
                break;
            }
            case OpKind::batchnorm_affine: {
                const Shape& ws = an.weight_shapes.at(op.weight_names[0]);
                g.weights[op.weight_names[0]] = Tensor<S>::full(ws, S(1));  // gamma
                g.weights[op.weight_names[1]] = Tensor<S>(ws);              // beta
                g.weights[op.weight_names[2]] = Tensor<S>(ws);              // running mean
                g.weights[op.weight_names[3]] = Tensor<S>::full(ws, S(1));  // running var
                break;
            }
            default:
                break;
        }
    }
}

// One pass over a batch setting each batchnorm's running statistics to the
// per-channel mean/variance of its input at initialization. The stats stay
// frozen afterwards; batchnorm always runs in affine mode.
template <typename S>
void calibrate_batchnorm(NetworkGraph<S>& g, const Tensor<S>& x0) {
    GraphAnalysis an = analyze(g.m);
    std::map<int, Tensor<S>> open;
    Tensor<S> x = x0;
    for (int i = 0; i < static_cast<int>(g.m.ops.size()); ++i) {
        const OpSpec& op = g.m.ops[static_cast<std::size_t>(i)];
        if (op.kind == OpKind::batchnorm_affine) {
            const index_t c = x.dim(1);
            const index_t inner = x.numel() / (x.dim(0) * c);
            Tensor<S> mean(Shape{c}), var(Shape{c});
            const double count = static_cast<double>(x.dim(0) * inner);
            for (index_t ci = 0; ci < c; ++ci) {
                double acc = 0;
                for (index_t n = 0; n < x.dim(0); ++n) {
                    const S* p = x.data() + (n * c + ci) * inner;
                    for (index_t k = 0; k < inner; ++k) acc += static_cast<double>(p[k]);
                }
                const double mu = acc / count;
                double sq = 0;
                for (index_t n = 0; n < x.dim(0); ++n) {
                    const S* p = x.data() + (n * c + ci) * inner;
                    for (index_t k = 0; k < inner; ++k) {
                        const double d = static_cast<double>(p[k]) - mu;
                        sq += d * d;
                    }
                }
                mean[ci] = static_cast<S>(mu);
                var[ci] = static_cast<S>(sq / count);
            }
            g.replace_weight(op.weight_names[2], std::move(mean));
            g.replace_weight(op.weight_names[3], std::move(var));
        }
        WeightStore<S> W = window_weights<S>(g, i, i);
        x = op_forward(g.m.ops, an, i, x, W, open);
    }
}

struct TrainOptions {
    int epochs = 20;
    double lr = 0.05;
    double momentum = 0.9;
    index_t batch_size = 64;
};

// Returns the weight names SGD updates: dense/conv/attention matrices and
// biases. Batchnorm parameters stay frozen.
inline std::vector<std::string> trainable_weights(const GraphManifest& m) {
    std::vector<std::string> names;
    for (const auto& op : m.ops)
        if (op.kind == OpKind::dense || op.kind == OpKind::conv2d || op.kind == OpKind::attention_qkv ||
            op.kind == OpKind::attention_out)
            for (const auto& n : op.weight_names) names.push_back(n);
    return names;
}

template <typename S>
double train_classifier(NetworkGraph<S>& g, const Dataset<S>& ds, const TrainOptions& opt, Rng rng) {
    GraphAnalysis an = analyze(g.m);
    const std::vector<std::string> names = trainable_weights(g.m);
    SubNetwork whole;
    whole.start = 0;
    whole.target_indices = {static_cast<int>(g.m.ops.size()) - 1};

    std::map<std::string, Tensor<S>> velocity;
    for (const auto& n : names) velocity.emplace(n, Tensor<S>(g.weight(n).shape()));

    std::vector<index_t> order(static_cast<std::size_t>(ds.size()));
    for (index_t i = 0; i < ds.size(); ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        rng.shuffle(order);
        for (index_t row = 0; row < ds.size(); row += opt.batch_size) {
            const index_t n = std::min(opt.batch_size, ds.size() - row);
            std::vector<index_t> rows(order.begin() + row, order.begin() + row + n);
            Tensor<S> xb = gather_dim0(ds.features, rows);

            WeightStore<S> W = window_weights<S>(g, 0, whole.last());
            WindowEval<S> ev = window_forward(g.m.ops, an, whole, xb, W, {}, /*keep_trace=*/true);
            const Tensor<S>& logits = ev.outputs[0];
            const index_t classes = logits.shape().back();

            // softmax cross-entropy gradient at the logits: (p - onehot)/n
            Tensor<S> adj = detail::softmax_rows(logits, n, classes);
            for (index_t i = 0; i < n; ++i)
                adj(i, ds.labels[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])]) -= S(1);
            for (index_t i = 0; i < adj.numel(); ++i) adj[i] = adj[i] / S(static_cast<double>(n));

            auto grads = window_backward(g.m.ops, an, ev, {adj}, names, W);
            for (const auto& name : names) {
                Tensor<S>& v = velocity.at(name);
                Tensor<S>& w = g.weights.at(name);
                const Tensor<S>& grad = grads.at(name);
                for (index_t i = 0; i < w.numel(); ++i) {
                    v[i] = S(opt.momentum) * v[i] - S(opt.lr) * grad[i];
                    w[i] += v[i];
                }
            }
        }
    }
    return accuracy(g, ds);
}

// ---------------------------------------------------------------------------
// The standard desk-scale CNN fixture: conv stem, one residual block with
// batchnorm, average pooling, linear classifier. 2:4-prunable layers: the
// two block convs (d_in 16) and the classifier (d_in 256).

inline GraphManifest make_toy_cnn_manifest(index_t in_c = 3, index_t hw = 8, int classes = 10) {
    GraphManifest m;
    m.input_shape = Shape{1, in_c, hw, hw};
    auto conv = [](index_t out_c, std::vector<std::string> w) {
        OpSpec op;
        op.kind = OpKind::conv2d;
        op.kernel_h = op.kernel_w = 3;
        op.stride = 1;
        op.pad = 1;
        op.out_channels = out_c;
        op.weight_names = std::move(w);
        return op;
    };
    auto bn = [](const std::string& p) {
        OpSpec op;
        op.kind = OpKind::batchnorm_affine;
        op.weight_names = {p + ".gamma", p + ".beta", p + ".mean", p + ".var"};
        return op;
    };
    OpSpec relu_t{.kind = OpKind::relu, .is_target = true};
    OpSpec begin{.kind = OpKind::residual_begin};
    OpSpec add{.kind = OpKind::residual_add};
    OpSpec pool;
    pool.kind = OpKind::avgpool;
    pool.kernel_h = pool.kernel_w = 2;
    pool.stride = 2;
    OpSpec flat{.kind = OpKind::flatten};
    OpSpec fc;
    fc.kind = OpKind::dense;
    fc.out_features = classes;
    fc.weight_names = {"fc.w", "fc.b"};
    fc.is_target = true;

    m.ops = {conv(16, {"c1.w", "c1.b"}),  // 0
             bn("bn1"),                   // 1
             relu_t,                      // 2
             begin,                       // 3
             conv(16, {"c2.w"}),          // 4
             bn("bn2"),                   // 5
             relu_t,                      // 6
             conv(16, {"c3.w"}),          // 7
             bn("bn3"),                   // 8
             add,                         // 9
             relu_t,                      // 10
             pool,                        // 11
             flat,                        // 12
             fc};                         // 13
    m.prunable = {"c2.w", "c3.w", "fc.w"};
    return m;
}

template <typename S>
NetworkGraph<S> make_trained_toy_cnn(const Dataset<S>& train, Rng rng, const TrainOptions& opt = {}) {
    NetworkGraph<S> g;
    g.m = make_toy_cnn_manifest(train.features.dim(1), train.features.dim(2), train.num_classes);
    he_init(g, rng.substream("init"));
    calibrate_batchnorm(g, slice_dim0(train.features, 0, std::min<index_t>(train.size(), 256)));
    train_classifier(g, train, opt, rng.substream("train"));
    return g;
}

}  // namespace snows
