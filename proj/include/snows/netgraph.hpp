#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "snows/tensor.hpp"

namespace snows {

// ---------------------------------------------------------------------------
// Op zoo

enum class OpKind {
    dense,
    conv2d,
    relu,
    gelu,
    batchnorm_affine,
    residual_begin,
    residual_add,
    avgpool,
    maxpool,
    flatten,
    softmax,
    attention_qkv,
    attention_out,
};

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::dense: return "dense";
        case OpKind::conv2d: return "conv2d";
        case OpKind::relu: return "relu";
        case OpKind::gelu: return "gelu";
        case OpKind::batchnorm_affine: return "batchnorm_affine";
        case OpKind::residual_begin: return "residual_begin";
        case OpKind::residual_add: return "residual_add";
        case OpKind::avgpool: return "avgpool";
        case OpKind::maxpool: return "maxpool";
        case OpKind::flatten: return "flatten";
        case OpKind::softmax: return "softmax";
        case OpKind::attention_qkv: return "attention_qkv";
        case OpKind::attention_out: return "attention_out";
    }
    return "?";
}

inline OpKind op_kind_from_name(const std::string& s) {
    static const std::map<std::string, OpKind> table = {
        {"dense", OpKind::dense},
        {"conv2d", OpKind::conv2d},
        {"relu", OpKind::relu},
        {"gelu", OpKind::gelu},
        {"batchnorm_affine", OpKind::batchnorm_affine},
        {"residual_begin", OpKind::residual_begin},
        {"residual_add", OpKind::residual_add},
        {"avgpool", OpKind::avgpool},
        {"maxpool", OpKind::maxpool},
        {"flatten", OpKind::flatten},
        {"softmax", OpKind::softmax},
        {"attention_qkv", OpKind::attention_qkv},
        {"attention_out", OpKind::attention_out},
    };
    auto it = table.find(s);
    if (it == table.end()) throw ValueError("unknown op kind '" + s + "'");
    return it->second;
}

struct OpSpec {
    OpKind kind{};
    int kernel_h = 0, kernel_w = 0;  // conv2d, avgpool, maxpool
    int stride = 1;
    int pad = 0;                // conv2d only
    index_t out_channels = 0;   // conv2d
    index_t out_features = 0;   // dense, attention_out
    int heads = 0, head_dim = 0;  // attention_qkv
    double eps = 1e-5;            // batchnorm_affine
    std::vector<std::string> weight_names;
    bool is_target = false;
};

// Structure of a network: ordered ops plus the names of prunable weights.
// Weight values live in NetworkGraph; the manifest is the on-disk schema.
struct GraphManifest {
    Shape input_shape;  // includes a nominal batch dim 0
    std::vector<OpSpec> ops;
    std::vector<std::string> prunable;
};

template <typename S>
struct NetworkGraph {
    GraphManifest m;
    std::map<std::string, Tensor<S>> weights;

    const Tensor<S>& weight(const std::string& name) const {
        auto it = weights.find(name);
        if (it == weights.end()) throw ValueError("weight '" + name + "' not in store");
        return it->second;
    }

    // The one sanctioned mutation: committing new values for an existing
    // weight (same shape) at pruning commit time.
    void replace_weight(const std::string& name, Tensor<S> t) {
        auto it = weights.find(name);
        if (it == weights.end()) throw ValueError("weight '" + name + "' not in store");
        if (it->second.shape() != t.shape())
            throw DimensionError("replace_weight '" + name + "': " + shape_str(it->second.shape()) +
                                 " vs " + shape_str(t.shape()));
        it->second = std::move(t);
    }
};

// ---------------------------------------------------------------------------
// Static analysis: shape inference over the op sequence, residual matching,
// weight ownership, expected weight shapes. Runs before any forward pass.

struct GraphAnalysis {
    std::vector<Shape> output_shapes;        // nominal, per op
    std::map<int, int> residual_partner;     // residual_add idx -> residual_begin idx
    std::map<std::string, int> owner;        // weight name -> op idx
    std::map<std::string, Shape> weight_shapes;
};

namespace detail {

inline void expect_weight_count(const OpSpec& op, int idx, std::size_t lo, std::size_t hi) {
    if (op.weight_names.size() < lo || op.weight_names.size() > hi)
        throw ValueError("op #" + std::to_string(idx) + " (" + op_kind_name(op.kind) + ") expects " +
                         std::to_string(lo) + ".." + std::to_string(hi) + " weights, got " +
                         std::to_string(op.weight_names.size()));
}

inline index_t pooled_extent(index_t in, int k, int stride, int pad, int idx) {
    index_t out = (in + 2 * pad - k) / stride + 1;
    if (k <= 0 || stride <= 0 || out < 1)
        throw DimensionError("op #" + std::to_string(idx) + ": window " + std::to_string(k) +
                             "/stride " + std::to_string(stride) + " does not fit extent " +
                             std::to_string(in));
    return out;
}

}  // namespace detail

inline GraphAnalysis analyze(const GraphManifest& m) {
    GraphAnalysis an;
    an.output_shapes.reserve(m.ops.size());
    Shape cur = m.input_shape;
    std::vector<int> begin_stack;

    auto claim = [&](const std::string& name, Shape shape, int idx) {
        if (an.owner.count(name))
            throw ValueError("weight '" + name + "' owned by two ops (#" +
                             std::to_string(an.owner[name]) + ", #" + std::to_string(idx) + ")");
        an.owner[name] = idx;
        an.weight_shapes[name] = std::move(shape);
    };

    for (int idx = 0; idx < static_cast<int>(m.ops.size()); ++idx) {
        const OpSpec& op = m.ops[static_cast<std::size_t>(idx)];
        switch (op.kind) {
            case OpKind::dense:
            case OpKind::attention_out: {
                detail::expect_weight_count(op, idx, 1, 2);
                if (cur.size() < 2) throw DimensionError("op #" + std::to_string(idx) + ": dense input needs rank >= 2");
                if (op.out_features <= 0) throw ValueError("op #" + std::to_string(idx) + ": out_features missing");
                index_t d_in = cur.back();
                claim(op.weight_names[0], Shape{d_in, op.out_features}, idx);
                if (op.weight_names.size() == 2) claim(op.weight_names[1], Shape{op.out_features}, idx);
                cur.back() = op.out_features;
                break;
            }
            case OpKind::conv2d: {
                detail::expect_weight_count(op, idx, 1, 2);
                if (cur.size() != 4) throw DimensionError("op #" + std::to_string(idx) + ": conv2d input must be NCHW");
                if (op.out_channels <= 0) throw ValueError("op #" + std::to_string(idx) + ": out_channels missing");
                index_t c = cur[1];
                claim(op.weight_names[0], Shape{op.out_channels, c, op.kernel_h, op.kernel_w}, idx);
                if (op.weight_names.size() == 2) claim(op.weight_names[1], Shape{op.out_channels}, idx);
                cur = Shape{cur[0], op.out_channels,
                            detail::pooled_extent(cur[2], op.kernel_h, op.stride, op.pad, idx),
                            detail::pooled_extent(cur[3], op.kernel_w, op.stride, op.pad, idx)};
                break;
            }
            case OpKind::relu:
            case OpKind::gelu:
            case OpKind::softmax:
                detail::expect_weight_count(op, idx, 0, 0);
                break;
            case OpKind::batchnorm_affine: {
                detail::expect_weight_count(op, idx, 4, 4);
                if (cur.size() < 2) throw DimensionError("op #" + std::to_string(idx) + ": batchnorm input needs rank >= 2");
                index_t c = cur[1];
                for (const auto& n : op.weight_names) claim(n, Shape{c}, idx);
                break;
            }
            case OpKind::residual_begin:
                detail::expect_weight_count(op, idx, 0, 0);
                begin_stack.push_back(idx);
                break;
            case OpKind::residual_add: {
                detail::expect_weight_count(op, idx, 0, 0);
                if (begin_stack.empty())
                    throw ValueError("op #" + std::to_string(idx) + ": residual_add without matching residual_begin");
                int b = begin_stack.back();
                begin_stack.pop_back();
                an.residual_partner[idx] = b;
                if (an.output_shapes[static_cast<std::size_t>(b)] != cur)
                    throw DimensionError("op #" + std::to_string(idx) + ": residual branch " +
                                         shape_str(an.output_shapes[static_cast<std::size_t>(b)]) +
                                         " vs main " + shape_str(cur));
                break;
            }
            case OpKind::avgpool:
            case OpKind::maxpool: {
                detail::expect_weight_count(op, idx, 0, 0);
                if (cur.size() != 4) throw DimensionError("op #" + std::to_string(idx) + ": pool input must be NCHW");
                cur = Shape{cur[0], cur[1],
                            detail::pooled_extent(cur[2], op.kernel_h, op.stride, 0, idx),
                            detail::pooled_extent(cur[3], op.kernel_w, op.stride, 0, idx)};
                break;
            }
            case OpKind::flatten: {
                detail::expect_weight_count(op, idx, 0, 0);
                if (cur.size() < 2) throw DimensionError("op #" + std::to_string(idx) + ": flatten input needs rank >= 2");
                index_t rest = 1;
                for (std::size_t d = 1; d < cur.size(); ++d) rest *= cur[d];
                cur = Shape{cur[0], rest};
                break;
            }
            case OpKind::attention_qkv: {
                detail::expect_weight_count(op, idx, 3, 3);
                if (cur.size() != 3)
                    throw DimensionError("op #" + std::to_string(idx) + ": attention input must be (batch, seq, dim)");
                if (op.heads <= 0 || op.head_dim <= 0)
                    throw ValueError("op #" + std::to_string(idx) + ": heads/head_dim missing");
                index_t d = cur[2];
                index_t dout = static_cast<index_t>(op.heads) * op.head_dim;
                for (const auto& n : op.weight_names) claim(n, Shape{d, dout}, idx);
                cur = Shape{cur[0], cur[1], dout};
                break;
            }
        }
        an.output_shapes.push_back(cur);
    }
    return an;
}

// Full structural validation of a graph with weights attached.
template <typename S>
GraphAnalysis validate(const NetworkGraph<S>& g) {
    GraphAnalysis an = analyze(g.m);
    for (const auto& [name, shape] : an.weight_shapes) {
        auto it = g.weights.find(name);
        if (it == g.weights.end()) throw ValueError("manifest references missing weight '" + name + "'");
        if (it->second.shape() != shape)
            throw DimensionError("weight '" + name + "' has shape " + shape_str(it->second.shape()) +
                                 ", manifest implies " + shape_str(shape));
    }
    for (const auto& name : g.m.prunable) {
        auto it = an.owner.find(name);
        if (it == an.owner.end()) throw ValueError("prunable weight '" + name + "' not owned by any op");
        const OpSpec& op = g.m.ops[static_cast<std::size_t>(it->second)];
        bool main = (op.kind == OpKind::dense || op.kind == OpKind::conv2d || op.kind == OpKind::attention_out)
                        ? (name == op.weight_names[0])
                        : op.kind == OpKind::attention_qkv;
        if (!main)
            throw ValueError("prunable weight '" + name + "' is not a dense/conv/attention weight matrix");
    }
    return an;
}

// ---------------------------------------------------------------------------
// SubNetwork: the window [start, last target] of a K-step problem. The op at
// `start` always counts as the k = 0 target; the next K ops flagged
// is_target supply k = 1..K. K is clamped to the number of available
// targets.

struct SubNetwork {
    int start = 0;
    int horizon = 0;                  // clamped K
    std::vector<int> target_indices;  // horizon+1 entries, [0] == start
    int last() const { return target_indices.back(); }
};

inline SubNetwork make_subnetwork(const GraphManifest& m, int start, int K) {
    if (start < 0 || start >= static_cast<int>(m.ops.size()))
        throw ValueError("sub-network start " + std::to_string(start) + " out of range");
    if (K < 0) throw ValueError("negative horizon");
    SubNetwork sub;
    sub.start = start;
    sub.target_indices.push_back(start);
    for (int i = start + 1; i < static_cast<int>(m.ops.size()) && static_cast<int>(sub.target_indices.size()) <= K; ++i)
        if (m.ops[static_cast<std::size_t>(i)].is_target) sub.target_indices.push_back(i);
    sub.horizon = static_cast<int>(sub.target_indices.size()) - 1;
    return sub;
}

// ---------------------------------------------------------------------------
// Evaluation engine. All window math is templated on the scalar so the same
// code runs in float, double, and Dual<...> (for exact Hessian products).

template <typename S>
struct WeightStore {
    std::map<std::string, Tensor<S>> w;

    const Tensor<S>& get(const std::string& name, int idx) const {
        auto it = w.find(name);
        if (it == w.end())
            throw ValueError("op #" + std::to_string(idx) + ": weight '" + name + "' not materialized");
        return it->second;
    }
};

// Materialize the weights referenced by ops [start..last], taking override
// values where provided and (lifted) graph values otherwise.
template <typename SOut, typename SIn>
WeightStore<SOut> window_weights(const NetworkGraph<SIn>& g, int start, int last,
                                 const std::map<std::string, Tensor<SOut>>& overrides = {}) {
    WeightStore<SOut> ws;
    for (int i = start; i <= last; ++i)
        for (const auto& name : g.m.ops[static_cast<std::size_t>(i)].weight_names) {
            auto ov = overrides.find(name);
            if (ov != overrides.end()) {
                ws.w.emplace(name, ov->second);
            } else if constexpr (std::is_same_v<SOut, SIn>) {
                ws.w.emplace(name, g.weight(name));
            } else {
                ws.w.emplace(name, lift(g.weight(name)));
            }
        }
    return ws;
}

namespace detail {

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& a) {
    if (a.ndim() != 2) throw DimensionError("transpose2d needs rank 2, got " + shape_str(a.shape()));
    Tensor<S> out(Shape{a.dim(1), a.dim(0)});
    for (index_t i = 0; i < a.dim(0); ++i)
        for (index_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
    return out;
}

// Row-wise softmax with max-subtraction; standard overflow guard, values
// unchanged in exact arithmetic.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x, index_t rows, index_t cols) {
    using std::exp;
    Tensor<S> y(x.shape());
    for (index_t r = 0; r < rows; ++r) {
        const S* in = x.data() + r * cols;
        S* out = y.data() + r * cols;
        S mx = in[0];
        for (index_t c = 1; c < cols; ++c)
            if (mx < in[c]) mx = in[c];
        S denom = S(0);
        for (index_t c = 0; c < cols; ++c) {
            out[c] = exp(in[c] - mx);
            denom += out[c];
        }
        for (index_t c = 0; c < cols; ++c) out[c] = out[c] / denom;
    }
    return y;
}

// dx = y .* (dy - sum(dy .* y)) row-wise, for y = softmax(x).
template <typename S>
Tensor<S> softmax_rows_backward(const Tensor<S>& y, const Tensor<S>& dy, index_t rows, index_t cols) {
    Tensor<S> dx(y.shape());
    for (index_t r = 0; r < rows; ++r) {
        const S* yr = y.data() + r * cols;
        const S* dr = dy.data() + r * cols;
        S* o = dx.data() + r * cols;
        S dot = S(0);
        for (index_t c = 0; c < cols; ++c) dot += dr[c] * yr[c];
        for (index_t c = 0; c < cols; ++c) o[c] = yr[c] * (dr[c] - dot);
    }
    return dx;
}

// im2col for NCHW input: rows indexed by (n, y, x), cols by (c, u, v).
template <typename S>
Tensor<S> im2col(const Tensor<S>& x, int kh, int kw, int stride, int pad, index_t oh, index_t ow) {
    const index_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<S> col(Shape{n * oh * ow, c * kh * kw});
    index_t r = 0;
    for (index_t ni = 0; ni < n; ++ni)
        for (index_t y = 0; y < oh; ++y)
            for (index_t xx = 0; xx < ow; ++xx, ++r) {
                S* dst = col.data() + r * c * kh * kw;
                for (index_t ci = 0; ci < c; ++ci)
                    for (int u = 0; u < kh; ++u) {
                        index_t iy = y * stride - pad + u;
                        for (int v = 0; v < kw; ++v) {
                            index_t ix = xx * stride - pad + v;
                            S val = S(0);
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w) val = x(ni, ci, iy, ix);
                            *dst++ = val;
                        }
                    }
            }
    return col;
}

template <typename S>
void col2im_add(const Tensor<S>& col, Tensor<S>& dx, int kh, int kw, int stride, int pad, index_t oh, index_t ow) {
    const index_t n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
    index_t r = 0;
    for (index_t ni = 0; ni < n; ++ni)
        for (index_t y = 0; y < oh; ++y)
            for (index_t xx = 0; xx < ow; ++xx, ++r) {
                const S* src = col.data() + r * c * kh * kw;
                for (index_t ci = 0; ci < c; ++ci)
                    for (int u = 0; u < kh; ++u) {
                        index_t iy = y * stride - pad + u;
                        for (int v = 0; v < kw; ++v) {
                            index_t ix = xx * stride - pad + v;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w) dx(ni, ci, iy, ix) += *src;
                            ++src;
                        }
                    }
            }
}

}  // namespace detail

// Saved per-op context for a traced (differentiable) window run.
template <typename S>
struct OpTrace {
    Tensor<S> input;
    Tensor<S> output;
    Tensor<S> col;                    // conv2d: im2col matrix
    std::vector<index_t> argmax;      // maxpool routing
    std::vector<Tensor<S>> attn;      // attention: per (sample*heads) softmax matrix
    Tensor<S> q, k, v;                // attention projections
};

template <typename S>
struct WindowEval {
    SubNetwork sub;
    std::vector<Tensor<S>> outputs;   // per target, k = 0..K
    std::vector<OpTrace<S>> trace;    // ops [start..last] when traced
    bool traced = false;
};

namespace detail {

template <typename S>
Tensor<S> dense_forward(const OpSpec& op, const Tensor<S>& in, const WeightStore<S>& W, int idx) {
    const Tensor<S>& wt = W.get(op.weight_names[0], idx);
    index_t d_in = in.shape().back();
    if (wt.ndim() != 2 || wt.dim(0) != d_in)
        throw DimensionError("op #" + std::to_string(idx) + ": dense weight " + shape_str(wt.shape()) +
                             " does not accept input " + shape_str(in.shape()));
    index_t rows = in.numel() / d_in;
    Tensor<S> out = matmul(in.reshaped(Shape{rows, d_in}), wt);
    if (op.weight_names.size() == 2) {
        const Tensor<S>& b = W.get(op.weight_names[1], idx);
        for (index_t r = 0; r < rows; ++r)
            for (index_t j = 0; j < wt.dim(1); ++j) out(r, j) += b[j];
    }
    Shape os = in.shape();
    os.back() = wt.dim(1);
    return out.reshaped(os);
}

template <typename S>
void dense_backward(const OpSpec& op, const OpTrace<S>& tr, const Tensor<S>& dy, const WeightStore<S>& W,
                    int idx, Tensor<S>& dx, std::map<std::string, Tensor<S>>& grads,
                    const std::vector<std::string>& wanted) {
    const Tensor<S>& wt = W.get(op.weight_names[0], idx);
    index_t d_in = tr.input.shape().back();
    index_t rows = tr.input.numel() / d_in;
    Tensor<S> dym = dy.reshaped(Shape{rows, wt.dim(1)});
    Tensor<S> xm = tr.input.reshaped(Shape{rows, d_in});
    dx = matmul(dym, transpose2d(wt)).reshaped(tr.input.shape());
    for (const auto& name : wanted) {
        if (name == op.weight_names[0]) {
            grads[name] = matmul(transpose2d(xm), dym);
        } else if (op.weight_names.size() == 2 && name == op.weight_names[1]) {
            Tensor<S> db(Shape{wt.dim(1)});
            for (index_t r = 0; r < rows; ++r)
                for (index_t j = 0; j < wt.dim(1); ++j) db[j] += dym(r, j);
            grads[name] = std::move(db);
        }
    }
}

}  // namespace detail

// One evaluation step of a single op. `saved` holds open residual branches
// keyed by the begin op index. For window runs, a residual_add whose
// matching begin lies before the window start reads its branch from `sides`
// (captured by the pipeline from the cascaded forward) and falls back to the
// window input when absent.
template <typename S>
Tensor<S> op_forward(const std::vector<OpSpec>& ops, const GraphAnalysis& an, int idx, const Tensor<S>& in,
                     const WeightStore<S>& W, std::map<int, Tensor<S>>& saved, int window_start = 0,
                     const std::map<int, Tensor<S>>* sides = nullptr, const Tensor<S>* window_input = nullptr,
                     OpTrace<S>* tr = nullptr) {
    const OpSpec& op = ops[static_cast<std::size_t>(idx)];
    Tensor<S> out;
    switch (op.kind) {
        case OpKind::dense:
        case OpKind::attention_out:
            out = detail::dense_forward(op, in, W, idx);
            break;
        case OpKind::conv2d: {
            const Tensor<S>& wt = W.get(op.weight_names[0], idx);
            if (in.ndim() != 4 || in.dim(1) != wt.dim(1))
                throw DimensionError("op #" + std::to_string(idx) + ": conv2d input " + shape_str(in.shape()) +
                                     " vs weight " + shape_str(wt.shape()));
            const index_t f = wt.dim(0), c = wt.dim(1);
            const int kh = op.kernel_h, kw = op.kernel_w;
            const index_t oh = (in.dim(2) + 2 * op.pad - kh) / op.stride + 1;
            const index_t ow = (in.dim(3) + 2 * op.pad - kw) / op.stride + 1;
            Tensor<S> col = detail::im2col(in, kh, kw, op.stride, op.pad, oh, ow);
            Tensor<S> wmat_t = detail::transpose2d(wt.reshaped(Shape{f, c * kh * kw}));
            Tensor<S> om = matmul(col, wmat_t);  // (n*oh*ow, f)
            out = Tensor<S>(Shape{in.dim(0), f, oh, ow});
            const bool has_bias = op.weight_names.size() == 2;
            const Tensor<S>* bias = has_bias ? &W.get(op.weight_names[1], idx) : nullptr;
            index_t r = 0;
            for (index_t n = 0; n < in.dim(0); ++n)
                for (index_t y = 0; y < oh; ++y)
                    for (index_t x = 0; x < ow; ++x, ++r)
                        for (index_t fi = 0; fi < f; ++fi)
                            out(n, fi, y, x) = has_bias ? om(r, fi) + (*bias)[fi] : om(r, fi);
            if (tr) tr->col = std::move(col);
            break;
        }
        case OpKind::relu:
            out = relu(in);
            break;
        case OpKind::gelu:
            out = gelu(in);
            break;
        case OpKind::batchnorm_affine: {
            // Frozen affine mode: per-channel scale/shift from the stored
            // running statistics, never batch statistics.
            using std::sqrt;
            const Tensor<S>& gamma = W.get(op.weight_names[0], idx);
            const Tensor<S>& beta = W.get(op.weight_names[1], idx);
            const Tensor<S>& mean = W.get(op.weight_names[2], idx);
            const Tensor<S>& var = W.get(op.weight_names[3], idx);
            if (in.ndim() < 2 || gamma.numel() != in.dim(1))
                throw DimensionError("op #" + std::to_string(idx) + ": batchnorm channels " +
                                     std::to_string(gamma.numel()) + " vs input " + shape_str(in.shape()));
            const index_t cdim = in.dim(1);
            const index_t inner = in.numel() / (in.dim(0) * cdim);
            out = Tensor<S>(in.shape());
            for (index_t ci = 0; ci < cdim; ++ci) {
                S sc = gamma[ci] / sqrt(var[ci] + S(op.eps));
                S sh = beta[ci] - mean[ci] * sc;
                for (index_t n = 0; n < in.dim(0); ++n) {
                    const S* src = in.data() + (n * cdim + ci) * inner;
                    S* dst = out.data() + (n * cdim + ci) * inner;
                    for (index_t i = 0; i < inner; ++i) dst[i] = sc * src[i] + sh;
                }
            }
            break;
        }
        case OpKind::residual_begin:
            out = in;
            saved[idx] = in;
            break;
        case OpKind::residual_add: {
            int partner = an.residual_partner.at(idx);
            const Tensor<S>* branch = nullptr;
            auto it = saved.find(partner);
            if (it != saved.end()) {
                branch = &it->second;
            } else if (partner < window_start) {
                if (sides) {
                    auto st = sides->find(idx);
                    if (st != sides->end()) branch = &st->second;
                }
                if (!branch) branch = window_input;  // default: the window input X
            }
            if (!branch)
                throw ValueError("op #" + std::to_string(idx) + ": residual branch unavailable");
            out = add(in, *branch);
            saved.erase(partner);
            break;
        }
        case OpKind::avgpool:
        case OpKind::maxpool: {
            if (in.ndim() != 4)
                throw DimensionError("op #" + std::to_string(idx) + ": pool input must be NCHW, got " +
                                     shape_str(in.shape()));
            const int kh = op.kernel_h, kw = op.kernel_w, st = op.stride;
            const index_t oh = (in.dim(2) - kh) / st + 1, ow = (in.dim(3) - kw) / st + 1;
            if (oh < 1 || ow < 1)
                throw DimensionError("op #" + std::to_string(idx) + ": pool window does not fit " +
                                     shape_str(in.shape()));
            out = Tensor<S>(Shape{in.dim(0), in.dim(1), oh, ow});
            const bool is_max = op.kind == OpKind::maxpool;
            if (tr && is_max) tr->argmax.assign(static_cast<std::size_t>(out.numel()), 0);
            const S inv = S(1.0 / (double(kh) * double(kw)));
            index_t o = 0;
            for (index_t n = 0; n < in.dim(0); ++n)
                for (index_t c = 0; c < in.dim(1); ++c)
                    for (index_t y = 0; y < oh; ++y)
                        for (index_t x = 0; x < ow; ++x, ++o) {
                            if (is_max) {
                                index_t best = -1;
                                S bv = S(0);
                                for (int u = 0; u < kh; ++u)
                                    for (int v = 0; v < kw; ++v) {
                                        index_t iy = y * st + u, ix = x * st + v;
                                        S val = in(n, c, iy, ix);
                                        if (best < 0 || bv < val) {
                                            bv = val;
                                            best = ((n * in.dim(1) + c) * in.dim(2) + iy) * in.dim(3) + ix;
                                        }
                                    }
                                out[o] = bv;
                                if (tr) tr->argmax[static_cast<std::size_t>(o)] = best;
                            } else {
                                S acc = S(0);
                                for (int u = 0; u < kh; ++u)
                                    for (int v = 0; v < kw; ++v) acc += in(n, c, y * st + u, x * st + v);
                                out[o] = acc * inv;
                            }
                        }
            break;
        }
        case OpKind::flatten: {
            index_t rest = in.numel() / in.dim(0);
            out = in.reshaped(Shape{in.dim(0), rest});
            break;
        }
        case OpKind::softmax: {
            index_t cols = in.shape().back();
            out = detail::softmax_rows(in, in.numel() / cols, cols);
            break;
        }
        case OpKind::attention_qkv: {
            if (in.ndim() != 3)
                throw DimensionError("op #" + std::to_string(idx) + ": attention input must be (batch, seq, dim), got " +
                                     shape_str(in.shape()));
            const index_t bsz = in.dim(0), seq = in.dim(1), d = in.dim(2);
            const index_t hd = op.head_dim, nh = op.heads, dout = nh * hd;
            Tensor<S> xm = in.reshaped(Shape{bsz * seq, d});
            Tensor<S> q = matmul(xm, W.get(op.weight_names[0], idx));
            Tensor<S> k = matmul(xm, W.get(op.weight_names[1], idx));
            Tensor<S> v = matmul(xm, W.get(op.weight_names[2], idx));
            const S sc = S(1.0 / std::sqrt(static_cast<double>(hd)));
            out = Tensor<S>(Shape{bsz, seq, dout});
            std::vector<Tensor<S>> attn;
            attn.reserve(static_cast<std::size_t>(bsz * nh));
            for (index_t b = 0; b < bsz; ++b)
                for (index_t h = 0; h < nh; ++h) {
                    Tensor<S> qh(Shape{seq, hd}), kh(Shape{seq, hd}), vh(Shape{seq, hd});
                    for (index_t s = 0; s < seq; ++s)
                        for (index_t j = 0; j < hd; ++j) {
                            qh(s, j) = q((b * seq + s), h * hd + j);
                            kh(s, j) = k((b * seq + s), h * hd + j);
                            vh(s, j) = v((b * seq + s), h * hd + j);
                        }
                    Tensor<S> scores = matmul(qh, detail::transpose2d(kh));
                    for (index_t i = 0; i < scores.numel(); ++i) scores[i] = scores[i] * sc;
                    Tensor<S> a = detail::softmax_rows(scores, seq, seq);
                    Tensor<S> oh = matmul(a, vh);
                    for (index_t s = 0; s < seq; ++s)
                        for (index_t j = 0; j < hd; ++j) out(b, s, h * hd + j) = oh(s, j);
                    attn.push_back(std::move(a));
                }
            if (tr) {
                tr->q = std::move(q);
                tr->k = std::move(k);
                tr->v = std::move(v);
                tr->attn = std::move(attn);
            }
            break;
        }
    }
    if (tr) {
        tr->input = in;
        tr->output = out;
    }
    return out;
}

// Forward over ops [start..sub.last()], returning outputs at the K+1 target
// indices. Only activations inside the window are materialized.
template <typename S>
WindowEval<S> window_forward(const std::vector<OpSpec>& ops, const GraphAnalysis& an, const SubNetwork& sub,
                             const Tensor<S>& x, const WeightStore<S>& W,
                             const std::map<int, Tensor<S>>& sides = {}, bool keep_trace = false) {
    WindowEval<S> ev;
    ev.sub = sub;
    ev.traced = keep_trace;
    if (keep_trace) ev.trace.resize(static_cast<std::size_t>(sub.last() - sub.start + 1));
    std::map<int, Tensor<S>> saved;
    Tensor<S> cur = x;
    std::size_t next_target = 0;
    for (int idx = sub.start; idx <= sub.last(); ++idx) {
        OpTrace<S>* tr = keep_trace ? &ev.trace[static_cast<std::size_t>(idx - sub.start)] : nullptr;
        cur = op_forward(ops, an, idx, cur, W, saved, sub.start, &sides, &x, tr);
        if (next_target < sub.target_indices.size() && sub.target_indices[next_target] == idx) {
            ev.outputs.push_back(cur);
            ++next_target;
        }
    }
    return ev;
}

// Reverse pass over a traced window. `target_adjoints[k]` is dL/d(output of
// target k). Returns gradients for the requested weight names only; nothing
// outside the window is touched.
template <typename S>
std::map<std::string, Tensor<S>> window_backward(const std::vector<OpSpec>& ops, const GraphAnalysis& an,
                                                 const WindowEval<S>& ev,
                                                 const std::vector<Tensor<S>>& target_adjoints,
                                                 const std::vector<std::string>& wanted,
                                                 const WeightStore<S>& W) {
    if (!ev.traced) throw ValueError("window_backward requires a traced forward");
    const SubNetwork& sub = ev.sub;
    if (target_adjoints.size() != sub.target_indices.size())
        throw DimensionError("expected " + std::to_string(sub.target_indices.size()) + " target adjoints, got " +
                             std::to_string(target_adjoints.size()));

    std::map<std::string, Tensor<S>> grads;
    std::map<int, Tensor<S>> pending;  // begin idx -> adjoint from its residual_add
    Tensor<S> cur;

    int k = static_cast<int>(sub.target_indices.size()) - 1;
    for (int idx = sub.last(); idx >= sub.start; --idx) {
        const OpSpec& op = ops[static_cast<std::size_t>(idx)];
        const OpTrace<S>& tr = ev.trace[static_cast<std::size_t>(idx - sub.start)];

        if (cur.numel() == 0) cur = Tensor<S>(tr.output.shape());
        if (k >= 0 && sub.target_indices[static_cast<std::size_t>(k)] == idx) {
            detail::check_same_shape(cur, target_adjoints[static_cast<std::size_t>(k)], "target adjoint");
            for (index_t i = 0; i < cur.numel(); ++i) cur[i] += target_adjoints[static_cast<std::size_t>(k)][i];
            --k;
        }
        if (op.kind == OpKind::residual_begin) {
            auto it = pending.find(idx);
            if (it != pending.end()) {
                for (index_t i = 0; i < cur.numel(); ++i) cur[i] += it->second[i];
                pending.erase(it);
            }
        }

        Tensor<S> dx;
        switch (op.kind) {
            case OpKind::dense:
            case OpKind::attention_out:
                detail::dense_backward(op, tr, cur, W, idx, dx, grads, wanted);
                break;
            case OpKind::conv2d: {
                const Tensor<S>& wt = W.get(op.weight_names[0], idx);
                const index_t f = wt.dim(0), c = wt.dim(1);
                const int kh = op.kernel_h, kw = op.kernel_w;
                const index_t oh = tr.output.dim(2), ow = tr.output.dim(3);
                const index_t rows = tr.output.dim(0) * oh * ow;
                Tensor<S> dym(Shape{rows, f});
                index_t r = 0;
                for (index_t n = 0; n < tr.output.dim(0); ++n)
                    for (index_t y = 0; y < oh; ++y)
                        for (index_t x = 0; x < ow; ++x, ++r)
                            for (index_t fi = 0; fi < f; ++fi) dym(r, fi) = cur(n, fi, y, x);
                for (const auto& name : wanted) {
                    if (name == op.weight_names[0]) {
                        grads[name] = matmul(detail::transpose2d(dym), tr.col).reshaped(wt.shape());
                    } else if (op.weight_names.size() == 2 && name == op.weight_names[1]) {
                        Tensor<S> db(Shape{f});
                        for (index_t rr = 0; rr < rows; ++rr)
                            for (index_t fi = 0; fi < f; ++fi) db[fi] += dym(rr, fi);
                        grads[name] = std::move(db);
                    }
                }
                Tensor<S> dcol = matmul(dym, wt.reshaped(Shape{f, c * kh * kw}));
                dx = Tensor<S>(tr.input.shape());
                detail::col2im_add(dcol, dx, kh, kw, op.stride, op.pad, oh, ow);
                break;
            }
            case OpKind::relu:
                dx = Tensor<S>(tr.input.shape());
                for (index_t i = 0; i < dx.numel(); ++i)
                    dx[i] = tr.input[i] > S(0) ? cur[i] : S(0);
                break;
            case OpKind::gelu:
                dx = Tensor<S>(tr.input.shape());
                for (index_t i = 0; i < dx.numel(); ++i) dx[i] = cur[i] * gelu_grad_scalar(tr.input[i]);
                break;
            case OpKind::batchnorm_affine: {
                using std::sqrt;
                const Tensor<S>& gamma = W.get(op.weight_names[0], idx);
                const Tensor<S>& var = W.get(op.weight_names[3], idx);
                const index_t cdim = tr.input.dim(1);
                const index_t inner = tr.input.numel() / (tr.input.dim(0) * cdim);
                dx = Tensor<S>(tr.input.shape());
                for (index_t ci = 0; ci < cdim; ++ci) {
                    S sc = gamma[ci] / sqrt(var[ci] + S(op.eps));
                    for (index_t n = 0; n < tr.input.dim(0); ++n) {
                        const S* src = cur.data() + (n * cdim + ci) * inner;
                        S* dst = dx.data() + (n * cdim + ci) * inner;
                        for (index_t i = 0; i < inner; ++i) dst[i] = sc * src[i];
                    }
                }
                break;
            }
            case OpKind::residual_begin:
                dx = cur;
                break;
            case OpKind::residual_add: {
                int partner = an.residual_partner.at(idx);
                if (partner >= sub.start) {
                    auto it = pending.find(partner);
                    if (it == pending.end())
                        pending.emplace(partner, cur);
                    else
                        for (index_t i = 0; i < cur.numel(); ++i) it->second[i] += cur[i];
                }
                // A branch that originates before the window would carry
                // adjoint to X only; weight gradients never need it.
                dx = cur;
                break;
            }
            case OpKind::avgpool: {
                const int kh = op.kernel_h, kw = op.kernel_w, st = op.stride;
                const S inv = S(1.0 / (double(kh) * double(kw)));
                dx = Tensor<S>(tr.input.shape());
                index_t o = 0;
                for (index_t n = 0; n < tr.output.dim(0); ++n)
                    for (index_t c = 0; c < tr.output.dim(1); ++c)
                        for (index_t y = 0; y < tr.output.dim(2); ++y)
                            for (index_t x = 0; x < tr.output.dim(3); ++x, ++o) {
                                S g = cur[o] * inv;
                                for (int u = 0; u < kh; ++u)
                                    for (int v = 0; v < kw; ++v) dx(n, c, y * st + u, x * st + v) += g;
                            }
                break;
            }
            case OpKind::maxpool: {
                dx = Tensor<S>(tr.input.shape());
                for (index_t o = 0; o < tr.output.numel(); ++o)
                    dx[tr.argmax[static_cast<std::size_t>(o)]] += cur[o];
                break;
            }
            case OpKind::flatten:
                dx = cur.reshaped(tr.input.shape());
                break;
            case OpKind::softmax: {
                index_t cols = tr.output.shape().back();
                dx = detail::softmax_rows_backward(tr.output, cur, tr.output.numel() / cols, cols);
                break;
            }
            case OpKind::attention_qkv: {
                const index_t bsz = tr.input.dim(0), seq = tr.input.dim(1), d = tr.input.dim(2);
                const index_t hd = op.head_dim, nh = op.heads;
                const S scale = S(1.0 / std::sqrt(static_cast<double>(hd)));
                Tensor<S> dq(Shape{bsz * seq, nh * hd}), dk(dq.shape()), dv(dq.shape());
                for (index_t b = 0; b < bsz; ++b)
                    for (index_t h = 0; h < nh; ++h) {
                        const Tensor<S>& a = tr.attn[static_cast<std::size_t>(b * nh + h)];
                        Tensor<S> doh(Shape{seq, hd}), qh(Shape{seq, hd}), kh(Shape{seq, hd}), vh(Shape{seq, hd});
                        for (index_t s = 0; s < seq; ++s)
                            for (index_t j = 0; j < hd; ++j) {
                                doh(s, j) = cur(b, s, h * hd + j);
                                qh(s, j) = tr.q(b * seq + s, h * hd + j);
                                kh(s, j) = tr.k(b * seq + s, h * hd + j);
                                vh(s, j) = tr.v(b * seq + s, h * hd + j);
                            }
                        Tensor<S> da = matmul(doh, detail::transpose2d(vh));
                        Tensor<S> dvh = matmul(detail::transpose2d(a), doh);
                        Tensor<S> ds = detail::softmax_rows_backward(a, da, seq, seq);
                        for (index_t i = 0; i < ds.numel(); ++i) ds[i] = ds[i] * scale;
                        Tensor<S> dqh = matmul(ds, kh);
                        Tensor<S> dkh = matmul(detail::transpose2d(ds), qh);
                        for (index_t s = 0; s < seq; ++s)
                            for (index_t j = 0; j < hd; ++j) {
                                dq(b * seq + s, h * hd + j) = dqh(s, j);
                                dk(b * seq + s, h * hd + j) = dkh(s, j);
                                dv(b * seq + s, h * hd + j) = dvh(s, j);
                            }
                    }
                Tensor<S> xm = tr.input.reshaped(Shape{bsz * seq, d});
                Tensor<S> xmt = detail::transpose2d(xm);
                for (const auto& name : wanted) {
                    if (name == op.weight_names[0]) grads[name] = matmul(xmt, dq);
                    if (name == op.weight_names[1]) grads[name] = matmul(xmt, dk);
                    if (name == op.weight_names[2]) grads[name] = matmul(xmt, dv);
                }
                Tensor<S> dxm = matmul(dq, detail::transpose2d(W.get(op.weight_names[0], idx)));
                axpy(S(1), matmul(dk, detail::transpose2d(W.get(op.weight_names[1], idx))), dxm);
                axpy(S(1), matmul(dv, detail::transpose2d(W.get(op.weight_names[2], idx))), dxm);
                dx = dxm.reshaped(tr.input.shape());
                break;
            }
        }
        cur = std::move(dx);
    }

    for (const auto& name : wanted)
        if (!grads.count(name))
            throw ValueError("weight '" + name + "' not reachable in sub-network backward pass");
    return grads;
}

// ---------------------------------------------------------------------------
// Public graph operations

template <typename S>
Tensor<S> forward(const NetworkGraph<S>& g, const Tensor<S>& x0) {
    if (g.m.ops.empty()) return x0;
    GraphAnalysis an = analyze(g.m);
    if (x0.ndim() != static_cast<int>(g.m.input_shape.size()))
        throw DimensionError("input rank " + shape_str(x0.shape()) + " vs manifest " + shape_str(g.m.input_shape));
    for (std::size_t d = 1; d < g.m.input_shape.size(); ++d)
        if (x0.dim(static_cast<int>(d)) != g.m.input_shape[d])
            throw DimensionError("input " + shape_str(x0.shape()) + " vs manifest " + shape_str(g.m.input_shape));
    SubNetwork whole;
    whole.start = 0;
    whole.target_indices = {static_cast<int>(g.m.ops.size()) - 1};
    whole.horizon = 0;
    WeightStore<S> W = window_weights<S>(g, 0, whole.last());
    return window_forward(g.m.ops, an, whole, x0, W).outputs[0];
}

// Outputs at each of the K+1 target indices, in order k = 0..K.
template <typename S>
std::vector<Tensor<S>> forward_capture(const NetworkGraph<S>& g, const SubNetwork& sub, const Tensor<S>& x,
                                       const std::map<int, Tensor<S>>& sides = {}) {
    GraphAnalysis an = analyze(g.m);
    WeightStore<S> W = window_weights<S>(g, sub.start, sub.last());
    return window_forward(g.m.ops, an, sub, x, W, sides).outputs;
}

// dL/d out for L = ||target - out||^2.
template <typename S>
Tensor<S> sub_grad_seed(const Tensor<S>& out, const Tensor<S>& target) {
    detail::check_same_shape(out, target, "loss target");
    Tensor<S> a(out.shape());
    for (index_t i = 0; i < out.numel(); ++i) a[i] = S(2) * (out[i] - target[i]);
    return a;
}

// Gradient of sum_k ||Y_k - f_k(x)||^2 with respect to one weight owned by
// an op inside the window. The reverse pass touches only ops in
// [start, last target].
template <typename S>
Tensor<S> grad_wrt_layer(const NetworkGraph<S>& g, const SubNetwork& sub,
                         const std::vector<Tensor<S>>& loss_targets, const std::string& w_name,
                         const Tensor<S>& x, const std::map<int, Tensor<S>>& sides = {}) {
    GraphAnalysis an = analyze(g.m);
    auto it = an.owner.find(w_name);
    if (it == an.owner.end() || it->second < sub.start || it->second > sub.last())
        throw ValueError("weight '" + w_name + "' is not owned by an op inside the sub-network");
    WeightStore<S> W = window_weights<S>(g, sub.start, sub.last());
    WindowEval<S> ev = window_forward(g.m.ops, an, sub, x, W, sides, /*keep_trace=*/true);
    if (loss_targets.size() != ev.outputs.size())
        throw DimensionError("expected " + std::to_string(ev.outputs.size()) + " loss targets, got " +
                             std::to_string(loss_targets.size()));
    std::vector<Tensor<S>> adj;
    adj.reserve(ev.outputs.size());
    for (std::size_t k = 0; k < ev.outputs.size(); ++k) {
        Tensor<S> a = sub_grad_seed(ev.outputs[k], loss_targets[k]);
        adj.push_back(std::move(a));
    }
    auto grads = window_backward(g.m.ops, an, ev, adj, {w_name}, W);
    return std::move(grads.at(w_name));
}

}  // namespace snows
