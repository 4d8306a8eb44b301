#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>

#include "snows/tensor.hpp"

namespace snows {

enum class MaskKindTag { unstructured, n_of_m };

struct MaskKind {
    MaskKindTag tag = MaskKindTag::unstructured;
    double sparsity = 0.0;  // unstructured
    int n = 0, m = 0;       // n_of_m

    static MaskKind unstructured(double s) { return {MaskKindTag::unstructured, s, 0, 0}; }
    static MaskKind n_of_m(int n, int m) { return {MaskKindTag::n_of_m, 0.0, n, m}; }
};

// Binary sparsity pattern congruent to one weight tensor. Immutable after
// construction.
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> pattern;  // 1 = active, 0 = pruned
    MaskKind kind;

    index_t numel() const { return static_cast<index_t>(pattern.size()); }

    index_t nnz() const {
        index_t n = 0;
        for (auto b : pattern) n += b;
        return n;
    }

    double sparsity() const { return 1.0 - static_cast<double>(nnz()) / static_cast<double>(numel()); }
};

namespace detail {

// N:M groups run along the input-channel dimension: dim 0 for dense-style
// (d_in, d_out) matrices (per output unit), dim 1 for conv (F, C, kh, kw)
// weights (per output channel and kernel position). Returns the flat stride
// between consecutive group members and the number of groups.
struct NmLayout {
    index_t d_in;
    index_t stride;       // flat distance between group members
    index_t n_positions;  // tuples the grouping is repeated over
};

inline NmLayout nm_layout(const Shape& shape) {
    if (shape.size() == 2) return {shape[0], shape[1], shape[1]};
    if (shape.size() == 4) return {shape[1], shape[2] * shape[3], shape[0] * shape[2] * shape[3]};
    throw DimensionError("N:M masks need a rank-2 or rank-4 weight, got " + shape_str(shape));
}

// Flat index of member g of the group at position p (p enumerates all
// (other-dims) tuples in row-major order).
inline index_t nm_flat_index(const Shape& shape, index_t p, index_t g) {
    if (shape.size() == 2) return g * shape[1] + p;
    // conv: p = (f, u, v) row-major over (F, kh, kw)
    index_t kh = shape[2], kw = shape[3];
    index_t f = p / (kh * kw), rem = p % (kh * kw);
    return ((f * shape[1] + g) * kh + rem / kw) * kw + rem % kw;
}

}  // namespace detail

// Magnitude pruning: zero the round(s * numel) smallest-|w| entries; ties
// break by ascending flat index (platform-stable).
template <typename S>
Mask magnitude_mask_unstructured(const Tensor<S>& w, double s) {
    if (s < 0.0 || s > 1.0) throw ValueError("sparsity " + std::to_string(s) + " outside [0, 1]");
    const index_t n = w.numel();
    const index_t zeros = static_cast<index_t>(std::llround(s * static_cast<double>(n)));
    std::vector<index_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), index_t{0});
    std::sort(order.begin(), order.end(), [&](index_t a, index_t b) {
        double ma = std::abs(static_cast<double>(w[a])), mb = std::abs(static_cast<double>(w[b]));
        return ma != mb ? ma < mb : a < b;
    });
    Mask mask{w.shape(), std::vector<std::uint8_t>(static_cast<std::size_t>(n), 1), MaskKind::unstructured(s)};
    for (index_t i = 0; i < zeros; ++i) mask.pattern[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
    return mask;
}

// N:M semi-structured pruning: keep the N largest-|w| of every aligned group
// of M contiguous weights along d_in. A d_in not divisible by M is an error,
// not a padded special case.
template <typename S>
Mask magnitude_mask_nm(const Tensor<S>& w, int n, int m) {
    if (n < 1 || n > m) throw ValueError("invalid N:M = " + std::to_string(n) + ":" + std::to_string(m));
    detail::NmLayout lay = detail::nm_layout(w.shape());
    if (lay.d_in % m != 0)
        throw DimensionError("d_in = " + std::to_string(lay.d_in) + " not divisible by M = " + std::to_string(m) +
                             " for weight " + shape_str(w.shape()));
    Mask mask{w.shape(), std::vector<std::uint8_t>(static_cast<std::size_t>(w.numel()), 0), MaskKind::n_of_m(n, m)};
    std::vector<index_t> order(static_cast<std::size_t>(m));
    for (index_t p = 0; p < lay.n_positions; ++p) {
        for (index_t g0 = 0; g0 < lay.d_in; g0 += m) {
            std::iota(order.begin(), order.end(), index_t{0});
            std::sort(order.begin(), order.end(), [&](index_t a, index_t b) {
                double ma = std::abs(static_cast<double>(w[detail::nm_flat_index(w.shape(), p, g0 + a)]));
                double mb = std::abs(static_cast<double>(w[detail::nm_flat_index(w.shape(), p, g0 + b)]));
                return ma != mb ? ma > mb : a < b;
            });
            for (int i = 0; i < n; ++i)
                mask.pattern[static_cast<std::size_t>(detail::nm_flat_index(w.shape(), p, g0 + order[static_cast<std::size_t>(i)]))] = 1;
        }
    }
    return mask;
}

// Verifies a mask against the weight tensor it is meant for. N:M masks are
// checked group by group; failures name the offending group.
inline void validate_mask(const Mask& mask, const Shape& weight_shape) {
    if (mask.shape != weight_shape)
        throw DimensionError("mask shape " + shape_str(mask.shape) + " vs weight " + shape_str(weight_shape));
    if (mask.kind.tag == MaskKindTag::unstructured) {
        index_t expect = static_cast<index_t>(std::llround(mask.kind.sparsity * static_cast<double>(mask.numel())));
        index_t zeros = mask.numel() - mask.nnz();
        if (zeros != expect)
            throw ValueError("unstructured mask declares s = " + std::to_string(mask.kind.sparsity) + " (" +
                             std::to_string(expect) + " zeros) but has " + std::to_string(zeros));
        return;
    }
    const int n = mask.kind.n, m = mask.kind.m;
    if (n < 1 || n > m) throw ValueError("invalid N:M annotation");
    detail::NmLayout lay = detail::nm_layout(mask.shape);
    if (lay.d_in % m != 0)
        throw DimensionError("d_in = " + std::to_string(lay.d_in) + " not divisible by M = " + std::to_string(m));
    for (index_t p = 0; p < lay.n_positions; ++p)
        for (index_t g0 = 0; g0 < lay.d_in; g0 += m) {
            int ones = 0;
            for (int g = 0; g < m; ++g)
                ones += mask.pattern[static_cast<std::size_t>(detail::nm_flat_index(mask.shape, p, g0 + g))];
            if (ones != n)
                throw ValueError("N:M group violation at position " + std::to_string(p) + ", group " +
                                 std::to_string(g0 / m) + ": " + std::to_string(ones) + " of " + std::to_string(m) +
                                 " active, expected " + std::to_string(n));
        }
}

// Elementwise application; pruned entries come out exactly +0.0.
template <typename S>
Tensor<S> apply(const Tensor<S>& w, const Mask& z) {
    if (w.shape() != z.shape)
        throw DimensionError("apply: weight " + shape_str(w.shape()) + " vs mask " + shape_str(z.shape));
    Tensor<S> out(w.shape());
    for (index_t i = 0; i < w.numel(); ++i) out[i] = z.pattern[static_cast<std::size_t>(i)] ? w[i] : S(0);
    return out;
}

template <typename S>
bool mask_consistent(const Tensor<S>& w, const Mask& z) {
    if (w.shape() != z.shape) return false;
    for (index_t i = 0; i < w.numel(); ++i)
        if (!z.pattern[static_cast<std::size_t>(i)] && !(w[i] == S(0))) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Active set: the m coordinates with Z_i = 1, in canonical order (ascending
// flat index, mask list order). Gradients, CG vectors and Hessian products
// all live in this coordinate system.

inline std::vector<index_t> active_indices(const std::vector<Mask>& masks) {
    std::vector<index_t> idx;
    index_t base = 0;
    for (const Mask& z : masks) {
        for (index_t i = 0; i < z.numel(); ++i)
            if (z.pattern[static_cast<std::size_t>(i)]) idx.push_back(base + i);
        base += z.numel();
    }
    return idx;
}

// Extract active coordinates of a full (flat logical) tensor.
template <typename S>
Tensor<S> gather_active(const Tensor<S>& full, const std::vector<index_t>& active) {
    Tensor<S> out(Shape{static_cast<index_t>(active.size())});
    for (std::size_t i = 0; i < active.size(); ++i) out[static_cast<index_t>(i)] = full[active[i]];
    return out;
}

// Write an active-set vector back to full shape; masked entries stay zero.
template <typename S>
Tensor<S> scatter_active(const Tensor<S>& v, const std::vector<index_t>& active, index_t full_numel) {
    if (v.numel() != static_cast<index_t>(active.size()))
        throw DimensionError("scatter: vector length " + std::to_string(v.numel()) + " vs active set " +
                             std::to_string(active.size()));
    Tensor<S> out(Shape{full_numel});
    for (std::size_t i = 0; i < active.size(); ++i) out[active[i]] = v[static_cast<index_t>(i)];
    return out;
}

}  // namespace snows
