#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string_view>
#include <type_traits>
#include <vector>

#include "snows/common.hpp"
#include "snows/dual.hpp"

namespace snows {

// Dense n-dimensional array, row-major contiguous. No strided views, no
// implicit broadcasting; arithmetic between tensors of different scalar
// types does not compile.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(checked_numel(shape_), S(0)) {}

    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != static_cast<index_t>(data_.size()))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, S value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    index_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    index_t numel() const { return static_cast<index_t>(data_.size()); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& storage() { return data_; }
    const std::vector<S>& storage() const { return data_; }

    S& operator[](index_t flat) { return data_[static_cast<std::size_t>(flat)]; }
    const S& operator[](index_t flat) const { return data_[static_cast<std::size_t>(flat)]; }

    S& operator()(index_t i, index_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    const S& operator()(index_t i, index_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }

    S& operator()(index_t i, index_t j, index_t k) {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    const S& operator()(index_t i, index_t j, index_t k) const {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }

    S& operator()(index_t i, index_t j, index_t k, index_t l) {
        return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }
    const S& operator()(index_t i, index_t j, index_t k, index_t l) const {
        return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }

    Tensor reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != numel())
            throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                                 " changes element count");
        return Tensor(std::move(new_shape), data_);
    }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

private:
    static index_t checked_numel(const Shape& s) {
        for (index_t d : s)
            if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
        return shape_numel(s);
    }

    Shape shape_;
    std::vector<S> data_;
};

template <typename S>
bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
    return a.shape() == b.shape();
}

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), sizeof(S) * static_cast<std::size_t>(a.numel())) == 0;
}

// ---------------------------------------------------------------------------
// Eigen interop (row-major maps). Eigen only ever sees float/double; Dual
// arithmetic is decomposed onto real GEMMs below.

template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<MatrixRM<S>> as_matrix(Tensor<S>& t, index_t rows, index_t cols) {
    return Eigen::Map<MatrixRM<S>>(t.data(), rows, cols);
}

template <typename S>
Eigen::Map<const MatrixRM<S>> as_matrix(const Tensor<S>& t, index_t rows, index_t cols) {
    return Eigen::Map<const MatrixRM<S>>(t.data(), rows, cols);
}

// ---------------------------------------------------------------------------
// matmul

namespace detail {

inline void check_matmul_shapes(const Shape& a, const Shape& b) {
    if (a.size() != 2 || b.size() != 2 || a[1] != b[0])
        throw DimensionError("matmul shape mismatch: " + shape_str(a) + " x " + shape_str(b));
}

}  // namespace detail

template <typename S>
    requires std::is_floating_point_v<S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_matmul_shapes(a.shape(), b.shape());
    Tensor<S> out(Shape{a.dim(0), b.dim(1)});
    as_matrix(out, a.dim(0), b.dim(1)).noalias() =
        as_matrix(a, a.dim(0), a.dim(1)) * as_matrix(b, b.dim(0), b.dim(1));
    return out;
}

// (A.v + eps A.t)(B.v + eps B.t) = A.v B.v + eps (A.v B.t + A.t B.v):
// three real GEMMs instead of one GEMM over a custom scalar.
template <typename T>
Tensor<Dual<T>> matmul(const Tensor<Dual<T>>& a, const Tensor<Dual<T>>& b) {
    detail::check_matmul_shapes(a.shape(), b.shape());
    const index_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    MatrixRM<T> av(m, k), at(m, k), bv(k, n), bt(k, n);
    for (index_t i = 0; i < a.numel(); ++i) {
        av.data()[i] = a[i].v;
        at.data()[i] = a[i].t;
    }
    for (index_t i = 0; i < b.numel(); ++i) {
        bv.data()[i] = b[i].v;
        bt.data()[i] = b[i].t;
    }
    MatrixRM<T> ov = av * bv;
    MatrixRM<T> ot = av * bt + at * bv;
    Tensor<Dual<T>> out(Shape{m, n});
    for (index_t i = 0; i < out.numel(); ++i) out[i] = Dual<T>(ov.data()[i], ot.data()[i]);
    return out;
}

// ---------------------------------------------------------------------------
// elementwise ops

namespace detail {

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
    if (!same_shape(a, b))
        throw DimensionError(std::string(what) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<S> out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<S> out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<S> out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <typename S, typename C>
Tensor<S> scale(const Tensor<S>& a, C c) {
    Tensor<S> out(a.shape());
    const S f = S(c);
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] * f;
    return out;
}

template <typename S>
void axpy(S alpha, const Tensor<S>& x, Tensor<S>& y) {
    detail::check_same_shape(x, y, "axpy");
    for (index_t i = 0; i < x.numel(); ++i) y[i] += alpha * x[i];
}

template <typename S>
S relu_scalar(S x) {
    return x < S(0) ? S(0) : x;
}

// Exact Gaussian-CDF GELU: x * Phi(x) with Phi evaluated through erf
// (std::erf for real scalars, the dual extension otherwise).
template <typename S>
S gelu_scalar(S x) {
    using std::erf;
    using std::sqrt;
    const S inv_sqrt2 = S(0.70710678118654752440L);
    return S(0.5) * x * (S(1) + erf(x * inv_sqrt2));
}

// d/dx gelu(x) = Phi(x) + x * phi(x)
template <typename S>
S gelu_grad_scalar(S x) {
    using std::erf;
    using std::exp;
    const S inv_sqrt2 = S(0.70710678118654752440L);
    const S inv_sqrt2pi = S(0.39894228040143267794L);
    S phi = inv_sqrt2pi * exp(S(-0.5) * x * x);
    S cdf = S(0.5) * (S(1) + erf(x * inv_sqrt2));
    return cdf + x * phi;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = relu_scalar(a[i]);
    return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = gelu_scalar(a[i]);
    return out;
}

// ---------------------------------------------------------------------------
// reductions
//
// Accumulation order is sequential row-major traversal of the input; oracle
// code that needs tighter error bounds uses compensated summation in double
// precision on its own.

enum class ReduceOp { sum, sumsq, max };

template <typename S>
Tensor<S> reduce(ReduceOp op, const Tensor<S>& t, const std::vector<int>& axes) {
    const int nd = t.ndim();
    std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
    for (int a : axes) {
        if (a < 0 || a >= nd) throw ValueError("reduce axis " + std::to_string(a) + " out of range for " + shape_str(t.shape()));
        reduced[static_cast<std::size_t>(a)] = true;
    }
    Shape out_shape;
    for (int d = 0; d < nd; ++d)
        if (!reduced[static_cast<std::size_t>(d)]) out_shape.push_back(t.dim(d));

    index_t out_numel = shape_numel(out_shape);
    if (op == ReduceOp::max && t.numel() == 0)
        throw ValueError("max reduction over empty tensor");

    Tensor<S> out(out_shape);
    std::vector<bool> seen;
    if (op == ReduceOp::max) {
        seen.assign(static_cast<std::size_t>(out_numel), false);
    }

    // out strides over the kept axes
    std::vector<index_t> out_stride(static_cast<std::size_t>(nd), 0);
    {
        index_t stride = 1;
        for (int d = nd - 1; d >= 0; --d) {
            if (!reduced[static_cast<std::size_t>(d)]) {
                out_stride[static_cast<std::size_t>(d)] = stride;
                stride *= t.dim(d);
            }
        }
    }

    std::vector<index_t> idx(static_cast<std::size_t>(nd), 0);
    for (index_t flat = 0; flat < t.numel(); ++flat) {
        index_t o = 0;
        for (int d = 0; d < nd; ++d) o += idx[static_cast<std::size_t>(d)] * out_stride[static_cast<std::size_t>(d)];
        const S x = t[flat];
        switch (op) {
            case ReduceOp::sum: out[o] += x; break;
            case ReduceOp::sumsq: out[o] += x * x; break;
            case ReduceOp::max:
                if (!seen[static_cast<std::size_t>(o)] || out[o] < x) out[o] = x;
                seen[static_cast<std::size_t>(o)] = true;
                break;
        }
        for (int d = nd - 1; d >= 0; --d) {
            if (++idx[static_cast<std::size_t>(d)] < t.dim(d)) break;
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }
    return out;
}

template <typename S>
S sum(const Tensor<S>& t) {
    S acc = S(0);
    for (index_t i = 0; i < t.numel(); ++i) acc += t[i];
    return acc;
}

template <typename S>
S sumsq(const Tensor<S>& t) {
    S acc = S(0);
    for (index_t i = 0; i < t.numel(); ++i) acc += t[i] * t[i];
    return acc;
}

template <typename S>
real_of<S> norm2(const Tensor<S>& t) {
    using std::sqrt;
    real_of<S> acc = 0;
    for (index_t i = 0; i < t.numel(); ++i) {
        auto v = scalar_traits<S>::value(t[i]);
        acc += v * v;
    }
    return sqrt(acc);
}

// ---------------------------------------------------------------------------
// batch-dimension helpers (dim 0)

template <typename S>
Tensor<S> slice_dim0(const Tensor<S>& t, index_t start, index_t count) {
    if (t.ndim() < 1 || start < 0 || count <= 0 || start + count > t.dim(0))
        throw DimensionError("slice_dim0 [" + std::to_string(start) + "," + std::to_string(start + count) +
                             ") out of range for " + shape_str(t.shape()));
    Shape s = t.shape();
    s[0] = count;
    index_t row = t.numel() / t.dim(0);
    Tensor<S> out(s);
    std::copy(t.data() + start * row, t.data() + (start + count) * row, out.data());
    return out;
}

template <typename S>
Tensor<S> gather_dim0(const Tensor<S>& t, const std::vector<index_t>& rows) {
    if (t.ndim() < 1) throw DimensionError("gather_dim0 needs rank >= 1");
    Shape s = t.shape();
    s[0] = static_cast<index_t>(rows.size());
    index_t row = t.numel() / t.dim(0);
    Tensor<S> out(s);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= t.dim(0))
            throw DimensionError("gather_dim0 row " + std::to_string(rows[r]) + " out of range");
        std::copy(t.data() + rows[r] * row, t.data() + (rows[r] + 1) * row,
                  out.data() + static_cast<index_t>(r) * row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// flat concat/split across several tensors (the "logical weight" view used
// for jointly optimized weight groups)

template <typename S>
Tensor<S> concat_flat(const std::vector<Tensor<S>>& parts) {
    index_t total = 0;
    for (const auto& p : parts) total += p.numel();
    Tensor<S> out(Shape{total});
    index_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + off);
        off += p.numel();
    }
    return out;
}

template <typename S>
std::vector<Tensor<S>> split_flat(const Tensor<S>& flat, const std::vector<Shape>& shapes) {
    index_t total = 0;
    for (const auto& s : shapes) total += shape_numel(s);
    if (flat.numel() != total)
        throw DimensionError("split_flat: " + std::to_string(flat.numel()) + " elements cannot fill " +
                             std::to_string(total));
    std::vector<Tensor<S>> out;
    out.reserve(shapes.size());
    index_t off = 0;
    for (const auto& s : shapes) {
        index_t n = shape_numel(s);
        std::vector<S> buf(flat.data() + off, flat.data() + off + n);
        out.emplace_back(s, std::move(buf));
        off += n;
    }
    return out;
}

// ---------------------------------------------------------------------------
// dual lifting

template <typename T>
Tensor<Dual<T>> lift(const Tensor<T>& t) {
    Tensor<Dual<T>> out(t.shape());
    for (index_t i = 0; i < t.numel(); ++i) out[i] = Dual<T>(t[i]);
    return out;
}

template <typename T>
Tensor<T> value_part(const Tensor<Dual<T>>& t) {
    Tensor<T> out(t.shape());
    for (index_t i = 0; i < t.numel(); ++i) out[i] = t[i].v;
    return out;
}

template <typename T>
Tensor<T> tangent_part(const Tensor<Dual<T>>& t) {
    Tensor<T> out(t.shape());
    for (index_t i = 0; i < t.numel(); ++i) out[i] = t[i].t;
    return out;
}

// ---------------------------------------------------------------------------
// Rng: SplitMix64 (Steele, Lea & Flood 2014). State-based, 64-bit, the
// integer stream is bit-identical for a given seed on every platform.
// Real-valued draws go through uniform() (53-bit mantissa fill) and
// normal() (Box-Muller, cosine branch, two uniforms per call, no caching),
// so their determinism additionally rests on libm's log/cos/sqrt.

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double normal() {
        double u1 = 1.0 - uniform();  // (0,1], keeps log finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ValueError("Rng::below(0)");
        std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Named sub-stream derived from the original seed, independent of how
    // much this stream has been consumed. Adding a consumer never perturbs
    // the others.
    Rng substream(std::string_view name) const {
        std::uint64_t h = fnv1a64(name.data(), name.size());
        Rng derived(seed_ ^ (h + 0x9e3779b97f4a7c15ull + (seed_ << 6) + (seed_ >> 2)));
        derived.next_u64();  // decorrelate from the raw seed
        return Rng(derived.next_u64());
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

template <typename S>
Tensor<S> random_normal(const Shape& shape, Rng& rng, double stddev = 1.0) {
    Tensor<S> t(shape);
    for (index_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.normal() * stddev);
    return t;
}

template <typename S>
Tensor<S> random_uniform(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<S> t(shape);
    for (index_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(lo + (hi - lo) * rng.uniform());
    return t;
}

}  // namespace snows
