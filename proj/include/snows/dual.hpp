#pragma once

#include <cmath>

namespace snows {

// First-order dual number: carries a value and one directional tangent.
// Running the gradient computation on Dual<T> inputs whose tangents encode a
// direction v yields the exact directional derivative of the gradient, i.e.
// the Hessian-vector product H*v, with no finite-difference truncation.
// Comparisons act on the value part so branchy code (ReLU masks, max-pooling
// argmax, softmax max-subtraction) follows the primal control flow.
template <typename T>
struct Dual {
    T v{};  // value
    T t{};  // tangent

    Dual() = default;
    Dual(T value) : v(value), t(T(0)) {}
    Dual(T value, T tangent) : v(value), t(tangent) {}

    Dual& operator+=(const Dual& o) {
        v += o.v;
        t += o.t;
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v -= o.v;
        t -= o.t;
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        t = t * o.v + v * o.t;
        v *= o.v;
        return *this;
    }
    Dual& operator/=(const Dual& o) {
        t = (t * o.v - v * o.t) / (o.v * o.v);
        v /= o.v;
        return *this;
    }
    Dual operator-() const { return Dual(-v, -t); }
};

template <typename T>
Dual<T> operator+(Dual<T> a, const Dual<T>& b) { return a += b; }
template <typename T>
Dual<T> operator-(Dual<T> a, const Dual<T>& b) { return a -= b; }
template <typename T>
Dual<T> operator*(Dual<T> a, const Dual<T>& b) { return a *= b; }
template <typename T>
Dual<T> operator/(Dual<T> a, const Dual<T>& b) { return a /= b; }

template <typename T>
bool operator<(const Dual<T>& a, const Dual<T>& b) { return a.v < b.v; }
template <typename T>
bool operator>(const Dual<T>& a, const Dual<T>& b) { return a.v > b.v; }
template <typename T>
bool operator<=(const Dual<T>& a, const Dual<T>& b) { return a.v <= b.v; }
template <typename T>
bool operator>=(const Dual<T>& a, const Dual<T>& b) { return a.v >= b.v; }
template <typename T>
bool operator==(const Dual<T>& a, const Dual<T>& b) { return a.v == b.v; }
template <typename T>
bool operator!=(const Dual<T>& a, const Dual<T>& b) { return a.v != b.v; }

template <typename T>
Dual<T> exp(const Dual<T>& x) {
    T e = std::exp(x.v);
    return Dual<T>(e, x.t * e);
}

template <typename T>
Dual<T> sqrt(const Dual<T>& x) {
    T r = std::sqrt(x.v);
    return Dual<T>(r, x.t / (T(2) * r));
}

// d/dx erf(x) = 2/sqrt(pi) * exp(-x^2)
template <typename T>
Dual<T> erf(const Dual<T>& x) {
    constexpr T two_over_sqrt_pi = T(1.1283791670955126L);
    return Dual<T>(std::erf(x.v), x.t * two_over_sqrt_pi * std::exp(-x.v * x.v));
}

template <typename T>
Dual<T> abs(const Dual<T>& x) {
    return x.v < T(0) ? -x : x;
}

template <typename T>
Dual<T> max(const Dual<T>& a, const Dual<T>& b) { return a.v < b.v ? b : a; }

// Scalar-trait shims so generic tensor code can treat Dual and the builtin
// floating types uniformly.
template <typename S>
struct scalar_traits {
    using real_type = S;
    static S value(S x) { return x; }
    static S from_real(real_type x) { return x; }
};

template <typename T>
struct scalar_traits<Dual<T>> {
    using real_type = T;
    static T value(const Dual<T>& x) { return x.v; }
    static Dual<T> from_real(T x) { return Dual<T>(x); }
};

template <typename S>
using real_of = typename scalar_traits<S>::real_type;

}  // namespace snows
