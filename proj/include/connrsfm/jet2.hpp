#pragma once

// Second-order forward-mode differentiation in two variables.
//
// A Jet2 carries a value together with its gradient and Hessian with respect
// to (u, v). Arithmetic propagates all three exactly, so closed-form maps
// written against Jet2 yield analytic first and second derivatives.

#include <array>
#include <cmath>

namespace connrsfm {

struct Jet2 {
    double v = 0.0;
    std::array<double, 2> d{0.0, 0.0};
    std::array<double, 3> h{0.0, 0.0, 0.0};  // uu, uv, vv

    constexpr Jet2() = default;
    constexpr Jet2(double value) : v(value) {}  // NOLINT: implicit constants are the point

    static Jet2 variable(double value, int index) {
        Jet2 j(value);
        j.d[static_cast<std::size_t>(index)] = 1.0;
        return j;
    }

    double du() const { return d[0]; }
    double dv() const { return d[1]; }
    double duu() const { return h[0]; }
    double duv() const { return h[1]; }
    double dvv() const { return h[2]; }
};

namespace detail {

// phi(g) given phi(g.v), phi'(g.v), phi''(g.v).
inline Jet2 chain(const Jet2& g, double f0, double f1, double f2) {
    Jet2 r(f0);
    r.d[0] = f1 * g.d[0];
    r.d[1] = f1 * g.d[1];
    r.h[0] = f2 * g.d[0] * g.d[0] + f1 * g.h[0];
    r.h[1] = f2 * g.d[0] * g.d[1] + f1 * g.h[1];
    r.h[2] = f2 * g.d[1] * g.d[1] + f1 * g.h[2];
    return r;
}

}  // namespace detail

inline Jet2 operator+(const Jet2& a, const Jet2& b) {
    Jet2 r(a.v + b.v);
    for (int i = 0; i < 2; ++i) r.d[i] = a.d[i] + b.d[i];
    for (int i = 0; i < 3; ++i) r.h[i] = a.h[i] + b.h[i];
    return r;
}

inline Jet2 operator-(const Jet2& a) {
    Jet2 r(-a.v);
    for (int i = 0; i < 2; ++i) r.d[i] = -a.d[i];
    for (int i = 0; i < 3; ++i) r.h[i] = -a.h[i];
    return r;
}

inline Jet2 operator-(const Jet2& a, const Jet2& b) { return a + (-b); }

inline Jet2 operator*(const Jet2& a, const Jet2& b) {
    Jet2 r(a.v * b.v);
    r.d[0] = a.d[0] * b.v + a.v * b.d[0];
    r.d[1] = a.d[1] * b.v + a.v * b.d[1];
    r.h[0] = a.h[0] * b.v + 2.0 * a.d[0] * b.d[0] + a.v * b.h[0];
    r.h[1] = a.h[1] * b.v + a.d[0] * b.d[1] + a.d[1] * b.d[0] + a.v * b.h[1];
    r.h[2] = a.h[2] * b.v + 2.0 * a.d[1] * b.d[1] + a.v * b.h[2];
    return r;
}

inline Jet2 reciprocal(const Jet2& a) {
    const double inv = 1.0 / a.v;
    return detail::chain(a, inv, -inv * inv, 2.0 * inv * inv * inv);
}

inline Jet2 operator/(const Jet2& a, const Jet2& b) { return a * reciprocal(b); }

inline Jet2& operator+=(Jet2& a, const Jet2& b) { return a = a + b; }
inline Jet2& operator-=(Jet2& a, const Jet2& b) { return a = a - b; }
inline Jet2& operator*=(Jet2& a, const Jet2& b) { return a = a * b; }

inline Jet2 sqrt(const Jet2& a) {
    const double s = std::sqrt(a.v);
    return detail::chain(a, s, 0.5 / s, -0.25 / (s * a.v));
}

inline Jet2 exp(const Jet2& a) {
    const double e = std::exp(a.v);
    return detail::chain(a, e, e, e);
}

inline Jet2 log(const Jet2& a) { return detail::chain(a, std::log(a.v), 1.0 / a.v, -1.0 / (a.v * a.v)); }

}  // namespace connrsfm
