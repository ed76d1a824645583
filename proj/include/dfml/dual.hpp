#pragma once

#include <cmath>

namespace dfml {

// Forward-mode dual number. Pushing {theta, v} through a gradient computation
// yields the exact Hessian-vector product H(theta) v in the tangent parts; no
// finite-difference step size is involved.
struct Dual {
    double a = 0.0;  // value
    double b = 0.0;  // tangent

    Dual() = default;
    Dual(double a_) : a(a_) {}
    Dual(double a_, double b_) : a(a_), b(b_) {}

    Dual& operator+=(const Dual& o) { a += o.a; b += o.b; return *this; }
    Dual& operator-=(const Dual& o) { a -= o.a; b -= o.b; return *this; }
    Dual& operator*=(const Dual& o) { b = b * o.a + a * o.b; a *= o.a; return *this; }
    Dual& operator/=(const Dual& o) {
        a /= o.a;
        b = (b - a * o.b) / o.a;
        return *this;
    }
};

inline Dual operator+(Dual x, const Dual& y) { return x += y; }
inline Dual operator-(Dual x, const Dual& y) { return x -= y; }
inline Dual operator*(Dual x, const Dual& y) { return x *= y; }
inline Dual operator/(Dual x, const Dual& y) { return x /= y; }
inline Dual operator-(const Dual& x) { return {-x.a, -x.b}; }

inline bool operator<(const Dual& x, const Dual& y) { return x.a < y.a; }
inline bool operator>(const Dual& x, const Dual& y) { return x.a > y.a; }
inline bool operator<=(const Dual& x, const Dual& y) { return x.a <= y.a; }
inline bool operator>=(const Dual& x, const Dual& y) { return x.a >= y.a; }
inline bool operator==(const Dual& x, const Dual& y) { return x.a == y.a; }

inline Dual exp(const Dual& x) {
    double e = std::exp(x.a);
    return {e, e * x.b};
}
inline Dual log(const Dual& x) { return {std::log(x.a), x.b / x.a}; }
inline Dual sqrt(const Dual& x) {
    double s = std::sqrt(x.a);
    return {s, x.b / (2.0 * s)};
}
inline Dual max(const Dual& x, const Dual& y) { return x.a >= y.a ? x : y; }
inline Dual abs(const Dual& x) { return x.a >= 0.0 ? x : -x; }

// Double overloads so templated engine code can call these unqualified for
// either scalar type (unqualified lookup stops at this namespace).
inline double exp(double x) { return std::exp(x); }
inline double log(double x) { return std::log(x); }
inline double sqrt(double x) { return std::sqrt(x); }
inline double max(double x, double y) { return x > y ? x : y; }
inline double abs(double x) { return std::abs(x); }

// Scalar accessors let templated code read the primal part of either type.
inline double primal(double x) { return x; }
inline double primal(const Dual& x) { return x.a; }

inline bool is_finite(double x) { return std::isfinite(x); }
inline bool is_finite(const Dual& x) { return std::isfinite(x.a) && std::isfinite(x.b); }

}  // namespace dfml
