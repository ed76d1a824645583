#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfml {

using Vec = std::vector<double>;

// Input violated an operation's precondition (shape, range, count, ...).
struct RejectedInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A numeric quantity became non-finite. Carries the offending term and,
// where meaningful, the step index at which it appeared.
struct NumericFailure : std::runtime_error {
    std::string term;
    long step = -1;
    NumericFailure(const std::string& msg, std::string term_, long step_ = -1)
        : std::runtime_error(msg), term(std::move(term_)), step(step_) {}
};

// Memory bank cannot furnish the requested episode; callers may skip replay.
struct InsufficientBank : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Pipeline-level configuration / artifact problem (CLI exit code 1).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw RejectedInput(msg);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline Vec operator-(const Vec& a, const Vec& b) {
    Vec r(a.size());
    for (size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
    return r;
}

inline Vec operator+(const Vec& a, const Vec& b) {
    Vec r(a.size());
    for (size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
    return r;
}

inline Vec operator*(double s, const Vec& a) {
    Vec r(a.size());
    for (size_t i = 0; i < a.size(); ++i) r[i] = s * a[i];
    return r;
}

inline double max_abs(const Vec& a) {
    double m = 0.0;
    for (double x : a) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace dfml
