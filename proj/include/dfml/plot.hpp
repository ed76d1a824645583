#pragma once
// Raster renderers for the diagnostic figures: matrix heatmaps and point
// curves. Deliberately primitive; the contract is pixel-countable output,
// not typography.

#include <algorithm>
#include <cmath>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace dfml {

namespace detail {

// Five-stop dark-blue to yellow ramp, t in [0,1].
inline void colormap(double t, float* rgb) {
    static const double stops[5][3] = {
        {0.267, 0.005, 0.329}, {0.229, 0.322, 0.546}, {0.128, 0.567, 0.551}, {0.369, 0.789, 0.383},
        {0.993, 0.906, 0.144},
    };
    t = std::clamp(t, 0.0, 1.0) * 4.0;
    int i = std::min(3, int(t));
    double f = t - i;
    for (int k = 0; k < 3; ++k) rgb[k] = float(stops[i][k] * (1 - f) + stops[i + 1][k] * f);
}

inline void put(TensorF& img, int y, int x, float r, float g, float b) {
    if (y < 0 || y >= img.h || x < 0 || x >= img.w) return;
    img.at(0, y, x, 0) = r;
    img.at(0, y, x, 1) = g;
    img.at(0, y, x, 2) = b;
}

}  // namespace detail

// Square-cell rendering of a matrix, min-max normalized; flat input maps to
// the ramp midpoint.
inline TensorF heatmap_image(const std::vector<Vec>& m, int cell = 24) {
    int n = int(m.size());
    require(n >= 1 && cell >= 1, "heatmap_image: empty matrix");
    for (const auto& r : m) require(int(r.size()) == n, "heatmap_image: matrix must be square");
    double lo = m[0][0], hi = m[0][0];
    for (const auto& r : m)
        for (double v : r) {
            require(std::isfinite(v), "heatmap_image: non-finite entry");
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    TensorF img(1, n * cell, n * cell, 3);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double t = hi > lo ? (m[size_t(i)][size_t(j)] - lo) / (hi - lo) : 0.5;
            float rgb[3];
            detail::colormap(t, rgb);
            for (int y = 0; y < cell; ++y)
                for (int x = 0; x < cell; ++x) detail::put(img, i * cell + y, j * cell + x, rgb[0], rgb[1], rgb[2]);
        }
    return img;
}

// One marker pixel per data point (pure saturated color, unique per series)
// over a half-tone polyline, so tests can count points exactly.
inline TensorF curve_image(const std::vector<Vec>& series, int w = 640, int h = 360) {
    require(!series.empty(), "curve_image: no series");
    size_t t_len = series[0].size();
    require(t_len >= 1, "curve_image: empty series");
    for (const auto& s : series) require(s.size() == t_len, "curve_image: ragged series");

    static const float marker[4][3] = {{1, 0, 0}, {0, 0, 1}, {0, 0.6f, 0}, {0.8f, 0, 0.8f}};
    require(series.size() <= 4, "curve_image: at most 4 series");

    TensorF img(1, h, w, 3);
    for (size_t i = 0; i < img.size(); ++i) img.v[i] = 1.0f;
    const int mgn = 12;
    require(w > 2 * mgn + 1 && h > 2 * mgn + 1, "curve_image: canvas too small");
    for (int x = mgn; x < w - mgn; ++x) {
        detail::put(img, mgn, x, 0, 0, 0);
        detail::put(img, h - mgn - 1, x, 0, 0, 0);
    }
    for (int y = mgn; y < h - mgn; ++y) {
        detail::put(img, y, mgn, 0, 0, 0);
        detail::put(img, y, w - mgn - 1, 0, 0, 0);
    }

    double lo = series[0][0], hi = series[0][0];
    for (const auto& s : series)
        for (double v : s) {
            require(std::isfinite(v), "curve_image: non-finite value");
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi <= lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    int pw = w - 2 * mgn - 3, ph = h - 2 * mgn - 3;
    auto px = [&](size_t i) {
        return mgn + 1 + int(t_len == 1 ? pw / 2 : std::lround(double(i) * pw / double(t_len - 1)));
    };
    auto py = [&](double v) { return h - mgn - 2 - int(std::lround((v - lo) / (hi - lo) * ph)); };

    for (size_t si = 0; si < series.size(); ++si) {
        const float* mc = marker[si];
        float lr = 0.5f + 0.5f * mc[0], lg = 0.5f + 0.5f * mc[1], lb = 0.5f + 0.5f * mc[2];
        for (size_t i = 0; i + 1 < t_len; ++i) {
            int x0 = px(i), y0 = py(series[si][i]), x1 = px(i + 1), y1 = py(series[si][i + 1]);
            int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
            for (int s = 1; s < steps; ++s)
                detail::put(img, y0 + (y1 - y0) * s / steps, x0 + (x1 - x0) * s / steps, lr, lg, lb);
        }
    }
    for (size_t si = 0; si < series.size(); ++si) {
        const float* mc = marker[si];
        for (size_t i = 0; i < t_len; ++i) detail::put(img, py(series[si][i]), px(i), mc[0], mc[1], mc[2]);
    }
    return img;
}

}  // namespace dfml
