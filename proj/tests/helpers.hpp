#pragma once

#include <dfml/net.hpp>

namespace testutil {

using namespace dfml;

// Central finite differences of an objective, 64-bit throughout.
inline Vec fd_grad(const Objective& f, const Vec& theta, double h = 1e-3) {
    Vec g(theta.size());
    Vec t = theta;
    for (size_t i = 0; i < theta.size(); ++i) {
        t[i] = theta[i] + h;
        double up = f(t, nullptr);
        t[i] = theta[i] - h;
        double dn = f(t, nullptr);
        t[i] = theta[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

inline TensorF random_batch(Rng& rng, int n, int h, int w, int c) {
    TensorF x(n, h, w, c);
    for (auto& v : x.v) v = float(rng.uniform());
    return x;
}

// Small net so finite differences over every parameter stay cheap.
inline ArchSpec tiny_arch(int classes = 3) {
    ArchSpec a;
    a.in_h = 8;
    a.in_w = 8;
    a.in_c = 2;
    a.layers = {conv(4, 3, 1, 1), batchnorm(), relu(), maxpool(2), dense(classes)};
    a.finalize();
    return a;
}

}  // namespace testutil
