#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "common.hpp"
#include "net.hpp"

namespace dfml {

// Two-pass displaced-gradient update. Pass 1 takes every task gradient at
// theta; pass 2 re-evaluates task i at theta - beta*(mean - g_i) and returns
// the mean of the displaced gradients. Evaluators must be pure in theta;
// theta itself is never written.
inline Vec igr_update_gradient(std::span<const double> theta, const std::vector<Objective>& losses, double beta,
                               std::vector<Vec>* pass1_grads = nullptr, Vec* pass1_losses = nullptr) {
    const size_t m = losses.size();
    require(m >= 1, "igr: need at least one task");
    require(beta >= 0.0, "igr: beta must be >= 0");

    std::vector<Vec> g(m, Vec(theta.size()));
    Vec mean(theta.size(), 0.0);
    if (pass1_losses) pass1_losses->assign(m, 0.0);
    for (size_t i = 0; i < m; ++i) {
        double li = losses[i](theta, &g[i]);
        if (!std::isfinite(li) || !std::all_of(g[i].begin(), g[i].end(), [](double x) { return std::isfinite(x); }))
            throw NumericFailure("igr: non-finite gradient", "pass1 task " + std::to_string(i));
        if (pass1_losses) (*pass1_losses)[i] = li;
        for (size_t k = 0; k < mean.size(); ++k) mean[k] += g[i][k] / double(m);
    }

    Vec out = mean;
    if (beta != 0.0) {
        out.assign(theta.size(), 0.0);
        Vec displaced(theta.size());
        for (size_t i = 0; i < m; ++i) {
            for (size_t k = 0; k < displaced.size(); ++k) displaced[k] = theta[k] - beta * (mean[k] - g[i][k]);
            Vec gd(theta.size());
            losses[i](displaced, &gd);
            if (!std::all_of(gd.begin(), gd.end(), [](double x) { return std::isfinite(x); }))
                throw NumericFailure("igr: non-finite gradient", "pass2 task " + std::to_string(i));
            for (size_t k = 0; k < out.size(); ++k) out[k] += gd[k] / double(m);
        }
    }
    if (pass1_grads) *pass1_grads = std::move(g);
    return out;
}

struct RegularizerValue {
    double value = 0;        // (1/2m) sum_i ||g_i - mean||^2
    double mean_cosine = 1;  // mean pairwise cosine of the raw gradients
};

inline RegularizerValue explicit_regularizer(const std::vector<Vec>& grads) {
    const size_t m = grads.size();
    require(m >= 1, "explicit_regularizer: no gradients");
    for (const auto& g : grads) require(g.size() == grads[0].size(), "explicit_regularizer: length mismatch");

    Vec mean(grads[0].size(), 0.0);
    for (const auto& g : grads)
        for (size_t k = 0; k < mean.size(); ++k) mean[k] += g[k] / double(m);

    RegularizerValue out;
    for (const auto& g : grads) {
        double d2 = 0;
        for (size_t k = 0; k < mean.size(); ++k) d2 += (g[k] - mean[k]) * (g[k] - mean[k]);
        out.value += d2 / (2.0 * double(m));
    }

    if (m >= 2) {
        double acc = 0;
        size_t pairs = 0;
        for (size_t i = 0; i < m; ++i)
            for (size_t j = i + 1; j < m; ++j, ++pairs) {
                double nij = std::sqrt(squared_norm(grads[i]) * squared_norm(grads[j]));
                acc += nij == 0.0 ? 0.0 : dot(grads[i], grads[j]) / nij;
            }
        out.mean_cosine = acc / double(pairs);
    }
    return out;
}

}  // namespace dfml
