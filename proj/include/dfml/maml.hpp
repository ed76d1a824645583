#pragma once

#include <functional>
#include <vector>

#include "data.hpp"
#include "net.hpp"

namespace dfml {

using HvpFn = std::function<Vec(std::span<const double>, std::span<const double>)>;

struct MamlResult {
    Vec outer_grad;
    Vec adapted;        // theta after the inner steps
    double query_loss;  // outer loss at the adapted parameters
};

// Inner loop: plain gradient descent on the inner objective from theta.
// Outer gradient: with second_order, the exact derivative through the inner
// trajectory via a reverse sweep of Hessian-vector products
// (d theta_k / d theta_j = prod_l (I - a H(theta_l))); otherwise the outer
// gradient at the adapted point.
inline MamlResult maml_outer_grad(const Vec& theta, const Objective& inner, const HvpFn& inner_hvp,
                                  const Objective& outer, double inner_lr, int inner_steps, bool second_order) {
    require(inner_steps >= 0, "maml: inner_steps must be >= 0");

    std::vector<Vec> trajectory;  // theta_0 .. theta_{k-1}
    Vec cur = theta;
    for (int s = 0; s < inner_steps; ++s) {
        Vec g(cur.size());
        double loss = inner(cur, &g);
        if (!std::isfinite(loss)) throw NumericFailure("maml: non-finite inner loss", "inner", s);
        trajectory.push_back(cur);
        for (size_t k = 0; k < cur.size(); ++k) cur[k] -= inner_lr * g[k];
    }

    MamlResult res;
    res.adapted = cur;
    Vec g(cur.size());
    res.query_loss = outer(cur, &g);
    if (!std::isfinite(res.query_loss)) throw NumericFailure("maml: non-finite query loss", "outer");

    if (second_order)
        for (int s = inner_steps - 1; s >= 0; --s) {
            Vec hv = inner_hvp(trajectory[size_t(s)], g);
            for (size_t k = 0; k < g.size(); ++k) g[k] -= inner_lr * hv[k];
        }
    res.outer_grad = std::move(g);
    return res;
}

// Episode adapter: support CE inside, query CE outside, both in train mode,
// so adaptation is transductive and running stats never enter the math.
inline MamlResult maml_episode_grad(const ArchSpec& arch, const Vec& theta, const Episode& ep, double inner_lr,
                                    int inner_steps, bool second_order, int width = -1) {
    TensorD sx = convert<double>(ep.support_x), qx = convert<double>(ep.query_x);
    Objective inner = make_ce_objective(arch, Mode::Train, sx, ep.support_y, width);
    Objective outer = make_ce_objective(arch, Mode::Train, qx, ep.query_y, width);
    HvpFn hvp = [&arch, &sx, &ep, width](std::span<const double> at, std::span<const double> v) {
        return ce_hvp(arch, Mode::Train, sx, ep.support_y, at, v, width);
    };
    return maml_outer_grad(theta, inner, hvp, outer, inner_lr, inner_steps, second_order);
}

// One MAML update of the network parameters (plain SGD on the outer loss).
// Returns the query loss at the adapted parameters.
inline double maml_step(NetworkState& net, const Episode& ep, double inner_lr, int inner_steps, double outer_lr,
                        bool second_order, int width = -1) {
    auto res = maml_episode_grad(net.arch, to_double(net.params), ep, inner_lr, inner_steps, second_order, width);
    for (size_t k = 0; k < net.params.size(); ++k)
        net.params[k] = float(double(net.params[k]) - outer_lr * res.outer_grad[k]);
    return res.query_loss;
}

}  // namespace dfml
