#pragma once

#include <string>
#include <utility>
#include <vector>

#include "net.hpp"
#include "zoo.hpp"

namespace dfml {

struct GeneratorState {
    NetworkState net;
    int latent_dim = 256;
};

inline GeneratorState make_generator_state(int out_h, int out_w, int out_c, uint64_t seed, int latent_dim = 256,
                                           int nf = 8) {
    GeneratorState g;
    Rng rng(seed);
    g.net = make_state(make_generator(latent_dim, nf, out_h, out_w, out_c), rng, Mode::Train);
    g.latent_dim = latent_dim;
    return g;
}

// Codes travel as an N x 1 x 1 x latent_dim tensor, the generator input.
struct LatentBatch {
    TensorF codes;
};

inline LatentBatch sample_latents(int n, int dim, uint64_t seed) {
    Rng rng(seed);
    LatentBatch z;
    z.codes = TensorF(uninit, n, 1, 1, dim);
    for (auto& v : z.codes.v) v = float(rng.normal());
    return z;
}

struct PseudoTask {
    TensorF images;
    std::vector<int> labels;  // teacher-local
    std::string source_id;
    std::vector<std::pair<std::string, int>> class_keys;  // one per local label
};

struct InversionLoss {
    double l_ce = 0, l_bn = 0, total = 0;
};

namespace detail {

struct InversionGrads {
    InversionLoss value;
    Vec gen_grad;
    TensorD z_grad;
};

// One pass through generator and teacher. The teacher runs in eval mode so
// logits come from running stats, while the cache still captures the batch
// statistics that the statistic-matching term compares against them.
inline InversionGrads inversion_pass(const NetworkState& teacher, const GeneratorState& gen, const LatentBatch& z,
                                     const std::vector<int>& y, bool want_grads) {
    require(teacher.mode == Mode::Eval, "inversion: teacher must be in eval mode");
    require(z.codes.c == gen.latent_dim, "inversion: latent width mismatch");
    require(size_t(z.codes.n) == y.size(), "inversion: label count mismatch");

    Vec gen_theta = to_double(gen.net.params);
    TensorD codes = convert<double>(z.codes);
    auto gen_cache = forward<double>(gen.net.arch, gen_theta, codes, Mode::Train);
    const TensorD& images = gen_cache.out();

    Vec teacher_theta = to_double(teacher.params);
    auto tc = forward<double>(teacher.arch, teacher_theta, images, Mode::Eval);
    auto ce = softmax_xent<double>(tc.out(), y);

    InversionGrads out;
    out.value.l_ce = ce.value;
    InjectedGrads<double> inject;
    for (int li : teacher.arch.bn_layer_indices()) {
        auto s = bn_slices(teacher.arch.layers[li]);
        const auto& in = tc.acts[li];
        const int C = teacher.arch.layers[li].channels;
        const double M = double(in.size() / size_t(C));
        for (int c = 0; c < C; ++c) {
            double dm = tc.bn_mean[li][c] - double(teacher.params[s.running_mean + c]);
            double dv = tc.bn_var[li][c] - double(teacher.params[s.running_var + c]);
            out.value.l_bn += dm * dm + dv * dv;
        }
        if (want_grads) {
            Tensor<double> g(uninit, in.n, in.h, in.w, in.c);
            const double* __restrict__ pi = in.v.data();
            double* __restrict__ pg = g.v.data();
            for (size_t i = 0; i < in.size() / size_t(C); ++i, pi += C, pg += C)
                for (int c = 0; c < C; ++c) {
                    double mu = tc.bn_mean[li][c];
                    double dm = mu - double(teacher.params[s.running_mean + c]);
                    double dv = tc.bn_var[li][c] - double(teacher.params[s.running_var + c]);
                    pg[c] = (2.0 / M) * dm + (4.0 / M) * dv * (pi[c] - mu);
                }
            inject.emplace_back(li, std::move(g));
        }
    }
    out.value.total = out.value.l_ce + out.value.l_bn;
    if (!std::isfinite(out.value.total))
        throw NumericFailure("inversion: non-finite loss", std::isfinite(out.value.l_ce) ? "l_bn" : "l_ce");

    if (want_grads) {
        auto tb = backward<double>(teacher.arch, teacher_theta, tc, Mode::Eval, ce.dlogits, inject, false, true);
        auto gb = backward<double>(gen.net.arch, gen_theta, gen_cache, Mode::Train, tb.input_grad, {}, true, true);
        out.gen_grad = std::move(gb.param_grads);
        out.z_grad = std::move(gb.input_grad);
    }
    return out;
}

}  // namespace detail

inline InversionLoss inversion_loss(const NetworkState& teacher, const GeneratorState& gen, const LatentBatch& z,
                                    const std::vector<int>& y) {
    return detail::inversion_pass(teacher, gen, z, y, false).value;
}

// Joint first-order optimization of generator parameters and latent codes.
// The generator warm-starts from its incoming state; codes are fresh draws.
inline PseudoTask recover_task(const PretrainedModelRecord& teacher, int per_class, GeneratorState& gen,
                               uint64_t seed, int steps = 200, double lr = 1e-3,
                               std::vector<InversionLoss>* history = nullptr) {
    require(per_class >= 1, "recover_task: per_class must be >= 1");
    const int way = int(teacher.classes.size());
    require(way >= 1, "recover_task: teacher without classes");
    require(gen.net.arch.num_outputs == teacher.arch.in_h * teacher.arch.in_w * teacher.arch.in_c,
            "recover_task: generator output does not match teacher input");

    NetworkState tstate{teacher.arch, teacher.params, Mode::Eval};
    const int B = way * per_class;
    LatentBatch z = sample_latents(B, gen.latent_dim, derive_seed(seed, "latent"));
    std::vector<int> y(B);
    for (int i = 0; i < B; ++i) y[i] = i % way;

    Adam opt_g(lr), opt_z(lr);
    for (int step = 0; step < steps; ++step) {
        detail::InversionGrads g;
        try {
            g = detail::inversion_pass(tstate, gen, z, y, true);
        } catch (NumericFailure& e) {
            e.step = step;
            throw;
        }
        if (history) history->push_back(g.value);
        opt_g.step(gen.net.params, g.gen_grad);
        Vec zg(g.z_grad.v.begin(), g.z_grad.v.end());
        opt_z.step(z.codes.v, zg);
    }
    auto final_pass = detail::inversion_pass(tstate, gen, z, y, false);
    if (history) history->push_back(final_pass.value);

    PseudoTask task;
    Vec gen_theta = to_double(gen.net.params);
    auto cache = forward<double>(gen.net.arch, gen_theta, convert<double>(z.codes), Mode::Train);
    task.images = convert<float>(cache.out());
    task.labels = std::move(y);
    task.source_id = teacher.id;
    for (int l = 0; l < way; ++l) task.class_keys.emplace_back(teacher.id, l);
    return task;
}

}  // namespace dfml
