// Throughput probe for the layer kernels; informs desk-scale step budgets.
#include <chrono>
#include <cstdio>

#include <dfml/net.hpp>

using namespace dfml;

static double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

int main() {
    Rng rng(1);
    ArchSpec cls = make_classifier(5, 16);
    ArchSpec gen = make_generator(256, 8);
    auto cp = to_double(init_params(cls, rng));
    auto gp = to_double(init_params(gen, rng));

    TensorD imgs(30, 32, 32, 3);
    for (auto& v : imgs.v) v = rng.uniform();
    std::vector<int> labels(30);
    for (int i = 0; i < 30; ++i) labels[i] = i % 5;

    TensorD z(30, 1, 1, 256);
    for (auto& v : z.v) v = rng.normal();

    // classifier forward+backward
    {
        int iters = 50;
        double t0 = now_s();
        double sink = 0;
        for (int it = 0; it < iters; ++it) {
            auto cache = forward<double>(cls, cp, imgs, Mode::Train);
            auto loss = softmax_xent<double>(cache.out(), labels);
            TensorD d(30, cache.out().h, cache.out().w, cache.out().c);
            d.v = loss.dlogits.v;
            auto back = backward<double>(cls, cp, cache, Mode::Train, d, {}, true, true);
            sink += back.param_grads[0] + loss.value;
        }
        double dt = (now_s() - t0) / iters;
        std::printf("classifier fwd+bwd batch30: %.2f ms  (sink %.3g)\n", dt * 1e3, sink);
    }
    // generator forward+backward
    {
        int iters = 20;
        double t0 = now_s();
        double sink = 0;
        for (int it = 0; it < iters; ++it) {
            auto cache = forward<double>(gen, gp, z, Mode::Train);
            TensorD d(30, 32, 32, 3);
            for (auto& v : d.v) v = 1e-3;
            auto back = backward<double>(gen, gp, cache, Mode::Train, d, {}, true, true);
            sink += back.param_grads[0];
        }
        double dt = (now_s() - t0) / iters;
        std::printf("generator(nf=8) fwd+bwd batch30: %.2f ms  (sink %.3g)\n", dt * 1e3, sink);
    }
    // dual-number HVP on the classifier, support batch 5
    {
        TensorD sup(5, 32, 32, 3);
        for (auto& v : sup.v) v = rng.uniform();
        std::vector<int> sl = {0, 1, 2, 3, 4};
        Vec v(cp.size());
        for (auto& x : v) x = rng.normal();
        int iters = 20;
        double t0 = now_s();
        double sink = 0;
        for (int it = 0; it < iters; ++it) {
            Vec h = ce_hvp(cls, Mode::Train, sup, sl, cp, v);
            sink += h[0];
        }
        double dt = (now_s() - t0) / iters;
        std::printf("classifier HVP batch5: %.2f ms  (sink %.3g)\n", dt * 1e3, sink);
    }
    return 0;
}
