#pragma once

#include <malloc.h>

#include <cstring>
#include <functional>
#include <span>
#include <vector>

#include "arch.hpp"
#include "common.hpp"
#include "dual.hpp"
#include "tensor.hpp"

namespace dfml {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

// Canonical parameters are stored as 32-bit floats; all arithmetic inside the
// engine runs on the scalar type T (double for training and oracles, Dual for
// exact Hessian-vector products).
struct NetworkState {
    ArchSpec arch;
    std::vector<float> params;
    Mode mode = Mode::Train;
};

inline NetworkState make_state(const ArchSpec& arch, Rng& rng, Mode mode = Mode::Train) {
    NetworkState s;
    s.arch = arch;
    s.params = init_params(arch, rng);
    s.mode = mode;
    return s;
}

inline std::vector<float> get_params(const NetworkState& s) { return s.params; }

inline void set_params(NetworkState& s, const std::vector<float>& v) {
    require(v.size() == s.arch.param_count(), "set_params: length mismatch");
    s.params = v;
}

inline Vec to_double(std::span<const float> p) {
    Vec out(p.size());
    for (size_t i = 0; i < p.size(); ++i) out[i] = double(p[i]);
    return out;
}

template <class T>
std::vector<T> to_scalar(std::span<const double> p) {
    std::vector<T> out(p.size());
    for (size_t i = 0; i < p.size(); ++i) out[i] = T(p[i]);
    return out;
}

template <class T>
struct ForwardCache {
    // acts[0] is the input; acts[i+1] is the output of layer i.
    std::vector<Tensor<T>> acts;
    // Per-layer batch statistics of the batchnorm input (biased variance),
    // captured in both modes so statistic-matching losses can read them.
    std::vector<std::vector<T>> bn_mean, bn_var;
    std::vector<std::vector<int>> pool_idx;

    const Tensor<T>& out() const { return acts.back(); }
};

namespace detail {

// Activation buffers of a few MB cycle once per forward/backward call; with
// glibc defaults they are mmap'd and munmap'd each time, costing a page fault
// per 4 KiB touched. Keeping them in the arena removes that entirely.
inline bool tune_malloc_once() {
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}

template <class T>
void conv_forward(const Layer& l, std::span<const T> params, const Tensor<T>& in, Tensor<T>& out) {
    const int K = l.kernel, IC = l.in_c, OC = l.out_channels;
    const T* w = params.data() + l.param_offset;
    const T* bias = w + size_t(OC) * K * K * IC;
    // Repacked as [ky][kx][ic][oc] so the inner loop is a contiguous
    // broadcast-accumulate over output channels.
    std::vector<T> wp(size_t(K) * K * IC * OC);
    for (int oc = 0; oc < OC; ++oc)
        for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx)
                for (int ic = 0; ic < IC; ++ic)
                    wp[((size_t(ky) * K + kx) * IC + ic) * OC + oc] = w[((size_t(oc) * K + ky) * K + kx) * IC + ic];
    for (int b = 0; b < in.n; ++b)
        for (int oy = 0; oy < out.h; ++oy)
            for (int ox = 0; ox < out.w; ++ox) {
                T* __restrict__ orow = out.row(b, oy, ox);
                for (int oc = 0; oc < OC; ++oc) orow[oc] = bias[oc];
                for (int ky = 0; ky < K; ++ky) {
                    int iy = oy * l.stride - l.pad + ky;
                    if (iy < 0 || iy >= in.h) continue;
                    for (int kx = 0; kx < K; ++kx) {
                        int ix = ox * l.stride - l.pad + kx;
                        if (ix < 0 || ix >= in.w) continue;
                        const T* __restrict__ px = in.row(b, iy, ix);
                        const T* __restrict__ wrow = wp.data() + (size_t(ky) * K + kx) * IC * OC;
                        for (int ic = 0; ic < IC; ++ic) {
                            T xv = px[ic];
                            const T* __restrict__ wr = wrow + size_t(ic) * OC;
                            for (int oc = 0; oc < OC; ++oc) orow[oc] += xv * wr[oc];
                        }
                    }
                }
            }
}

template <class T>
void conv_backward(const Layer& l, std::span<const T> params, const Tensor<T>& in, const Tensor<T>& g,
                   Tensor<T>& gin, T* pgrad, bool want_dx) {
    const int K = l.kernel, IC = l.in_c, OC = l.out_channels;
    const T* w = params.data() + l.param_offset;
    T* dw = pgrad ? pgrad + l.param_offset : nullptr;
    T* db = dw ? dw + size_t(OC) * K * K * IC : nullptr;
    for (int b = 0; b < in.n; ++b)
        for (int oy = 0; oy < g.h; ++oy)
            for (int ox = 0; ox < g.w; ++ox) {
                const T* grow = g.row(b, oy, ox);
                if (db)
                    for (int oc = 0; oc < OC; ++oc) db[oc] += grow[oc];
                for (int ky = 0; ky < K; ++ky) {
                    int iy = oy * l.stride - l.pad + ky;
                    if (iy < 0 || iy >= in.h) continue;
                    for (int kx = 0; kx < K; ++kx) {
                        int ix = ox * l.stride - l.pad + kx;
                        if (ix < 0 || ix >= in.w) continue;
                        const T* __restrict__ px = in.row(b, iy, ix);
                        T* __restrict__ gxrow = gin.row(b, iy, ix);
                        for (int oc = 0; oc < OC; ++oc) {
                            T gv = grow[oc];
                            if (want_dx) {
                                const T* __restrict__ wrow = w + ((size_t(oc) * K + ky) * K + kx) * IC;
                                for (int ic = 0; ic < IC; ++ic) gxrow[ic] += gv * wrow[ic];
                            }
                            if (dw) {
                                T* __restrict__ dwrow = dw + ((size_t(oc) * K + ky) * K + kx) * IC;
                                for (int ic = 0; ic < IC; ++ic) dwrow[ic] += gv * px[ic];
                            }
                        }
                    }
                }
            }
}

template <class T>
void dense_forward(const Layer& l, std::span<const T> params, const Tensor<T>& in, Tensor<T>& out) {
    const int IN = l.in_features, OUT = l.out_features;
    const T* w = params.data() + l.param_offset;
    const T* bias = w + size_t(OUT) * IN;
    std::vector<T> wt(size_t(IN) * OUT);
    for (int o = 0; o < OUT; ++o)
        for (int i = 0; i < IN; ++i) wt[size_t(i) * OUT + o] = w[size_t(o) * IN + i];
    for (int b = 0; b < in.n; ++b) {
        const T* __restrict__ x = in.v.data() + size_t(b) * IN;
        T* __restrict__ orow = out.row(b, 0, 0);
        for (int o = 0; o < OUT; ++o) orow[o] = bias[o];
        for (int i = 0; i < IN; ++i) {
            T xv = x[i];
            const T* __restrict__ wr = wt.data() + size_t(i) * OUT;
            for (int o = 0; o < OUT; ++o) orow[o] += xv * wr[o];
        }
    }
}

template <class T>
void dense_backward(const Layer& l, std::span<const T> params, const Tensor<T>& in, const Tensor<T>& g,
                    Tensor<T>& gin, T* pgrad, bool want_dx) {
    const int IN = l.in_features, OUT = l.out_features;
    const T* w = params.data() + l.param_offset;
    T* dw = pgrad ? pgrad + l.param_offset : nullptr;
    T* db = dw ? dw + size_t(OUT) * IN : nullptr;
    for (int b = 0; b < in.n; ++b) {
        const T* __restrict__ x = in.v.data() + size_t(b) * IN;
        const T* __restrict__ grow = g.row(b, 0, 0);
        T* __restrict__ gx = gin.v.data() + size_t(b) * IN;
        for (int o = 0; o < OUT; ++o) {
            T gv = grow[o];
            if (want_dx) {
                const T* __restrict__ wrow = w + size_t(o) * IN;
                for (int i = 0; i < IN; ++i) gx[i] += gv * wrow[i];
            }
            if (dw) {
                T* __restrict__ dwrow = dw + size_t(o) * IN;
                for (int i = 0; i < IN; ++i) dwrow[i] += gv * x[i];
                db[o] += gv;
            }
        }
    }
}

template <class T>
void bn_batch_stats(const Tensor<T>& in, std::vector<T>& mean, std::vector<T>& var) {
    const int C = in.c;
    const size_t M = in.size() / C;
    mean.assign(C, T(0));
    var.assign(C, T(0));
    T* __restrict__ mp = mean.data();
    T* __restrict__ vp = var.data();
    const T* __restrict__ p = in.v.data();
    for (size_t i = 0; i < M; ++i, p += C)
        for (int c = 0; c < C; ++c) mp[c] += p[c];
    T inv = T(1.0 / double(M));
    for (int c = 0; c < C; ++c) mp[c] *= inv;
    p = in.v.data();
    for (size_t i = 0; i < M; ++i, p += C)
        for (int c = 0; c < C; ++c) {
            T d = p[c] - mp[c];
            vp[c] += d * d;
        }
    for (int c = 0; c < C; ++c) vp[c] *= inv;
}

}  // namespace detail

template <class T>
ForwardCache<T> forward(const ArchSpec& arch, std::span<const T> params, const Tensor<T>& input, Mode mode) {
    static const bool malloc_tuned = detail::tune_malloc_once();
    (void)malloc_tuned;
    require(input.h == arch.in_h && input.w == arch.in_w && input.c == arch.in_c, "forward: batch shape mismatch");
    require(params.size() == arch.param_count(), "forward: param length mismatch");
    ForwardCache<T> cache;
    const size_t L = arch.layers.size();
    cache.acts.reserve(L + 1);
    cache.acts.push_back(input);
    cache.bn_mean.resize(L);
    cache.bn_var.resize(L);
    cache.pool_idx.resize(L);
    for (size_t li = 0; li < L; ++li) {
        const Layer& l = arch.layers[li];
        const Tensor<T>& in = cache.acts.back();
        Tensor<T> out(uninit, in.n, l.out_h, l.out_w, l.out_c);
        switch (l.type) {
            case LayerType::Conv:
                detail::conv_forward(l, params, in, out);
                break;
            case LayerType::Dense:
                detail::dense_forward(l, params, in, out);
                break;
            case LayerType::BatchNorm: {
                detail::bn_batch_stats(in, cache.bn_mean[li], cache.bn_var[li]);
                auto s = bn_slices(l);
                const int C = l.channels;
                std::vector<T> scale(C), off(C);
                for (int c = 0; c < C; ++c) {
                    T mu = mode == Mode::Train ? cache.bn_mean[li][c] : params[s.running_mean + c];
                    T vr = mode == Mode::Train ? cache.bn_var[li][c] : params[s.running_var + c];
                    T inv = T(1) / sqrt(vr + T(kBnEps));
                    scale[c] = params[s.gain + c] * inv;
                    off[c] = params[s.shift + c] - mu * scale[c];
                }
                const size_t M = in.size() / C;
                const T* __restrict__ pi = in.v.data();
                T* __restrict__ po = out.v.data();
                const T* __restrict__ sc = scale.data();
                const T* __restrict__ of = off.data();
                for (size_t i = 0; i < M; ++i, pi += C, po += C)
                    for (int c = 0; c < C; ++c) po[c] = pi[c] * sc[c] + of[c];
                break;
            }
            case LayerType::ReLU: {
                const T* __restrict__ pi = in.v.data();
                T* __restrict__ po = out.v.data();
                for (size_t i = 0; i < in.size(); ++i) po[i] = pi[i] > T(0) ? pi[i] : T(0);
                break;
            }
            case LayerType::LeakyReLU: {
                T slope = T(l.slope);
                const T* __restrict__ pi = in.v.data();
                T* __restrict__ po = out.v.data();
                for (size_t i = 0; i < in.size(); ++i) po[i] = pi[i] > T(0) ? pi[i] : slope * pi[i];
                break;
            }
            case LayerType::Sigmoid:
                for (size_t i = 0; i < in.size(); ++i) out.v[i] = T(1) / (T(1) + exp(-in.v[i]));
                break;
            case LayerType::MaxPool: {
                const int f = l.factor;
                cache.pool_idx[li].resize(out.size());
                int* pidx = cache.pool_idx[li].data();
                for (int b = 0; b < in.n; ++b)
                    for (int oy = 0; oy < out.h; ++oy)
                        for (int ox = 0; ox < out.w; ++ox) {
                            T* orow = out.row(b, oy, ox);
                            int* irow = pidx + out.idx(b, oy, ox, 0);
                            const T* first = in.row(b, oy * f, ox * f);
                            size_t base = in.idx(b, oy * f, ox * f, 0);
                            for (int c = 0; c < out.c; ++c) {
                                orow[c] = first[c];
                                irow[c] = int(base) + c;
                            }
                            for (int dy = 0; dy < f; ++dy)
                                for (int dx = 0; dx < f; ++dx) {
                                    if (dy == 0 && dx == 0) continue;
                                    const T* prow = in.row(b, oy * f + dy, ox * f + dx);
                                    size_t pb = in.idx(b, oy * f + dy, ox * f + dx, 0);
                                    for (int c = 0; c < out.c; ++c)
                                        if (prow[c] > orow[c]) {
                                            orow[c] = prow[c];
                                            irow[c] = int(pb) + c;
                                        }
                                }
                        }
                break;
            }
            case LayerType::Upsample: {
                const int f = l.factor;
                for (int b = 0; b < in.n; ++b)
                    for (int oy = 0; oy < out.h; ++oy)
                        for (int ox = 0; ox < out.w; ++ox) {
                            const T* pin = in.row(b, oy / f, ox / f);
                            T* pout = out.row(b, oy, ox);
                            for (int c = 0; c < out.c; ++c) pout[c] = pin[c];
                        }
                break;
            }
            case LayerType::Reshape:
                out.v = in.v;
                break;
        }
        cache.acts.push_back(std::move(out));
    }
    return cache;
}

// Gradient to add at a given activation index (acts[index]); lets losses over
// intermediate statistics feed the same backward sweep as the output loss.
template <class T>
using InjectedGrads = std::vector<std::pair<int, Tensor<T>>>;

template <class T>
struct BackwardResult {
    std::vector<T> param_grads;
    Tensor<T> input_grad;
};

template <class T>
BackwardResult<T> backward(const ArchSpec& arch, std::span<const T> params, const ForwardCache<T>& cache, Mode mode,
                           const Tensor<T>& dout, const InjectedGrads<T>& inject = {}, bool want_param_grads = true,
                           bool want_input_grad = false) {
    const int L = int(arch.layers.size());
    BackwardResult<T> res;
    if (want_param_grads) res.param_grads.assign(arch.param_count(), T(0));
    T* pg = want_param_grads ? res.param_grads.data() : nullptr;

    Tensor<T> g = dout;
    auto add_inject = [&](int act_index, Tensor<T>& target) {
        for (const auto& [idx, t] : inject)
            if (idx == act_index) {
                require(t.same_shape(target), "backward: injected gradient shape mismatch");
                for (size_t i = 0; i < target.size(); ++i) target.v[i] += t.v[i];
            }
    };
    add_inject(L, g);

    for (int li = L - 1; li >= 0; --li) {
        const Layer& l = arch.layers[li];
        const Tensor<T>& in = cache.acts[li];
        const bool want_dx = li > 0 || want_input_grad;
        if (!want_dx && l.param_count == 0) break;
        // Layers that accumulate into gin need zeros; the rest overwrite it.
        const bool accumulates = l.type == LayerType::Conv || l.type == LayerType::Dense ||
                                 l.type == LayerType::MaxPool || l.type == LayerType::Upsample;
        Tensor<T> gin = accumulates ? Tensor<T>(in.n, in.h, in.w, in.c) : Tensor<T>(uninit, in.n, in.h, in.w, in.c);
        switch (l.type) {
            case LayerType::Conv:
                detail::conv_backward(l, params, in, g, gin, pg, want_dx);
                break;
            case LayerType::Dense:
                detail::dense_backward(l, params, in, g, gin, pg, want_dx);
                break;
            case LayerType::BatchNorm: {
                auto s = bn_slices(l);
                const int C = l.channels;
                const size_t M = in.size() / C;
                if (mode == Mode::Train) {
                    const T* __restrict__ mean = cache.bn_mean[li].data();
                    const T* __restrict__ var = cache.bn_var[li].data();
                    std::vector<T> invv(C), s1v(C, T(0)), s2v(C, T(0)), gsv(C);
                    T* __restrict__ inv = invv.data();
                    T* __restrict__ s1 = s1v.data();
                    T* __restrict__ s2 = s2v.data();
                    T* __restrict__ gs = gsv.data();
                    for (int c = 0; c < C; ++c) inv[c] = T(1) / sqrt(var[c] + T(kBnEps));
                    const T* __restrict__ pi = in.v.data();
                    const T* __restrict__ pgr = g.v.data();
                    for (size_t i = 0; i < M; ++i, pi += C, pgr += C)
                        for (int c = 0; c < C; ++c) {
                            s1[c] += pgr[c];
                            s2[c] += pgr[c] * (pi[c] - mean[c]) * inv[c];
                        }
                    if (pg)
                        for (int c = 0; c < C; ++c) {
                            pg[s.gain + c] += s2[c];
                            pg[s.shift + c] += s1[c];
                        }
                    T invM = T(1.0 / double(M));
                    for (int c = 0; c < C; ++c) gs[c] = params[s.gain + c] * inv[c];
                    pi = in.v.data();
                    pgr = g.v.data();
                    T* __restrict__ px = gin.v.data();
                    for (size_t i = 0; i < M; ++i, pi += C, pgr += C, px += C)
                        for (int c = 0; c < C; ++c) {
                            T xhat = (pi[c] - mean[c]) * inv[c];
                            px[c] = gs[c] * (pgr[c] - s1[c] * invM - xhat * s2[c] * invM);
                        }
                } else {
                    std::vector<T> invv(C), s1v(C, T(0)), s2v(C, T(0)), rmv(C), gsv(C);
                    T* __restrict__ inv = invv.data();
                    T* __restrict__ s1 = s1v.data();
                    T* __restrict__ s2 = s2v.data();
                    T* __restrict__ rm = rmv.data();
                    T* __restrict__ gs = gsv.data();
                    for (int c = 0; c < C; ++c) {
                        inv[c] = T(1) / sqrt(params[s.running_var + c] + T(kBnEps));
                        rm[c] = params[s.running_mean + c];
                        gs[c] = params[s.gain + c] * inv[c];
                    }
                    const T* __restrict__ pi = in.v.data();
                    const T* __restrict__ pgr = g.v.data();
                    for (size_t i = 0; i < M; ++i, pi += C, pgr += C)
                        for (int c = 0; c < C; ++c) {
                            s1[c] += pgr[c];
                            s2[c] += pgr[c] * (pi[c] - rm[c]);
                        }
                    if (pg)
                        for (int c = 0; c < C; ++c) {
                            pg[s.gain + c] += s2[c] * inv[c];
                            pg[s.shift + c] += s1[c];
                            pg[s.running_mean + c] += -params[s.gain + c] * inv[c] * s1[c];
                            pg[s.running_var + c] +=
                                T(-0.5) * params[s.gain + c] * inv[c] * inv[c] * inv[c] * s2[c];
                        }
                    const T* __restrict__ pgr2 = g.v.data();
                    T* __restrict__ px = gin.v.data();
                    for (size_t i = 0; i < M; ++i, pgr2 += C, px += C)
                        for (int c = 0; c < C; ++c) px[c] = pgr2[c] * gs[c];
                }
                break;
            }
            case LayerType::ReLU: {
                const T* __restrict__ pi = in.v.data();
                const T* __restrict__ pgr = g.v.data();
                T* __restrict__ px = gin.v.data();
                for (size_t i = 0; i < in.size(); ++i) px[i] = pi[i] > T(0) ? pgr[i] : T(0);
                break;
            }
            case LayerType::LeakyReLU: {
                T slope = T(l.slope);
                const T* __restrict__ pi = in.v.data();
                const T* __restrict__ pgr = g.v.data();
                T* __restrict__ px = gin.v.data();
                for (size_t i = 0; i < in.size(); ++i) px[i] = pi[i] > T(0) ? pgr[i] : slope * pgr[i];
                break;
            }
            case LayerType::Sigmoid: {
                const T* __restrict__ py = cache.acts[li + 1].v.data();
                const T* __restrict__ pgr = g.v.data();
                T* __restrict__ px = gin.v.data();
                for (size_t i = 0; i < in.size(); ++i) px[i] = pgr[i] * py[i] * (T(1) - py[i]);
                break;
            }
            case LayerType::MaxPool: {
                const auto& idx = cache.pool_idx[li];
                for (size_t i = 0; i < g.size(); ++i) gin.v[size_t(idx[i])] += g.v[i];
                break;
            }
            case LayerType::Upsample: {
                const int f = l.factor;
                for (int b = 0; b < g.n; ++b)
                    for (int oy = 0; oy < g.h; ++oy)
                        for (int ox = 0; ox < g.w; ++ox) {
                            const T* pgr = g.row(b, oy, ox);
                            T* px = gin.row(b, oy / f, ox / f);
                            for (int c = 0; c < g.c; ++c) px[c] += pgr[c];
                        }
                break;
            }
            case LayerType::Reshape:
                gin.v = g.v;
                break;
        }
        g = std::move(gin);
        add_inject(li, g);
    }
    if (want_input_grad) res.input_grad = std::move(g);
    return res;
}

// --- loss heads over logits -------------------------------------------------

template <class T>
struct LogitLoss {
    T value;
    Tensor<T> dlogits;
};

// Mean cross-entropy over the first `width` logit columns (full width when
// width <= 0); labels index into that slice.
template <class T>
LogitLoss<T> softmax_xent(const Tensor<T>& logits, const std::vector<int>& labels, int width = -1) {
    const int K = logits.c;
    const int w = width > 0 ? width : K;
    require(w <= K, "softmax_xent: slice wider than head");
    require(size_t(logits.n) == labels.size(), "softmax_xent: label count mismatch");
    LogitLoss<T> out{T(0), Tensor<T>(logits.n, 1, 1, K)};
    T invB = T(1.0 / double(logits.n));
    for (int b = 0; b < logits.n; ++b) {
        require(labels[b] >= 0 && labels[b] < w, "softmax_xent: label out of range");
        const T* row = logits.row(b, 0, 0);
        T m = row[0];
        for (int i = 1; i < w; ++i) m = max(m, row[i]);
        T z = T(0);
        for (int i = 0; i < w; ++i) z += exp(row[i] - m);
        T lse = m + log(z);
        out.value += (lse - row[labels[b]]) * invB;
        T* drow = out.dlogits.row(b, 0, 0);
        for (int i = 0; i < w; ++i) drow[i] = exp(row[i] - lse) * invB;
        drow[labels[b]] -= invB;
    }
    return out;
}

// Row-wise softmax over the first `width` columns.
inline std::vector<double> softmax_rows(const TensorD& logits, int width = -1) {
    const int K = logits.c;
    const int w = width > 0 ? width : K;
    std::vector<double> probs(size_t(logits.n) * w);
    for (int b = 0; b < logits.n; ++b) {
        const double* row = logits.row(b, 0, 0);
        double m = row[0];
        for (int i = 1; i < w; ++i) m = std::max(m, row[i]);
        double z = 0;
        for (int i = 0; i < w; ++i) z += std::exp(row[i] - m);
        for (int i = 0; i < w; ++i) probs[size_t(b) * w + i] = std::exp(row[i] - m) / z;
    }
    return probs;
}

// --- high-level operations on NetworkState ----------------------------------

inline TensorD forward_logits(const NetworkState& s, const TensorF& batch) {
    Vec pd = to_double(s.params);
    TensorD x = convert<double>(batch);
    auto cache = forward<double>(s.arch, pd, x, s.mode);
    const TensorD& out = cache.out();
    for (double v : out.v)
        if (!std::isfinite(v)) throw NumericFailure("forward produced non-finite logits", "logits");
    TensorD flat(out.n, 1, 1, out.h * out.w * out.c);
    flat.v = out.v;
    return flat;
}

// A differentiable scalar objective over canonical parameters: returns the
// value at `theta` and, when `grad` is non-null, writes the full gradient.
using Objective = std::function<double(std::span<const double> theta, Vec* grad)>;

inline Objective make_ce_objective(ArchSpec arch, Mode mode, TensorD batch, std::vector<int> labels, int width = -1) {
    return [arch = std::move(arch), mode, batch = std::move(batch), labels = std::move(labels),
            width](std::span<const double> theta, Vec* grad) -> double {
        auto cache = forward<double>(arch, theta, batch, mode);
        auto loss = softmax_xent<double>(cache.out(), labels, width);
        if (grad) {
            auto back = backward<double>(arch, theta, cache, mode, loss.dlogits);
            *grad = std::move(back.param_grads);
        }
        return loss.value;
    };
}

inline Vec loss_grad(const NetworkState& s, const Objective& objective) {
    Vec theta = to_double(s.params);
    Vec g(theta.size(), 0.0);
    double value = objective(theta, &g);
    if (!std::isfinite(value)) throw NumericFailure("objective value is non-finite", "loss");
    for (double v : g)
        if (!std::isfinite(v)) throw NumericFailure("objective gradient is non-finite", "gradient");
    return g;
}

// Rows of d log P(y_j | x_j) / d theta, one image per row, evaluated per
// sample so that batch statistics never couple rows.
inline std::vector<Vec> per_sample_loglik_grads(const NetworkState& s, const TensorF& batch,
                                                const std::vector<int>& labels) {
    require(size_t(batch.n) == labels.size(), "per_sample_loglik_grads: label count mismatch");
    for (int y : labels)
        require(y >= 0 && y < s.arch.num_outputs, "per_sample_loglik_grads: label out of range");
    Vec theta = to_double(s.params);
    std::vector<Vec> rows;
    rows.reserve(labels.size());
    TensorD one(1, batch.h, batch.w, batch.c);
    for (int j = 0; j < batch.n; ++j) {
        for (size_t i = 0; i < one.size(); ++i) one.v[i] = double(batch.v[size_t(j) * one.size() + i]);
        auto cache = forward<double>(s.arch, theta, one, s.mode);
        TensorD flat(1, 1, 1, s.arch.num_outputs);
        flat.v = cache.out().v;
        auto loss = softmax_xent<double>(flat, {labels[j]});
        Tensor<double> dshaped(1, cache.out().h, cache.out().w, cache.out().c);
        dshaped.v = loss.dlogits.v;
        auto back = backward<double>(s.arch, theta, cache, s.mode, dshaped);
        Vec& g = back.param_grads;
        for (double& v : g) v = -v;  // NLL gradient negated = log-likelihood gradient
        rows.push_back(std::move(g));
    }
    return rows;
}

// Exact Hessian-vector product of mean cross-entropy via dual numbers.
inline Vec ce_hvp(const ArchSpec& arch, Mode mode, const TensorD& batch, const std::vector<int>& labels,
                  std::span<const double> theta, std::span<const double> v, int width = -1) {
    require(theta.size() == v.size(), "ce_hvp: vector length mismatch");
    std::vector<Dual> p(theta.size());
    for (size_t i = 0; i < p.size(); ++i) p[i] = Dual(theta[i], v[i]);
    Tensor<Dual> x(batch.n, batch.h, batch.w, batch.c);
    for (size_t i = 0; i < x.size(); ++i) x.v[i] = Dual(batch.v[i]);
    auto cache = forward<Dual>(arch, p, x, mode);
    Tensor<Dual> flat(batch.n, 1, 1, arch.num_outputs);
    flat.v = cache.out().v;
    auto loss = softmax_xent<Dual>(flat, labels, width);
    Tensor<Dual> dshaped(batch.n, cache.out().h, cache.out().w, cache.out().c);
    dshaped.v = loss.dlogits.v;
    auto back = backward<Dual>(arch, p, cache, mode, dshaped);
    Vec out(theta.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = back.param_grads[i].b;
    return out;
}

// Folds captured batch statistics into the running estimates; the only
// mutation of running stats in the engine.
inline void commit_bn(NetworkState& s, const ForwardCache<double>& cache, double momentum = kBnMomentum) {
    for (int li : s.arch.bn_layer_indices()) {
        auto sl = bn_slices(s.arch.layers[li]);
        for (int c = 0; c < sl.c; ++c) {
            double rm = double(s.params[sl.running_mean + c]);
            double rv = double(s.params[sl.running_var + c]);
            s.params[sl.running_mean + c] = float((1.0 - momentum) * rm + momentum * cache.bn_mean[li][c]);
            s.params[sl.running_var + c] = float((1.0 - momentum) * rv + momentum * cache.bn_var[li][c]);
        }
    }
}

// --- optimizer ----------------------------------------------------------------

// Adam with double moments; parameters may live in float32 (canonical network
// storage) or double (abstract vectors).
struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    Vec m, v;
    long t = 0;

    explicit Adam(double lr_ = 1e-3) : lr(lr_) {}

    // Any indexable container of float or double parameters works here.
    template <class V>
    void step(V& params, const Vec& grad) {
        require(params.size() == grad.size(), "adam: size mismatch");
        if (m.empty()) {
            m.assign(grad.size(), 0.0);
            v.assign(grad.size(), 0.0);
        }
        ++t;
        double bc1 = 1.0 - std::pow(beta1, double(t));
        double bc2 = 1.0 - std::pow(beta2, double(t));
        using P = std::remove_reference_t<decltype(params[0])>;
        for (size_t i = 0; i < grad.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            double step = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            params[i] = P(double(params[i]) - step);
        }
    }
};

}  // namespace dfml
