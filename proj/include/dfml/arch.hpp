#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "common.hpp"
#include "rng.hpp"

namespace dfml {

enum class LayerType { Conv, BatchNorm, ReLU, LeakyReLU, MaxPool, Upsample, Dense, Reshape, Sigmoid };

enum class ArchKind { Conv4Like, Generator, Probe };

enum class Mode { Train, Eval };

struct Layer {
    LayerType type;
    // conv
    int out_channels = 0, kernel = 0, stride = 1, pad = 0;
    // dense
    int in_features = 0, out_features = 0;
    // batchnorm
    int channels = 0;
    // leaky relu
    double slope = 0.2;
    // maxpool / upsample
    int factor = 2;
    // reshape target
    int rh = 0, rw = 0, rc = 0;

    // filled by ArchSpec::finalize()
    int in_h = 0, in_w = 0, in_c = 0;
    int out_h = 0, out_w = 0, out_c = 0;
    size_t param_offset = 0, param_count = 0;
};

inline Layer conv(int out_channels, int kernel, int stride = 1, int pad = 0) {
    Layer l{LayerType::Conv};
    l.out_channels = out_channels;
    l.kernel = kernel;
    l.stride = stride;
    l.pad = pad;
    return l;
}
inline Layer batchnorm() { return Layer{LayerType::BatchNorm}; }
inline Layer relu() { return Layer{LayerType::ReLU}; }
inline Layer leaky_relu(double slope = 0.2) {
    Layer l{LayerType::LeakyReLU};
    l.slope = slope;
    return l;
}
inline Layer maxpool(int factor = 2) {
    Layer l{LayerType::MaxPool};
    l.factor = factor;
    return l;
}
inline Layer upsample(int factor = 2) {
    Layer l{LayerType::Upsample};
    l.factor = factor;
    return l;
}
inline Layer dense(int out_features) {
    Layer l{LayerType::Dense};
    l.out_features = out_features;
    return l;
}
inline Layer reshape(int h, int w, int c) {
    Layer l{LayerType::Reshape};
    l.rh = h;
    l.rw = w;
    l.rc = c;
    return l;
}
inline Layer sigmoid() { return Layer{LayerType::Sigmoid}; }

// Canonical parameter order: layers in spec order; within conv/dense: weight
// then bias; within batchnorm: gain, shift, running_mean, running_var.
// Conv weight layout [out][ky][kx][in]; dense weight layout [out][in] over the
// NHWC-flattened input.
struct ArchSpec {
    ArchKind kind = ArchKind::Conv4Like;
    int in_h = 0, in_w = 0, in_c = 0;
    std::vector<Layer> layers;
    size_t total_params = 0;
    int num_outputs = 0;  // flattened size of the final activation

    // Chains shapes from the input through every layer, records per-layer
    // channel counts, and lays out canonical parameter offsets.
    void finalize() {
        require(in_h > 0 && in_w > 0 && in_c > 0, "arch: bad input shape");
        int h = in_h, w = in_w, c = in_c;
        size_t off = 0;
        for (auto& l : layers) {
            l.in_h = h;
            l.in_w = w;
            l.in_c = c;
            l.param_offset = off;
            switch (l.type) {
                case LayerType::Conv: {
                    require(l.out_channels > 0 && l.kernel > 0 && l.stride > 0, "conv: bad descriptor");
                    int oh = (h + 2 * l.pad - l.kernel) / l.stride + 1;
                    int ow = (w + 2 * l.pad - l.kernel) / l.stride + 1;
                    require(oh > 0 && ow > 0, "conv: output collapses");
                    h = oh;
                    w = ow;
                    c = l.out_channels;
                    l.param_count = size_t(l.out_channels) * l.kernel * l.kernel * l.in_c + l.out_channels;
                    break;
                }
                case LayerType::BatchNorm: {
                    require(l.channels == 0 || l.channels == c, "batchnorm: channel mismatch");
                    l.channels = c;
                    l.param_count = size_t(4) * c;
                    break;
                }
                case LayerType::ReLU:
                case LayerType::LeakyReLU:
                case LayerType::Sigmoid:
                    break;
                case LayerType::MaxPool:
                    require(h % l.factor == 0 && w % l.factor == 0, "maxpool: shape not divisible");
                    h /= l.factor;
                    w /= l.factor;
                    break;
                case LayerType::Upsample:
                    h *= l.factor;
                    w *= l.factor;
                    break;
                case LayerType::Dense: {
                    int in_f = h * w * c;
                    require(l.in_features == 0 || l.in_features == in_f, "dense: input width mismatch");
                    l.in_features = in_f;
                    require(l.out_features > 0, "dense: bad output width");
                    h = 1;
                    w = 1;
                    c = l.out_features;
                    l.param_count = size_t(l.out_features) * l.in_features + l.out_features;
                    break;
                }
                case LayerType::Reshape:
                    require(l.rh * l.rw * l.rc == h * w * c, "reshape: element count mismatch");
                    h = l.rh;
                    w = l.rw;
                    c = l.rc;
                    break;
            }
            l.out_h = h;
            l.out_w = w;
            l.out_c = c;
            off += l.param_count;
        }
        total_params = off;
        num_outputs = h * w * c;
    }

    size_t param_count() const { return total_params; }

    std::vector<int> bn_layer_indices() const {
        std::vector<int> out;
        for (size_t i = 0; i < layers.size(); ++i)
            if (layers[i].type == LayerType::BatchNorm) out.push_back(int(i));
        return out;
    }
};

// Batchnorm parameter block offsets within the canonical vector.
struct BnSlices {
    size_t gain, shift, running_mean, running_var;
    int c;
};
inline BnSlices bn_slices(const Layer& l) {
    return {l.param_offset, l.param_offset + size_t(l.channels), l.param_offset + 2 * size_t(l.channels),
            l.param_offset + 3 * size_t(l.channels), l.channels};
}

// 2 conv blocks (filters, 3x3, BN, ReLU, 2x2 maxpool) + linear head.
inline ArchSpec make_classifier(int num_classes, int filters = 16, int blocks = 2, int in_h = 32, int in_w = 32,
                                int in_c = 3) {
    ArchSpec a;
    a.kind = ArchKind::Conv4Like;
    a.in_h = in_h;
    a.in_w = in_w;
    a.in_c = in_c;
    for (int b = 0; b < blocks; ++b) {
        a.layers.push_back(conv(filters, 3, 1, 1));
        a.layers.push_back(batchnorm());
        a.layers.push_back(relu());
        a.layers.push_back(maxpool(2));
    }
    a.layers.push_back(dense(num_classes));
    a.finalize();
    return a;
}

// The classifier without its head; output is the flattened feature map.
inline ArchSpec make_probe_backbone(int filters = 8, int blocks = 2, int in_h = 32, int in_w = 32, int in_c = 3) {
    ArchSpec a;
    a.kind = ArchKind::Probe;
    a.in_h = in_h;
    a.in_w = in_w;
    a.in_c = in_c;
    for (int b = 0; b < blocks; ++b) {
        a.layers.push_back(conv(filters, 3, 1, 1));
        a.layers.push_back(batchnorm());
        a.layers.push_back(relu());
        a.layers.push_back(maxpool(2));
    }
    a.finalize();
    return a;
}

// Latent vector -> FC -> reshape -> BN -> 2x[upsample, conv, BN, LeakyReLU]
// -> conv -> sigmoid, emitting images in [0,1].
inline ArchSpec make_generator(int latent_dim = 256, int nf = 64, int out_h = 32, int out_w = 32, int out_c = 3) {
    require(out_h % 4 == 0 && out_w % 4 == 0, "generator: output size must be divisible by 4");
    ArchSpec a;
    a.kind = ArchKind::Generator;
    a.in_h = 1;
    a.in_w = 1;
    a.in_c = latent_dim;
    int h0 = out_h / 4, w0 = out_w / 4;
    a.layers.push_back(dense(h0 * w0 * 2 * nf));
    a.layers.push_back(reshape(h0, w0, 2 * nf));
    a.layers.push_back(batchnorm());
    a.layers.push_back(upsample(2));
    a.layers.push_back(conv(2 * nf, 3, 1, 1));
    a.layers.push_back(batchnorm());
    a.layers.push_back(leaky_relu(0.2));
    a.layers.push_back(upsample(2));
    a.layers.push_back(conv(nf, 3, 1, 1));
    a.layers.push_back(batchnorm());
    a.layers.push_back(leaky_relu(0.2));
    a.layers.push_back(conv(out_c, 3, 1, 1));
    a.layers.push_back(sigmoid());
    a.finalize();
    return a;
}

// Fan-in-scaled uniform init for conv/dense weight and bias; BN gain 1,
// shift 0, running mean 0, running var 1.
inline std::vector<float> init_params(const ArchSpec& arch, Rng& rng) {
    std::vector<float> p(arch.param_count(), 0.0f);
    for (const auto& l : arch.layers) {
        if (l.type == LayerType::Conv) {
            double bound = 1.0 / std::sqrt(double(l.kernel) * l.kernel * l.in_c);
            for (size_t i = 0; i < l.param_count; ++i) p[l.param_offset + i] = float(rng.uniform(-bound, bound));
        } else if (l.type == LayerType::Dense) {
            double bound = 1.0 / std::sqrt(double(l.in_features));
            for (size_t i = 0; i < l.param_count; ++i) p[l.param_offset + i] = float(rng.uniform(-bound, bound));
        } else if (l.type == LayerType::BatchNorm) {
            auto s = bn_slices(l);
            for (int c = 0; c < s.c; ++c) {
                p[s.gain + c] = 1.0f;
                p[s.shift + c] = 0.0f;
                p[s.running_mean + c] = 0.0f;
                p[s.running_var + c] = 1.0f;
            }
        }
    }
    return p;
}

}  // namespace dfml
