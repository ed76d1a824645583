#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "png_io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace dfml {

struct SyntheticConfig {
    int num_domains = 3;
    int classes_per_domain = 12;
    int samples_per_class = 120;
    int image_size = 32;
    double noise_sigma = 0.05;
    double channel_shift = 0.1;
    int channels = 3;
};

// One planar sinusoid. Integer cycle counts along one of four lattice
// directions keep the grid mean exactly zero, so the prototype channel mean
// is 0.5 + shift by construction.
struct Sinusoid {
    double amp = 0;
    int freq = 1;      // cycles across the image, never a multiple of the size
    int orient = 0;    // 0: x, 1: y, 2: x+y, 3: x-y
    double phase = 0;
    std::vector<double> weight;  // per-channel mixing in [-1,1]
};

struct ClassPrototype {
    int domain = 0;
    std::vector<double> shift;  // per-channel mean offset from 0.5
    std::vector<Sinusoid> waves;
};

struct SplitSets {
    std::vector<int> meta_train, meta_val, meta_test;
};

struct ImageDataset {
    int h = 0, w = 0, c = 0;
    TensorF images;                   // all samples, class-major
    std::vector<int> labels;          // global class per sample
    std::vector<int> domain_of_class;
    SplitSets splits;
    std::vector<ClassPrototype> prototypes;  // empty for ingested data
    std::vector<std::vector<int>> by_class;  // sample indices per class
    int samples_per_class = 0;

    int num_classes() const { return int(by_class.size()); }
};

inline TensorD prototype_image(const ClassPrototype& p, int h, int w, int c) {
    TensorD img(1, h, w, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double* px = img.row(0, y, x);
            for (int ch = 0; ch < c; ++ch) px[ch] = 0.5 + p.shift[ch];
            for (const auto& s : p.waves) {
                int u = s.orient == 0 ? x : s.orient == 1 ? y : s.orient == 2 ? x + y : x - y;
                double v = s.amp * std::sin(2.0 * M_PI * s.freq * u / double(w) + s.phase);
                for (int ch = 0; ch < c; ++ch) px[ch] += s.weight[ch] * v;
            }
        }
    return img;
}

namespace detail {

// Domain tags map to distinct {0,+1,-1} sign patterns over channels, so any
// two domains' prototype means differ by at least channel_shift in L-inf.
inline std::vector<double> domain_shift(int d, int channels, double magnitude) {
    std::vector<double> s(channels, 0.0);
    int t = d;
    for (int c = 0; c < channels; ++c) {
        int digit = t % 3;
        t /= 3;
        s[c] = digit == 0 ? 0.0 : digit == 1 ? magnitude : -magnitude;
    }
    return s;
}

}  // namespace detail

inline ImageDataset make_synthetic_domains(const SyntheticConfig& cfg, uint64_t seed) {
    require(cfg.image_size >= 8, "make_synthetic_domains: image_size < 8");
    require(cfg.num_domains >= 1 && cfg.classes_per_domain >= 1 && cfg.samples_per_class >= 1,
            "make_synthetic_domains: counts must be >= 1");
    require(cfg.channels >= 1 && cfg.noise_sigma >= 0.0, "make_synthetic_domains: bad config");
    double max_tags = std::pow(3.0, cfg.channels);
    require(cfg.num_domains <= max_tags, "make_synthetic_domains: too many domains for channel count");

    const int S = cfg.image_size, C = cfg.channels;
    const int num_classes = cfg.num_domains * cfg.classes_per_domain;
    ImageDataset ds;
    ds.h = S;
    ds.w = S;
    ds.c = C;
    ds.samples_per_class = cfg.samples_per_class;
    ds.images = TensorF(uninit, num_classes * cfg.samples_per_class, S, S, C);
    ds.labels.resize(ds.images.n);
    ds.by_class.resize(num_classes);
    ds.domain_of_class.resize(num_classes);
    ds.prototypes.resize(num_classes);

    for (int k = 0; k < num_classes; ++k) {
        int d = k / cfg.classes_per_domain;
        ds.domain_of_class[k] = d;

        Rng proto_rng(derive_seed(seed, "proto", uint64_t(k)));
        ClassPrototype p;
        p.domain = d;
        p.shift = detail::domain_shift(d, C, cfg.channel_shift);
        for (int j = 0; j < 3; ++j) {
            Sinusoid wv;
            wv.amp = proto_rng.uniform(0.04, 0.08);
            wv.freq = 2 + 3 * d + proto_rng.uniform_int(0, 2);
            if (wv.freq % S == 0) ++wv.freq;
            wv.orient = proto_rng.uniform_int(0, 3);
            wv.phase = proto_rng.uniform(0.0, 2.0 * M_PI);
            wv.weight.resize(C);
            for (int ch = 0; ch < C; ++ch) wv.weight[ch] = proto_rng.uniform(-1.0, 1.0);
            p.waves.push_back(wv);
        }
        ds.prototypes[k] = p;
        TensorD proto = prototype_image(p, S, S, C);

        Rng samp_rng(derive_seed(seed, "samples", uint64_t(k)));
        for (int i = 0; i < cfg.samples_per_class; ++i) {
            int s = k * cfg.samples_per_class + i;
            ds.labels[s] = k;
            ds.by_class[k].push_back(s);
            int dy = samp_rng.uniform_int(-2, 2), dx = samp_rng.uniform_int(-2, 2);
            for (int y = 0; y < S; ++y) {
                int sy = (y + dy + S) % S;
                for (int x = 0; x < S; ++x) {
                    int sx = (x + dx + S) % S;
                    const double* src = proto.row(0, sy, sx);
                    float* dst = ds.images.row(s, y, x);
                    for (int ch = 0; ch < C; ++ch) {
                        double v = src[ch] + cfg.noise_sigma * samp_rng.normal();
                        dst[ch] = float(std::clamp(v, 0.0, 1.0));
                    }
                }
            }
        }
    }

    // Per-domain class splits, 1/2 : 1/4 : 1/4 rounded as 12 -> 6/3/3.
    int n_test = cfg.classes_per_domain / 4;
    int n_val = n_test;
    int n_tr = cfg.classes_per_domain - n_val - n_test;
    for (int d = 0; d < cfg.num_domains; ++d)
        for (int j = 0; j < cfg.classes_per_domain; ++j) {
            int k = d * cfg.classes_per_domain + j;
            (j < n_tr ? ds.splits.meta_train : j < n_tr + n_val ? ds.splits.meta_val : ds.splits.meta_test)
                .push_back(k);
        }
    return ds;
}

struct EpisodeSpec {
    int way = 5, shot = 5, query = 15;
};

struct Episode {
    TensorF support_x, query_x;
    std::vector<int> support_y, query_y;
    std::vector<int> class_map;  // episode label -> global class
    // Source sample indices when drawn from a dataset; empty for synthesized
    // episodes. Support and query never share an index.
    std::vector<int> support_idx, query_idx;
};

namespace detail {

inline void copy_sample(TensorF& dst, int db, const TensorF& src, int sb) {
    size_t stride = size_t(src.h) * src.w * src.c;
    std::copy_n(src.v.data() + size_t(sb) * stride, stride, dst.v.data() + size_t(db) * stride);
}

}  // namespace detail

inline Episode sample_episode(const ImageDataset& ds, const std::vector<int>& classes, const EpisodeSpec& spec,
                              uint64_t seed) {
    require(spec.way >= 1 && spec.shot >= 1 && spec.query >= 0, "sample_episode: bad spec");
    require(int(classes.size()) >= spec.way, "sample_episode: not enough classes");
    Rng rng(seed);
    Episode ep;
    ep.support_x = TensorF(uninit, spec.way * spec.shot, ds.h, ds.w, ds.c);
    ep.query_x = TensorF(uninit, spec.way * spec.query, ds.h, ds.w, ds.c);
    for (int i : rng.sample_indices(int(classes.size()), spec.way)) ep.class_map.push_back(classes[i]);
    for (int e = 0; e < spec.way; ++e) {
        int g = ep.class_map[e];
        require(g >= 0 && g < ds.num_classes(), "sample_episode: class out of range");
        const auto& pool = ds.by_class[g];
        require(int(pool.size()) >= spec.shot + spec.query, "sample_episode: not enough samples in class");
        auto pick = rng.sample_indices(int(pool.size()), spec.shot + spec.query);
        for (int i = 0; i < spec.shot; ++i) {
            detail::copy_sample(ep.support_x, e * spec.shot + i, ds.images, pool[pick[i]]);
            ep.support_y.push_back(e);
            ep.support_idx.push_back(pool[pick[i]]);
        }
        for (int i = 0; i < spec.query; ++i) {
            detail::copy_sample(ep.query_x, e * spec.query + i, ds.images, pool[pick[spec.shot + i]]);
            ep.query_y.push_back(e);
            ep.query_idx.push_back(pool[pick[spec.shot + i]]);
        }
    }
    return ep;
}

// Directory ingestion: <root>/<class_name>/*.png with a JSON split file
// {"meta_train": [names...], "meta_val": [...], "meta_test": [...]}.
// Every class directory must be named in exactly one split and all classes
// must hold the same number of images of one common size.
inline ImageDataset load_image_directory(const std::string& root, const std::string& split_json_path) {
    namespace fs = std::filesystem;
    require(fs::is_directory(root), "load_image_directory: not a directory: " + root);

    std::vector<std::string> class_names;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) class_names.push_back(e.path().filename().string());
    std::sort(class_names.begin(), class_names.end());
    require(!class_names.empty(), "load_image_directory: no class subdirectories");

    std::ifstream sf(split_json_path);
    require(bool(sf), "load_image_directory: cannot open split file: " + split_json_path);
    nlohmann::json sj = nlohmann::json::parse(sf);

    std::map<std::string, int> class_index;
    for (size_t i = 0; i < class_names.size(); ++i) class_index[class_names[i]] = int(i);

    ImageDataset ds;
    std::vector<int> seen(class_names.size(), 0);
    auto read_split = [&](const char* key, std::vector<int>& out) {
        require(sj.contains(key), std::string("load_image_directory: split file missing ") + key);
        for (const auto& name : sj[key]) {
            auto it = class_index.find(name.get<std::string>());
            require(it != class_index.end(), "load_image_directory: unknown class in split: " + name.get<std::string>());
            require(!seen[it->second]++, "load_image_directory: class in two splits: " + it->first);
            out.push_back(it->second);
        }
    };
    read_split("meta_train", ds.splits.meta_train);
    read_split("meta_val", ds.splits.meta_val);
    read_split("meta_test", ds.splits.meta_test);
    for (size_t i = 0; i < seen.size(); ++i)
        require(seen[i] == 1, "load_image_directory: class missing from splits: " + class_names[i]);

    std::vector<TensorF> loaded;
    ds.by_class.resize(class_names.size());
    for (size_t k = 0; k < class_names.size(); ++k) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(fs::path(root) / class_names[k]))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        require(!files.empty(), "load_image_directory: empty class: " + class_names[k]);
        for (const auto& f : files) {
            TensorF img = read_png(f);
            if (loaded.empty()) {
                ds.h = img.h;
                ds.w = img.w;
                ds.c = img.c;
            }
            require(img.h == ds.h && img.w == ds.w && img.c == ds.c,
                    "load_image_directory: image size mismatch: " + f);
            ds.by_class[k].push_back(int(loaded.size()));
            ds.labels.push_back(int(k));
            loaded.push_back(std::move(img));
        }
        if (k == 0)
            ds.samples_per_class = int(files.size());
        else
            require(int(files.size()) == ds.samples_per_class,
                    "load_image_directory: class sample counts differ: " + class_names[k]);
    }
    ds.images = TensorF(uninit, int(loaded.size()), ds.h, ds.w, ds.c);
    for (size_t i = 0; i < loaded.size(); ++i) detail::copy_sample(ds.images, int(i), loaded[i], 0);
    ds.domain_of_class.assign(class_names.size(), 0);
    return ds;
}

}  // namespace dfml
