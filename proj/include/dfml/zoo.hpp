#pragma once

#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "io.hpp"
#include "net.hpp"

namespace dfml {

struct PretrainedModelRecord {
    std::string id;
    ArchSpec arch;
    std::vector<float> params;  // includes BN running stats
    std::vector<int> classes;   // ordered global class indices; local label = position
    int domain = 0;
    double val_accuracy = 0.0;
    uint64_t seed = 0;
};

struct ModelPool {
    std::vector<PretrainedModelRecord> records;
};

struct PretrainHyper {
    double lr = 2e-3;
    int epochs = 8;  // the source setting never states this; desk default
    int batch = 32;
};

enum class ArchPolicy { Fixed, Mixed };

// Mixed pools alternate backbone widths so records are architecturally
// heterogeneous while staying loadable by the same engine.
inline ArchSpec pool_arch(ArchPolicy policy, int slot, int way, int in_h = 32, int in_w = 32, int in_c = 3) {
    static const int widths[] = {16, 12, 20};
    int w = policy == ArchPolicy::Fixed ? 16 : widths[slot % 3];
    return make_classifier(way, w, 2, in_h, in_w, in_c);
}

namespace detail {

inline double accuracy(const NetworkState& s, const TensorF& x, const std::vector<int>& y) {
    TensorD logits = forward_logits(s, x);
    int hits = 0;
    for (int b = 0; b < logits.n; ++b) {
        int best = 0;
        for (int k = 1; k < logits.c; ++k)
            if (logits.v[size_t(b) * logits.c + k] > logits.v[size_t(b) * logits.c + best]) best = k;
        hits += best == y[b];
    }
    return logits.n ? double(hits) / logits.n : 0.0;
}

inline TensorF gather(const ImageDataset& ds, const std::vector<int>& idx) {
    TensorF out(uninit, int(idx.size()), ds.h, ds.w, ds.c);
    for (size_t i = 0; i < idx.size(); ++i) copy_sample(out, int(i), ds.images, idx[i]);
    return out;
}

}  // namespace detail

inline PretrainedModelRecord pretrain_model(const ImageDataset& ds, const std::vector<int>& classes,
                                            const ArchSpec& arch, const PretrainHyper& hyper, uint64_t seed,
                                            const std::string& id = "model") {
    require(!classes.empty(), "pretrain_model: empty class list");
    require(int(classes.size()) == arch.num_outputs, "pretrain_model: head width != class count");
    std::set<int> train_split(ds.splits.meta_train.begin(), ds.splits.meta_train.end());
    for (int g : classes)
        require(train_split.count(g), "pretrain_model: class " + std::to_string(g) + " not in meta-train");

    // 80/20 per-class split; the held-out fraction is never trained on.
    Rng split_rng(derive_seed(seed, "split"));
    std::vector<int> train_idx, val_idx, train_y, val_y;
    for (size_t local = 0; local < classes.size(); ++local) {
        std::vector<int> pool = ds.by_class[classes[local]];
        split_rng.shuffle(pool);
        size_t n_val = std::max<size_t>(1, pool.size() / 5);
        for (size_t i = 0; i < pool.size(); ++i) {
            bool val = i < n_val;
            (val ? val_idx : train_idx).push_back(pool[i]);
            (val ? val_y : train_y).push_back(int(local));
        }
    }

    Rng init_rng(derive_seed(seed, "init"));
    NetworkState s = make_state(arch, init_rng);
    Adam opt(hyper.lr);
    Rng order_rng(derive_seed(seed, "order"));
    std::vector<int> order(train_idx.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        order_rng.shuffle(order);
        for (size_t at = 0; at < order.size(); at += size_t(hyper.batch)) {
            size_t take = std::min(size_t(hyper.batch), order.size() - at);
            std::vector<int> bidx(take), by(take);
            for (size_t i = 0; i < take; ++i) {
                bidx[i] = train_idx[order[at + i]];
                by[i] = train_y[order[at + i]];
            }
            TensorD batch = convert<double>(detail::gather(ds, bidx));
            Vec theta = to_double(s.params);
            auto cache = forward<double>(s.arch, theta, batch, Mode::Train);
            auto loss = softmax_xent<double>(cache.out(), by);
            if (!std::isfinite(loss.value)) throw NumericFailure("pretrain_model: loss diverged", "ce", long(at));
            auto back = backward<double>(s.arch, theta, cache, Mode::Train, loss.dlogits, {}, true, false);
            commit_bn(s, cache);
            opt.step(s.params, back.param_grads);
        }
    }

    PretrainedModelRecord rec;
    rec.id = id;
    rec.arch = arch;
    rec.params = s.params;
    rec.classes = classes;
    rec.domain = ds.domain_of_class.empty() ? 0 : ds.domain_of_class[classes[0]];
    rec.seed = seed;
    s.mode = Mode::Eval;
    rec.val_accuracy = detail::accuracy(s, detail::gather(ds, val_idx), val_y);
    return rec;
}

// Records are domain-pure: slot i draws its classes from domain i mod D, so a
// multi-domain dataset yields a heterogeneous pool with known tags.
inline ModelPool build_pool(const ImageDataset& ds, int n, int way, ArchPolicy policy, uint64_t seed,
                            const PretrainHyper& hyper = {}) {
    require(n >= 1, "build_pool: need at least one record");
    int num_domains = 1;
    for (int d : ds.domain_of_class) num_domains = std::max(num_domains, d + 1);

    std::vector<std::vector<int>> domain_train(num_domains);
    for (int g : ds.splits.meta_train) domain_train[ds.domain_of_class[g]].push_back(g);

    ModelPool pool;
    for (int i = 0; i < n; ++i) {
        int d = i % num_domains;
        const auto& eligible = domain_train[d];
        require(int(eligible.size()) >= way,
                "build_pool: domain " + std::to_string(d) + " has fewer than way meta-train classes");
        Rng cls_rng(derive_seed(seed, "classes", uint64_t(i)));
        std::vector<int> classes;
        for (int j : cls_rng.sample_indices(int(eligible.size()), way)) classes.push_back(eligible[j]);
        std::sort(classes.begin(), classes.end());

        char name[16];
        std::snprintf(name, sizeof name, "m%02d", i);
        try {
            pool.records.push_back(pretrain_model(ds, classes, pool_arch(policy, i, way, ds.h, ds.w, ds.c), hyper,
                                                  derive_seed(seed, "record", uint64_t(i)), name));
        } catch (const std::exception& e) {
            throw ValidationError(std::string(name) + ": " + e.what());
        }
    }
    return pool;
}

inline double cover_rate(const ModelPool& pool, const ImageDataset& ds) {
    require(!pool.records.empty(), "cover_rate: empty pool");
    std::set<int> covered;
    for (const auto& r : pool.records) covered.insert(r.classes.begin(), r.classes.end());
    std::set<int> train(ds.splits.meta_train.begin(), ds.splits.meta_train.end());
    int hit = 0;
    for (int g : covered) hit += train.count(g);
    return double(hit) / double(train.size());
}

// -------- persistence --------

inline nlohmann::json arch_to_json(const ArchSpec& a) {
    nlohmann::json j;
    j["kind"] = int(a.kind);
    j["in_h"] = a.in_h;
    j["in_w"] = a.in_w;
    j["in_c"] = a.in_c;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : a.layers) {
        nlohmann::json lj;
        switch (l.type) {
            case LayerType::Conv:
                lj = {{"type", "conv"}, {"out", l.out_channels}, {"k", l.kernel}, {"stride", l.stride}, {"pad", l.pad}};
                break;
            case LayerType::BatchNorm: lj = {{"type", "batchnorm"}}; break;
            case LayerType::ReLU: lj = {{"type", "relu"}}; break;
            case LayerType::LeakyReLU: lj = {{"type", "leaky_relu"}, {"slope", l.slope}}; break;
            case LayerType::MaxPool: lj = {{"type", "maxpool"}, {"factor", l.factor}}; break;
            case LayerType::Upsample: lj = {{"type", "upsample"}, {"factor", l.factor}}; break;
            case LayerType::Dense: lj = {{"type", "dense"}, {"out", l.out_features}}; break;
            case LayerType::Reshape: lj = {{"type", "reshape"}, {"h", l.rh}, {"w", l.rw}, {"c", l.rc}}; break;
            case LayerType::Sigmoid: lj = {{"type", "sigmoid"}}; break;
        }
        j["layers"].push_back(lj);
    }
    return j;
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
    ArchSpec a;
    a.kind = ArchKind(j.at("kind").get<int>());
    a.in_h = j.at("in_h").get<int>();
    a.in_w = j.at("in_w").get<int>();
    a.in_c = j.at("in_c").get<int>();
    for (const auto& lj : j.at("layers")) {
        std::string t = lj.at("type").get<std::string>();
        if (t == "conv")
            a.layers.push_back(conv(lj.at("out"), lj.at("k"), lj.at("stride"), lj.at("pad")));
        else if (t == "batchnorm")
            a.layers.push_back(batchnorm());
        else if (t == "relu")
            a.layers.push_back(relu());
        else if (t == "leaky_relu")
            a.layers.push_back(leaky_relu(lj.at("slope")));
        else if (t == "maxpool")
            a.layers.push_back(maxpool(lj.at("factor")));
        else if (t == "upsample")
            a.layers.push_back(upsample(lj.at("factor")));
        else if (t == "dense")
            a.layers.push_back(dense(lj.at("out")));
        else if (t == "reshape")
            a.layers.push_back(reshape(lj.at("h"), lj.at("w"), lj.at("c")));
        else if (t == "sigmoid")
            a.layers.push_back(sigmoid());
        else
            throw ValidationError("arch_from_json: unknown layer type " + t);
    }
    a.finalize();
    return a;
}

inline void save_record(const std::string& dir, const PretrainedModelRecord& rec) {
    std::filesystem::create_directories(dir);
    write_blob(dir + "/weights.bin", rec.params);
    nlohmann::json j;
    j["id"] = rec.id;
    j["arch"] = arch_to_json(rec.arch);
    j["classes"] = rec.classes;
    j["domain"] = rec.domain;
    j["val_accuracy"] = rec.val_accuracy;
    j["seed"] = rec.seed;
    j["checksum"] = checksum_hex(rec.params);
    atomic_write(dir + "/manifest.json", j.dump(2) + "\n");
}

inline PretrainedModelRecord load_record(const std::string& dir) {
    nlohmann::json j = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    PretrainedModelRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.arch = arch_from_json(j.at("arch"));
    rec.classes = j.at("classes").get<std::vector<int>>();
    rec.domain = j.at("domain").get<int>();
    rec.val_accuracy = j.at("val_accuracy").get<double>();
    rec.seed = j.at("seed").get<uint64_t>();
    rec.params = read_blob(dir + "/weights.bin");
    require(rec.params.size() == rec.arch.param_count(), "load_record: blob length mismatch in " + dir);
    if (checksum_hex(rec.params) != j.at("checksum").get<std::string>())
        throw ValidationError("load_record: checksum mismatch in " + dir);
    require(int(rec.classes.size()) == rec.arch.num_outputs, "load_record: class list width mismatch in " + dir);
    require(rec.val_accuracy >= 0.0 && rec.val_accuracy <= 1.0, "load_record: val_accuracy out of range in " + dir);
    return rec;
}

inline void save_pool(const std::string& root, const ModelPool& pool) {
    std::filesystem::create_directories(root);
    for (const auto& r : pool.records) save_record(root + "/" + r.id, r);
}

inline ModelPool load_pool(const std::string& root) {
    require(std::filesystem::is_directory(root), "load_pool: not a directory: " + root);
    std::vector<std::string> dirs;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    require(!dirs.empty(), "load_pool: no records under " + root);
    ModelPool pool;
    std::set<std::string> ids;
    std::set<uint64_t> seeds;
    for (const auto& d : dirs) {
        pool.records.push_back(load_record(d));
        require(ids.insert(pool.records.back().id).second, "load_pool: duplicate id " + pool.records.back().id);
        require(seeds.insert(pool.records.back().seed).second, "load_pool: duplicate record seed");
    }
    return pool;
}

}  // namespace dfml
