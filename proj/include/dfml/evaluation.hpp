#pragma once
// Meta-test evaluation: episode adaptation, report aggregation, and the
// per-auxiliary accuracy-gain probe used to motivate grouped training.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dfml/data.hpp"
#include "dfml/maml.hpp"
#include "dfml/meta_train.hpp"
#include "dfml/zoo.hpp"

namespace dfml {

struct EvalReport {
    double mean_accuracy = 0;
    double ci95 = 0;
    Vec accuracies;  // one entry per episode
    int num_episodes = 0;
    EpisodeSpec spec;
    uint64_t seed = 0;
};

// Half width of the normal-approximation 95% interval, sample std over n-1.
inline double ci95_half_width(const Vec& xs) {
    size_t n = xs.size();
    if (n < 2) return 0.0;
    double mean = 0;
    for (double x : xs) mean += x / double(n);
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean) / double(n - 1);
    return 1.96 * std::sqrt(var) / std::sqrt(double(n));
}

// Clones the learner, runs full-batch gradient steps on the support set and
// reports top-1 accuracy on the query set. The stored state is never touched.
// Adaptation and scoring both run in train mode so normalization sees the
// episode batch, matching how episodes are consumed during meta-training.
inline double adapt_and_eval(const MetaState& meta, const Episode& ep, double inner_lr, int adapt_steps) {
    int way = int(ep.class_map.size());
    require(way >= 1, "adapt_and_eval: empty episode");
    require(way <= meta.model.arch.num_outputs, "adapt_and_eval: episode way exceeds head width");
    require(ep.query_x.n > 0, "adapt_and_eval: no query samples");
    require(adapt_steps >= 0 && std::isfinite(inner_lr), "adapt_and_eval: bad adaptation setting");

    Vec theta = to_double(meta.model.params);
    if (adapt_steps > 0) {
        auto obj = make_ce_objective(meta.model.arch, Mode::Train, convert<double>(ep.support_x), ep.support_y, way);
        for (int s = 0; s < adapt_steps; ++s) {
            Vec g;
            double loss = obj(theta, &g);
            if (!std::isfinite(loss)) throw NumericFailure("adapt_and_eval: non-finite support loss", "adapt", s);
            for (size_t k = 0; k < theta.size(); ++k) theta[k] -= inner_lr * g[k];
        }
    }

    auto cache = forward<double>(meta.model.arch, theta, convert<double>(ep.query_x), Mode::Train);
    const TensorD& logits = cache.out();
    int hits = 0;
    for (int b = 0; b < logits.n; ++b) {
        const double* row = logits.row(b, 0, 0);
        int best = 0;
        for (int k = 0; k < way; ++k) {
            if (!std::isfinite(row[k])) throw NumericFailure("adapt_and_eval: non-finite query logits", "query", b);
            if (row[k] > row[best]) best = k;
        }
        if (best == ep.query_y[size_t(b)]) ++hits;
    }
    return double(hits) / double(logits.n);
}

// Samples num_episodes episodes from the given class split and aggregates
// adapted accuracies. Episode streams are derived from the report seed, so a
// repeated call reproduces the report bit for bit.
inline EvalReport evaluate(const MetaState& meta, const ImageDataset& ds, const std::vector<int>& split_classes,
                           const EpisodeSpec& spec, int num_episodes, uint64_t seed, double inner_lr = 1e-2,
                           int adapt_steps = 10) {
    require(num_episodes >= 1, "evaluate: need at least one episode");
    EvalReport rep;
    rep.num_episodes = num_episodes;
    rep.spec = spec;
    rep.seed = seed;
    rep.accuracies.reserve(size_t(num_episodes));
    for (int i = 0; i < num_episodes; ++i) {
        Episode ep = sample_episode(ds, split_classes, spec, derive_seed(seed, "episode", uint64_t(i)));
        rep.accuracies.push_back(adapt_and_eval(meta, ep, inner_lr, adapt_steps));
    }
    for (double a : rep.accuracies) rep.mean_accuracy += a / double(num_episodes);
    rep.ci95 = ci95_half_width(rep.accuracies);
    return rep;
}

// ---- accuracy gain ----

struct AgConfig {
    int epochs = 60;  // fixed training budget shared by every run
    int per_class = 6;
    int recover_steps = 60;
    double recover_lr = 1e-3;
    int gen_latent = 256, gen_nf = 8;
    int way = 5;  // meta head width; episode way must not exceed it
    int meta_filters = 16;
    ReplaySpec episode;  // episodes drawn from the recovered pool
    double inner_lr = 1e-2, outer_lr = 1e-3;
    int inner_steps = 5;
    bool second_order = true;
    EpisodeSpec eval_spec;
    int eval_episodes = 40;
    double adapt_lr = 1e-2;
    int adapt_steps = 10;
};

struct AgRow {
    std::string aux_id;
    double overlap_ratio = 0;  // |classes(basic) inter classes(aux)| / |classes(aux)|
    std::string arch;
    double p_basic = 0, p_joint = 0;
    double ag = 0;  // p_joint - p_basic
};

namespace detail {

inline std::string arch_label(const ArchSpec& arch) {
    for (const auto& l : arch.layers)
        if (l.type == LayerType::Conv) return "conv-w" + std::to_string(l.out_channels);
    return "dense";
}

// One training run at a fixed budget over a fixed pseudo-task pool, then a
// meta-test evaluation. Everything seeded from the shared root, so two runs
// differ only through the pool contents.
inline double ag_train_eval(const std::vector<PseudoTask>& tasks, const ImageDataset& ds, const AgConfig& cfg,
                            uint64_t seed) {
    MetaState meta;
    Rng init_rng(derive_seed(seed, "ag-init"));
    meta.model = make_state(make_classifier(cfg.way, cfg.meta_filters, 2, ds.h, ds.w, ds.c), init_rng);
    MemoryBank bank;
    bank.capacity = int(tasks.size());
    for (const auto& t : tasks) bank.push(t);
    for (int e = 0; e < cfg.epochs; ++e) {
        Episode ep = replay_episode_from_bank(bank, cfg.episode, derive_seed(seed, "ag-episode", uint64_t(e)));
        maml_step(meta.model, ep, cfg.inner_lr, cfg.inner_steps, cfg.outer_lr, cfg.second_order, cfg.episode.way);
    }
    auto rep = evaluate(meta, ds, ds.splits.meta_test, cfg.eval_spec, cfg.eval_episodes, derive_seed(seed, "ag-eval"),
                        cfg.adapt_lr, cfg.adapt_steps);
    return rep.mean_accuracy;
}

inline PseudoTask ag_recover(const PretrainedModelRecord& rec, const ImageDataset& ds, const AgConfig& cfg,
                             uint64_t seed) {
    GeneratorState gen = make_generator_state(ds.h, ds.w, ds.c, derive_seed(seed, "ag-gen-" + rec.id), cfg.gen_latent,
                                              cfg.gen_nf);
    return recover_task(rec, cfg.per_class, gen, derive_seed(seed, "ag-recover-" + rec.id), cfg.recover_steps,
                        cfg.recover_lr);
}

}  // namespace detail

// Measures, for each auxiliary model, how much adding its recovered data to
// the basic model's pool moves meta-test accuracy. Every run restarts from the
// same initialization and consumes the same episode-sampling streams; only the
// task pool differs. Failures inside an auxiliary run carry that model's id.
inline std::vector<AgRow> accuracy_gain(const PretrainedModelRecord& basic, const ModelPool& aux_pool,
                                        const ImageDataset& ds, const AgConfig& cfg, uint64_t seed) {
    require(cfg.epochs >= 1 && cfg.per_class >= 1, "accuracy_gain: bad budget");
    require(cfg.episode.way <= cfg.way, "accuracy_gain: episode way exceeds head width");
    for (const auto& rec : aux_pool.records)
        require(int(rec.arch.num_outputs) <= cfg.way, "accuracy_gain: teacher " + rec.id + " wider than head");
    require(basic.arch.num_outputs <= cfg.way, "accuracy_gain: basic teacher wider than head");

    PseudoTask basic_task = detail::ag_recover(basic, ds, cfg, seed);
    double p_basic = detail::ag_train_eval({basic_task}, ds, cfg, seed);

    std::vector<int> basic_classes = basic.classes;
    std::sort(basic_classes.begin(), basic_classes.end());

    std::vector<AgRow> rows;
    for (const auto& aux : aux_pool.records) {
        AgRow row;
        row.aux_id = aux.id;
        row.arch = detail::arch_label(aux.arch);
        int shared = 0;
        for (int g : aux.classes)
            if (std::binary_search(basic_classes.begin(), basic_classes.end(), g)) ++shared;
        row.overlap_ratio = double(shared) / double(aux.classes.size());
        row.p_basic = p_basic;
        try {
            PseudoTask aux_task = detail::ag_recover(aux, ds, cfg, seed);
            row.p_joint = detail::ag_train_eval({basic_task, aux_task}, ds, cfg, seed);
        } catch (const NumericFailure& e) {
            throw NumericFailure(std::string(e.what()) + " [aux " + aux.id + "]", e.term, e.step);
        }
        row.ag = row.p_joint - row.p_basic;
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string ag_csv(const std::vector<AgRow>& rows) {
    std::ostringstream ss;
    ss.precision(17);
    ss << "aux_id,overlap_ratio,arch,ag\n";
    for (const auto& r : rows) ss << r.aux_id << ',' << r.overlap_ratio << ',' << r.arch << ',' << r.ag << '\n';
    return ss.str();
}

}  // namespace dfml
