#pragma once

#include <deque>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "grouping.hpp"
#include "igr.hpp"
#include "inversion.hpp"
#include "io.hpp"
#include "maml.hpp"
#include "zoo.hpp"

namespace dfml {

struct ReplaySpec {
    int way = 5, shot = 1, query = 5;
};

struct TrainConfig {
    double beta = 1e-3;  // displacement step
    int m = 4;           // models sampled per epoch
    int epochs = 10;
    double meta_lr = 1e-3;   // KD/IGR path (adaptive moments)
    double inner_lr = 1e-2;  // replay adaptation
    double outer_lr = 1e-3;  // replay meta update (plain SGD)
    int bank_capacity = 20;
    ReplaySpec replay;
    bool regularization_on = true;  // off = ERM ablation
    bool grouping_on = true;        // off = sample from the whole pool
    // task recovery at desk scale; a warm-started generator keeps the
    // per-epoch step count far below a cold inversion
    int recover_steps = 10;
    double recover_lr = 1e-3;
    int per_class = 6;
    int gen_latent = 256;
    int gen_nf = 8;
    // meta model and replay adaptation
    int way = 5;  // meta head width
    int meta_filters = 16;
    int inner_steps = 5;
    bool second_order = true;
    bool replay_igr = false;  // displaced-gradient wrap for the replay update
    double kd_temperature = 1.0;
};

inline void validate(const TrainConfig& c) {
    require(c.beta >= 0.0, "config: beta must be >= 0");
    require(c.m >= 1, "config: m must be >= 1");
    require(c.epochs >= 0, "config: epochs must be >= 0");
    require(c.bank_capacity >= 1, "config: bank capacity must be >= 1");
    require(c.replay.way >= 1 && c.replay.shot >= 1 && c.replay.query >= 1, "config: replay spec must be positive");
    require(c.way >= c.replay.way, "config: replay way exceeds the meta head");
    require(c.per_class >= 1 && c.recover_steps >= 0, "config: recovery knobs must be positive");
}

// ---- knowledge distillation ----

namespace detail {

struct KdEval {
    double kl = 0, ce = 0, total = 0;
    TensorD dlogits;
};

// KL(teacher || student) + CE(student, labels) over the first w_t meta
// outputs, mean over the batch. Temperature scales both softmaxes of the
// KL term only; 1 recovers the plain objective.
inline KdEval kd_eval(const TensorD& logits, const std::vector<Vec>& teacher_p, const std::vector<int>& labels,
                      double tau) {
    const int n = logits.n;
    require(n >= 1 && size_t(n) == teacher_p.size() && size_t(n) == labels.size(), "kd: batch size mismatch");
    const int wt = int(teacher_p[0].size());
    require(wt <= logits.c, "kd: teacher head wider than the meta head");
    require(tau > 0.0, "kd: temperature must be positive");

    KdEval out;
    out.dlogits = TensorD(n, 1, 1, logits.c);
    std::fill(out.dlogits.v.begin(), out.dlogits.v.end(), 0.0);
    for (int b = 0; b < n; ++b) {
        require(int(teacher_p[size_t(b)].size()) == wt, "kd: ragged teacher probabilities");
        require(labels[size_t(b)] >= 0 && labels[size_t(b)] < wt, "kd: label outside the teacher head");
        const double* row = logits.row(b, 0, 0);
        auto log_softmax = [&](double scale, Vec& lp) {
            double m = row[0] * scale;
            for (int k = 1; k < wt; ++k) m = std::max(m, row[k] * scale);
            double z = 0;
            for (int k = 0; k < wt; ++k) z += std::exp(row[k] * scale - m);
            double lse = m + std::log(z);
            lp.resize(size_t(wt));
            for (int k = 0; k < wt; ++k) lp[size_t(k)] = row[k] * scale - lse;
        };
        Vec lq_tau, lq1;
        log_softmax(1.0 / tau, lq_tau);
        log_softmax(1.0, lq1);

        double* drow = out.dlogits.row(b, 0, 0);
        for (int k = 0; k < wt; ++k) {
            double p = teacher_p[size_t(b)][size_t(k)];
            if (p > 0.0) out.kl += p * (std::log(p) - lq_tau[size_t(k)]) / double(n);
            drow[k] += (std::exp(lq_tau[size_t(k)]) - p) / (tau * double(n));      // KL part
            drow[k] += std::exp(lq1[size_t(k)]) / double(n);                       // CE part
        }
        out.ce -= lq1[size_t(labels[size_t(b)])] / double(n);
        drow[labels[size_t(b)]] -= 1.0 / double(n);
    }
    out.total = out.kl + out.ce;
    return out;
}

}  // namespace detail

// Teacher's eval-mode class probabilities for a batch, one row per image.
inline std::vector<Vec> teacher_probs(const PretrainedModelRecord& teacher, const TensorF& images) {
    NetworkState t{teacher.arch, teacher.params, Mode::Eval};
    auto cache = forward<double>(t.arch, to_double(t.params), convert<double>(images), Mode::Eval);
    const TensorD& logits = cache.out();
    std::vector<Vec> rows(size_t(logits.n), Vec(size_t(logits.c), 0.0));
    for (int b = 0; b < logits.n; ++b) {
        const double* row = logits.row(b, 0, 0);
        double m = row[0];
        for (int k = 1; k < logits.c; ++k) m = std::max(m, row[k]);
        double z = 0;
        for (int k = 0; k < logits.c; ++k) z += std::exp(row[k] - m);
        for (int k = 0; k < logits.c; ++k) rows[size_t(b)][size_t(k)] = std::exp(row[k] - m) / z;
    }
    return rows;
}

struct KdTerms {
    double kl = 0, ce = 0, total = 0;
};

struct MetaState {
    NetworkState model;
    Adam opt;  // KD/IGR path moments
    long epoch = 0;
};

// Pure evaluator of the distillation loss as a function of meta parameters;
// train-mode forward, no running-stat mutation, so displaced IGR calls
// restore the caller's state exactly.
inline Objective make_kd_objective(const ArchSpec& meta_arch, const PseudoTask& task,
                                   const std::vector<Vec>& teacher_p, double temperature = 1.0) {
    require(!teacher_p.empty(), "kd: no teacher rows");
    require(int(teacher_p[0].size()) <= meta_arch.num_outputs, "kd: teacher head wider than the meta head");
    TensorD batch = convert<double>(task.images);
    return [meta_arch, batch = std::move(batch), labels = task.labels, teacher_p, temperature](
               std::span<const double> theta, Vec* grad) -> double {
        auto cache = forward<double>(meta_arch, theta, batch, Mode::Train);
        TensorD flat(batch.n, 1, 1, meta_arch.num_outputs);
        flat.v = cache.out().v;
        auto kd = detail::kd_eval(flat, teacher_p, labels, temperature);
        if (grad) {
            TensorD dshaped(batch.n, cache.out().h, cache.out().w, cache.out().c);
            dshaped.v = kd.dlogits.v;
            auto back = backward<double>(meta_arch, theta, cache, Mode::Train, dshaped);
            *grad = std::move(back.param_grads);
        }
        return kd.total;
    };
}

inline KdTerms kd_loss(const PretrainedModelRecord& teacher, const MetaState& meta, const PseudoTask& task,
                       double temperature = 1.0) {
    auto tp = teacher_probs(teacher, task.images);
    auto cache = forward<double>(meta.model.arch, to_double(meta.model.params), convert<double>(task.images),
                                 Mode::Train);
    TensorD flat(task.images.n, 1, 1, meta.model.arch.num_outputs);
    flat.v = cache.out().v;
    auto kd = detail::kd_eval(flat, tp, task.labels, temperature);
    return {kd.kl, kd.ce, kd.total};
}

// ---- memory bank ----

struct MemoryBank {
    int capacity = 20;
    std::deque<PseudoTask> tasks;  // oldest first

    void push(PseudoTask t) {
        require(capacity >= 1, "bank: capacity must be >= 1");
        tasks.push_back(std::move(t));
        while (int(tasks.size()) > capacity) tasks.pop_front();
    }
    bool holds_key(const std::pair<std::string, int>& key) const {
        for (const auto& t : tasks)
            for (const auto& k : t.class_keys)
                if (k == key) return true;
        return false;
    }
};

// Cross-task episode: class_keys sampled without replacement across every
// stored task, images pooled over duplicate keys, labels remapped to
// 0..way-1. class_map is -1 throughout (no dataset classes behind it).
inline Episode replay_episode_from_bank(const MemoryBank& bank, const ReplaySpec& spec, uint64_t seed,
                                        std::vector<std::pair<std::string, int>>* keys_out = nullptr) {
    require(spec.way >= 1 && spec.shot >= 1 && spec.query >= 1, "replay: bad episode spec");

    // first-appearance key order over the FIFO keeps draws reproducible
    std::vector<std::pair<std::string, int>> keys;
    std::map<std::pair<std::string, int>, std::vector<std::pair<const PseudoTask*, int>>> samples;
    for (const auto& t : bank.tasks) {
        require(t.images.h > 0, "replay: empty task in bank");
        require(t.images.h == bank.tasks.front().images.h && t.images.w == bank.tasks.front().images.w &&
                    t.images.c == bank.tasks.front().images.c,
                "replay: bank holds mixed image shapes");
        for (int j = 0; j < t.images.n; ++j) {
            const auto& key = t.class_keys.at(size_t(t.labels[size_t(j)]));
            auto it = samples.find(key);
            if (it == samples.end()) {
                keys.push_back(key);
                it = samples.emplace(key, std::vector<std::pair<const PseudoTask*, int>>{}).first;
            }
            it->second.emplace_back(&t, j);
        }
    }
    const int need = spec.shot + spec.query;
    std::vector<std::pair<std::string, int>> eligible;
    for (const auto& k : keys)
        if (int(samples[k].size()) >= need) eligible.push_back(k);
    if (int(eligible.size()) < spec.way)
        throw InsufficientBank("replay: " + std::to_string(eligible.size()) + " classes hold " +
                               std::to_string(need) + "+ images, need " + std::to_string(spec.way));

    Rng rng(seed);
    std::vector<int> picked = rng.sample_indices(int(eligible.size()), spec.way);

    const auto& shape = bank.tasks.front().images;
    Episode ep;
    ep.support_x = TensorF(spec.way * spec.shot, shape.h, shape.w, shape.c);
    ep.query_x = TensorF(spec.way * spec.query, shape.h, shape.w, shape.c);
    ep.class_map.assign(size_t(spec.way), -1);
    for (int e = 0; e < spec.way; ++e) {
        const auto& key = eligible[size_t(picked[size_t(e)])];
        const auto& pool = samples[key];
        std::vector<int> idx = rng.sample_indices(int(pool.size()), need);
        for (int s = 0; s < spec.shot; ++s) {
            const auto& [task, row] = pool[size_t(idx[size_t(s)])];
            detail::copy_sample(ep.support_x, e * spec.shot + s, task->images, row);
            ep.support_y.push_back(e);
        }
        for (int q = 0; q < spec.query; ++q) {
            const auto& [task, row] = pool[size_t(idx[size_t(spec.shot + q)])];
            detail::copy_sample(ep.query_x, e * spec.query + q, task->images, row);
            ep.query_y.push_back(e);
        }
        if (keys_out) keys_out->push_back(key);
    }
    return ep;
}

// ---- training loop ----

struct DiagRow {
    long epoch = 0;
    double regularizer = 0;
    double mean_cosine = 0;
    double kd_loss = 0;
    double replay_loss = std::numeric_limits<double>::quiet_NaN();  // NaN = replay skipped
    // run log, not part of the csv
    int group = 0;
    std::vector<std::string> sampled_ids;
    uint64_t task_checksum = 0;  // fnv over the epoch's recovered images
};

using Diagnostics = std::vector<DiagRow>;

inline std::string diagnostics_csv(const Diagnostics& diag) {
    std::vector<Vec> rows;
    for (const auto& r : diag)
        rows.push_back({double(r.epoch), r.regularizer, r.mean_cosine, r.kd_loss, r.replay_loss});
    return to_csv({"epoch", "regularizer", "mean_cosine", "kd_loss", "replay_loss"}, rows);
}

inline std::pair<MetaState, Diagnostics> train(const ModelPool& pool, const GroupAssignment& groups,
                                               const TrainConfig& config, uint64_t seed) {
    validate(config);
    require(!pool.records.empty(), "train: empty pool");
    const ArchSpec& a0 = pool.records[0].arch;
    for (const auto& r : pool.records) {
        require(r.arch.in_h == a0.in_h && r.arch.in_w == a0.in_w && r.arch.in_c == a0.in_c,
                "train: pool input shapes differ");
        require(int(r.classes.size()) <= config.way, "train: teacher " + r.id + " wider than the meta head");
    }

    std::vector<std::vector<int>> members;
    if (config.grouping_on) {
        require(groups.c >= 1 && groups.group_of.size() == pool.records.size(), "train: groups do not match pool");
        members.assign(size_t(groups.c), {});
        for (size_t i = 0; i < groups.group_of.size(); ++i) {
            require(groups.group_of[i] >= 0 && groups.group_of[i] < groups.c, "train: group index out of range");
            members[size_t(groups.group_of[i])].push_back(int(i));
        }
        for (const auto& g : members) require(!g.empty(), "train: empty group");
    } else {
        members.assign(1, {});
        for (size_t i = 0; i < pool.records.size(); ++i) members[0].push_back(int(i));
    }

    MetaState meta;
    {
        Rng init_rng(derive_seed(seed, "meta-init"));
        meta.model = make_state(make_classifier(config.way, config.meta_filters, 2, a0.in_h, a0.in_w, a0.in_c),
                                init_rng, Mode::Train);
    }
    meta.opt = Adam(config.meta_lr);

    GeneratorState gen = make_generator_state(a0.in_h, a0.in_w, a0.in_c, derive_seed(seed, "generator"),
                                              config.gen_latent, config.gen_nf);
    MemoryBank bank;
    bank.capacity = config.bank_capacity;
    Diagnostics diag;

    for (long e = 0; e < config.epochs; ++e) {
        DiagRow row;
        row.epoch = e;

        Rng grp(derive_seed(seed, "group", uint64_t(e)));
        row.group = int(members.size()) == 1 ? 0 : grp.uniform_int(0, int(members.size()) - 1);
        const std::vector<int>& grp_members = members[size_t(row.group)];
        std::vector<int> chosen;
        if (int(grp_members.size()) >= config.m) {
            for (int k : grp.sample_indices(int(grp_members.size()), config.m)) chosen.push_back(grp_members[size_t(k)]);
        } else {
            for (int j = 0; j < config.m; ++j)
                chosen.push_back(grp_members[size_t(grp.uniform_int(0, int(grp_members.size()) - 1))]);
        }

        // recovery depends on teachers only, never on theta, so matched runs
        // with regularization toggled see bit-identical task sequences
        std::vector<PseudoTask> tasks;
        uint64_t csum = 1469598103934665603ull;
        for (size_t slot = 0; slot < chosen.size(); ++slot) {
            const auto& rec = pool.records[size_t(chosen[slot])];
            row.sampled_ids.push_back(rec.id);
            PseudoTask t = recover_task(rec, config.per_class, gen,
                                        derive_seed(seed, "recover", (uint64_t(e) << 8) + slot),
                                        config.recover_steps, config.recover_lr);
            csum ^= checksum_bytes(t.images.v.data(), t.images.v.size() * sizeof(float));
            csum *= 1099511628211ull;
            tasks.push_back(std::move(t));
        }
        row.task_checksum = csum;

        std::vector<Objective> losses;
        for (size_t i = 0; i < tasks.size(); ++i) {
            auto tp = teacher_probs(pool.records[size_t(chosen[i])], tasks[i].images);
            losses.push_back(make_kd_objective(meta.model.arch, tasks[i], tp, config.kd_temperature));
        }

        Vec theta = to_double(meta.model.params);
        std::vector<Vec> pass1;
        Vec pass1_losses;
        double beta = config.regularization_on ? config.beta : 0.0;
        Vec g = igr_update_gradient(theta, losses, beta, &pass1, &pass1_losses);

        auto reg = explicit_regularizer(pass1);
        row.regularizer = reg.value;
        row.mean_cosine = reg.mean_cosine;
        row.kd_loss = 0;
        for (double l : pass1_losses) row.kd_loss += l / double(pass1_losses.size());

        meta.opt.step(meta.model.params, g);

        // one train-mode pass at the fresh parameters folds batch statistics
        // into the running estimates; losses above never read them
        {
            auto cache = forward<double>(meta.model.arch, to_double(meta.model.params),
                                         convert<double>(tasks.back().images), Mode::Train);
            commit_bn(meta.model, cache);
        }

        for (auto& t : tasks) bank.push(std::move(t));

        bool replayed = false;
        if (config.replay_igr) {
            try {
                std::vector<Episode> eps;
                for (int j = 0; j < config.m; ++j)
                    eps.push_back(replay_episode_from_bank(bank, config.replay,
                                                           derive_seed(seed, "replay", (uint64_t(e) << 8) + 1 + j)));
                std::vector<Objective> outer;
                for (const auto& ep : eps)
                    outer.push_back([&meta, &ep, &config](std::span<const double> th, Vec* gr) -> double {
                        Vec tv(th.begin(), th.end());
                        auto res = maml_episode_grad(meta.model.arch, tv, ep, config.inner_lr, config.inner_steps,
                                                     config.second_order, config.replay.way);
                        if (gr) *gr = std::move(res.outer_grad);
                        return res.query_loss;
                    });
                Vec th2 = to_double(meta.model.params);
                Vec pl;
                Vec rg = igr_update_gradient(th2, outer, beta, nullptr, &pl);
                for (size_t k = 0; k < meta.model.params.size(); ++k)
                    meta.model.params[k] = float(double(meta.model.params[k]) - config.outer_lr * rg[k]);
                row.replay_loss = 0;
                for (double l : pl) row.replay_loss += l / double(pl.size());
                replayed = true;
            } catch (const InsufficientBank&) {
            }
        }
        if (!replayed) {
            try {
                Episode ep = replay_episode_from_bank(bank, config.replay, derive_seed(seed, "replay", uint64_t(e)));
                row.replay_loss = maml_step(meta.model, ep, config.inner_lr, config.inner_steps, config.outer_lr,
                                            config.second_order, config.replay.way);
            } catch (const InsufficientBank&) {
                // skipped replay stays NaN in the row
            }
        }

        meta.epoch = e + 1;
        diag.push_back(std::move(row));
    }
    return {std::move(meta), std::move(diag)};
}

// ---- checkpoints ----

inline void save_checkpoint(const std::string& dir, const MetaState& meta) {
    std::filesystem::create_directories(dir);
    write_blob(dir + "/weights.bin", meta.model.params);
    nlohmann::json j;
    j["arch"] = arch_to_json(meta.model.arch);
    j["epoch"] = meta.epoch;
    j["checksum"] = checksum_hex(meta.model.params);
    atomic_write(dir + "/manifest.json", j.dump(2) + "\n");
}

inline MetaState load_checkpoint(const std::string& dir) {
    nlohmann::json j = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    MetaState meta;
    meta.model.arch = arch_from_json(j.at("arch"));
    meta.model.params = read_blob(dir + "/weights.bin");
    meta.model.mode = Mode::Train;
    meta.epoch = j.at("epoch").get<long>();
    require(meta.model.params.size() == meta.model.arch.param_count(), "checkpoint: blob length mismatch in " + dir);
    require(checksum_hex(meta.model.params) == j.at("checksum").get<std::string>(),
            "checkpoint: checksum mismatch in " + dir);
    return meta;
}

}  // namespace dfml
