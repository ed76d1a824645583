#pragma once
// Stage functions behind the CLI. Each stage reads its inputs from the
// artifact directory, never from process state, so stages can run in
// separate invocations. Every file lands via atomic_write.

#include <json.hpp>

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "config.hpp"
#include "evaluation.hpp"
#include "grouping.hpp"
#include "meta_train.hpp"
#include "plot.hpp"
#include "png_io.hpp"

namespace dfml {

inline ImageDataset pipeline_dataset(const RunConfig& cfg) {
    SyntheticConfig s;
    s.num_domains = cfg.dataset.num_domains;
    s.classes_per_domain = cfg.dataset.classes_per_domain;
    s.samples_per_class = cfg.dataset.samples_per_class;
    s.image_size = cfg.dataset.image_size;
    s.channels = cfg.dataset.channels;
    s.noise_sigma = cfg.dataset.noise_sigma;
    s.channel_shift = cfg.dataset.channel_shift;
    return make_synthetic_domains(s, derive_seed(cfg.seed, "dataset"));
}

namespace detail {

inline void need(bool present, const std::string& what, const std::string& stage) {
    if (!present) throw ValidationError("missing " + what + "; run `" + stage + "` first");
}

inline bool file_exists(const std::string& p) { return std::filesystem::exists(p); }

}  // namespace detail

inline ModelPool pipeline_pool(const std::string& out) {
    detail::need(std::filesystem::is_directory(out + "/zoo"), out + "/zoo", "zoo-build");
    return load_pool(out + "/zoo");
}

inline void stage_zoo(const RunConfig& cfg, const std::string& out) {
    ImageDataset ds = pipeline_dataset(cfg);
    ArchPolicy policy = cfg.zoo.policy == "fixed" ? ArchPolicy::Fixed : ArchPolicy::Mixed;
    PretrainHyper hyper;
    hyper.lr = cfg.zoo.lr;
    hyper.epochs = cfg.zoo.epochs;
    hyper.batch = cfg.zoo.batch;
    ModelPool pool = build_pool(ds, cfg.zoo.n, cfg.zoo.way, policy, derive_seed(cfg.seed, "zoo"), hyper);
    save_pool(out + "/zoo", pool);
}

// ---- recovered-task store ----

inline void save_task(const std::string& stem, const PseudoTask& task) {
    std::vector<float> flat(task.images.v.begin(), task.images.v.end());
    write_blob(stem + ".bin", flat);
    nlohmann::ordered_json j;
    j["source_id"] = task.source_id;
    j["n"] = task.images.n;
    j["h"] = task.images.h;
    j["w"] = task.images.w;
    j["c"] = task.images.c;
    j["labels"] = task.labels;
    auto keys = nlohmann::ordered_json::array();
    for (const auto& [id, local] : task.class_keys) keys.push_back({id, local});
    j["class_keys"] = keys;
    j["checksum"] = checksum_hex(flat);
    atomic_write(stem + ".json", j.dump(2) + "\n");
}

inline PseudoTask load_task(const std::string& stem) {
    nlohmann::json j = nlohmann::json::parse(read_file(stem + ".json"));
    PseudoTask t;
    t.source_id = j.at("source_id").get<std::string>();
    t.images = TensorF(uninit, j.at("n").get<int>(), j.at("h").get<int>(), j.at("w").get<int>(), j.at("c").get<int>());
    std::vector<float> flat = read_blob(stem + ".bin");
    require(flat.size() == t.images.size(), "load_task: blob length mismatch at " + stem);
    require(checksum_hex(flat) == j.at("checksum").get<std::string>(), "load_task: checksum mismatch at " + stem);
    t.images.v.assign(flat.begin(), flat.end());
    t.labels = j.at("labels").get<std::vector<int>>();
    for (const auto& k : j.at("class_keys")) t.class_keys.emplace_back(k.at(0).get<std::string>(), k.at(1).get<int>());
    require(t.labels.size() == size_t(t.images.n), "load_task: label count mismatch at " + stem);
    return t;
}

inline std::vector<PseudoTask> pipeline_recovered(const std::string& out, const ModelPool& pool) {
    std::vector<PseudoTask> tasks;
    for (const auto& rec : pool.records) {
        std::string stem = out + "/recovered/" + rec.id;
        detail::need(detail::file_exists(stem + ".json"), stem + ".json", "invert");
        tasks.push_back(load_task(stem));
    }
    return tasks;
}

inline void stage_invert(const RunConfig& cfg, const std::string& out) {
    ModelPool pool = pipeline_pool(out);
    std::filesystem::create_directories(out + "/recovered");
    for (const auto& rec : pool.records) {
        GeneratorState gen = make_generator_state(rec.arch.in_h, rec.arch.in_w, rec.arch.in_c,
                                                  derive_seed(cfg.seed, "invert-gen-" + rec.id), cfg.inversion.latent,
                                                  cfg.inversion.nf);
        PseudoTask task = recover_task(rec, cfg.inversion.per_class, gen, derive_seed(cfg.seed, "invert-" + rec.id),
                                       cfg.inversion.steps, cfg.inversion.lr);
        save_task(out + "/recovered/" + rec.id, task);
        if (task.images.c == 1 || task.images.c == 3)
            save_image_grid(out + "/recovered/inv_0_" + rec.id + ".png", task.images, cfg.inversion.per_class);
    }
}

// ---- embeddings ----

// The probe is a classifier pre-trained on its own held-out synthetic domain,
// so no meta-train or meta-test class ever touches its weights. A configured
// probe path short-circuits this and loads an existing record.
inline PretrainedModelRecord pipeline_probe(const RunConfig& cfg, const std::string& out) {
    if (!cfg.grouping.probe.empty()) {
        detail::need(detail::file_exists(cfg.grouping.probe + "/manifest.json"), cfg.grouping.probe,
                     "zoo-build (or fix grouping.probe)");
        return load_record(cfg.grouping.probe);
    }
    if (detail::file_exists(out + "/probe/manifest.json")) return load_record(out + "/probe");
    SyntheticConfig s;
    s.num_domains = 1;
    s.classes_per_domain = std::max(8, cfg.zoo.way);
    s.samples_per_class = std::max(16, cfg.dataset.samples_per_class);
    s.image_size = cfg.dataset.image_size;
    s.channels = cfg.dataset.channels;
    s.noise_sigma = cfg.dataset.noise_sigma;
    s.channel_shift = cfg.dataset.channel_shift;
    ImageDataset probe_ds = make_synthetic_domains(s, derive_seed(cfg.seed, "probe-domain"));
    PretrainHyper hyper;
    hyper.lr = cfg.zoo.lr;
    hyper.epochs = cfg.zoo.epochs;
    hyper.batch = cfg.zoo.batch;
    auto arch = make_classifier(int(probe_ds.splits.meta_train.size()), 8, 2, probe_ds.h, probe_ds.w, probe_ds.c);
    PretrainedModelRecord rec = pretrain_model(probe_ds, probe_ds.splits.meta_train, arch, hyper,
                                               derive_seed(cfg.seed, "probe"), "probe");
    save_record(out + "/probe", rec);
    return rec;
}

inline void stage_embed(const RunConfig& cfg, const std::string& out) {
    ModelPool pool = pipeline_pool(out);
    std::vector<PseudoTask> tasks = pipeline_recovered(out, pool);
    PretrainedModelRecord probe_rec = pipeline_probe(cfg, out);
    ProbeSpec probe = make_probe(NetworkState{probe_rec.arch, probe_rec.params, Mode::Eval});
    std::ostringstream o;
    o.precision(17);
    for (size_t i = 0; i < tasks.size(); ++i) {
        TaskEmbedding emb = fim_diagonal(probe, tasks[i]);
        o << pool.records[i].id;
        for (double v : emb.fim_diag) o << ',' << v;
        o << '\n';
    }
    atomic_write(out + "/embeddings.csv", o.str());
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

inline std::vector<std::string> csv_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string l;
    while (std::getline(in, l))
        if (!l.empty()) lines.push_back(l);
    return lines;
}

}  // namespace detail

inline void stage_group(const RunConfig& cfg, const std::string& out) {
    detail::need(detail::file_exists(out + "/embeddings.csv"), out + "/embeddings.csv", "embed");
    std::vector<std::string> lines = detail::csv_lines(read_file(out + "/embeddings.csv"));
    require(!lines.empty(), "group: embeddings.csv is empty");
    std::vector<std::string> ids;
    std::vector<TaskEmbedding> embs;
    for (const auto& l : lines) {
        auto cells = detail::split_csv_line(l);
        require(cells.size() >= 2, "group: malformed embeddings row");
        ids.push_back(cells[0]);
        TaskEmbedding e;
        for (size_t i = 1; i < cells.size(); ++i) e.fim_diag.push_back(detail::cfg_double(cells[i], "embeddings.csv"));
        embs.push_back(std::move(e));
    }
    DissimilarityMatrix w = dissimilarity_matrix(embs);
    std::ostringstream o;
    o.precision(17);
    for (const auto& row : w.w) {
        for (size_t j = 0; j < row.size(); ++j) o << (j ? "," : "") << row[j];
        o << '\n';
    }
    atomic_write(out + "/W.csv", o.str());

    GroupAssignment groups = spectral_group(w, cfg.grouping.c, derive_seed(cfg.seed, "grouping"));
    groups.group_of = canonical_groups(groups.group_of);
    nlohmann::ordered_json j;
    j["c"] = groups.c;
    j["ids"] = ids;
    auto m = nlohmann::ordered_json::object();
    for (size_t i = 0; i < ids.size(); ++i) m[ids[i]] = groups.group_of[i];
    j["groups"] = m;
    atomic_write(out + "/groups.json", j.dump(2) + "\n");
}

inline GroupAssignment pipeline_groups(const std::string& out, const ModelPool& pool) {
    detail::need(detail::file_exists(out + "/groups.json"), out + "/groups.json", "group");
    nlohmann::json j = nlohmann::json::parse(read_file(out + "/groups.json"));
    GroupAssignment ga;
    ga.c = j.at("c").get<int>();
    const auto& m = j.at("groups");
    for (const auto& rec : pool.records) {
        require(m.contains(rec.id), "groups.json has no entry for " + rec.id + "; rerun `group`");
        ga.group_of.push_back(m.at(rec.id).get<int>());
    }
    return ga;
}

inline void stage_train(const RunConfig& cfg, const std::string& out) {
    ModelPool pool = pipeline_pool(out);
    GroupAssignment groups;
    if (cfg.train.grouping_on) groups = pipeline_groups(out, pool);
    auto [state, diag] = train(pool, groups, cfg.train, cfg.seed);
    save_checkpoint(out + "/checkpoints/meta", state);
    atomic_write(out + "/diagnostics.csv", diagnostics_csv(diag));
}

inline void stage_eval(const RunConfig& cfg, const std::string& out) {
    detail::need(detail::file_exists(out + "/checkpoints/meta/manifest.json"), out + "/checkpoints/meta", "train");
    MetaState meta = load_checkpoint(out + "/checkpoints/meta");
    ImageDataset ds = pipeline_dataset(cfg);
    EvalReport rep = evaluate(meta, ds, ds.splits.meta_test, cfg.eval.spec, cfg.eval.episodes,
                              derive_seed(cfg.seed, "eval"), cfg.eval.adapt_lr, cfg.eval.adapt_steps);
    nlohmann::ordered_json j;
    j["mean_accuracy"] = rep.mean_accuracy;
    j["ci95"] = rep.ci95;
    j["num_episodes"] = rep.num_episodes;
    j["spec"] = {{"way", rep.spec.way}, {"shot", rep.spec.shot}, {"query", rep.spec.query}};
    j["seed"] = rep.seed;
    j["accuracies"] = rep.accuracies;
    atomic_write(out + "/eval.json", j.dump(2) + "\n");
}

inline void stage_ag(const RunConfig& cfg, const std::string& out) {
    ModelPool pool = pipeline_pool(out);
    require(pool.records.size() >= 2, "ag: need at least 2 zoo records (one basic, one auxiliary)");
    ImageDataset ds = pipeline_dataset(cfg);
    AgConfig acfg;
    acfg.epochs = cfg.ag.epochs;
    acfg.per_class = cfg.ag.per_class;
    acfg.recover_steps = cfg.ag.recover_steps;
    acfg.recover_lr = cfg.inversion.lr;
    acfg.gen_latent = cfg.train.gen_latent;
    acfg.gen_nf = cfg.train.gen_nf;
    acfg.way = cfg.train.way;
    acfg.meta_filters = cfg.train.meta_filters;
    acfg.episode = ReplaySpec{std::min(cfg.train.replay.way, cfg.zoo.way), cfg.train.replay.shot,
                              cfg.train.replay.query};
    acfg.inner_lr = cfg.train.inner_lr;
    acfg.outer_lr = cfg.train.outer_lr;
    acfg.inner_steps = cfg.train.inner_steps;
    acfg.second_order = cfg.train.second_order;
    acfg.eval_spec = cfg.eval.spec;
    acfg.eval_episodes = cfg.ag.eval_episodes;
    acfg.adapt_lr = cfg.eval.adapt_lr;
    acfg.adapt_steps = cfg.eval.adapt_steps;
    ModelPool aux;
    aux.records.assign(pool.records.begin() + 1, pool.records.end());
    auto rows = accuracy_gain(pool.records[0], aux, ds, acfg, derive_seed(cfg.seed, "ag"));
    atomic_write(out + "/ag.csv", ag_csv(rows));
}

// ---- figures ----

inline std::vector<Vec> read_matrix_csv(const std::string& path, const std::string& stage) {
    detail::need(detail::file_exists(path), path, stage);
    std::vector<Vec> m;
    for (const auto& l : detail::csv_lines(read_file(path))) {
        Vec row;
        for (const auto& c : detail::split_csv_line(l)) row.push_back(detail::cfg_double(c, path));
        m.push_back(std::move(row));
    }
    return m;
}

inline void stage_plot(const RunConfig& cfg, const std::string& out) {
    (void)cfg;
    std::filesystem::create_directories(out + "/plots");

    // training curves
    detail::need(detail::file_exists(out + "/diagnostics.csv"), out + "/diagnostics.csv", "train");
    auto lines = detail::csv_lines(read_file(out + "/diagnostics.csv"));
    require(lines.size() >= 2, "plot: diagnostics.csv has no data rows");
    Vec reg, cosine;
    for (size_t i = 1; i < lines.size(); ++i) {
        auto cells = detail::split_csv_line(lines[i]);
        require(cells.size() >= 5, "plot: malformed diagnostics row");
        reg.push_back(detail::cfg_double(cells[1], "diagnostics.csv"));
        cosine.push_back(detail::cfg_double(cells[2], "diagnostics.csv"));
    }
    write_png(out + "/plots/regularizer_curve.png", curve_image({reg}));
    write_png(out + "/plots/cosine_curve.png", curve_image({cosine}));

    // dissimilarity and flipped-affinity heatmaps
    auto wm = read_matrix_csv(out + "/W.csv", "group");
    DissimilarityMatrix w;
    w.w = wm;
    write_png(out + "/plots/dissimilarity_heatmap.png", heatmap_image(wm));
    write_png(out + "/plots/similarity_heatmap.png", heatmap_image(similarity_flip(w).w));

    // representation similarity across the pool on a shared recovered batch
    ModelPool pool = pipeline_pool(out);
    std::vector<PseudoTask> tasks = pipeline_recovered(out, pool);
    int per = std::min(8, tasks[0].images.n);
    TensorF batch(uninit, int(tasks.size()) * per, tasks[0].images.h, tasks[0].images.w, tasks[0].images.c);
    size_t stride = size_t(batch.h) * batch.w * batch.c;
    int bi = 0;
    for (const auto& t : tasks) {
        require(t.images.h == batch.h && t.images.w == batch.w && t.images.c == batch.c,
                "plot: recovered batches disagree on shape");
        for (int s = 0; s < per; ++s, ++bi)
            std::copy_n(t.images.v.begin() + size_t(s) * stride, stride, batch.v.begin() + size_t(bi) * stride);
    }
    std::vector<std::vector<Vec>> feats;
    for (const auto& rec : pool.records)
        feats.push_back(probe_features(make_probe(NetworkState{rec.arch, rec.params, Mode::Eval}), batch));
    std::vector<Vec> cka(pool.records.size(), Vec(pool.records.size(), 0.0));
    for (size_t i = 0; i < feats.size(); ++i)
        for (size_t j = i; j < feats.size(); ++j) cka[i][j] = cka[j][i] = cka_linear(feats[i], feats[j]);
    write_png(out + "/plots/cka_heatmap.png", heatmap_image(cka));

    // pool-size sweep, drawn only when some external aggregation produced it
    if (detail::file_exists(out + "/sweep.csv")) {
        auto sl = detail::csv_lines(read_file(out + "/sweep.csv"));
        require(sl.size() >= 2 && detail::split_csv_line(sl[0]) == std::vector<std::string>{"n_models", "accuracy"},
                "plot: sweep.csv must have header n_models,accuracy and data rows");
        Vec acc;
        for (size_t i = 1; i < sl.size(); ++i) {
            auto cells = detail::split_csv_line(sl[i]);
            require(cells.size() == 2, "plot: malformed sweep row");
            acc.push_back(detail::cfg_double(cells[1], "sweep.csv"));
        }
        write_png(out + "/plots/accuracy_vs_models.png", curve_image({acc}));
    }
}

}  // namespace dfml
