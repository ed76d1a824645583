// Seeded baseline measurements used to pin the acceptance thresholds before
// freezing them. Each subcommand prints raw numbers plus wall time; nothing
// here asserts.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

#include "tests/acceptance/desk.hpp"

using namespace desk;

static void run_c6(uint64_t seed) {
    Stopwatch sw;
    ImageDataset ds = desk_dataset(seed);
    ModelPool pool = desk_pool(ds, 8, seed);
    std::printf("pool built at %.1fs\n", sw.seconds());
    for (const auto& rec : pool.records) {
        std::vector<InversionLoss> hist;
        PseudoTask task = desk_recover(rec, seed, &hist);
        double acc = teacher_accuracy(rec, task);
        std::printf("%s val=%.3f ce0=%.4f ceT=%.4f ratio=%.3f acc=%.3f t=%.1fs\n", rec.id.c_str(),
                    rec.val_accuracy, hist.front().l_ce, hist.back().l_ce, hist.back().l_ce / hist.front().l_ce,
                    acc, sw.seconds());
    }
}

static void run_c7(uint64_t seed, double beta, int epochs) {
    Stopwatch sw;
    ImageDataset ds = desk_dataset(seed);
    ModelPool pool = desk_pool(ds, 8, seed);
    PretrainedModelRecord probe = desk_probe(seed);
    GroupAssignment groups = desk_groups(pool, probe, 2, seed);
    std::printf("setup at %.1fs groups:", sw.seconds());
    for (int g : groups.group_of) std::printf(" %d", g);
    std::printf("\n");

    TrainConfig cfg = desk_train_config();
    cfg.epochs = epochs;
    cfg.beta = beta;
    auto [igr_state, igr_diag] = train(pool, groups, cfg, seed);
    std::printf("igr done at %.1fs\n", sw.seconds());
    cfg.regularization_on = false;
    auto [erm_state, erm_diag] = train(pool, groups, cfg, seed);
    std::printf("erm done at %.1fs\n", sw.seconds());

    auto tail_mean = [](const Diagnostics& d, int k, bool cosine) {
        double s = 0;
        int n = std::min<int>(k, int(d.size()));
        for (int i = 0; i < n; ++i) s += (cosine ? d[d.size() - 1 - i].mean_cosine : d[d.size() - 1 - i].regularizer);
        return s / n;
    };
    std::printf("final    reg igr=%.6g erm=%.6g | cos igr=%.4f erm=%.4f\n", igr_diag.back().regularizer,
                erm_diag.back().regularizer, igr_diag.back().mean_cosine, erm_diag.back().mean_cosine);
    std::printf("tail10   reg igr=%.6g erm=%.6g | cos igr=%.4f erm=%.4f\n", tail_mean(igr_diag, 10, false),
                tail_mean(erm_diag, 10, false), tail_mean(igr_diag, 10, true), tail_mean(erm_diag, 10, true));
    for (size_t e = 0; e < igr_diag.size(); e += 10)
        std::printf("  e%03zu reg %.6g vs %.6g cos %.4f vs %.4f\n", e, igr_diag[e].regularizer,
                    erm_diag[e].regularizer, igr_diag[e].mean_cosine, erm_diag[e].mean_cosine);
}

static void run_c8(uint64_t seed, int epochs, int episodes) {
    Stopwatch sw;
    ImageDataset ds = desk_dataset(seed);
    ModelPool pool = desk_pool(ds, kC8Teachers, seed);
    PretrainedModelRecord probe = desk_probe(seed);
    GroupAssignment groups = desk_groups(pool, probe, kC8Groups, seed);
    std::printf("seed %llu setup %.1fs groups:", (unsigned long long)seed, sw.seconds());
    for (int g : groups.group_of) std::printf(" %d", g);
    std::printf("\n");

    struct V {
        const char* name;
        bool grp, reg;
    };
    const V variants[4] = {{"vanilla", false, false}, {"group", true, false}, {"igr", false, true},
                           {"full", true, true}};
    for (const auto& v : variants) {
        TrainConfig cfg = desk_train_config();
        cfg.epochs = epochs;
        cfg.grouping_on = v.grp;
        cfg.regularization_on = v.reg;
        auto [state, diag] = train(pool, v.grp ? groups : GroupAssignment{}, cfg, seed);
        double acc = desk_eval(state, ds, episodes, seed);
        std::printf("  %-8s acc=%.4f (t=%.1fs)\n", v.name, acc, sw.seconds());
    }
}

static void run_c9(uint64_t seed) {
    Stopwatch sw;
    ImageDataset ds = desk_dataset(seed);
    AgBuckets buckets = desk_ag_buckets(ds, seed);
    std::printf("buckets built %.1fs\n", sw.seconds());
    AgConfig cfg = desk_ag_config();
    auto full_rows = accuracy_gain(buckets.basic, buckets.full, ds, cfg, derive_seed(seed, "ag"));
    std::printf("full bucket done %.1fs\n", sw.seconds());
    auto part_rows = accuracy_gain(buckets.basic, buckets.partial, ds, cfg, derive_seed(seed, "ag"));
    for (const auto& r : full_rows)
        std::printf("  full %s ov=%.1f p_basic=%.4f p_joint=%.4f ag=%+.4f\n", r.aux_id.c_str(), r.overlap_ratio,
                    r.p_basic, r.p_joint, r.ag);
    for (const auto& r : part_rows)
        std::printf("  part %s ov=%.1f p_basic=%.4f p_joint=%.4f ag=%+.4f\n", r.aux_id.c_str(), r.overlap_ratio,
                    r.p_basic, r.p_joint, r.ag);
    std::printf("mean ag: full=%.4f partial=%.4f (t=%.1fs)\n", mean_ag(full_rows), mean_ag(part_rows),
                sw.seconds());
}

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: calibrate {c6|c7|c8|c9} [seed] [extra...]\n");
        return 1;
    }
    std::string cmd = argv[1];
    uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;
    try {
        if (cmd == "c6") {
            run_c6(seed);
        } else if (cmd == "c7") {
            double beta = argc > 3 ? std::atof(argv[3]) : 1e-2;
            int epochs = argc > 4 ? std::atoi(argv[4]) : 100;
            run_c7(seed, beta, epochs);
        } else if (cmd == "c8") {
            int epochs = argc > 3 ? std::atoi(argv[3]) : kC8Epochs;
            int episodes = argc > 4 ? std::atoi(argv[4]) : kC8Episodes;
            run_c8(seed, epochs, episodes);
        } else if (cmd == "c9") {
            run_c9(seed);
        } else {
            std::fprintf(stderr, "unknown subcommand %s\n", cmd.c_str());
            return 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "calibrate: %s\n", e.what());
        return 1;
    }
    return 0;
}
