#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <set>

#include "dfml/evaluation.hpp"
#include "helpers.hpp"

using namespace dfml;

namespace {

// 1 domain, 20 classes: splits give 5 meta-test classes for 5-way episodes.
const ImageDataset& eval_ds() {
    static ImageDataset ds = [] {
        SyntheticConfig cfg;
        cfg.num_domains = 1;
        cfg.classes_per_domain = 20;
        cfg.samples_per_class = 12;
        cfg.image_size = 8;
        cfg.channels = 2;
        return make_synthetic_domains(cfg, 77);
    }();
    return ds;
}

MetaState random_meta(int way, uint64_t seed, int filters = 8) {
    const auto& ds = eval_ds();
    MetaState m;
    Rng rng(seed);
    m.model = make_state(make_classifier(way, filters, 2, ds.h, ds.w, ds.c), rng);
    return m;
}

}  // namespace

TEST_CASE("zero adaptation steps reproduce a direct forward argmax", "[evaluation]") {
    const auto& ds = eval_ds();
    MetaState meta = random_meta(5, 11);
    EpisodeSpec spec{5, 1, 4};
    Episode ep = sample_episode(ds, ds.splits.meta_test, spec, 901);

    double acc = adapt_and_eval(meta, ep, 0.5, 0);

    auto cache = forward<double>(meta.model.arch, to_double(meta.model.params), convert<double>(ep.query_x),
                                 Mode::Train);
    const TensorD& logits = cache.out();
    int hits = 0;
    for (int b = 0; b < logits.n; ++b) {
        const double* row = logits.row(b, 0, 0);
        int best = 0;
        for (int k = 1; k < spec.way; ++k)
            if (row[k] > row[best]) best = k;
        if (best == ep.query_y[size_t(b)]) ++hits;
    }
    REQUIRE(acc == double(hits) / double(logits.n));

    SECTION("a zero learning rate is an equivalent no-op") {
        REQUIRE(adapt_and_eval(meta, ep, 0.0, 3) == acc);
    }
}

TEST_CASE("the stored learner is never modified by adaptation", "[evaluation]") {
    const auto& ds = eval_ds();
    MetaState meta = random_meta(5, 12);
    std::vector<float> before = meta.model.params;
    Episode ep = sample_episode(ds, ds.splits.meta_test, EpisodeSpec{5, 3, 4}, 902);
    adapt_and_eval(meta, ep, 5e-2, 6);
    REQUIRE(meta.model.params == before);
}

TEST_CASE("support adaptation lifts query accuracy on separable episodes", "[evaluation]") {
    const auto& ds = eval_ds();
    MetaState meta = random_meta(5, 13);
    EpisodeSpec spec{5, 5, 4};
    double zero = 0, adapted = 0;
    const int n = 10;
    for (int i = 0; i < n; ++i) {
        Episode ep = sample_episode(ds, ds.splits.meta_test, spec, derive_seed(640, "lift", uint64_t(i)));
        zero += adapt_and_eval(meta, ep, 0.2, 0) / n;
        adapted += adapt_and_eval(meta, ep, 0.2, 80) / n;
    }
    INFO("zero-shot " << zero << " adapted " << adapted);
    REQUIRE(adapted >= 0.4);
    REQUIRE(adapted >= zero + 0.15);
}

TEST_CASE("a random learner scores at chance level", "[evaluation]") {
    const auto& ds = eval_ds();
    MetaState meta = random_meta(5, 17);
    auto rep = evaluate(meta, ds, ds.splits.meta_test, EpisodeSpec{5, 1, 8}, 100, 345, 1e-2, 0);
    REQUIRE(rep.num_episodes == 100);
    REQUIRE(rep.accuracies.size() == 100);
    double sd = rep.ci95 * std::sqrt(100.0) / 1.96;
    INFO("mean " << rep.mean_accuracy << " sd " << sd);
    // balanced queries can pin every episode at exactly 0.2, hence the floor
    REQUIRE(std::abs(rep.mean_accuracy - 0.2) <= 3.0 * sd / std::sqrt(100.0) + 1e-12);
}

TEST_CASE("interval arithmetic", "[evaluation]") {
    SECTION("constant accuracies give a zero interval") {
        REQUIRE(ci95_half_width(Vec{0.5, 0.5, 0.5, 0.5}) == 0.0);
        REQUIRE(ci95_half_width(Vec{0.7}) == 0.0);
    }
    SECTION("two-point closed form") {
        // sample std of {0.4, 0.6} is 0.1*sqrt(2); divided by sqrt(2) leaves 0.1
        REQUIRE_THAT(ci95_half_width(Vec{0.4, 0.6}), Catch::Matchers::WithinAbs(0.196, 1e-12));
    }
    SECTION("report fields agree with a direct recomputation") {
        const auto& ds = eval_ds();
        MetaState meta = random_meta(5, 19);
        auto rep = evaluate(meta, ds, ds.splits.meta_test, EpisodeSpec{5, 1, 3}, 12, 77, 5e-2, 2);
        double mean = 0;
        for (double a : rep.accuracies) mean += a / 12.0;
        REQUIRE_THAT(rep.mean_accuracy, Catch::Matchers::WithinAbs(mean, 1e-15));
        REQUIRE(rep.ci95 == ci95_half_width(rep.accuracies));
        REQUIRE(rep.seed == 77);
        REQUIRE(rep.spec.way == 5);
    }
}

TEST_CASE("evaluation is reproducible from its seed", "[evaluation]") {
    const auto& ds = eval_ds();
    MetaState meta = random_meta(5, 23);
    auto a = evaluate(meta, ds, ds.splits.meta_test, EpisodeSpec{5, 1, 4}, 8, 4242, 5e-2, 3);
    auto b = evaluate(meta, ds, ds.splits.meta_test, EpisodeSpec{5, 1, 4}, 8, 4242, 5e-2, 3);
    REQUIRE(a.accuracies == b.accuracies);
    REQUIRE(a.mean_accuracy == b.mean_accuracy);
    REQUIRE(a.ci95 == b.ci95);
}

TEST_CASE("meta-test episodes stay inside the held-out split", "[evaluation]") {
    const auto& ds = eval_ds();
    std::set<int> test(ds.splits.meta_test.begin(), ds.splits.meta_test.end());
    std::set<int> seen(ds.splits.meta_train.begin(), ds.splits.meta_train.end());
    seen.insert(ds.splits.meta_val.begin(), ds.splits.meta_val.end());
    for (uint64_t s = 0; s < 20; ++s) {
        Episode ep = sample_episode(ds, ds.splits.meta_test, EpisodeSpec{5, 1, 2}, derive_seed(88, "containment", s));
        for (int g : ep.class_map) {
            REQUIRE(test.count(g) == 1);
            REQUIRE(seen.count(g) == 0);
        }
    }
}

TEST_CASE("non-finite parameters raise a numeric failure", "[evaluation]") {
    const auto& ds = eval_ds();
    MetaState meta = random_meta(5, 29);
    // a head parameter: early-layer poison would be flushed by the relu
    meta.model.params.back() = std::numeric_limits<float>::quiet_NaN();
    Episode ep = sample_episode(ds, ds.splits.meta_test, EpisodeSpec{5, 1, 2}, 903);
    REQUIRE_THROWS_AS(adapt_and_eval(meta, ep, 1e-2, 2), NumericFailure);
    REQUIRE_THROWS_AS(adapt_and_eval(meta, ep, 1e-2, 0), NumericFailure);
}

TEST_CASE("accuracy gain bookkeeping", "[evaluation][ag]") {
    const auto& ds = eval_ds();
    PretrainHyper hyper;
    hyper.epochs = 2;
    hyper.batch = 16;
    auto cls = [&](const std::vector<int>& classes, uint64_t seed, const std::string& id) {
        auto arch = make_classifier(int(classes.size()), 4, 1, ds.h, ds.w, ds.c);
        return pretrain_model(ds, classes, arch, hyper, seed, id);
    };
    const auto& tr = ds.splits.meta_train;
    PretrainedModelRecord basic = cls({tr[0], tr[1], tr[2]}, 501, "basic");
    ModelPool aux;
    aux.records.push_back(cls({tr[0], tr[1], tr[2]}, 502, "aux-same"));
    aux.records.push_back(cls({tr[3], tr[4], tr[5]}, 503, "aux-disjoint"));

    AgConfig cfg;
    cfg.epochs = 4;
    cfg.per_class = 4;
    cfg.recover_steps = 3;
    cfg.gen_latent = 16;
    cfg.gen_nf = 4;
    cfg.way = 4;
    cfg.meta_filters = 4;
    cfg.episode = ReplaySpec{3, 1, 2};
    cfg.inner_steps = 1;
    cfg.second_order = false;
    cfg.eval_spec = EpisodeSpec{4, 1, 3};
    cfg.eval_episodes = 6;
    cfg.adapt_steps = 2;

    auto rows = accuracy_gain(basic, aux, ds, cfg, 9000);
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0].aux_id == "aux-same");
    REQUIRE(rows[1].aux_id == "aux-disjoint");
    REQUIRE(rows[0].overlap_ratio == 1.0);
    REQUIRE(rows[1].overlap_ratio == 0.0);
    REQUIRE(rows[0].arch == "conv-w4");
    // the basic run happens once; every row references the same baseline
    REQUIRE(rows[0].p_basic == rows[1].p_basic);
    for (const auto& r : rows) {
        REQUIRE(r.ag == r.p_joint - r.p_basic);
        REQUIRE(r.p_basic >= 0.0);
        REQUIRE(r.p_joint <= 1.0);
    }

    SECTION("repeat runs reproduce every field") {
        auto again = accuracy_gain(basic, aux, ds, cfg, 9000);
        for (size_t i = 0; i < rows.size(); ++i) {
            REQUIRE(again[i].p_basic == rows[i].p_basic);
            REQUIRE(again[i].p_joint == rows[i].p_joint);
            REQUIRE(again[i].ag == rows[i].ag);
        }
    }

    SECTION("csv layout") {
        auto csv = ag_csv(rows);
        REQUIRE(csv.rfind("aux_id,overlap_ratio,arch,ag\n", 0) == 0);
        REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 3);
        REQUIRE(csv.find("aux-disjoint,0,conv-w4,") != std::string::npos);
    }

    SECTION("failures carry the auxiliary id") {
        ModelPool bad = aux;
        bad.records[1].params[0] = std::numeric_limits<float>::quiet_NaN();
        REQUIRE_THROWS_WITH(accuracy_gain(basic, bad, ds, cfg, 9000),
                            Catch::Matchers::ContainsSubstring("aux-disjoint"));
    }
}
