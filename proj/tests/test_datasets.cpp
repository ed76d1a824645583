#include <catch2/catch_amalgamated.hpp>

#include <dfml/data.hpp>

#include <filesystem>
#include <fstream>
#include <set>

using namespace dfml;

static SyntheticConfig small_cfg() {
    SyntheticConfig cfg;
    cfg.num_domains = 3;
    cfg.classes_per_domain = 4;
    cfg.samples_per_class = 24;
    cfg.image_size = 16;
    return cfg;
}

TEST_CASE("synthetic benchmark counts and labels") {
    SyntheticConfig cfg;
    cfg.num_domains = 2;
    cfg.classes_per_domain = 10;
    cfg.samples_per_class = 100;
    cfg.image_size = 32;
    cfg.noise_sigma = 0.05;
    ImageDataset ds = make_synthetic_domains(cfg, 7);
    REQUIRE(ds.images.n == 2000);
    REQUIRE(ds.num_classes() == 20);
    std::set<int> labels(ds.labels.begin(), ds.labels.end());
    REQUIRE(*labels.begin() == 0);
    REQUIRE(*labels.rbegin() == 19);
    for (const auto& idx : ds.by_class) REQUIRE(idx.size() == 100);
}

TEST_CASE("synthetic generation is seed deterministic") {
    auto a = make_synthetic_domains(small_cfg(), 41);
    auto b = make_synthetic_domains(small_cfg(), 41);
    REQUIRE(a.images.v == b.images.v);
    auto c = make_synthetic_domains(small_cfg(), 42);
    REQUIRE(a.images.v != c.images.v);
}

TEST_CASE("invalid synthetic config is rejected") {
    SyntheticConfig cfg = small_cfg();
    cfg.image_size = 4;
    REQUIRE_THROWS_AS(make_synthetic_domains(cfg, 1), RejectedInput);
    cfg = small_cfg();
    cfg.samples_per_class = 0;
    REQUIRE_THROWS_AS(make_synthetic_domains(cfg, 1), RejectedInput);
}

TEST_CASE("prototype channel means separate the domains") {
    SyntheticConfig cfg = small_cfg();
    ImageDataset ds = make_synthetic_domains(cfg, 9);

    // Grid mean of the rendered prototype must match 0.5 + shift: the
    // sinusoids contribute exactly zero over a full period lattice.
    std::vector<Vec> domain_mean(cfg.num_domains, Vec(cfg.channels, 0.0));
    for (int k = 0; k < ds.num_classes(); ++k) {
        const auto& p = ds.prototypes[k];
        TensorD img = prototype_image(p, ds.h, ds.w, ds.c);
        for (int ch = 0; ch < ds.c; ++ch) {
            double m = 0;
            for (int y = 0; y < ds.h; ++y)
                for (int x = 0; x < ds.w; ++x) m += img.at(0, y, x, ch);
            m /= double(ds.h) * ds.w;
            REQUIRE(m == Catch::Approx(0.5 + p.shift[ch]).margin(1e-12));
            domain_mean[p.domain][ch] += m / cfg.classes_per_domain;
        }
    }
    for (int a = 0; a < cfg.num_domains; ++a)
        for (int b = a + 1; b < cfg.num_domains; ++b) {
            double linf = 0;
            for (int ch = 0; ch < ds.c; ++ch)
                linf = std::max(linf, std::abs(domain_mean[a][ch] - domain_mean[b][ch]));
            REQUIRE(linf >= cfg.channel_shift - 1e-9);
        }
}

TEST_CASE("every class sits in exactly one split") {
    SyntheticConfig cfg;
    ImageDataset ds = make_synthetic_domains(cfg, 3);  // default 3x12 benchmark
    REQUIRE(ds.splits.meta_train.size() == 18);
    REQUIRE(ds.splits.meta_val.size() == 9);
    REQUIRE(ds.splits.meta_test.size() == 9);
    std::vector<int> count(ds.num_classes(), 0);
    for (int k : ds.splits.meta_train) ++count[k];
    for (int k : ds.splits.meta_val) ++count[k];
    for (int k : ds.splits.meta_test) ++count[k];
    for (int c : count) REQUIRE(c == 1);
}

TEST_CASE("episode shape, remapping and disjointness") {
    ImageDataset ds = make_synthetic_domains(small_cfg(), 5);
    EpisodeSpec spec{5, 1, 15};
    Episode ep = sample_episode(ds, ds.splits.meta_train, spec, 77);
    REQUIRE(ep.support_x.n == 5);
    REQUIRE(ep.query_x.n == 75);
    REQUIRE(ep.support_y.size() == 5);
    REQUIRE(ep.query_y.size() == 75);

    // bijection between chosen classes and 0..N-1
    std::set<int> chosen(ep.class_map.begin(), ep.class_map.end());
    REQUIRE(chosen.size() == 5);
    for (size_t i = 0; i < ep.support_y.size(); ++i) {
        int g = ep.class_map[ep.support_y[i]];
        REQUIRE(ds.labels[ep.support_idx[i]] == g);
    }
    for (size_t i = 0; i < ep.query_y.size(); ++i) {
        int g = ep.class_map[ep.query_y[i]];
        REQUIRE(ds.labels[ep.query_idx[i]] == g);
    }

    std::set<int> sup(ep.support_idx.begin(), ep.support_idx.end());
    for (int qi : ep.query_idx) REQUIRE(!sup.count(qi));

    Episode again = sample_episode(ds, ds.splits.meta_train, spec, 77);
    REQUIRE(again.support_x.v == ep.support_x.v);
    REQUIRE(again.query_x.v == ep.query_x.v);
    REQUIRE(again.class_map == ep.class_map);
}

TEST_CASE("meta-test episodes stay inside meta-test classes") {
    ImageDataset ds = make_synthetic_domains(small_cfg(), 5);
    std::set<int> test_classes(ds.splits.meta_test.begin(), ds.splits.meta_test.end());
    for (uint64_t s = 0; s < 20; ++s) {
        Episode ep = sample_episode(ds, ds.splits.meta_test, EpisodeSpec{3, 2, 2}, s);
        for (int g : ep.class_map) REQUIRE(test_classes.count(g));
    }
}

TEST_CASE("episode sampling rejects starved inputs") {
    ImageDataset ds = make_synthetic_domains(small_cfg(), 5);
    REQUIRE_THROWS_AS(sample_episode(ds, {0, 1}, EpisodeSpec{3, 1, 1}, 0), RejectedInput);
    REQUIRE_THROWS_AS(sample_episode(ds, ds.splits.meta_train, EpisodeSpec{3, 20, 10}, 0), RejectedInput);
}

TEST_CASE("directory ingestion matches what was written") {
    namespace fs = std::filesystem;
    fs::path root = fs::temp_directory_path() / "dfml_ingest_test";
    fs::remove_all(root);

    // byte-lattice pixel values survive the 8-bit quantization exactly
    SyntheticConfig cfg;
    cfg.num_domains = 1;
    cfg.classes_per_domain = 4;
    cfg.samples_per_class = 3;
    cfg.image_size = 16;
    cfg.noise_sigma = 0.0;
    ImageDataset src = make_synthetic_domains(cfg, 13);
    for (auto& v : src.images.v) v = float(int(v * 255.0f + 0.5f) / 255.0);

    std::vector<std::string> names = {"apple", "boat", "cat", "drum"};
    for (int k = 0; k < 4; ++k) {
        fs::create_directories(root / names[k]);
        for (int i = 0; i < 3; ++i)
            write_png((root / names[k] / ("img" + std::to_string(i) + ".png")).string(), src.images,
                      src.by_class[k][i]);
    }
    std::ofstream((root / "splits.json").string())
        << R"({"meta_train": ["apple", "boat"], "meta_val": ["cat"], "meta_test": ["drum"]})";

    ImageDataset got = load_image_directory(root.string(), (root / "splits.json").string());
    REQUIRE(got.images.n == 12);
    REQUIRE(got.h == 16);
    REQUIRE(got.samples_per_class == 3);
    REQUIRE(got.splits.meta_train == std::vector<int>{0, 1});
    REQUIRE(got.splits.meta_val == std::vector<int>{2});
    REQUIRE(got.splits.meta_test == std::vector<int>{3});
    for (size_t i = 0; i < got.images.v.size(); ++i)
        REQUIRE(got.images.v[i] == Catch::Approx(src.images.v[i]).margin(1e-6));

    std::ofstream((root / "bad.json").string()) << R"({"meta_train": ["apple"], "meta_val": ["cat"], "meta_test": ["drum"]})";
    REQUIRE_THROWS_AS(load_image_directory(root.string(), (root / "bad.json").string()), RejectedInput);
    fs::remove_all(root);
}
