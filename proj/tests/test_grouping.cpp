#include <catch2/catch_amalgamated.hpp>

#include <dfml/grouping.hpp>

#include "helpers.hpp"

using namespace dfml;
using namespace testutil;
using Catch::Matchers::ContainsSubstring;

namespace {

ProbeSpec random_probe(Rng& rng, int filters = 4, int h = 8, int w = 8, int c = 2) {
    NetworkState clf = make_state(make_classifier(5, filters, 1, h, w, c), rng, Mode::Eval);
    // nontrivial running stats so eval-mode normalization actually bites
    for (int li : clf.arch.bn_layer_indices()) {
        auto s = bn_slices(clf.arch.layers[size_t(li)]);
        for (int ch = 0; ch < s.c; ++ch) {
            clf.params[s.running_mean + size_t(ch)] = float(rng.uniform(-0.2, 0.2));
            clf.params[s.running_var + size_t(ch)] = float(rng.uniform(0.5, 1.5));
        }
    }
    return make_probe(clf);
}

std::vector<int> round_robin(int n, int way) {
    std::vector<int> y(size_t(n), 0);
    for (int i = 0; i < n; ++i) y[size_t(i)] = i % way;
    return y;
}

DissimilarityMatrix pinned_w4() {
    DissimilarityMatrix m;
    m.w.assign(4, Vec(4, 0.0));
    auto set = [&](int i, int j, double v) { m.w[size_t(i)][size_t(j)] = m.w[size_t(j)][size_t(i)] = v; };
    set(0, 2, 0.95);
    set(1, 3, 0.95);
    set(0, 3, 0.85);
    set(1, 2, 0.85);
    set(0, 1, 0.1);
    set(2, 3, 0.1);
    return m;
}

// two blocks, within-block entries in [0.75,0.95], cross in [0.05,0.25]
struct Planted {
    DissimilarityMatrix w;
    std::vector<int> labels;
};

Planted planted_instance(Rng& rng, int n, int n0) {
    Planted p;
    p.labels.assign(size_t(n), 1);
    for (int i = 0; i < n0; ++i) p.labels[size_t(i)] = 0;
    rng.shuffle(p.labels);
    p.w.w.assign(size_t(n), Vec(size_t(n), 0.0));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double v = p.labels[size_t(i)] == p.labels[size_t(j)] ? rng.uniform(0.75, 0.95) : rng.uniform(0.05, 0.25);
            p.w.w[size_t(i)][size_t(j)] = p.w.w[size_t(j)][size_t(i)] = v;
        }
    return p;
}

double mean_intra(const DissimilarityMatrix& w, const std::vector<int>& groups) {
    double s = 0;
    int pairs = 0;
    for (int i = 0; i < w.n(); ++i)
        for (int j = i + 1; j < w.n(); ++j)
            if (groups[size_t(i)] == groups[size_t(j)]) {
                s += w.w[size_t(i)][size_t(j)];
                ++pairs;
            }
    return pairs ? s / pairs : 0.0;
}

}  // namespace

TEST_CASE("fim diagonal matches the per-sample squared-gradient oracle") {
    Rng rng(401);
    ProbeSpec probe = random_probe(rng);
    REQUIRE(probe.head_dim == 4 * 4 * 4);

    TensorF images = random_batch(rng, 12, 8, 8, 2);
    std::vector<int> labels = round_robin(12, 3);

    NetworkState comp;
    TaskEmbedding emb = fim_diagonal(probe, images, labels, &comp);
    REQUIRE(emb.fim_diag.size() == probe.net.arch.param_count());
    REQUIRE(comp.arch.param_count() > probe.net.arch.param_count());  // head excluded

    // brute force: one forward/backward per image through the composite net
    Vec theta = to_double(comp.params);
    Vec oracle(emb.fim_diag.size(), 0.0);
    for (int j = 0; j < images.n; ++j) {
        TensorD one(1, images.h, images.w, images.c);
        for (size_t k = 0; k < one.size(); ++k) one.v[k] = double(images.v[size_t(j) * one.size() + k]);
        Objective obj = make_ce_objective(comp.arch, Mode::Eval, one, {labels[j]});
        Vec g(theta.size());
        obj(theta, &g);
        for (size_t k = 0; k < oracle.size(); ++k) oracle[k] += g[k] * g[k] / double(images.n);
    }

    double worst_rel = 0;
    int live = 0;
    for (size_t k = 0; k < oracle.size(); ++k) {
        REQUIRE(emb.fim_diag[k] >= 0.0);
        double scale = std::max(std::abs(oracle[k]), std::abs(emb.fim_diag[k]));
        if (scale == 0.0) continue;
        ++live;
        worst_rel = std::max(worst_rel, std::abs(oracle[k] - emb.fim_diag[k]) / scale);
    }
    REQUIRE(live > int(oracle.size()) / 2);
    REQUIRE(worst_rel <= 1e-10);
}

TEST_CASE("parameters with no influence on any logit embed to exactly zero") {
    ArchSpec a;
    a.in_h = 6;
    a.in_w = 6;
    a.in_c = 1;
    a.layers = {conv(2, 3, 1, 1), relu()};
    a.finalize();
    Rng rng(402);
    NetworkState bb = make_state(a, rng, Mode::Eval);
    bb.params[18 + 1] = -1000.0f;  // bias of channel 1; relu kills it everywhere
    ProbeSpec probe{bb, a.num_outputs};

    TensorF images = random_batch(rng, 9, 6, 6, 1);
    TaskEmbedding emb = fim_diagonal(probe, images, round_robin(9, 3));

    for (size_t k = 9; k < 18; ++k) REQUIRE(emb.fim_diag[k] == 0.0);  // channel-1 taps
    REQUIRE(emb.fim_diag[19] == 0.0);                                 // channel-1 bias
    double alive = 0;
    for (size_t k = 0; k < 9; ++k) alive += emb.fim_diag[k];
    REQUIRE(alive > 0.0);
}

TEST_CASE("probe features demand a frozen eval-mode probe") {
    Rng rng(403);
    ProbeSpec probe = random_probe(rng);
    probe.net.mode = Mode::Train;
    REQUIRE_THROWS_AS(probe_features(probe, random_batch(rng, 4, 8, 8, 2)), RejectedInput);
}

TEST_CASE("dissimilarity matrix properties") {
    Rng rng(404);
    const int n = 6, d = 20;
    std::vector<TaskEmbedding> embs(n);
    for (auto& e : embs) {
        e.fim_diag.resize(d);
        for (auto& x : e.fim_diag) x = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    }
    embs[3] = embs[1];  // identical pair

    DissimilarityMatrix w = dissimilarity_matrix(embs);
    for (int i = 0; i < n; ++i) {
        REQUIRE(w.w[size_t(i)][size_t(i)] == 0.0);
        for (int j = 0; j < n; ++j) {
            REQUIRE(w.w[size_t(i)][size_t(j)] == w.w[size_t(j)][size_t(i)]);
            REQUIRE(w.w[size_t(i)][size_t(j)] >= 0.0);
            REQUIRE(w.w[size_t(i)][size_t(j)] <= 1.0);
        }
    }
    REQUIRE(w.w[1][3] == 0.0);

    SECTION("disjoint support is maximally dissimilar") {
        TaskEmbedding a, b;
        a.fim_diag = {1.0, 0.0};
        b.fim_diag = {0.0, 1.0};
        REQUIRE(dissimilarity_matrix({a, b}).w[0][1] == 1.0);
    }

    SECTION("uniform positive scaling leaves the matrix unchanged") {
        auto scaled = embs;
        for (auto& e : scaled)
            for (auto& x : e.fim_diag) x *= 7.3;
        DissimilarityMatrix w2 = dissimilarity_matrix(scaled);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                REQUIRE(w2.w[size_t(i)][size_t(j)] == Catch::Approx(w.w[size_t(i)][size_t(j)]).margin(1e-9));
    }

    SECTION("an all-zero embedding is rejected by index") {
        embs[2].fim_diag.assign(d, 0.0);
        REQUIRE_THROWS_WITH(dissimilarity_matrix(embs), ContainsSubstring("2"));
    }

    SECTION("ragged lengths are rejected") {
        embs[4].fim_diag.resize(d + 1, 0.5);
        REQUIRE_THROWS_AS(dissimilarity_matrix(embs), RejectedInput);
    }
}

TEST_CASE("spectral decomposition invariants") {
    Rng rng(405);
    auto inst = planted_instance(rng, 7, 3);
    auto dec = spectral_decompose(inst.w, 2);

    for (int i = 0; i < 7; ++i) {
        double row = 0;
        for (int j = 0; j < 7; ++j) row += dec.laplacian[size_t(i)][size_t(j)];
        REQUIRE(row == Catch::Approx(0.0).margin(1e-12));  // L * ones = 0
        REQUIRE(dec.embedding[size_t(i)].size() == 2);
    }
    // fully connected affinity: eigenvalue 0 is simple, its eigenvector
    // constant; the sign convention makes it positive
    for (int i = 0; i < 7; ++i) {
        REQUIRE(dec.embedding[size_t(i)][0] > 0.0);
        REQUIRE(dec.embedding[size_t(i)][0] == Catch::Approx(dec.embedding[0][0]).margin(1e-8));
    }
}

TEST_CASE("the pinned four-model instance groups opposite corners") {
    DissimilarityMatrix w = pinned_w4();
    std::vector<int> want = {0, 1, 0, 1};

    REQUIRE(canonical_groups(oracle_group(w, 2).group_of) == want);
    REQUIRE(canonical_groups(spectral_group(w, 2, 5).group_of) == want);

    SECTION("one group is degenerate") {
        auto g = spectral_group(w, 1, 5);
        REQUIRE(g.group_of == std::vector<int>{0, 0, 0, 0});
    }
    SECTION("group count is bounded by the pool") {
        REQUIRE_THROWS_AS(spectral_group(w, 5, 1), RejectedInput);
        REQUIRE_THROWS_AS(oracle_group(w, 5), RejectedInput);
        REQUIRE_THROWS_AS(oracle_group(w, 0), RejectedInput);
    }
}

TEST_CASE("oracle enumeration order settles degenerate ties") {
    DissimilarityMatrix z;
    z.w.assign(4, Vec(4, 0.0));
    // first restricted growth string with two classes is 0001
    REQUIRE(oracle_group(z, 2).group_of == std::vector<int>{0, 0, 0, 1});
    REQUIRE(oracle_group(z, 4).group_of == std::vector<int>{0, 1, 2, 3});

    DissimilarityMatrix big;
    big.w.assign(13, Vec(13, 0.0));
    REQUIRE_THROWS_AS(oracle_group(big, 2), RejectedInput);
}

TEST_CASE("uniform dissimilarity is handled deterministically") {
    DissimilarityMatrix w;
    w.w.assign(6, Vec(6, 0.4));
    for (int i = 0; i < 6; ++i) w.w[size_t(i)][size_t(i)] = 0.0;
    auto a = spectral_group(w, 3, 99);
    auto b = spectral_group(w, 3, 99);
    REQUIRE(a.group_of == b.group_of);
    for (int g : a.group_of) {
        REQUIRE(g >= 0);
        REQUIRE(g < 3);
    }
}

TEST_CASE("spectral grouping agrees with the oracle on planted blocks") {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(7000 + seed);
        int n = rng.uniform_int(4, 10);
        int n0 = rng.uniform_int(2, n - 2);
        auto inst = planted_instance(rng, n, n0);

        auto spec = canonical_groups(spectral_group(inst.w, 2, seed * 31 + 7).group_of);
        auto oracle = canonical_groups(oracle_group(inst.w, 2).group_of);
        INFO("seed " << seed << " n " << n << " n0 " << n0);
        REQUIRE(spec == oracle);
        REQUIRE(spec == canonical_groups(inst.labels));
    }
}

TEST_CASE("permuting the pool permutes the groups") {
    Rng rng(406);
    auto inst = planted_instance(rng, 8, 4);
    auto base = canonical_groups(spectral_group(inst.w, 2, 17).group_of);

    std::vector<int> perm(8);
    for (int i = 0; i < 8; ++i) perm[size_t(i)] = i;
    rng.shuffle(perm);
    DissimilarityMatrix wp;
    wp.w.assign(8, Vec(8, 0.0));
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) wp.w[size_t(perm[size_t(i)])][size_t(perm[size_t(j)])] = inst.w.w[size_t(i)][size_t(j)];

    auto permuted = spectral_group(wp, 2, 17);
    std::vector<int> pulled(8);
    for (int i = 0; i < 8; ++i) pulled[size_t(i)] = permuted.group_of[size_t(perm[size_t(i)])];
    REQUIRE(canonical_groups(pulled) == base);
}

TEST_CASE("flipping the matrix flips grouping from dissimilar to similar") {
    Rng rng(407);
    auto inst = planted_instance(rng, 6, 3);
    auto dis = spectral_group(inst.w, 2, 3);
    auto sim = spectral_group(similarity_flip(inst.w), 2, 3);

    REQUIRE(canonical_groups(dis.group_of) == canonical_groups(inst.labels));
    REQUIRE(canonical_groups(sim.group_of) != canonical_groups(dis.group_of));
    // the flipped path collects low-dissimilarity pairs inside groups
    REQUIRE(mean_intra(inst.w, sim.group_of) < mean_intra(inst.w, dis.group_of) - 0.3);
}

TEST_CASE("linear cka invariances") {
    Rng rng(408);
    const int n = 10, d = 4;
    std::vector<Vec> a(n, Vec(d)), b(n, Vec(d));
    for (auto& row : a)
        for (auto& x : row) x = rng.normal();
    for (auto& row : b)
        for (auto& x : row) x = rng.normal();

    REQUIRE(cka_linear(a, a) == Catch::Approx(1.0).margin(1e-12));

    std::vector<Vec> scaled = a;
    for (auto& row : scaled)
        for (auto& x : row) x *= 3.0;
    REQUIRE(cka_linear(a, scaled) == Catch::Approx(1.0).margin(1e-12));

    // right-multiplying by an orthogonal matrix rotates features in place
    Eigen::MatrixXd rnd(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) rnd(i, j) = rng.normal();
    Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(rnd).householderQ();
    std::vector<Vec> rotated(n, Vec(d, 0.0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < d; ++k) rotated[size_t(i)][size_t(j)] += a[size_t(i)][size_t(k)] * q(k, j);
    REQUIRE(cka_linear(a, rotated) == Catch::Approx(1.0).margin(1e-10));

    double ab = cka_linear(a, b);
    REQUIRE(ab >= 0.0);
    REQUIRE(ab < 1.0);
    REQUIRE(cka_linear(b, a) == Catch::Approx(ab).margin(1e-12));

    SECTION("zero variance is rejected") {
        std::vector<Vec> flat(n, Vec(d, 2.5));
        REQUIRE_THROWS_AS(cka_linear(a, flat), RejectedInput);
        REQUIRE_THROWS_AS(cka_linear(a, {Vec{1.0}}), RejectedInput);
    }
}

TEST_CASE("degenerate head fit raises a numeric failure") {
    std::vector<Vec> feats(4, Vec(3, 0.0));
    feats[0][0] = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_AS(fit_linear_head(feats, {0, 1, 0, 1}, 2), NumericFailure);
}
