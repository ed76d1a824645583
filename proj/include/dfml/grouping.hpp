#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "inversion.hpp"
#include "net.hpp"

namespace dfml {

// Shared frozen feature extractor. Its parameters (including BN running
// stats) are never updated by any pipeline stage; evaluation mode keeps
// per-sample features independent of batch composition.
struct ProbeSpec {
    NetworkState net;
    int head_dim = 0;
};

// Strips the trailing dense head off a trained classifier. Canonical
// parameter order makes the backbone a prefix slice.
inline ProbeSpec make_probe(const NetworkState& classifier) {
    require(!classifier.arch.layers.empty() && classifier.arch.layers.back().type == LayerType::Dense,
            "make_probe: classifier must end in a dense head");
    ProbeSpec p;
    p.net.arch = classifier.arch;
    p.net.arch.layers.pop_back();
    p.net.arch.finalize();
    p.net.params.assign(classifier.params.begin(), classifier.params.begin() + long(p.net.arch.param_count()));
    p.net.mode = Mode::Eval;
    p.head_dim = p.net.arch.num_outputs;
    return p;
}

// NHWC-flattened probe features, one row per image.
inline std::vector<Vec> probe_features(const ProbeSpec& probe, const TensorF& images) {
    require(probe.net.mode == Mode::Eval, "probe_features: probe must be frozen in eval mode");
    Vec theta = to_double(probe.net.params);
    auto cache = forward<double>(probe.net.arch, theta, convert<double>(images), Mode::Eval);
    const TensorD& out = cache.out();
    size_t d = out.size() / size_t(out.n);
    std::vector<Vec> rows(size_t(out.n), Vec(d));
    for (int b = 0; b < out.n; ++b)
        for (size_t k = 0; k < d; ++k) rows[size_t(b)][k] = out.v[size_t(b) * d + k];
    return rows;
}

// Ridge-regularized softmax regression on fixed features, deterministic
// zero init so no RNG enters the embedding.
struct HeadFit {
    std::vector<float> weight;  // [way][dim]
    std::vector<float> bias;    // [way]
    double loss = 0;
};

inline HeadFit fit_linear_head(const std::vector<Vec>& feats, const std::vector<int>& labels, int way,
                               double ridge = 1e-3, int iters = 100, double lr = 0.05) {
    require(!feats.empty() && feats.size() == labels.size(), "head fit: feature/label count mismatch");
    const size_t d = feats[0].size();
    const size_t n = feats.size();
    for (int y : labels) require(y >= 0 && y < way, "head fit: label out of range");

    Vec w(size_t(way) * d, 0.0), b(size_t(way), 0.0);
    Adam opt_w(lr), opt_b(lr);
    double loss = 0;
    for (int it = 0; it <= iters; ++it) {
        Vec gw(w.size(), 0.0), gb(b.size(), 0.0);
        loss = 0;
        for (size_t j = 0; j < n; ++j) {
            Vec logit(size_t(way), 0.0);
            for (int k = 0; k < way; ++k) logit[size_t(k)] = dot(std::span(w).subspan(size_t(k) * d, d), feats[j]) + b[size_t(k)];
            double m = *std::max_element(logit.begin(), logit.end());
            double z = 0;
            for (double l : logit) z += std::exp(l - m);
            double lse = m + std::log(z);
            loss += (lse - logit[size_t(labels[j])]) / double(n);
            for (int k = 0; k < way; ++k) {
                double p = std::exp(logit[size_t(k)] - lse) / double(n) - (k == labels[j] ? 1.0 / double(n) : 0.0);
                gb[size_t(k)] += p;
                for (size_t q = 0; q < d; ++q) gw[size_t(k) * d + q] += p * feats[j][q];
            }
        }
        for (size_t k = 0; k < w.size(); ++k) {
            loss += 0.5 * ridge * w[k] * w[k];  // ridge on weights only
            gw[k] += ridge * w[k];
        }
        if (!std::isfinite(loss)) throw NumericFailure("head fit: non-finite loss", "head", it);
        if (it == iters) break;
        opt_w.step(w, gw);
        opt_b.step(b, gb);
    }

    HeadFit out;
    out.weight.assign(w.begin(), w.end());
    out.bias.assign(b.begin(), b.end());
    out.loss = loss;
    return out;
}

// Diagonal of the empirical Fisher information over the probe backbone:
// entry k = (1/N) sum_j (d log P(y_j|x_j) / d phi_k)^2, with the fitted
// head's parameters excluded from the embedding.
struct TaskEmbedding {
    Vec fim_diag;
};

inline TaskEmbedding fim_diagonal(const ProbeSpec& probe, const TensorF& images, const std::vector<int>& labels,
                                  NetworkState* composite_out = nullptr) {
    require(images.n > 0 && size_t(images.n) == labels.size(), "fim: image/label count mismatch");
    int way = 1 + *std::max_element(labels.begin(), labels.end());

    auto feats = probe_features(probe, images);
    HeadFit head = fit_linear_head(feats, labels, way);

    NetworkState comp;
    comp.arch = probe.net.arch;
    comp.arch.layers.push_back(dense(way));
    comp.arch.finalize();
    comp.mode = Mode::Eval;
    comp.params = probe.net.params;
    comp.params.insert(comp.params.end(), head.weight.begin(), head.weight.end());
    comp.params.insert(comp.params.end(), head.bias.begin(), head.bias.end());

    const size_t nb = probe.net.arch.param_count();
    TaskEmbedding emb;
    emb.fim_diag.assign(nb, 0.0);
    auto rows = per_sample_loglik_grads(comp, images, labels);
    for (const Vec& g : rows)
        for (size_t k = 0; k < nb; ++k) emb.fim_diag[k] += g[k] * g[k] / double(rows.size());
    if (composite_out) *composite_out = std::move(comp);
    return emb;
}

inline TaskEmbedding fim_diagonal(const ProbeSpec& probe, const PseudoTask& task) {
    return fim_diagonal(probe, task.images, task.labels);
}

// Pairwise dissimilarity W_ij = 1 - cos(F_i/(F_i+F_j+eps), F_j/(F_i+F_j+eps)),
// elementwise division. Nonnegative embeddings keep the cosine in [0,1].
struct DissimilarityMatrix {
    std::vector<Vec> w;
    int n() const { return int(w.size()); }
};

inline DissimilarityMatrix dissimilarity_matrix(const std::vector<TaskEmbedding>& embeddings) {
    const size_t n = embeddings.size();
    require(n >= 1, "dissimilarity: no embeddings");
    const size_t d = embeddings[0].fim_diag.size();
    constexpr double kEps = 1e-12;
    for (size_t i = 0; i < n; ++i) {
        const Vec& f = embeddings[i].fim_diag;
        require(f.size() == d, "dissimilarity: embedding length mismatch");
        bool live = false;
        for (double x : f) {
            require(x >= 0.0, "dissimilarity: negative embedding entry");
            live = live || x > 0.0;
        }
        require(live, "dissimilarity: embedding " + std::to_string(i) + " is all zeros");
    }

    DissimilarityMatrix out;
    out.w.assign(n, Vec(n, 0.0));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double aa = 0, bb = 0, ab = 0;
            for (size_t k = 0; k < d; ++k) {
                double denom = embeddings[i].fim_diag[k] + embeddings[j].fim_diag[k] + kEps;
                double a = embeddings[i].fim_diag[k] / denom;
                double b = embeddings[j].fim_diag[k] / denom;
                aa += a * a;
                bb += b * b;
                ab += a * b;
            }
            double cosv = ab / std::sqrt(aa * bb);
            out.w[i][j] = out.w[j][i] = std::clamp(1.0 - cosv, 0.0, 1.0);
        }
    return out;
}

// Ablation hook: J - W off the diagonal turns "group dissimilar models"
// into "group similar models" while sharing every downstream step.
inline DissimilarityMatrix similarity_flip(const DissimilarityMatrix& w) {
    DissimilarityMatrix out = w;
    for (int i = 0; i < w.n(); ++i)
        for (int j = 0; j < w.n(); ++j)
            if (i != j) out.w[size_t(i)][size_t(j)] = 1.0 - w.w[size_t(i)][size_t(j)];
    return out;
}

struct SpectralDecomposition {
    Vec degree;                  // row sums of W
    std::vector<Vec> laplacian;  // L = D - W
    std::vector<Vec> embedding;  // n rows, c columns (smallest eigenvectors)
};

struct GroupAssignment {
    std::vector<int> group_of;  // matrix row order; ids attach at the artifact layer
    int c = 0;
};

namespace detail {

inline double sq_dist(const Vec& a, const Vec& b) {
    double s = 0;
    for (size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
}

struct KmeansRun {
    std::vector<int> assign;
    double wcss = 0;
};

// Lloyd iterations from a k-means++ seeding. Empty clusters steal the
// point farthest from its center so every cluster stays populated.
inline KmeansRun kmeans_once(const std::vector<Vec>& rows, int k, Rng& rng) {
    const int n = int(rows.size());
    std::vector<Vec> centers;
    centers.push_back(rows[size_t(rng.uniform_int(0, n - 1))]);
    Vec d2(size_t(n), 0.0);
    while (int(centers.size()) < k) {
        double total = 0;
        for (int i = 0; i < n; ++i) {
            double best = sq_dist(rows[size_t(i)], centers[0]);
            for (size_t c = 1; c < centers.size(); ++c) best = std::min(best, sq_dist(rows[size_t(i)], centers[c]));
            d2[size_t(i)] = best;
            total += best;
        }
        int pick = 0;
        if (total > 0) {
            double u = rng.uniform() * total, acc = 0;
            for (int i = 0; i < n; ++i) {
                acc += d2[size_t(i)];
                if (acc >= u) {
                    pick = i;
                    break;
                }
                pick = i;
            }
        } else {
            pick = rng.uniform_int(0, n - 1);
        }
        centers.push_back(rows[size_t(pick)]);
    }

    KmeansRun run;
    run.assign.assign(size_t(n), 0);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = iter == 0;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bd = sq_dist(rows[size_t(i)], centers[0]);
            for (int c = 1; c < k; ++c) {
                double d = sq_dist(rows[size_t(i)], centers[size_t(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (run.assign[size_t(i)] != best) changed = true;
            run.assign[size_t(i)] = best;
        }
        std::vector<int> count(size_t(k), 0);
        for (int a : run.assign) ++count[size_t(a)];
        for (int c = 0; c < k; ++c) {
            if (count[size_t(c)] > 0) continue;
            int steal = -1;
            double far = -1;
            for (int i = 0; i < n; ++i) {
                if (count[size_t(run.assign[size_t(i)])] < 2) continue;
                double d = sq_dist(rows[size_t(i)], centers[size_t(run.assign[size_t(i)])]);
                if (d > far) {
                    far = d;
                    steal = i;
                }
            }
            --count[size_t(run.assign[size_t(steal)])];
            run.assign[size_t(steal)] = c;
            count[size_t(c)] = 1;
            changed = true;
        }
        for (int c = 0; c < k; ++c) centers[size_t(c)].assign(centers[size_t(c)].size(), 0.0);
        for (int i = 0; i < n; ++i)
            for (size_t q = 0; q < centers[0].size(); ++q)
                centers[size_t(run.assign[size_t(i)])][q] += rows[size_t(i)][q] / double(count[size_t(run.assign[size_t(i)])]);
        if (!changed) break;
    }
    run.wcss = 0;
    for (int i = 0; i < n; ++i) run.wcss += sq_dist(rows[size_t(i)], centers[size_t(run.assign[size_t(i)])]);
    return run;
}

}  // namespace detail

// Unnormalized Laplacian and the c smallest eigenvectors, each scaled so
// its first nonzero component is positive (reproducible across runs).
inline SpectralDecomposition spectral_decompose(const DissimilarityMatrix& w, int c) {
    const int n = w.n();
    require(c >= 1 && c <= n, "spectral: group count out of range");
    SpectralDecomposition dec;
    dec.degree.assign(size_t(n), 0.0);
    Eigen::MatrixXd L(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) dec.degree[size_t(i)] += w.w[size_t(i)][size_t(j)];
        for (int j = 0; j < n; ++j) L(i, j) = (i == j ? dec.degree[size_t(i)] : 0.0) - w.w[size_t(i)][size_t(j)];
    }
    dec.laplacian.assign(size_t(n), Vec(size_t(n)));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) dec.laplacian[size_t(i)][size_t(j)] = L(i, j);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(L);
    require(es.info() == Eigen::Success, "spectral: eigensolver failed");
    dec.embedding.assign(size_t(n), Vec(size_t(c), 0.0));
    for (int col = 0; col < c; ++col) {
        double sign = 1.0;
        for (int i = 0; i < n; ++i)
            if (es.eigenvectors()(i, col) != 0.0) {
                sign = es.eigenvectors()(i, col) > 0.0 ? 1.0 : -1.0;
                break;
            }
        for (int i = 0; i < n; ++i) dec.embedding[size_t(i)][size_t(col)] = sign * es.eigenvectors()(i, col);
    }
    return dec;
}

// Spectral clustering with W as the affinity: high dissimilarity binds
// models into the same group. k-means++ with 10 restarts, lowest
// within-cluster sum of squares wins, ties keep the earliest restart.
inline GroupAssignment spectral_group(const DissimilarityMatrix& w, int c, uint64_t seed) {
    auto dec = spectral_decompose(w, c);
    detail::KmeansRun best;
    for (int r = 0; r < 10; ++r) {
        Rng rng(derive_seed(seed, "kmeans", uint64_t(r)));
        auto run = detail::kmeans_once(dec.embedding, c, rng);
        if (r == 0 || run.wcss < best.wcss) best = std::move(run);
    }
    return GroupAssignment{std::move(best.assign), c};
}

// Exhaustive oracle over restricted growth strings. The objective is the
// size-normalized intra-group sum, the discrete counterpart the
// unnormalized-Laplacian relaxation optimizes; the plain sum degenerates
// into singleton-vs-rest ties.
inline GroupAssignment oracle_group(const DissimilarityMatrix& w, int c) {
    const int n = w.n();
    require(c >= 1 && c <= n, "oracle: group count out of range");
    require(n <= 12, "oracle: too many models for exhaustive search");

    std::vector<int> rgs(size_t(n), 0), best;
    double best_obj = -1;
    auto score = [&](const std::vector<int>& a) {
        Vec intra(size_t(c), 0.0);
        std::vector<int> count(size_t(c), 0);
        for (int i = 0; i < n; ++i) {
            ++count[size_t(a[size_t(i)])];
            for (int j = i + 1; j < n; ++j)
                if (a[size_t(i)] == a[size_t(j)]) intra[size_t(a[size_t(i)])] += w.w[size_t(i)][size_t(j)];
        }
        double s = 0;
        for (int g = 0; g < c; ++g) {
            if (count[size_t(g)] == 0) return -1.0;  // wrong group count
            s += intra[size_t(g)] / double(count[size_t(g)]);
        }
        return s;
    };
    // lexicographic enumeration: a[i] <= 1 + max(a[0..i-1])
    std::function<void(int, int)> rec = [&](int i, int hi) {
        if (i == n) {
            if (hi + 1 != c) return;
            double s = score(rgs);
            if (s > best_obj) {
                best_obj = s;
                best = rgs;
            }
            return;
        }
        int cap = std::min(hi + 1, c - 1);
        for (int g = 0; g <= cap; ++g) {
            rgs[size_t(i)] = g;
            rec(i + 1, std::max(hi, g));
        }
    };
    rgs[0] = 0;
    rec(1, 0);
    if (n == 1) best = {0};
    return GroupAssignment{std::move(best), c};
}

// Canonical relabeling by first appearance, for label-invariant comparison.
inline std::vector<int> canonical_groups(const std::vector<int>& a) {
    std::vector<int> map(a.size(), -1), out(a.size());
    int next = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        if (map[size_t(a[i])] < 0) map[size_t(a[i])] = next++;
        out[i] = map[size_t(a[i])];
    }
    return out;
}

// Linear centered kernel alignment between two feature matrices with a
// shared row count.
inline double cka_linear(const std::vector<Vec>& feats_a, const std::vector<Vec>& feats_b) {
    const size_t n = feats_a.size();
    require(n >= 2 && feats_b.size() == n, "cka: need matching rows, at least 2");
    auto centered = [n](const std::vector<Vec>& f) {
        Eigen::MatrixXd m(long(n), long(f[0].size()));
        for (size_t i = 0; i < n; ++i) {
            require(f[i].size() == f[0].size(), "cka: ragged features");
            for (size_t j = 0; j < f[i].size(); ++j) m(long(i), long(j)) = f[i][j];
        }
        m.rowwise() -= m.colwise().mean();
        return m;
    };
    Eigen::MatrixXd a = centered(feats_a), b = centered(feats_b);
    double na = (a.transpose() * a).norm(), nb = (b.transpose() * b).norm();
    require(na > 0.0 && nb > 0.0, "cka: zero-variance features");
    double cross = (a.transpose() * b).squaredNorm();
    return cross / (na * nb);
}

}  // namespace dfml
