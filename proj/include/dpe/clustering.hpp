#ifndef DPE_CLUSTERING_HPP
#define DPE_CLUSTERING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "moments.hpp"
#include "primitives.hpp"
#include "rng.hpp"

namespace dpe {

/// [mean_v, mean_a, var_v, var_a, cov_va]
using Feature = Eigen::Matrix<double, 5, 1>;

inline Feature primitive_feature(const Primitive& p) {
    Feature f;
    f << p.mean[0], p.mean[1], p.cov(0, 0), p.cov(1, 1), p.cov(0, 1);
    return f;
}

/// Per-channel z-score applied to features before clustering.
struct FeatureScaling {
    Feature mean = Feature::Zero();
    Feature std = Feature::Ones();

    Feature apply(const Feature& x) const { return (x - mean).cwiseQuotient(std); }
    Feature invert(const Feature& z) const { return z.cwiseProduct(std) + mean; }
};

/// Standardize each channel across all primitives. A channel with zero
/// spread is only centered.
inline std::pair<std::vector<Feature>, FeatureScaling> standardized_features(std::span<const Primitive> prims) {
    FeatureScaling sc;
    std::vector<Feature> raw;
    raw.reserve(prims.size());
    for (const auto& p : prims) raw.push_back(primitive_feature(p));
    if (raw.empty()) return {raw, sc};
    const double n = static_cast<double>(raw.size());
    for (const auto& f : raw) sc.mean += f;
    sc.mean /= n;
    Feature var = Feature::Zero();
    for (const auto& f : raw) var += (f - sc.mean).cwiseAbs2();
    var /= n;
    for (int c = 0; c < 5; ++c) {
        const double sd = std::sqrt(var[c]);
        sc.std[c] = sd > 1e-12 * std::max(1.0, std::abs(sc.mean[c])) ? sd : 1.0;
    }
    for (auto& f : raw) f = sc.apply(f);
    return {raw, sc};
}

/// Symmetric cannot-link relation over n items.
class CannotLink {
public:
    explicit CannotLink(std::size_t n = 0) : adj_(n) {}

    static CannotLink from_pairs(std::size_t n, std::span<const std::pair<std::size_t, std::size_t>> pairs) {
        CannotLink cl(n);
        for (auto [a, b] : pairs) cl.add(a, b);
        return cl;
    }

    /// Items sharing a group id (a vehicle) are pairwise cannot-linked.
    static CannotLink from_groups(std::span<const std::string> groups) {
        CannotLink cl(groups.size());
        std::map<std::string, std::vector<std::size_t>> members;
        for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);
        for (const auto& [g, idx] : members) {
            cl.largest_group_ = std::max(cl.largest_group_, idx.size());
            for (std::size_t a = 0; a < idx.size(); ++a)
                for (std::size_t b = a + 1; b < idx.size(); ++b) cl.add(idx[a], idx[b]);
        }
        return cl;
    }

    void add(std::size_t a, std::size_t b) {
        if (a >= adj_.size() || b >= adj_.size()) throw InvalidConfig("cannot-link index out of range");
        if (a == b) throw InfeasibleConstraints("item " + std::to_string(a) + " cannot-linked with itself");
        if (std::find(adj_[a].begin(), adj_[a].end(), b) != adj_[a].end()) return;
        adj_[a].push_back(b);
        adj_[b].push_back(a);
        largest_group_ = std::max<std::size_t>(largest_group_, 2);
    }

    std::size_t size() const { return adj_.size(); }
    const std::vector<std::size_t>& neighbors(std::size_t i) const { return adj_[i]; }

    /// Largest known clique; every member needs its own cluster.
    std::size_t largest_group() const { return adj_.empty() ? 0 : std::max<std::size_t>(largest_group_, 1); }

    std::size_t pair_count() const {
        std::size_t n = 0;
        for (const auto& a : adj_) n += a.size();
        return n / 2;
    }

private:
    std::vector<std::vector<std::size_t>> adj_;
    std::size_t largest_group_ = 0;
};

struct KMeansOptions {
    int k = 200;
    std::uint64_t seed = 0;
    int max_iter = 300;
    int restarts = 5;
};

struct ClusterModel {
    int k = 0;
    std::vector<Feature> centroids;
    std::vector<int> assignment;
    double objective = 0.0;
    std::vector<double> objective_trace;  // best run, one entry per iteration
    int iterations = 0;
    bool converged = false;
    int best_restart = 0;

    // Filled by rank_clusters.
    std::vector<Moments> cluster_moments;
    std::vector<double> omega;
    std::vector<int> rank;  // rank[r] = cluster id at rank r
};

inline double squared_distance(const Feature& a, const Feature& b) { return (a - b).squaredNorm(); }

/// Sum over items of the squared distance to the assigned centroid.
inline double kmeans_objective(std::span<const Feature> x, std::span<const int> assignment,
                               std::span<const Feature> centroids) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        s += squared_distance(x[i], centroids[static_cast<std::size_t>(assignment[i])]);
    return s;
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance to the nearest chosen centre.
inline std::vector<Feature> kmeanspp_seed(std::span<const Feature> x, int k, CounterRng& rng) {
    const std::size_t n = x.size();
    std::vector<Feature> centres;
    std::vector<bool> chosen(n, false);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t pick = static_cast<std::size_t>(rng() % n);
    for (int c = 0; c < k; ++c) {
        if (c > 0) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) total += d2[i];
            if (total > 0.0) {
                double u = uniform_open(rng) * total;
                pick = n;
                for (std::size_t i = 0; i < n; ++i) {
                    if (d2[i] <= 0.0) continue;
                    pick = i;
                    if (u < d2[i]) break;
                    u -= d2[i];
                }
            } else {
                // Every remaining point coincides with a centre.
                std::vector<std::size_t> free;
                for (std::size_t i = 0; i < n; ++i)
                    if (!chosen[i]) free.push_back(i);
                pick = free[static_cast<std::size_t>(rng() % free.size())];
            }
        }
        chosen[pick] = true;
        centres.push_back(x[pick]);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x[i], x[pick]));
    }
    return centres;
}

namespace detail {

inline bool can_join(const CannotLink& cl, std::span<const int> assignment, std::size_t item, int cluster) {
    for (std::size_t nb : cl.neighbors(item))
        if (assignment[nb] == cluster) return false;
    return true;
}

/// Greedy sequential assignment in `order`: each item takes the nearest
/// centroid not holding a cannot-linked item assigned before it.
inline std::vector<int> greedy_assign(std::span<const Feature> x, std::span<const Feature> centroids,
                                      const CannotLink& cl, std::span<const std::size_t> order) {
    std::vector<int> a(x.size(), -1);
    const int k = static_cast<int>(centroids.size());
    for (std::size_t item : order) {
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            if (!can_join(cl, a, item, c)) continue;
            const double d = squared_distance(x[item], centroids[static_cast<std::size_t>(c)]);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (best < 0) {
            throw InfeasibleConstraints("item " + std::to_string(item) + " conflicts with all " + std::to_string(k) +
                                        " clusters");
        }
        a[item] = best;
    }
    return a;
}

/// Single-item moves to a strictly closer feasible centroid until none is left.
inline void descend(std::span<const Feature> x, std::span<const Feature> centroids, const CannotLink& cl,
                    std::span<const std::size_t> order, std::vector<int>& a) {
    const int k = static_cast<int>(centroids.size());
    bool moved = true;
    while (moved) {
        moved = false;
        for (std::size_t item : order) {
            const int cur = a[item];
            double best_d = squared_distance(x[item], centroids[static_cast<std::size_t>(cur)]);
            int best = cur;
            for (int c = 0; c < k; ++c) {
                if (c == cur) continue;
                const double d = squared_distance(x[item], centroids[static_cast<std::size_t>(c)]);
                if (d < best_d * (1.0 - 1e-12) - 1e-300 && can_join(cl, a, item, c)) {
                    best_d = d;
                    best = c;
                }
            }
            if (best != cur) {
                a[item] = best;
                moved = true;
            }
        }
    }
}

/// Member means; empty clusters keep their previous centroid.
inline void update_centroids(std::span<const Feature> x, std::span<const int> a, std::vector<Feature>& centroids) {
    std::vector<Feature> sum(centroids.size(), Feature::Zero());
    std::vector<std::size_t> count(centroids.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        sum[static_cast<std::size_t>(a[i])] += x[i];
        ++count[static_cast<std::size_t>(a[i])];
    }
    for (std::size_t c = 0; c < centroids.size(); ++c)
        if (count[c] > 0) centroids[c] = sum[c] / static_cast<double>(count[c]);
}

}  // namespace detail

/**
 * Constrained k-means. Each run seeds with k-means++, assigns greedily in
 * descending `weights` order, then alternates centroid updates with an
 * assignment step that keeps the cheaper of (greedy re-assignment, current
 * assignment) and polishes it with feasible single-item moves. Every step is
 * non-increasing in the objective. The best of `restarts` runs is returned.
 */
inline ClusterModel fit_constrained_kmeans(std::span<const Feature> x, const CannotLink& cl,
                                           std::span<const std::uint64_t> weights, const KMeansOptions& opt) {
    const std::size_t n = x.size();
    if (n == 0) throw EmptyInput("no items to cluster");
    if (opt.k < 1) throw InvalidConfig("k must be positive");
    if (static_cast<std::size_t>(opt.k) > n) {
        throw InvalidConfig("k = " + std::to_string(opt.k) + " exceeds item count " + std::to_string(n));
    }
    if (cl.size() != n) throw InvalidConfig("cannot-link relation size does not match item count");
    if (!weights.empty() && weights.size() != n) throw InvalidConfig("weights size does not match item count");
    if (opt.restarts < 1 || opt.max_iter < 1) throw InvalidConfig("restarts and max_iter must be positive");
    if (cl.largest_group() > static_cast<std::size_t>(opt.k)) {
        throw InfeasibleConstraints(std::to_string(cl.largest_group()) + " mutually cannot-linked items but k = " +
                                    std::to_string(opt.k));
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!weights.empty()) {
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
    }

    ClusterModel best;
    bool have_best = false;
    for (int r = 0; r < opt.restarts; ++r) {
        CounterRng rng(derive_key(opt.seed, static_cast<std::uint64_t>(r)));
        ClusterModel run;
        run.k = opt.k;
        run.best_restart = r;
        run.centroids = kmeanspp_seed(x, opt.k, rng);
        run.assignment = detail::greedy_assign(x, run.centroids, cl, order);
        detail::descend(x, run.centroids, cl, order, run.assignment);
        run.objective_trace.push_back(kmeans_objective(x, run.assignment, run.centroids));
        for (int it = 1; it <= opt.max_iter; ++it) {
            detail::update_centroids(x, run.assignment, run.centroids);
            std::vector<int> next = run.assignment;
            double next_obj = kmeans_objective(x, next, run.centroids);
            try {
                std::vector<int> greedy = detail::greedy_assign(x, run.centroids, cl, order);
                const double g_obj = kmeans_objective(x, greedy, run.centroids);
                if (g_obj < next_obj) {
                    next = std::move(greedy);
                    next_obj = g_obj;
                }
            } catch (const InfeasibleConstraints&) {
                // Greedy order can dead-end on general pair constraints; the
                // current assignment is still feasible.
            }
            detail::descend(x, run.centroids, cl, order, next);
            const bool unchanged = next == run.assignment;
            run.assignment = std::move(next);
            run.objective_trace.push_back(kmeans_objective(x, run.assignment, run.centroids));
            run.iterations = it;
            if (unchanged) {
                run.converged = true;
                break;
            }
        }
        if (!run.converged) detail::update_centroids(x, run.assignment, run.centroids);
        run.objective = kmeans_objective(x, run.assignment, run.centroids);
        if (!have_best || run.objective < best.objective) {
            best = std::move(run);
            have_best = true;
        }
    }
    return best;
}

/**
 * Weight clusters by the data points of their members:
 * omega_c = sum of member point_count / total. Ranks by descending omega
 * (ties by cluster id) and pools member moments by count-weighted merge.
 */
inline void rank_clusters(ClusterModel& model, std::span<const Primitive> prims) {
    if (model.assignment.size() != prims.size()) throw AlignmentError("assignment does not cover all primitives");
    const auto k = static_cast<std::size_t>(model.k);
    model.cluster_moments.assign(k, Moments{});
    std::vector<double> mass(k, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < prims.size(); ++i) {
        const auto c = static_cast<std::size_t>(model.assignment[i]);
        model.cluster_moments[c] = Moments::merge(model.cluster_moments[c], prims[i].moments());
        mass[c] += static_cast<double>(prims[i].point_count);
        total += static_cast<double>(prims[i].point_count);
    }
    model.omega.assign(k, 0.0);
    if (total > 0.0)
        for (std::size_t c = 0; c < k; ++c) model.omega[c] = mass[c] / total;
    model.rank.resize(k);
    std::iota(model.rank.begin(), model.rank.end(), 0);
    std::stable_sort(model.rank.begin(), model.rank.end(), [&](int a, int b) {
        return model.omega[static_cast<std::size_t>(a)] > model.omega[static_cast<std::size_t>(b)];
    });
}

}  // namespace dpe

#endif  // DPE_CLUSTERING_HPP
