#ifndef DPE_COUPLING_HPP
#define DPE_COUPLING_HPP

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "clustering.hpp"
#include "error.hpp"
#include "ingest.hpp"
#include "moments.hpp"
#include "primitives.hpp"

namespace dpe {

struct GaussianMoments {
    Vec2 mu = Vec2::Zero();
    Mat2 sigma = Mat2::Identity();
};

/// Eigenvalue floor applied to covariances before inversion.
inline constexpr double kCovFloor = 1e-9;

struct KlResult {
    double value = 0.0;
    bool floored = false;  // a covariance needed the eigenvalue floor
};

/// D_KL(p || q) = 1/2 [tr(Sq^-1 Sp) + (mq - mp)' Sq^-1 (mq - mp) - k + ln(det Sq / det Sp)]
inline KlResult kl_gaussian_checked(const GaussianMoments& p, const GaussianMoments& q, double floor = kCovFloor) {
    if (!p.mu.allFinite() || !q.mu.allFinite() || !p.sigma.allFinite() || !q.sigma.allFinite())
        throw SingularCovariance("non-finite Gaussian moments");
    const FlooredCov sp = floor_eigenvalues(p.sigma, floor);
    const FlooredCov sq = floor_eigenvalues(q.sigma, floor);
    const Eigen::LLT<Mat2> lq(sq.cov);
    const Eigen::LLT<Mat2> lp(sp.cov);
    if (lq.info() != Eigen::Success || lp.info() != Eigen::Success)
        throw SingularCovariance("covariance not positive definite after floor");
    const Vec2 dmu = q.mu - p.mu;
    const double trace = lq.solve(sp.cov).trace();
    const double maha = dmu.dot(lq.solve(dmu));
    const Mat2 lqm = lq.matrixL();
    const Mat2 lpm = lp.matrixL();
    const double log_det_q = 2.0 * lqm.diagonal().array().log().sum();
    const double log_det_p = 2.0 * lpm.diagonal().array().log().sum();
    const double kl = 0.5 * (trace + maha - 2.0 + log_det_q - log_det_p);
    return {std::max(kl, 0.0), sp.applied || sq.applied};
}

inline double kl_gaussian(const GaussianMoments& p, const GaussianMoments& q, double floor = kCovFloor) {
    return kl_gaussian_checked(p, q, floor).value;
}

/// Which way the divergence is taken when coupling.
enum class KlDirection { cluster_to_primitive, primitive_to_cluster };

inline std::string_view to_string(KlDirection d) {
    return d == KlDirection::cluster_to_primitive ? "cluster_to_primitive" : "primitive_to_cluster";
}

inline KlDirection kl_direction_from_string(std::string_view s) {
    if (s == "cluster_to_primitive") return KlDirection::cluster_to_primitive;
    if (s == "primitive_to_cluster") return KlDirection::primitive_to_cluster;
    throw InvalidConfig("unknown kl_direction '" + std::string(s) + "'");
}

struct CouplingEntry {
    int rank = 0;        // position among retained clusters
    int cluster_id = 0;
    int primitive_label = 0;
    double kl = 0.0;
    bool floored = false;
};

struct CouplingMap {
    KlDirection direction = KlDirection::cluster_to_primitive;
    std::vector<CouplingEntry> entries;
};

inline GaussianMoments to_gaussian(const Moments& m) { return {m.mean, m.cov}; }
inline GaussianMoments to_gaussian(const Primitive& p) { return {p.mean, p.cov}; }

/**
 * Pair every non-empty cluster, in rank order, with the evaluated primitive
 * of minimum KL divergence. Ties go to the lower primitive label. A
 * primitive may serve several clusters.
 */
inline CouplingMap couple(const ClusterModel& model, std::span<const Primitive> eval,
                          KlDirection dir = KlDirection::cluster_to_primitive, double floor = kCovFloor) {
    if (eval.empty()) throw EmptyInput("evaluated vehicle has no primitives");
    if (model.rank.size() != static_cast<std::size_t>(model.k) || model.cluster_moments.size() != model.rank.size())
        throw InvalidConfig("cluster model has not been ranked");
    CouplingMap map;
    map.direction = dir;
    int r = 0;
    for (int c : model.rank) {
        const Moments& cm = model.cluster_moments[static_cast<std::size_t>(c)];
        if (cm.count == 0) continue;
        const GaussianMoments cg = to_gaussian(cm);
        CouplingEntry best;
        bool have = false;
        for (const auto& p : eval) {
            KlResult kl;
            try {
                kl = dir == KlDirection::cluster_to_primitive ? kl_gaussian_checked(cg, to_gaussian(p), floor)
                                                              : kl_gaussian_checked(to_gaussian(p), cg, floor);
            } catch (const SingularCovariance& e) {
                throw SingularCovariance("cluster " + std::to_string(c) + " vs primitive " + std::to_string(p.label) +
                                         ": " + e.what());
            }
            if (!have || kl.value < best.kl || (kl.value == best.kl && p.label < best.primitive_label)) {
                best = {r, c, p.label, kl.value, kl.floored};
                have = true;
            }
        }
        map.entries.push_back(best);
        ++r;
    }
    return map;
}

/// omega of the coupled clusters, renormalized to sum to one.
inline std::vector<double> coupled_omega(const ClusterModel& model, const CouplingMap& map) {
    std::vector<double> w;
    double s = 0.0;
    for (const auto& e : map.entries) {
        w.push_back(model.omega[static_cast<std::size_t>(e.cluster_id)]);
        s += w.back();
    }
    if (s <= 0.0) throw EmptyInput("coupled clusters carry no data points");
    for (double& v : w) v /= s;
    return w;
}

enum class Channel { fuel, emission };

inline std::string_view to_string(Channel c) { return c == Channel::fuel ? "fuel" : "emission"; }

inline Channel channel_from_string(std::string_view s) {
    if (s == "fuel") return Channel::fuel;
    if (s == "emission") return Channel::emission;
    throw InvalidConfig("unknown channel '" + std::string(s) + "'");
}

/// Mean of the per-sample rate over exactly the points carrying `label`.
inline double aggregate_measurement(std::span<const TripSeries> trips, std::span<const std::vector<int>> labels,
                                    int label, Channel channel) {
    if (trips.size() != labels.size()) throw AlignmentError("label sequences do not match trips");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < trips.size(); ++k) {
        if (trips[k].samples.size() != labels[k].size())
            throw AlignmentError("trip " + trips[k].trip_id + ": label length mismatch");
        for (std::size_t t = 0; t < labels[k].size(); ++t) {
            if (labels[k][t] != label) continue;
            const auto& s = trips[k].samples[t];
            const auto& v = channel == Channel::fuel ? s.fuel_rate : s.emission_rate;
            if (!v) {
                throw MissingChannel(std::string(to_string(channel)) + " missing at " + trips[k].trip_id + "[" +
                                     std::to_string(t) + "]");
            }
            sum += *v;
            ++n;
        }
    }
    if (n == 0) throw EmptyPrimitive("primitive " + std::to_string(label) + " has no points");
    return sum / static_cast<double>(n);
}

struct ClusterContribution {
    int rank = 0;
    int cluster_id = 0;
    int primitive_label = 0;
    double omega = 0.0;
    double e_value = 0.0;
    double contribution = 0.0;
};

struct EvaluationResult {
    Channel channel = Channel::fuel;
    double E = 0.0;
    std::optional<double> mpg;
    std::vector<ClusterContribution> per_cluster;
};

/// MPG from a fuel rate in gallons per mile.
inline double mpg_from(double e) {
    if (!(e > 0.0)) throw NonPositiveE("cannot derive MPG from E = " + std::to_string(e));
    return 1.0 / e;
}

/// E = sum_i omega_i * E_i over the coupled clusters.
inline EvaluationResult evaluate(const CouplingMap& map, std::span<const double> omega, std::span<const double> e_values,
                                 Channel channel = Channel::fuel) {
    if (omega.size() != map.entries.size() || e_values.size() != map.entries.size())
        throw AlignmentError("omega / E_i / coupling sizes differ");
    double wsum = 0.0;
    for (double w : omega) {
        if (!(w >= 0.0)) throw InvalidConfig("negative omega");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9) throw InvalidConfig("omega sums to " + std::to_string(wsum) + ", not 1");
    EvaluationResult out;
    out.channel = channel;
    for (std::size_t i = 0; i < omega.size(); ++i) {
        const auto& e = map.entries[i];
        const double c = omega[i] * e_values[i];
        out.per_cluster.push_back({e.rank, e.cluster_id, e.primitive_label, omega[i], e_values[i], c});
        out.E += c;
    }
    if (channel == Channel::fuel) out.mpg = mpg_from(out.E);
    return out;
}

}  // namespace dpe

#endif  // DPE_COUPLING_HPP
