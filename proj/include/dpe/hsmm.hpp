#ifndef DPE_HSMM_HPP
#define DPE_HSMM_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/random/binomial_distribution.hpp>

#include "error.hpp"
#include "moments.hpp"
#include "rng.hpp"

/**
 * Weak-limit HDP-HSMM over 2-D observations.
 *
 * Generative model, truncated to L states:
 *   beta ~ Dir(gamma/L, ..., gamma/L)
 *   pi_i ~ Dir(alpha * beta + kappa * e_i)
 *   (theta_i, lambda_i) ~ NIW x Gamma
 *   z_1 ~ beta,  z_s ~ pi_bar_{z_{s-1}}  (pi with the diagonal removed, renormalized)
 *   D_s ~ 1 + Poisson(lambda_{z_s}), truncated to [1, d_max]
 *   y_t ~ N(theta_{z_s}) for every step t covered by segment s
 *
 * Inference is blocked Gibbs: segment sequences are drawn exactly by
 * backward message passing followed by forward sampling; parameters are
 * drawn from their conjugate conditionals. Self-transitions removed by
 * pi_bar are restored as geometric auxiliary counts before the Dirichlet
 * updates.
 */
namespace dpe::hsmm {

struct NiwPrior {
    Vec2 mu0 = Vec2::Zero();
    double lambda0 = 0.25;
    Mat2 psi = Mat2::Identity() * 0.2;
    double nu0 = 5.0;
};

/// Gamma(a, b) prior (shape, rate) on the Poisson mean of the shifted duration.
struct DurationPrior {
    double a = 30.0;
    double b = 1.0;
};

struct HsmmHyperParams {
    double gamma = 6.0;
    double alpha = 6.0;
    double kappa_sticky = 0.0;
    int L = 40;
    NiwPrior niw;
    DurationPrior dur;
    int d_max = 300;
    int sweeps = 200;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw InvalidConfig("hsmm: " + m); };
        if (!(gamma > 0)) fail("gamma must be positive");
        if (!(alpha > 0)) fail("alpha must be positive");
        if (!(kappa_sticky >= 0)) fail("kappa_sticky must be non-negative");
        if (L < 2) fail("L must be at least 2");
        if (d_max < 1) fail("d_max must be at least 1");
        if (sweeps < 1) fail("sweeps must be at least 1");
        if (!(niw.lambda0 > 0)) fail("niw.lambda0 must be positive");
        if (!(niw.nu0 > 3)) fail("niw.nu0 must exceed dim + 1 = 3");
        if (!is_spd(niw.psi)) fail("niw.psi must be symmetric positive definite");
        if (!(dur.a > 0) || !(dur.b > 0)) fail("duration prior a, b must be positive");
    }
};

struct GaussianEmission {
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Identity();
};

/// Poisson mean of the shifted duration D - 1.
struct DurationParams {
    double rate = 1.0;
};

struct SuperState {
    int state = 0;
    int duration = 0;

    friend bool operator==(const SuperState&, const SuperState&) = default;
};

/// Segmentation of one trip.
struct TripLabels {
    std::vector<SuperState> super_states;
    std::vector<int> label_seq;
};

/// One trip of standardized observations.
struct TripObs {
    std::string trip_id;
    std::vector<Vec2> y;
};

struct HsmmParams {
    std::vector<double> beta;
    Eigen::MatrixXd pi;
    Eigen::MatrixXd pi_bar;
    std::vector<GaussianEmission> emissions;
    std::vector<DurationParams> durations;

    int num_states() const { return static_cast<int>(beta.size()); }
};

struct PosteriorSample {
    HsmmParams params;
    std::vector<TripLabels> trips;

    /// States owning at least one time step.
    int used_states() const {
        std::vector<bool> used(static_cast<std::size_t>(params.num_states()), false);
        for (const auto& t : trips)
            for (int x : t.label_seq) used[static_cast<std::size_t>(x)] = true;
        return static_cast<int>(std::count(used.begin(), used.end(), true));
    }
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Expand (state, duration) pairs into per-step labels.
inline std::vector<int> expand_super_states(std::span<const SuperState> ss) {
    std::vector<int> out;
    for (const auto& s : ss) out.insert(out.end(), static_cast<std::size_t>(s.duration), s.state);
    return out;
}

/// pi_bar_ij = pi_ij / (1 - pi_ii) for j != i, computed as a renormalization
/// of the off-diagonal entries so rows sum to one even when pi_ii is near 1.
inline Eigen::MatrixXd derive_pi_bar(const Eigen::MatrixXd& pi) {
    const Eigen::Index L = pi.rows();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(L, L);
    for (Eigen::Index i = 0; i < L; ++i) {
        double off = 0.0;
        for (Eigen::Index j = 0; j < L; ++j)
            if (j != i) off += pi(i, j);
        if (off <= 0.0) continue;
        for (Eigen::Index j = 0; j < L; ++j)
            if (j != i) out(i, j) = pi(i, j) / off;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Emission and duration tables

namespace detail {

struct GaussianLogPdf {
    Vec2 mean;
    Mat2 inv;
    double log_norm = 0.0;

    explicit GaussianLogPdf(const GaussianEmission& e) : mean(e.mean) {
        const double det = e.cov.determinant();
        if (!(det > 0.0) || !std::isfinite(det)) throw NumericalFailure("emission covariance is not SPD");
        inv = e.cov.inverse();
        log_norm = -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(det);
    }

    double operator()(const Vec2& y) const {
        const Vec2 d = y - mean;
        return log_norm - 0.5 * d.dot(inv * d);
    }
};

inline double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

/// T x L matrix of log N(y_t; theta_i).
inline Eigen::MatrixXd emission_loglik(std::span<const GaussianEmission> emissions, std::span<const Vec2> obs) {
    const Eigen::Index T = static_cast<Eigen::Index>(obs.size());
    const Eigen::Index L = static_cast<Eigen::Index>(emissions.size());
    Eigen::MatrixXd ll(T, L);
    for (Eigen::Index i = 0; i < L; ++i) {
        const detail::GaussianLogPdf pdf(emissions[static_cast<std::size_t>(i)]);
        for (Eigen::Index t = 0; t < T; ++t) ll(t, i) = pdf(obs[static_cast<std::size_t>(t)]);
    }
    return ll;
}

/**
 * Log pmf and log survival of the shifted Poisson truncated to [1, d_max].
 * Row d-1 holds duration d. `lo`/`hi` bound the durations whose pmf lies
 * within `kRangeNats` of the mode; terms outside contribute less than
 * e^-50 relative and are skipped during message passing.
 */
struct DurationTable {
    static constexpr double kRangeNats = 50.0;

    int d_max = 1;
    Eigen::MatrixXd log_pmf;
    Eigen::MatrixXd log_surv;
    std::vector<int> lo;
    std::vector<int> hi;

    DurationTable(std::span<const DurationParams> durations, int dmax) : d_max(dmax) {
        const Eigen::Index L = static_cast<Eigen::Index>(durations.size());
        log_pmf.resize(d_max, L);
        log_surv.resize(d_max, L);
        lo.resize(static_cast<std::size_t>(L));
        hi.resize(static_cast<std::size_t>(L));
        for (Eigen::Index i = 0; i < L; ++i) {
            const double rate = durations[static_cast<std::size_t>(i)].rate;
            const double log_rate = std::log(rate);
            for (int d = 1; d <= d_max; ++d)
                log_pmf(d - 1, i) = (d - 1) * log_rate - rate - std::lgamma(static_cast<double>(d));
            const double log_total = log_sum_exp(std::span<const double>(log_pmf.col(i).data(), static_cast<std::size_t>(d_max)));
            log_pmf.col(i).array() -= log_total;
            double acc = kNegInf;
            for (int d = d_max; d >= 1; --d) {
                acc = detail::log_add(acc, log_pmf(d - 1, i));
                log_surv(d - 1, i) = acc;
            }
            const double mode = log_pmf.col(i).maxCoeff();
            int l = d_max, h = 1;
            for (int d = 1; d <= d_max; ++d) {
                if (log_pmf(d - 1, i) >= mode - kRangeNats) {
                    l = std::min(l, d);
                    h = std::max(h, d);
                }
            }
            lo[static_cast<std::size_t>(i)] = l;
            hi[static_cast<std::size_t>(i)] = h;
        }
    }
};

// ---------------------------------------------------------------------------
// Message passing

/**
 * Backward messages for one trip, in log space.
 *   log_b(t, i)     = log p(y_{t+1:T-1} | a segment of state i ends at t)
 *   log_bstar(t, i) = log p(y_{t:T-1}   | a segment of state i starts at t)
 * The last segment of a trip is right-censored: it contributes the survival
 * probability P(D >= remaining) instead of the pmf.
 */
struct Messages {
    Eigen::MatrixXd log_b;
    Eigen::MatrixXd log_bstar;
    Eigen::MatrixXd cum_ll;  // (T+1) x L prefix sums of the emission log-likelihood
    DurationTable dur;

    Eigen::Index length() const { return log_b.rows(); }
};

inline Messages backward_messages(const Eigen::MatrixXd& pi_bar, std::span<const GaussianEmission> emissions,
                                  std::span<const DurationParams> durations, std::span<const Vec2> obs, int d_max) {
    const Eigen::Index T = static_cast<Eigen::Index>(obs.size());
    const Eigen::Index L = static_cast<Eigen::Index>(emissions.size());
    Messages m{Eigen::MatrixXd(T, L), Eigen::MatrixXd(T, L), Eigen::MatrixXd::Zero(T + 1, L),
               DurationTable(durations, d_max)};
    const Eigen::MatrixXd ll = emission_loglik(emissions, obs);
    for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index t = 0; t < T; ++t) m.cum_ll(t + 1, i) = m.cum_ll(t, i) + ll(t, i);

    const Eigen::MatrixXd log_pi_bar = pi_bar.array().log().matrix();
    std::vector<double> terms;
    terms.reserve(static_cast<std::size_t>(std::max<Eigen::Index>(d_max, L)) + 1);

    for (Eigen::Index t = T - 1; t >= 0; --t) {
        for (Eigen::Index i = 0; i < L; ++i) {
            if (t == T - 1) {
                m.log_b(t, i) = 0.0;
            } else {
                terms.clear();
                for (Eigen::Index j = 0; j < L; ++j) terms.push_back(log_pi_bar(i, j) + m.log_bstar(t + 1, j));
                m.log_b(t, i) = log_sum_exp(terms);
            }
        }
        for (Eigen::Index i = 0; i < L; ++i) {
            const auto si = static_cast<std::size_t>(i);
            const Eigen::Index remaining = T - t;
            terms.clear();
            const Eigen::Index d_hi = std::min<Eigen::Index>(m.dur.hi[si], remaining - 1);
            for (Eigen::Index d = m.dur.lo[si]; d <= d_hi; ++d) {
                terms.push_back(m.dur.log_pmf(d - 1, i) + m.cum_ll(t + d, i) - m.cum_ll(t, i) + m.log_b(t + d - 1, i));
            }
            if (remaining <= d_max) {
                terms.push_back(m.dur.log_surv(remaining - 1, i) + m.cum_ll(T, i) - m.cum_ll(t, i));
            }
            m.log_bstar(t, i) = log_sum_exp(terms);
        }
    }
    return m;
}

/// log p(y) of one trip under initial distribution `init`.
inline double log_marginal_likelihood(const Messages& m, std::span<const double> init) {
    std::vector<double> terms;
    for (Eigen::Index i = 0; i < m.log_bstar.cols(); ++i)
        terms.push_back(std::log(init[static_cast<std::size_t>(i)]) + m.log_bstar(0, i));
    return log_sum_exp(terms);
}

/**
 * Forward-sample a segmentation from backward messages: the first state from
 * init * bstar(0), each duration from pmf * likelihood * b(end), each next
 * state from pi_bar * bstar(next start).
 */
inline TripLabels sample_super_states(const Messages& m, const Eigen::MatrixXd& pi_bar, std::span<const double> init,
                                      CounterRng& rng) {
    const Eigen::Index T = m.length();
    const Eigen::Index L = m.log_b.cols();
    TripLabels out;
    std::vector<double> w;
    auto draw = [&](std::span<const double> logw, const char* what) {
        if (log_sum_exp(logw) == kNegInf) throw NumericalFailure(std::string("no feasible ") + what);
        return sample_log_categorical(rng, logw);
    };

    w.resize(static_cast<std::size_t>(L));
    for (Eigen::Index i = 0; i < L; ++i) w[static_cast<std::size_t>(i)] = std::log(init[static_cast<std::size_t>(i)]) + m.log_bstar(0, i);
    Eigen::Index state = static_cast<Eigen::Index>(draw(w, "initial state"));
    Eigen::Index t = 0;
    std::vector<Eigen::Index> ds;
    while (true) {
        const auto si = static_cast<std::size_t>(state);
        const Eigen::Index remaining = T - t;
        w.clear();
        ds.clear();
        const Eigen::Index d_hi = std::min<Eigen::Index>(m.dur.hi[si], remaining - 1);
        for (Eigen::Index d = m.dur.lo[si]; d <= d_hi; ++d) {
            w.push_back(m.dur.log_pmf(d - 1, state) + m.cum_ll(t + d, state) - m.cum_ll(t, state) +
                        m.log_b(t + d - 1, state));
            ds.push_back(d);
        }
        if (remaining <= m.dur.d_max) {
            w.push_back(m.dur.log_surv(remaining - 1, state) + m.cum_ll(T, state) - m.cum_ll(t, state));
            ds.push_back(remaining);
        }
        const Eigen::Index d = ds[draw(w, "duration")];
        out.super_states.push_back({static_cast<int>(state), static_cast<int>(d)});
        t += d;
        if (t >= T) break;
        w.assign(static_cast<std::size_t>(L), kNegInf);
        for (Eigen::Index j = 0; j < L; ++j) {
            if (j == state) continue;
            w[static_cast<std::size_t>(j)] = std::log(pi_bar(state, j)) + m.log_bstar(t, j);
        }
        state = static_cast<Eigen::Index>(draw(w, "next state"));
    }
    out.label_seq = expand_super_states(out.super_states);
    return out;
}

/// Exact posterior marginals p(x_t = i | y) from forward/backward messages.
inline Eigen::MatrixXd state_marginals(const Messages& m, const Eigen::MatrixXd& pi_bar, std::span<const double> init) {
    const Eigen::Index T = m.length();
    const Eigen::Index L = m.log_b.cols();
    const double log_z = log_marginal_likelihood(m, init);
    const Eigen::MatrixXd log_pi_bar = pi_bar.array().log().matrix();
    Eigen::MatrixXd log_a = Eigen::MatrixXd::Constant(T, L, kNegInf);  // a segment of i ends at t
    Eigen::MatrixXd diff = Eigen::MatrixXd::Zero(T + 1, L);
    std::vector<double> astar(static_cast<std::size_t>(L));
    std::vector<double> terms;

    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index j = 0; j < L; ++j) {
            if (t == 0) {
                astar[static_cast<std::size_t>(j)] = std::log(init[static_cast<std::size_t>(j)]);
            } else {
                terms.clear();
                for (Eigen::Index i = 0; i < L; ++i) terms.push_back(log_a(t - 1, i) + log_pi_bar(i, j));
                astar[static_cast<std::size_t>(j)] = log_sum_exp(terms);
            }
        }
        for (Eigen::Index i = 0; i < L; ++i) {
            const auto si = static_cast<std::size_t>(i);
            const double start = astar[si];
            if (start == kNegInf) continue;
            const Eigen::Index remaining = T - t;
            auto add_segment = [&](Eigen::Index d, double log_dur, double log_after) {
                const double seg = start + log_dur + m.cum_ll(t + d, i) - m.cum_ll(t, i);
                if (t + d < T) log_a(t + d - 1, i) = detail::log_add(log_a(t + d - 1, i), seg);
                const double p = std::exp(seg + log_after - log_z);
                diff(t, i) += p;
                diff(t + d, i) -= p;
            };
            const Eigen::Index d_hi = std::min<Eigen::Index>(m.dur.hi[si], remaining - 1);
            for (Eigen::Index d = m.dur.lo[si]; d <= d_hi; ++d)
                add_segment(d, m.dur.log_pmf(d - 1, i), m.log_b(t + d - 1, i));
            if (remaining <= m.dur.d_max) add_segment(remaining, m.dur.log_surv(remaining - 1, i), 0.0);
        }
    }
    Eigen::MatrixXd out(T, L);
    for (Eigen::Index i = 0; i < L; ++i) {
        double acc = 0.0;
        for (Eigen::Index t = 0; t < T; ++t) {
            acc += diff(t, i);
            out(t, i) = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Conjugate updates

struct NiwPosterior {
    Vec2 mu;
    double lambda = 0.0;
    Mat2 psi;
    double nu = 0.0;
};

inline NiwPosterior niw_posterior(const NiwPrior& prior, const Moments& stats) {
    const double n = static_cast<double>(stats.count);
    NiwPosterior post;
    post.lambda = prior.lambda0 + n;
    post.nu = prior.nu0 + n;
    if (stats.count == 0) {
        post.mu = prior.mu0;
        post.psi = prior.psi;
        return post;
    }
    post.mu = (prior.lambda0 * prior.mu0 + n * stats.mean) / post.lambda;
    const Vec2 dev = stats.mean - prior.mu0;
    post.psi = prior.psi + stats.cov * n + (prior.lambda0 * n / post.lambda) * (dev * dev.transpose());
    post.psi = 0.5 * (post.psi + post.psi.transpose());
    return post;
}

namespace detail {

/// Retry with 1e-8 * I added, at most three times.
inline Mat2 repair_spd(Mat2 m, const char* what) {
    m = 0.5 * (m + m.transpose());
    for (int attempt = 0; attempt <= 3; ++attempt) {
        if (is_spd(m)) return m;
        if (attempt < 3) m += Mat2::Identity() * 1e-8;
    }
    throw NumericalFailure(std::string(what) + " is not SPD after jitter");
}

}  // namespace detail

/// Draw (mean, cov) from NIW: cov ~ IW(psi, nu) via the Bartlett
/// decomposition of its inverse, then mean ~ N(mu, cov / lambda).
inline GaussianEmission sample_niw(const NiwPosterior& post, CounterRng& rng) {
    const Mat2 psi = detail::repair_spd(post.psi, "posterior scale matrix");
    const Mat2 psi_inv = psi.inverse();
    const Mat2 c = detail::repair_spd(psi_inv, "inverse scale matrix").llt().matrixL();
    Mat2 a = Mat2::Zero();
    a(0, 0) = std::sqrt(2.0 * gamma_variate(rng, post.nu / 2.0));
    a(1, 1) = std::sqrt(2.0 * gamma_variate(rng, (post.nu - 1.0) / 2.0));
    a(1, 0) = standard_normal(rng);
    const Mat2 ca = c * a;
    const Mat2 precision = ca * ca.transpose();
    GaussianEmission e;
    e.cov = detail::repair_spd(precision.inverse(), "sampled covariance");
    const Mat2 lc = (e.cov / post.lambda).llt().matrixL();
    const Vec2 z(standard_normal(rng), standard_normal(rng));
    e.mean = post.mu + lc * z;
    if (!e.mean.allFinite()) throw NumericalFailure("sampled emission mean is not finite");
    return e;
}

/// Resample every state's emission; states without data draw from the prior.
inline std::vector<GaussianEmission> resample_emissions(std::span<const TripLabels> labels, std::span<const TripObs> obs,
                                                        const NiwPrior& niw, int L, CounterRng& rng) {
    if (labels.size() != obs.size()) throw AlignmentError("label and observation trip counts differ");
    std::vector<Moments> stats(static_cast<std::size_t>(L));
    for (std::size_t k = 0; k < labels.size(); ++k) {
        const auto& seq = labels[k].label_seq;
        if (seq.size() != obs[k].y.size()) throw AlignmentError("trip " + obs[k].trip_id + ": label length mismatch");
        for (std::size_t t = 0; t < seq.size(); ++t) {
            if (seq[t] < 0 || seq[t] >= L) throw AlignmentError("label out of range");
            stats[static_cast<std::size_t>(seq[t])].add(obs[k].y[t]);
        }
    }
    std::vector<GaussianEmission> out;
    out.reserve(stats.size());
    for (const auto& s : stats) out.push_back(sample_niw(niw_posterior(niw, s), rng));
    return out;
}

/// Gamma(shape, rate) posterior of a state's Poisson duration mean.
inline DurationPrior duration_posterior(const DurationPrior& prior, std::span<const TripLabels> labels, int state) {
    DurationPrior post = prior;
    for (const auto& trip : labels) {
        for (const auto& s : trip.super_states) {
            if (s.state != state) continue;
            post.a += s.duration - 1;
            post.b += 1.0;
        }
    }
    return post;
}

inline std::vector<DurationParams> resample_durations(std::span<const TripLabels> labels, const DurationPrior& prior,
                                                      int L, CounterRng& rng) {
    std::vector<DurationParams> out(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
        const DurationPrior post = duration_posterior(prior, labels, i);
        out[static_cast<std::size_t>(i)].rate = std::max(gamma_variate(rng, post.a) / post.b, 1e-10);
    }
    return out;
}

struct TransitionCounts {
    Eigen::MatrixXd n;                // super-state transitions i -> j, diagonal zero
    std::vector<double> init_counts;  // first state of each trip
};

inline TransitionCounts count_transitions(std::span<const TripLabels> labels, int L) {
    TransitionCounts c{Eigen::MatrixXd::Zero(L, L), std::vector<double>(static_cast<std::size_t>(L), 0.0)};
    for (const auto& trip : labels) {
        if (trip.super_states.empty()) continue;
        c.init_counts[static_cast<std::size_t>(trip.super_states.front().state)] += 1.0;
        for (std::size_t s = 1; s < trip.super_states.size(); ++s)
            c.n(trip.super_states[s - 1].state, trip.super_states[s].state) += 1.0;
    }
    return c;
}

/// Self-transitions hidden by pi_bar: each departure from i was preceded by
/// Geometric(1 - pi_ii) rejected self-transitions.
inline std::vector<double> augment_self_transitions(const Eigen::MatrixXd& n, const Eigen::MatrixXd& pi, CounterRng& rng) {
    constexpr std::uint64_t kCap = 1u << 20;
    std::vector<double> self(static_cast<std::size_t>(n.rows()), 0.0);
    for (Eigen::Index i = 0; i < n.rows(); ++i) {
        const auto departures = static_cast<std::uint64_t>(n.row(i).sum());
        const double leave = 1.0 - pi(i, i);
        std::uint64_t total = 0;
        for (std::uint64_t k = 0; k < departures; ++k) total += std::min(geometric_failures(rng, leave), kCap);
        self[static_cast<std::size_t>(i)] = static_cast<double>(total);
    }
    return self;
}

namespace detail {

/// Number of occupied tables after `customers` draws from a CRP with
/// concentration c. Exact Bernoulli sum for the first 1000 customers,
/// Poisson with the matching mean for the remainder.
inline double crp_tables(double customers, double c, CounterRng& rng) {
    if (customers <= 0 || c <= 0) return 0.0;
    constexpr double kExact = 1000.0;
    double tables = 0.0;
    const double exact = std::min(customers, kExact);
    for (double k = 0; k < exact; k += 1.0)
        if (uniform_open(rng) < c / (c + k)) tables += 1.0;
    if (customers > kExact) {
        const double mean = c * (boost::math::digamma(c + customers) - boost::math::digamma(c + kExact));
        tables += poisson_variate(rng, mean);
    }
    return tables;
}

}  // namespace detail

/// Auxiliary table counts m_ij for the beta update, with the sticky override
/// correction when kappa > 0. Returns the corrected counts.
inline Eigen::MatrixXd sample_table_counts(const Eigen::MatrixXd& n_aug, std::span<const double> beta, double alpha,
                                           double kappa, CounterRng& rng) {
    const Eigen::Index L = n_aug.rows();
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(L, L);
    for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = 0; j < L; ++j) {
            const double c = alpha * beta[static_cast<std::size_t>(j)] + (i == j ? kappa : 0.0);
            m(i, j) = detail::crp_tables(n_aug(i, j), c, rng);
        }
    if (kappa > 0.0) {
        const double rho = kappa / (alpha + kappa);
        for (Eigen::Index j = 0; j < L; ++j) {
            const auto tables = static_cast<long>(m(j, j));
            if (tables <= 0) continue;
            const double p = rho / (rho + beta[static_cast<std::size_t>(j)] * (1.0 - rho));
            boost::random::binomial_distribution<long, double> bin(tables, p);
            m(j, j) -= static_cast<double>(bin(rng));
        }
    }
    return m;
}

namespace detail {

/// Exponentiate log probabilities with a floor of 1e-300 and renormalize,
/// so every component stays strictly positive.
inline std::vector<double> floored_probs(const std::vector<double>& logp) {
    std::vector<double> p(logp.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::max(std::exp(logp[i]), 1e-300);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

}  // namespace detail

inline std::vector<double> resample_beta(const Eigen::MatrixXd& tables, std::span<const double> init_counts, double gamma,
                                         CounterRng& rng) {
    const Eigen::Index L = tables.rows();
    std::vector<double> conc(static_cast<std::size_t>(L));
    for (Eigen::Index j = 0; j < L; ++j)
        conc[static_cast<std::size_t>(j)] = gamma / static_cast<double>(L) + tables.col(j).sum() + init_counts[static_cast<std::size_t>(j)];
    return detail::floored_probs(log_dirichlet(rng, conc));
}

/// pi_i ~ Dir(alpha * beta + kappa * e_i + n_i), where n_i already includes
/// the augmented self-transition count.
inline Eigen::MatrixXd resample_pi(std::span<const double> beta, const Eigen::MatrixXd& n_aug, double alpha, double kappa,
                                   CounterRng& rng) {
    const Eigen::Index L = n_aug.rows();
    Eigen::MatrixXd pi(L, L);
    std::vector<double> conc(static_cast<std::size_t>(L));
    for (Eigen::Index i = 0; i < L; ++i) {
        for (Eigen::Index j = 0; j < L; ++j)
            conc[static_cast<std::size_t>(j)] = alpha * beta[static_cast<std::size_t>(j)] + (i == j ? kappa : 0.0) + n_aug(i, j);
        const auto row = detail::floored_probs(log_dirichlet(rng, conc));
        for (Eigen::Index j = 0; j < L; ++j) pi(i, j) = row[static_cast<std::size_t>(j)];
    }
    return pi;
}

struct TransitionDraw {
    std::vector<double> beta;
    Eigen::MatrixXd pi;
    Eigen::MatrixXd pi_bar;
};

/**
 * One blocked update of (beta, pi): augment hidden self-transitions under
 * the current pi, draw CRP table counts under the current beta, draw beta,
 * then draw every row of pi under the new beta.
 */
inline TransitionDraw resample_transitions_and_beta(std::span<const TripLabels> labels, const HsmmParams& current,
                                                    double gamma, double alpha, double kappa, CounterRng& rng) {
    const int L = current.num_states();
    const TransitionCounts counts = count_transitions(labels, L);
    Eigen::MatrixXd n_aug = counts.n;
    const auto self = augment_self_transitions(counts.n, current.pi, rng);
    for (int i = 0; i < L; ++i) n_aug(i, i) += self[static_cast<std::size_t>(i)];
    const Eigen::MatrixXd tables = sample_table_counts(n_aug, current.beta, alpha, kappa, rng);
    TransitionDraw out;
    out.beta = resample_beta(tables, counts.init_counts, gamma, rng);
    out.pi = resample_pi(out.beta, n_aug, alpha, kappa, rng);
    out.pi_bar = derive_pi_bar(out.pi);
    return out;
}

// ---------------------------------------------------------------------------
// Joint density

namespace detail {

inline double log_dirichlet_density(std::span<const double> x, std::span<const double> a) {
    double sum_a = 0.0, out = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sum_a += a[i];
        out += (a[i] - 1.0) * std::log(x[i]) - std::lgamma(a[i]);
    }
    return out + std::lgamma(sum_a);
}

inline double log_mvn(const Vec2& x, const Vec2& mu, const Mat2& cov) {
    const Vec2 d = x - mu;
    return -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(cov.determinant()) - 0.5 * d.dot(cov.inverse() * d);
}

inline double log_inv_wishart(const Mat2& s, const Mat2& psi, double nu) {
    const double log_mgamma = 0.5 * std::log(std::numbers::pi) + std::lgamma(nu / 2.0) + std::lgamma((nu - 1.0) / 2.0);
    return 0.5 * nu * std::log(psi.determinant()) - nu * std::log(2.0) - log_mgamma -
           0.5 * (nu + 3.0) * std::log(s.determinant()) - 0.5 * (psi * s.inverse()).trace();
}

inline double log_truncated_duration(int d, double rate, int d_max, bool censored) {
    std::vector<double> all(static_cast<std::size_t>(d_max));
    for (int k = 1; k <= d_max; ++k)
        all[static_cast<std::size_t>(k - 1)] = (k - 1) * std::log(rate) - rate - std::lgamma(static_cast<double>(k));
    const double log_total = log_sum_exp(all);
    if (!censored) return all[static_cast<std::size_t>(d - 1)] - log_total;
    return log_sum_exp(std::span<const double>(all).subspan(static_cast<std::size_t>(d - 1))) - log_total;
}

}  // namespace detail

/**
 * log p(beta, pi, theta, lambda, segmentation, y). Computed directly from
 * the densities, without the message tables, so it can cross-check the
 * sampler.
 */
inline double joint_log_density(const PosteriorSample& s, std::span<const TripObs> obs, const HsmmHyperParams& hp) {
    const auto& p = s.params;
    const int L = p.num_states();
    double out = detail::log_dirichlet_density(p.beta, std::vector<double>(static_cast<std::size_t>(L), hp.gamma / L));
    for (int i = 0; i < L; ++i) {
        std::vector<double> row(static_cast<std::size_t>(L)), conc(static_cast<std::size_t>(L));
        for (int j = 0; j < L; ++j) {
            row[static_cast<std::size_t>(j)] = p.pi(i, j);
            conc[static_cast<std::size_t>(j)] = hp.alpha * p.beta[static_cast<std::size_t>(j)] + (i == j ? hp.kappa_sticky : 0.0);
        }
        out += detail::log_dirichlet_density(row, conc);
        const auto& e = p.emissions[static_cast<std::size_t>(i)];
        out += detail::log_mvn(e.mean, hp.niw.mu0, e.cov / hp.niw.lambda0);
        out += detail::log_inv_wishart(e.cov, hp.niw.psi, hp.niw.nu0);
        const double rate = p.durations[static_cast<std::size_t>(i)].rate;
        out += hp.dur.a * std::log(hp.dur.b) - std::lgamma(hp.dur.a) + (hp.dur.a - 1.0) * std::log(rate) - hp.dur.b * rate;
    }
    for (std::size_t k = 0; k < s.trips.size(); ++k) {
        const auto& ss = s.trips[k].super_states;
        std::size_t t = 0;
        for (std::size_t q = 0; q < ss.size(); ++q) {
            const int z = ss[q].state;
            out += q == 0 ? std::log(p.beta[static_cast<std::size_t>(z)]) : std::log(p.pi_bar(ss[q - 1].state, z));
            out += detail::log_truncated_duration(ss[q].duration, p.durations[static_cast<std::size_t>(z)].rate, hp.d_max,
                                                  q + 1 == ss.size());
            const auto& e = p.emissions[static_cast<std::size_t>(z)];
            for (int d = 0; d < ss[q].duration; ++d, ++t) out += detail::log_mvn(obs[k].y[t], e.mean, e.cov);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gibbs sampler

/// Called after every sweep with the 1-based sweep index.
using SweepObserver = std::function<void(int, const PosteriorSample&)>;

/**
 * Run `hp.sweeps` Gibbs sweeps and return the final sample. The random
 * stream is keyed by (hp.seed, stream_label); within a sweep each trip uses
 * a stream derived from its trip_id, so results do not depend on the order
 * trips are processed in.
 */
inline PosteriorSample fit(std::span<const TripObs> obs, const HsmmHyperParams& hp, std::string_view stream_label = {},
                           const SweepObserver& observer = {}) {
    hp.validate();
    std::size_t total = 0;
    for (const auto& trip : obs) {
        if (trip.y.empty()) throw EmptyInput("trip " + trip.trip_id + " has no observations");
        total += trip.y.size();
    }
    if (total < 10) throw EmptyInput("need at least 10 observations, got " + std::to_string(total));

    // Work in trip_id order so the result does not depend on input order.
    std::vector<std::size_t> perm(obs.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return obs[a].trip_id < obs[b].trip_id; });
    if (!std::is_sorted(perm.begin(), perm.end())) {
        std::vector<TripObs> sorted;
        for (std::size_t i : perm) sorted.push_back(obs[i]);
        auto restore = [&](const PosteriorSample& in) {
            PosteriorSample out = in;
            for (std::size_t j = 0; j < perm.size(); ++j) out.trips[perm[j]] = in.trips[j];
            return out;
        };
        SweepObserver inner;
        if (observer) inner = [&](int sweep, const PosteriorSample& s) { observer(sweep, restore(s)); };
        return restore(fit(sorted, hp, stream_label, inner));
    }

    const int L = hp.L;
    const CounterRng root(derive_key(hp.seed, stream_label));
    PosteriorSample s;
    {
        CounterRng rng = root.child("init");
        s.params.beta = detail::floored_probs(log_dirichlet(rng, std::vector<double>(static_cast<std::size_t>(L), hp.gamma / L)));
        s.params.pi = resample_pi(s.params.beta, Eigen::MatrixXd::Zero(L, L), hp.alpha, hp.kappa_sticky, rng);
        s.params.pi_bar = derive_pi_bar(s.params.pi);
        s.params.durations = resample_durations({}, hp.dur, L, rng);
        // Emission means start at randomly chosen observations so every state
        // begins inside the data cloud.
        const Mat2 prior_cov = hp.niw.psi / (hp.niw.nu0 - 3.0);
        for (int i = 0; i < L; ++i) {
            std::size_t pick = static_cast<std::size_t>(rng() % total);
            for (const auto& trip : obs) {
                if (pick < trip.y.size()) {
                    s.params.emissions.push_back({trip.y[pick], prior_cov});
                    break;
                }
                pick -= trip.y.size();
            }
        }
    }

    s.trips.resize(obs.size());
    for (int sweep = 1; sweep <= hp.sweeps; ++sweep) {
        const CounterRng sweep_rng = root.child(static_cast<std::uint64_t>(sweep));
        for (std::size_t k = 0; k < obs.size(); ++k) {
            CounterRng rng = sweep_rng.child(obs[k].trip_id);
            const Messages m = backward_messages(s.params.pi_bar, s.params.emissions, s.params.durations, obs[k].y, hp.d_max);
            s.trips[k] = sample_super_states(m, s.params.pi_bar, s.params.beta, rng);
        }
        CounterRng prng = sweep_rng.child("params");
        s.params.durations = resample_durations(s.trips, hp.dur, L, prng);
        s.params.emissions = resample_emissions(s.trips, obs, hp.niw, L, prng);
        TransitionDraw td = resample_transitions_and_beta(s.trips, s.params, hp.gamma, hp.alpha, hp.kappa_sticky, prng);
        s.params.beta = std::move(td.beta);
        s.params.pi = std::move(td.pi);
        s.params.pi_bar = std::move(td.pi_bar);
        if (observer) observer(sweep, s);
    }
    return s;
}

}  // namespace dpe::hsmm

#endif  // DPE_HSMM_HPP
