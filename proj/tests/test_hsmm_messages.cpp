#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "dpe/hsmm.hpp"

using namespace dpe;
using namespace dpe::hsmm;

namespace {

struct Params {
    std::vector<double> init;
    Eigen::MatrixXd pi_bar;
    std::vector<GaussianEmission> emissions;
    std::vector<DurationParams> durations;
};

Params random_params(int L, CounterRng& rng) {
    Params p;
    double s = 0;
    for (int i = 0; i < L; ++i) {
        p.init.push_back(0.2 + uniform_open(rng));
        s += p.init.back();
    }
    for (double& v : p.init) v /= s;
    p.pi_bar = Eigen::MatrixXd::Zero(L, L);
    for (int i = 0; i < L; ++i) {
        double row = 0;
        for (int j = 0; j < L; ++j)
            if (j != i) row += (p.pi_bar(i, j) = 0.1 + uniform_open(rng));
        if (row > 0) p.pi_bar.row(i) /= row;
    }
    for (int i = 0; i < L; ++i) {
        GaussianEmission e;
        e.mean = Vec2(standard_normal(rng), standard_normal(rng));
        const double a = 0.5 + uniform_open(rng), c = 0.5 + uniform_open(rng), b = 0.3 * (uniform_open(rng) - 0.5);
        e.cov << a, b, b, c;
        p.emissions.push_back(e);
        p.durations.push_back({0.2 + 3.0 * uniform_open(rng)});
    }
    return p;
}

std::vector<Vec2> random_obs(int T, CounterRng& rng) {
    std::vector<Vec2> y;
    for (int t = 0; t < T; ++t) y.emplace_back(1.2 * standard_normal(rng), 1.2 * standard_normal(rng));
    return y;
}

// ---- Independent oracle: explicit enumeration over label sequences ------

double gauss_pdf(const Vec2& y, const GaussianEmission& e) {
    const double a = e.cov(0, 0), b = e.cov(0, 1), c = e.cov(1, 1);
    const double det = a * c - b * b;
    const double dx = y[0] - e.mean[0], dy = y[1] - e.mean[1];
    const double q = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det;
    return std::exp(-0.5 * q) / (2 * std::numbers::pi * std::sqrt(det));
}

// Shifted Poisson truncated to [1, d_max]: pmf and survival P(D >= d).
double trunc_pmf(int d, double rate, int d_max) {
    double z = 0;
    for (int k = 1; k <= d_max; ++k) z += std::exp(-rate) * std::pow(rate, k - 1) / std::tgamma(k);
    return std::exp(-rate) * std::pow(rate, d - 1) / std::tgamma(d) / z;
}

double trunc_surv(int d, double rate, int d_max) {
    double s = 0;
    for (int k = d; k <= d_max; ++k) s += trunc_pmf(k, rate, d_max);
    return s;
}

// Probability weight of one label sequence (joint with y).
double sequence_weight(const std::vector<int>& x, const std::vector<Vec2>& y, const Params& p, int d_max) {
    double w = p.init[x[0]];
    std::size_t start = 0;
    const std::size_t T = x.size();
    while (start < T) {
        std::size_t end = start;
        while (end + 1 < T && x[end + 1] == x[start]) ++end;
        const int d = static_cast<int>(end - start + 1);
        if (d > d_max) return 0.0;
        const double rate = p.durations[x[start]].rate;
        w *= end + 1 == T ? trunc_surv(d, rate, d_max) : trunc_pmf(d, rate, d_max);
        for (std::size_t t = start; t <= end; ++t) w *= gauss_pdf(y[t], p.emissions[x[start]]);
        if (end + 1 < T) w *= p.pi_bar(x[start], x[end + 1]);
        start = end + 1;
    }
    return w;
}

struct Enumeration {
    double total = 0;
    Eigen::MatrixXd marginals;
};

Enumeration enumerate(const std::vector<Vec2>& y, const Params& p, int d_max) {
    const int T = static_cast<int>(y.size());
    const int L = static_cast<int>(p.init.size());
    Enumeration out;
    out.marginals = Eigen::MatrixXd::Zero(T, L);
    std::vector<int> x(T, 0);
    while (true) {
        const double w = sequence_weight(x, y, p, d_max);
        out.total += w;
        for (int t = 0; t < T; ++t) out.marginals(t, x[t]) += w;
        int pos = 0;
        while (pos < T && ++x[pos] == L) x[pos++] = 0;
        if (pos == T) break;
    }
    out.marginals /= out.total;
    return out;
}

// Independent HMM forward-backward with pi_bar as transition matrix (d_max = 1).
Eigen::MatrixXd hmm_marginals(const std::vector<Vec2>& y, const Params& p) {
    const int T = static_cast<int>(y.size()), L = static_cast<int>(p.init.size());
    Eigen::MatrixXd alpha(T, L), beta(T, L), lik(T, L);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < L; ++i) lik(t, i) = gauss_pdf(y[t], p.emissions[i]);
    for (int i = 0; i < L; ++i) alpha(0, i) = p.init[i] * lik(0, i);
    for (int t = 1; t < T; ++t)
        for (int j = 0; j < L; ++j) {
            double s = 0;
            for (int i = 0; i < L; ++i) s += alpha(t - 1, i) * p.pi_bar(i, j);
            alpha(t, j) = s * lik(t, j);
        }
    beta.row(T - 1).setOnes();
    for (int t = T - 2; t >= 0; --t)
        for (int i = 0; i < L; ++i) {
            double s = 0;
            for (int j = 0; j < L; ++j) s += p.pi_bar(i, j) * lik(t + 1, j) * beta(t + 1, j);
            beta(t, i) = s;
        }
    Eigen::MatrixXd g = alpha.cwiseProduct(beta);
    for (int t = 0; t < T; ++t) g.row(t) /= g.row(t).sum();
    return g;
}

Messages messages_for(const Params& p, const std::vector<Vec2>& y, int d_max) {
    return backward_messages(p.pi_bar, p.emissions, p.durations, y, d_max);
}

}  // namespace

TEST(BackwardMessages, FiniteTablesOfExpectedShape) {
    CounterRng rng(1);
    const auto p = random_params(3, rng);
    const auto y = random_obs(50, rng);
    const auto m = messages_for(p, y, 10);
    EXPECT_EQ(m.log_b.rows(), 50);
    EXPECT_EQ(m.log_bstar.cols(), 3);
    EXPECT_TRUE(m.log_b.allFinite());
    EXPECT_TRUE(m.log_bstar.allFinite());
}

TEST(BackwardMessages, MarginalLikelihoodMatchesEnumeration) {
    CounterRng rng(2);
    for (int trial = 0; trial < 24; ++trial) {
        const int L = 2 + trial % 2;
        const int T = 3 + trial % 6;
        const int d_max = 1 + trial % 4;
        const auto p = random_params(L, rng);
        const auto y = random_obs(T, rng);
        const auto m = messages_for(p, y, d_max);
        const auto oracle = enumerate(y, p, d_max);
        EXPECT_NEAR(log_marginal_likelihood(m, p.init), std::log(oracle.total), 1e-9)
            << "L=" << L << " T=" << T << " d_max=" << d_max;
    }
}

TEST(BackwardMessages, PosteriorMarginalsMatchEnumeration) {
    CounterRng rng(3);
    for (int trial = 0; trial < 16; ++trial) {
        const int L = 2 + trial % 2;
        const int T = 4 + trial % 5;
        const int d_max = 1 + trial % 5;
        const auto p = random_params(L, rng);
        const auto y = random_obs(T, rng);
        const auto m = messages_for(p, y, d_max);
        const auto got = state_marginals(m, p.pi_bar, p.init);
        const auto oracle = enumerate(y, p, d_max);
        EXPECT_LE((got - oracle.marginals).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(BackwardMessages, UnitMaxDurationIsNoSelfTransitionHmm) {
    CounterRng rng(4);
    for (int trial = 0; trial < 6; ++trial) {
        const int L = 2 + trial % 2;
        const int T = 12;
        const auto p = random_params(L, rng);
        const auto y = random_obs(T, rng);
        const auto m = messages_for(p, y, 1);
        const auto got = state_marginals(m, p.pi_bar, p.init);
        EXPECT_LE((got - hmm_marginals(y, p)).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_LE((got - enumerate(y, p, 1).marginals).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(BackwardMessages, SingleStateIsDeterministic) {
    CounterRng rng(5);
    auto p = random_params(1, rng);
    p.init = {1.0};
    p.pi_bar = Eigen::MatrixXd::Zero(1, 1);
    const auto y = random_obs(7, rng);
    const auto m = messages_for(p, y, 10);
    for (int rep = 0; rep < 20; ++rep) {
        const auto s = sample_super_states(m, p.pi_bar, p.init, rng);
        ASSERT_EQ(s.super_states.size(), 1u);
        EXPECT_EQ(s.super_states[0], (SuperState{0, 7}));
    }
}

TEST(BackwardMessages, IdenticalStatesGiveUniformMarginals) {
    const int L = 3;
    Params p;
    p.init.assign(L, 1.0 / L);
    p.pi_bar = Eigen::MatrixXd::Constant(L, L, 0.5);
    p.pi_bar.diagonal().setZero();
    for (int i = 0; i < L; ++i) {
        p.emissions.push_back({Vec2(0.3, -0.2), Mat2::Identity()});
        p.durations.push_back({4.0});
    }
    CounterRng rng(6);
    const auto y = random_obs(40, rng);
    const auto m = messages_for(p, y, 12);
    const auto g = state_marginals(m, p.pi_bar, p.init);
    EXPECT_LE((g.array() - 1.0 / L).abs().maxCoeff(), 1e-6);
}

TEST(SampleSuperStates, SingleStep) {
    CounterRng rng(7);
    const auto p = random_params(3, rng);
    const auto y = random_obs(1, rng);
    const auto s = sample_super_states(messages_for(p, y, 5), p.pi_bar, p.init, rng);
    ASSERT_EQ(s.super_states.size(), 1u);
    EXPECT_EQ(s.super_states[0].duration, 1);
    EXPECT_EQ(s.label_seq.size(), 1u);
}

TEST(SampleSuperStates, StructuralInvariants) {
    CounterRng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const int L = 2 + trial % 4;
        const int d_max = 1 + trial % 9;
        const auto p = random_params(L, rng);
        const auto y = random_obs(30 + trial, rng);
        const auto s = sample_super_states(messages_for(p, y, d_max), p.pi_bar, p.init, rng);
        int total = 0;
        for (std::size_t q = 0; q < s.super_states.size(); ++q) {
            total += s.super_states[q].duration;
            EXPECT_GE(s.super_states[q].duration, 1);
            EXPECT_LE(s.super_states[q].duration, d_max);
            if (q > 0) { EXPECT_NE(s.super_states[q].state, s.super_states[q - 1].state); }
        }
        EXPECT_EQ(total, static_cast<int>(y.size()));
        EXPECT_EQ(s.label_seq, expand_super_states(s.super_states));
    }
}

TEST(SampleSuperStates, FrequenciesMatchExactPosterior) {
    // 10^4 draws; every cell within 3 sigma of the enumerated marginal.
    CounterRng rng(9);
    for (int d_max : {1, 3}) {
        const int L = 3, T = d_max == 1 ? 12 : 8;
        auto p = random_params(L, rng);
        const auto y = random_obs(T, rng);
        const auto m = messages_for(p, y, d_max);
        const auto exact = enumerate(y, p, d_max).marginals;
        Eigen::MatrixXd freq = Eigen::MatrixXd::Zero(T, L);
        const int n = 10000;
        for (int k = 0; k < n; ++k) {
            const auto s = sample_super_states(m, p.pi_bar, p.init, rng);
            for (int t = 0; t < T; ++t) freq(t, s.label_seq[t]) += 1.0 / n;
        }
        for (int t = 0; t < T; ++t)
            for (int i = 0; i < L; ++i) {
                const double q = exact(t, i);
                const double sigma = std::sqrt(q * (1 - q) / n);
                EXPECT_LE(std::abs(freq(t, i) - q), 3 * sigma + 1e-12) << "d_max=" << d_max << " t=" << t << " i=" << i;
            }
    }
}

TEST(SampleSuperStates, AlternatingBlocksAlternate) {
    // Blocks of 20 steps alternating between two well separated clouds.
    CounterRng rng(10);
    std::vector<Vec2> y;
    std::vector<int> truth;
    for (int b = 0; b < 10; ++b)
        for (int k = 0; k < 20; ++k) {
            const double c = b % 2 ? 2.0 : -2.0;
            y.emplace_back(c + 0.3 * standard_normal(rng), c + 0.3 * standard_normal(rng));
            truth.push_back(b % 2);
        }
    Params p;
    p.init = {0.5, 0.5};
    p.pi_bar = Eigen::MatrixXd(2, 2);
    p.pi_bar << 0, 1, 1, 0;
    p.emissions = {{Vec2(-2, -2), Mat2::Identity() * 0.09}, {Vec2(2, 2), Mat2::Identity() * 0.09}};
    p.durations = {{19.0}, {19.0}};
    const auto s = sample_super_states(messages_for(p, y, 60), p.pi_bar, p.init, rng);
    ASSERT_EQ(s.super_states.size(), 10u);
    for (std::size_t q = 0; q < 10; ++q) EXPECT_EQ(s.super_states[q].state, static_cast<int>(q % 2));
    EXPECT_EQ(s.label_seq, truth);
}
