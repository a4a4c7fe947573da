#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "dpe/hsmm.hpp"

using namespace dpe;
using namespace dpe::hsmm;

namespace {

struct TwoState {
    std::vector<Vec2> y;
    std::vector<int> truth;
};

TwoState two_state(int T, std::uint64_t seed) {
    CounterRng rng(seed);
    TwoState out;
    int z = static_cast<int>(rng() % 2);
    while (static_cast<int>(out.y.size()) < T) {
        const int d = 1 + static_cast<int>(poisson_variate(rng, 20.0));
        const double c = z ? 2.0 : -2.0;
        for (int k = 0; k < d && static_cast<int>(out.y.size()) < T; ++k) {
            out.y.emplace_back(c + standard_normal(rng), c + standard_normal(rng));
            out.truth.push_back(z);
        }
        z = 1 - z;
    }
    return out;
}

// Fraction of steps that agree after mapping each inferred label to the
// truth label it overlaps most.
double greedy_agreement(const std::vector<int>& got, const std::vector<int>& truth) {
    std::map<int, std::map<int, int>> overlap;
    for (std::size_t t = 0; t < got.size(); ++t) ++overlap[got[t]][truth[t]];
    int agree = 0;
    for (const auto& [g, row] : overlap) {
        int best = 0;
        for (const auto& [tr, n] : row) best = std::max(best, n);
        agree += best;
    }
    return static_cast<double>(agree) / static_cast<double>(got.size());
}

void expect_invariants(const PosteriorSample& s, const std::vector<TripObs>& obs, int d_max) {
    const int L = s.params.num_states();
    double bsum = 0;
    for (double b : s.params.beta) bsum += b;
    EXPECT_NEAR(bsum, 1.0, 1e-9);
    for (int i = 0; i < L; ++i) {
        EXPECT_NEAR(s.params.pi.row(i).sum(), 1.0, 1e-9);
        EXPECT_NEAR(s.params.pi_bar.row(i).sum(), 1.0, 1e-9);
        EXPECT_EQ(s.params.pi_bar(i, i), 0.0);
        EXPECT_TRUE(is_spd(s.params.emissions[i].cov));
        EXPECT_TRUE(s.params.emissions[i].mean.allFinite());
        EXPECT_GT(s.params.durations[i].rate, 0.0);
    }
    ASSERT_EQ(s.trips.size(), obs.size());
    for (std::size_t k = 0; k < obs.size(); ++k) {
        const auto& tl = s.trips[k];
        int total = 0;
        for (std::size_t q = 0; q < tl.super_states.size(); ++q) {
            total += tl.super_states[q].duration;
            EXPECT_LE(tl.super_states[q].duration, d_max);
            if (q) { EXPECT_NE(tl.super_states[q].state, tl.super_states[q - 1].state); }
        }
        EXPECT_EQ(total, static_cast<int>(obs[k].y.size()));
        EXPECT_EQ(tl.label_seq, expand_super_states(tl.super_states));
    }
    EXPECT_LE(s.used_states(), L);
}

}  // namespace

TEST(HsmmFit, RecoversTwoStateGenerator) {
    const auto data = two_state(2000, 21);
    const std::vector<TripObs> obs{{"trip00", data.y}};
    HsmmHyperParams hp;
    hp.L = 10;
    hp.d_max = 100;
    hp.sweeps = 60;
    hp.seed = 5;
    const auto s = fit(obs, hp);
    EXPECT_GE(greedy_agreement(s.trips[0].label_seq, data.truth), 0.90);
    // The reverse mapping must also hold so two truth states are not merged.
    EXPECT_GE(greedy_agreement(data.truth, s.trips[0].label_seq), 0.90);
}

TEST(HsmmFit, IdenticalPointsUseOneState) {
    const std::vector<TripObs> obs{{"t", std::vector<Vec2>(10, Vec2(0.1, -0.2))}};
    HsmmHyperParams hp;
    hp.L = 5;
    hp.d_max = 20;
    hp.sweeps = 50;
    const auto s = fit(obs, hp);
    EXPECT_EQ(s.used_states(), 1);
    ASSERT_EQ(s.trips[0].super_states.size(), 1u);
    EXPECT_EQ(s.trips[0].super_states[0].duration, 10);
}

TEST(HsmmFit, DeterministicForSeed) {
    const auto data = two_state(400, 22);
    const std::vector<TripObs> obs{{"a", {data.y.begin(), data.y.begin() + 150}}, {"b", {data.y.begin() + 150, data.y.end()}}};
    HsmmHyperParams hp;
    hp.L = 6;
    hp.d_max = 60;
    hp.sweeps = 10;
    hp.seed = 99;
    const auto s1 = fit(obs, hp, "veh");
    const auto s2 = fit(obs, hp, "veh");
    EXPECT_EQ(s1.params.beta, s2.params.beta);
    EXPECT_EQ(s1.params.pi, s2.params.pi);
    for (int i = 0; i < hp.L; ++i) {
        EXPECT_EQ(s1.params.emissions[i].mean, s2.params.emissions[i].mean);
        EXPECT_EQ(s1.params.emissions[i].cov, s2.params.emissions[i].cov);
        EXPECT_EQ(s1.params.durations[i].rate, s2.params.durations[i].rate);
    }
    for (std::size_t k = 0; k < obs.size(); ++k) EXPECT_EQ(s1.trips[k].super_states, s2.trips[k].super_states);

    // Reordering trips changes nothing, since trip streams are keyed by trip id.
    const std::vector<TripObs> swapped{obs[1], obs[0]};
    const auto s3 = fit(swapped, hp, "veh");
    EXPECT_EQ(s3.trips[0].super_states, s1.trips[1].super_states);
    EXPECT_EQ(s3.params.pi, s1.params.pi);

    const auto other = fit(obs, hp, "other");
    EXPECT_NE(other.params.beta, s1.params.beta);
}

TEST(HsmmFit, InvariantsAndFiniteDensityEverySweep) {
    const auto data = two_state(600, 23);
    const std::vector<TripObs> obs{{"a", {data.y.begin(), data.y.begin() + 250}}, {"b", {data.y.begin() + 250, data.y.end()}}};
    HsmmHyperParams hp;
    hp.L = 8;
    hp.d_max = 50;
    hp.sweeps = 25;
    int seen = 0;
    fit(obs, hp, {}, [&](int sweep, const PosteriorSample& s) {
        EXPECT_EQ(sweep, ++seen);
        expect_invariants(s, obs, hp.d_max);
        EXPECT_TRUE(std::isfinite(joint_log_density(s, obs, hp)));
    });
    EXPECT_EQ(seen, hp.sweeps);
}

TEST(HsmmFit, RejectsTooLittleData) {
    HsmmHyperParams hp;
    EXPECT_THROW(fit(std::vector<TripObs>{{"t", std::vector<Vec2>(9, Vec2::Zero())}}, hp), EmptyInput);
    EXPECT_THROW(fit(std::vector<TripObs>{{"t", std::vector<Vec2>(20, Vec2::Zero())}, {"u", {}}}, hp), EmptyInput);
}

TEST(HsmmHyperParams, ValidateRejectsBadValues) {
    HsmmHyperParams hp;
    hp.L = 1;
    EXPECT_THROW(hp.validate(), InvalidConfig);
    hp = {};
    hp.niw.nu0 = 3.0;
    EXPECT_THROW(hp.validate(), InvalidConfig);
    hp = {};
    hp.d_max = 0;
    EXPECT_THROW(hp.validate(), InvalidConfig);
    EXPECT_NO_THROW(HsmmHyperParams{}.validate());
}
