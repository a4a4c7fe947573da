#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dpe/rng.hpp"

using namespace dpe;

TEST(CounterRng, SameKeySameStream) {
    CounterRng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
}

TEST(CounterRng, ChildStreamsAreIndependentOfParentPosition) {
    CounterRng a(7);
    const CounterRng c1 = a.child("trip-1");
    for (int i = 0; i < 10; ++i) a();
    CounterRng c2 = a.child("trip-1");
    CounterRng c1m = c1;
    EXPECT_EQ(c1m(), c2());
    EXPECT_NE(a.child("trip-1")(), a.child("trip-2")());
    EXPECT_NE(a.child(std::uint64_t{0})(), a.child(std::uint64_t{1})());
}

TEST(CounterRng, UniformMoments) {
    CounterRng rng(1);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = uniform_open(rng);
        ASSERT_GT(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
    }
    EXPECT_NEAR(s / n, 0.5, 0.005);
    EXPECT_NEAR(s2 / n - 0.25, 1.0 / 12.0, 0.002);
}

TEST(LogGamma, SmallShapeMeanMatches) {
    CounterRng rng(3);
    const double shape = 0.3;
    double s = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) s += std::exp(log_gamma_variate(rng, shape));
    EXPECT_NEAR(s / n, shape, 0.01);
}

TEST(LogGamma, TinyShapeStaysFinite) {
    CounterRng rng(4);
    for (int i = 0; i < 1000; ++i) {
        const double v = log_gamma_variate(rng, 1e-6);
        EXPECT_FALSE(std::isnan(v));
    }
}

TEST(LogDirichlet, NormalizedInLogSpace) {
    CounterRng rng(5);
    const std::vector<double> alpha{0.01, 2.0, 5.0, 1e-3};
    for (int i = 0; i < 100; ++i) {
        const auto lp = log_dirichlet(rng, alpha);
        EXPECT_NEAR(log_sum_exp(lp), 0.0, 1e-12);
    }
}

TEST(Categorical, FrequenciesFollowWeights) {
    CounterRng rng(6);
    const std::vector<double> lw{std::log(0.2), std::log(0.5), std::log(0.3), -std::numeric_limits<double>::infinity()};
    std::vector<int> counts(4, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[sample_log_categorical(rng, lw)];
    EXPECT_NEAR(counts[0] / double(n), 0.2, 0.006);
    EXPECT_NEAR(counts[1] / double(n), 0.5, 0.006);
    EXPECT_EQ(counts[3], 0);
}

TEST(Geometric, MeanFailures) {
    CounterRng rng(8);
    const double p = 0.25;
    double s = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) s += static_cast<double>(geometric_failures(rng, p));
    EXPECT_NEAR(s / n, (1 - p) / p, 0.05);
}
