#ifndef DPE_RNG_HPP
#define DPE_RNG_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include <boost/random/gamma_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/poisson_distribution.hpp>

namespace dpe {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// Stafford variant 13 finalizer (the SplitMix64 output function).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

/// Combine a parent key with a string label into a child stream key.
inline std::uint64_t derive_key(std::uint64_t parent, std::string_view label) noexcept {
    return detail::mix64(detail::mix64(parent ^ detail::kGolden) ^ detail::fnv1a(label));
}

/// Combine a parent key with an integer index into a child stream key.
inline std::uint64_t derive_key(std::uint64_t parent, std::uint64_t index) noexcept {
    return detail::mix64(detail::mix64(parent + detail::kGolden) ^ detail::mix64(index + 1));
}

/**
 * Counter-based generator: the n-th output of a stream is a pure function of
 * (key, n), so streams for different trips or vehicles can be derived from
 * names instead of being split off a shared state. Satisfies
 * UniformRandomBitGenerator.
 */
class CounterRng {
public:
    using result_type = std::uint64_t;

    explicit CounterRng(std::uint64_t key = 0) noexcept : key_(key) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        const std::uint64_t x = detail::mix64(key_ ^ (counter_ * detail::kGolden));
        ++counter_;
        return detail::mix64(x + key_);
    }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    /// Child generator; does not advance this one.
    CounterRng child(std::string_view label) const noexcept { return CounterRng(derive_key(key_, label)); }
    CounterRng child(std::uint64_t index) const noexcept { return CounterRng(derive_key(key_, index)); }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Uniform on the open interval (0, 1).
inline double uniform_open(CounterRng& rng) {
    // 53 random bits, offset by half an ulp so 0 is never produced.
    return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double standard_normal(CounterRng& rng) {
    boost::random::normal_distribution<double> d(0.0, 1.0);
    return d(rng);
}

/// Gamma(shape, 1) variate.
inline double gamma_variate(CounterRng& rng, double shape) {
    boost::random::gamma_distribution<double> d(shape, 1.0);
    return d(rng);
}

/// log of a Gamma(shape, 1) variate; stays finite for tiny shapes where the
/// variate itself underflows.
inline double log_gamma_variate(CounterRng& rng, double shape) {
    if (shape >= 1.0) return std::log(gamma_variate(rng, shape));
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    return std::log(gamma_variate(rng, shape + 1.0)) + std::log(uniform_open(rng)) / shape;
}

inline unsigned poisson_variate(CounterRng& rng, double mean) {
    if (mean <= 0.0) return 0;
    boost::random::poisson_distribution<unsigned, double> d(mean);
    return d(rng);
}

/// Number of failures before the first success, success probability p.
inline std::uint64_t geometric_failures(CounterRng& rng, double p) {
    if (p >= 1.0) return 0;
    if (p <= 0.0) return std::numeric_limits<std::uint32_t>::max();
    return static_cast<std::uint64_t>(std::floor(std::log(uniform_open(rng)) / std::log1p(-p)));
}

inline double log_sum_exp(std::span<const double> x) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

/// Draw an index with probability proportional to exp(log_weights[i]).
inline std::size_t sample_log_categorical(CounterRng& rng, std::span<const double> log_weights) {
    const double lse = log_sum_exp(log_weights);
    double u = uniform_open(rng);
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < log_weights.size(); ++i) {
        const double p = std::exp(log_weights[i] - lse);
        if (p > 0.0) last_positive = i;
        if (u < p) return i;
        u -= p;
    }
    return last_positive;
}

/// Dirichlet draw returned as log probabilities.
inline std::vector<double> log_dirichlet(CounterRng& rng, std::span<const double> alpha) {
    std::vector<double> out(alpha.size());
    for (std::size_t i = 0; i < alpha.size(); ++i) out[i] = log_gamma_variate(rng, alpha[i]);
    const double lse = log_sum_exp(out);
    for (double& v : out) v -= lse;
    return out;
}

}  // namespace dpe

#endif  // DPE_RNG_HPP
