#ifndef DPE_SIMULATE_HPP
#define DPE_SIMULATE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "ingest.hpp"
#include "moments.hpp"
#include "rng.hpp"

namespace dpe::sim {

/// A driving regime of the synthetic generator.
struct Regime {
    std::string name;
    Vec2 mean = Vec2::Zero();  // (m/s, m/s^2)
    Mat2 cov = Mat2::Zero();   // PSD; zero gives exact constant samples
    double dwell_steps = 20.0;  // expected segment length
    double weight = 0.0;       // target share of time steps
    std::optional<double> fuel_mean;  // gallons/mile
    double fuel_noise = 0.0;
    std::optional<double> emission_mean;  // g/mile
    double emission_noise = 0.0;

    bool is_idle() const { return mean.isZero(0.0); }
};

struct SyntheticFleetSpec {
    int n_vehicles = 10;
    int trips_per_vehicle = 3;
    int trip_min_steps = 2000;
    int trip_max_steps = 2000;
    double rate_hz = 10.0;
    double vehicle_mean_jitter = 0.0;  // std of per-vehicle speed offsets, m/s
    std::string id_prefix = "veh";
    std::vector<Regime> regimes;

    void validate() const {
        auto fail = [](const std::string& m) { throw InvalidConfig("simulate: " + m); };
        if (n_vehicles < 1) fail("n_vehicles must be positive");
        if (trips_per_vehicle < 1) fail("trips_per_vehicle must be positive");
        if (trip_min_steps < 1 || trip_max_steps < trip_min_steps) fail("bad trip length range");
        if (!(rate_hz > 0)) fail("rate_hz must be positive");
        if (!(vehicle_mean_jitter >= 0)) fail("vehicle_mean_jitter must be non-negative");
        if (regimes.empty()) fail("at least one regime required");
        double w = 0.0;
        for (const auto& r : regimes) {
            if (!(r.weight >= 0)) fail("regime " + r.name + ": negative weight");
            if (!(r.dwell_steps >= 1)) fail("regime " + r.name + ": dwell_steps must be >= 1");
            if (r.mean[0] < 0) fail("regime " + r.name + ": negative mean speed");
            if (!r.cov.allFinite() || r.cov(0, 1) != r.cov(1, 0)) fail("regime " + r.name + ": cov must be symmetric");
            if (Eigen::SelfAdjointEigenSolver<Mat2>(r.cov).eigenvalues().minCoeff() < -1e-12)
                fail("regime " + r.name + ": cov must be positive semi-definite");
            w += r.weight;
        }
        if (std::abs(w - 1.0) > 1e-9) fail("regime weights must sum to 1");
    }

    /// Probability that a new segment uses regime r. Segments are drawn
    /// i.i.d. with p_r proportional to weight / dwell, which makes the
    /// expected share of time steps equal to the weights.
    std::vector<double> segment_probabilities() const {
        std::vector<double> p;
        double s = 0.0;
        for (const auto& r : regimes) {
            p.push_back(r.weight / r.dwell_steps);
            s += p.back();
        }
        for (double& v : p) v /= s;
        return p;
    }

    std::string vehicle_id(int i) const {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%03d", i);
        return id_prefix + buf;
    }
};

struct SimulatedTrip {
    TripSeries trip;
    std::vector<int> truth;                     // regime per sample
    std::vector<std::pair<int, int>> segments;  // (regime, length) as generated
};

namespace detail {

inline Mat2 psd_sqrt(const Mat2& cov) {
    Eigen::SelfAdjointEigenSolver<Mat2> es(cov);
    const Vec2 ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline std::size_t draw_index(CounterRng& rng, const std::vector<double>& p) {
    double u = uniform_open(rng);
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (u < p[i]) return i;
        u -= p[i];
    }
    return p.size() - 1;
}

}  // namespace detail

/// Trips of one vehicle. The stream depends only on (seed, vehicle id).
inline std::vector<SimulatedTrip> simulate_vehicle(const SyntheticFleetSpec& spec, int index, std::uint64_t seed) {
    const std::string vid = spec.vehicle_id(index);
    CounterRng rng(derive_key(seed, vid));
    const auto p = spec.segment_probabilities();

    std::vector<Vec2> means;
    std::vector<Mat2> roots;
    for (const auto& r : spec.regimes) {
        Vec2 m = r.mean;
        if (!r.is_idle() && spec.vehicle_mean_jitter > 0) m[0] = std::max(0.0, m[0] + spec.vehicle_mean_jitter * standard_normal(rng));
        means.push_back(m);
        roots.push_back(detail::psd_sqrt(r.cov));
    }

    std::vector<SimulatedTrip> out;
    for (int k = 0; k < spec.trips_per_vehicle; ++k) {
        SimulatedTrip st;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "trip%02d", k);
        st.trip.vehicle_id = vid;
        st.trip.trip_id = buf;
        st.trip.rate_hz = spec.rate_hz;
        const int span = spec.trip_max_steps - spec.trip_min_steps + 1;
        const int len = spec.trip_min_steps + static_cast<int>(rng() % static_cast<std::uint64_t>(span));
        while (static_cast<int>(st.truth.size()) < len) {
            const int r = static_cast<int>(detail::draw_index(rng, p));
            const auto& reg = spec.regimes[static_cast<std::size_t>(r)];
            const int want = 1 + static_cast<int>(poisson_variate(rng, reg.dwell_steps - 1.0));
            const int d = std::min(want, len - static_cast<int>(st.truth.size()));
            st.segments.emplace_back(r, d);
            for (int j = 0; j < d; ++j) {
                const Vec2 z(standard_normal(rng), standard_normal(rng));
                const Vec2 y = means[static_cast<std::size_t>(r)] + roots[static_cast<std::size_t>(r)] * z;
                Sample s;
                s.t = static_cast<double>(st.truth.size()) / spec.rate_hz;
                s.v = std::max(0.0, y[0]);
                s.a = y[1];
                if (reg.fuel_mean) s.fuel_rate = std::max(0.0, *reg.fuel_mean + reg.fuel_noise * standard_normal(rng));
                if (reg.emission_mean)
                    s.emission_rate = std::max(0.0, *reg.emission_mean + reg.emission_noise * standard_normal(rng));
                st.trip.samples.push_back(s);
                st.truth.push_back(r);
            }
        }
        out.push_back(std::move(st));
    }
    return out;
}

inline std::vector<std::vector<SimulatedTrip>> simulate_fleet(const SyntheticFleetSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::vector<std::vector<SimulatedTrip>> out;
    for (int i = 0; i < spec.n_vehicles; ++i) out.push_back(simulate_vehicle(spec, i, seed));
    return out;
}

}  // namespace dpe::sim

#endif  // DPE_SIMULATE_HPP
