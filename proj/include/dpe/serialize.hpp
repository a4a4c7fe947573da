#ifndef DPE_SERIALIZE_HPP
#define DPE_SERIALIZE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "clustering.hpp"
#include "coupling.hpp"
#include "hsmm.hpp"
#include "ingest.hpp"
#include "primitives.hpp"
#include "simulate.hpp"

// JSON mappings for every artifact type. Fixed-size Eigen vectors are flat
// arrays, matrices are arrays of rows.

namespace nlohmann {

template <int R, int C>
struct adl_serializer<Eigen::Matrix<double, R, C>> {
    using M = Eigen::Matrix<double, R, C>;

    static void to_json(json& j, const M& m) {
        j = json::array();
        if constexpr (C == 1) {
            for (int i = 0; i < R; ++i) j.push_back(m(i));
        } else {
            for (int r = 0; r < R; ++r) {
                json row = json::array();
                for (int c = 0; c < C; ++c) row.push_back(m(r, c));
                j.push_back(row);
            }
        }
    }

    static void from_json(const json& j, M& m) {
        if (!j.is_array() || j.size() != static_cast<std::size_t>(R)) throw dpe::InvalidConfig("matrix shape mismatch");
        if constexpr (C == 1) {
            for (int i = 0; i < R; ++i) m(i) = j.at(static_cast<std::size_t>(i)).get<double>();
        } else {
            for (int r = 0; r < R; ++r) {
                const auto& row = j.at(static_cast<std::size_t>(r));
                if (!row.is_array() || row.size() != static_cast<std::size_t>(C)) throw dpe::InvalidConfig("matrix shape mismatch");
                for (int c = 0; c < C; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
            }
        }
    }
};

}  // namespace nlohmann

namespace dpe {

using json = nlohmann::json;

inline json matrix_to_json(const Eigen::MatrixXd& m) {
    json j = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        j.push_back(row);
    }
    return j;
}

inline Eigen::MatrixXd matrix_from_json(const json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.at(0).size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
    return m;
}

inline void to_json(json& j, const VehicleClass& c) { j = std::string(to_string(c)); }
inline void from_json(const json& j, VehicleClass& c) { c = vehicle_class_from_string(j.get<std::string>()); }

inline void to_json(json& j, const FleetQuery& q) {
    j = {{"min_total_duration_s", q.min_total_duration_s},
         {"require_valid_flag", q.require_valid_flag},
         {"allowed_classes", std::vector<VehicleClass>(q.allowed_classes.begin(), q.allowed_classes.end())}};
}

inline void from_json(const json& j, FleetQuery& q) {
    q = FleetQuery{};
    q.min_total_duration_s = j.value("min_total_duration_s", q.min_total_duration_s);
    q.require_valid_flag = j.value("require_valid_flag", q.require_valid_flag);
    if (j.contains("allowed_classes")) {
        const auto v = j.at("allowed_classes").get<std::vector<VehicleClass>>();
        q.allowed_classes = {v.begin(), v.end()};
    }
    if (!(q.min_total_duration_s > 0)) throw InvalidConfig("min_total_duration_s must be positive");
}

inline void to_json(json& j, const StandardizationParams& p) {
    j = {{"mean", p.mean}, {"std", p.std}, {"scope", "per_vehicle"}};
}

inline void from_json(const json& j, StandardizationParams& p) {
    p.mean = j.at("mean").get<Vec2>();
    p.std = j.at("std").get<Vec2>();
}

namespace hsmm {

inline void to_json(json& j, const HsmmHyperParams& h) {
    j = {{"gamma", h.gamma},
         {"alpha", h.alpha},
         {"kappa_sticky", h.kappa_sticky},
         {"L", h.L},
         {"niw", {{"mu0", h.niw.mu0}, {"lambda0", h.niw.lambda0}, {"psi", h.niw.psi}, {"nu0", h.niw.nu0}}},
         {"dur", {{"family", "poisson"}, {"a", h.dur.a}, {"b", h.dur.b}}},
         {"d_max", h.d_max},
         {"sweeps", h.sweeps},
         {"seed", h.seed}};
}

inline void from_json(const json& j, HsmmHyperParams& h) {
    h = HsmmHyperParams{};
    h.gamma = j.value("gamma", h.gamma);
    h.alpha = j.value("alpha", h.alpha);
    h.kappa_sticky = j.value("kappa_sticky", h.kappa_sticky);
    h.L = j.value("L", h.L);
    h.d_max = j.value("d_max", h.d_max);
    h.sweeps = j.value("sweeps", h.sweeps);
    h.seed = j.value("seed", h.seed);
    if (j.contains("niw")) {
        const auto& n = j.at("niw");
        if (n.contains("mu0")) h.niw.mu0 = n.at("mu0").get<Vec2>();
        h.niw.lambda0 = n.value("lambda0", h.niw.lambda0);
        if (n.contains("psi")) h.niw.psi = n.at("psi").get<Mat2>();
        h.niw.nu0 = n.value("nu0", h.niw.nu0);
    }
    if (j.contains("dur")) {
        const auto& d = j.at("dur");
        if (d.value("family", std::string("poisson")) != "poisson") throw InvalidConfig("only poisson durations are supported");
        h.dur.a = d.value("a", h.dur.a);
        h.dur.b = d.value("b", h.dur.b);
    }
    h.validate();
}

inline void to_json(json& j, const SuperState& s) { j = json::array({s.state, s.duration}); }
inline void from_json(const json& j, SuperState& s) {
    s.state = j.at(0).get<int>();
    s.duration = j.at(1).get<int>();
}

inline void to_json(json& j, const PosteriorSample& s) {
    const auto& p = s.params;
    json em = json::array(), du = json::array();
    for (const auto& e : p.emissions) em.push_back({{"mean", e.mean}, {"cov", e.cov}});
    for (const auto& d : p.durations) du.push_back({{"rate", d.rate}});
    j = {{"beta", p.beta}, {"pi", matrix_to_json(p.pi)}, {"pi_bar", matrix_to_json(p.pi_bar)}, {"emissions", em},
         {"durations", du}, {"used_states", s.used_states()}};
    json trips = json::array();
    for (const auto& t : s.trips) trips.push_back({{"super_states", t.super_states}, {"label_seq", t.label_seq}});
    j["trips"] = trips;
}

inline void from_json(const json& j, PosteriorSample& s) {
    auto& p = s.params;
    p.beta = j.at("beta").get<std::vector<double>>();
    p.pi = matrix_from_json(j.at("pi"));
    p.pi_bar = matrix_from_json(j.at("pi_bar"));
    p.emissions.clear();
    for (const auto& e : j.at("emissions")) p.emissions.push_back({e.at("mean").get<Vec2>(), e.at("cov").get<Mat2>()});
    p.durations.clear();
    for (const auto& d : j.at("durations")) p.durations.push_back({d.at("rate").get<double>()});
    s.trips.clear();
    for (const auto& t : j.at("trips")) {
        TripLabels tl;
        tl.super_states = t.at("super_states").get<std::vector<SuperState>>();
        tl.label_seq = t.at("label_seq").get<std::vector<int>>();
        s.trips.push_back(std::move(tl));
    }
}

}  // namespace hsmm

inline void to_json(json& j, const SegmentRef& s) { j = json::array({s.trip_id, s.start, s.duration}); }
inline void from_json(const json& j, SegmentRef& s) {
    s.trip_id = j.at(0).get<std::string>();
    s.start = j.at(1).get<std::size_t>();
    s.duration = j.at(2).get<std::size_t>();
}

inline void to_json(json& j, const Primitive& p) {
    j = {{"vehicle_id", p.vehicle_id}, {"label", p.label}, {"point_count", p.point_count}, {"fraction", p.fraction},
         {"mean", p.mean}, {"cov", p.cov}, {"segments", p.segments}};
}

inline void from_json(const json& j, Primitive& p) {
    p.vehicle_id = j.at("vehicle_id").get<std::string>();
    p.label = j.at("label").get<int>();
    p.point_count = j.at("point_count").get<std::uint64_t>();
    p.fraction = j.at("fraction").get<double>();
    p.mean = j.at("mean").get<Vec2>();
    p.cov = j.at("cov").get<Mat2>();
    p.segments = j.at("segments").get<std::vector<SegmentRef>>();
}

inline void to_json(json& j, const Moments& m) { j = {{"count", m.count}, {"mean", m.mean}, {"cov", m.cov}}; }
inline void from_json(const json& j, Moments& m) {
    m.count = j.at("count").get<std::uint64_t>();
    m.mean = j.at("mean").get<Vec2>();
    m.cov = j.at("cov").get<Mat2>();
}

inline void to_json(json& j, const FeatureScaling& s) { j = {{"mean", s.mean}, {"std", s.std}}; }
inline void from_json(const json& j, FeatureScaling& s) {
    s.mean = j.at("mean").get<Feature>();
    s.std = j.at("std").get<Feature>();
}

inline void to_json(json& j, const ClusterModel& m) {
    j = {{"k", m.k},
         {"centroids", m.centroids},
         {"assignment", m.assignment},
         {"objective", m.objective},
         {"objective_trace", m.objective_trace},
         {"iterations", m.iterations},
         {"converged", m.converged},
         {"best_restart", m.best_restart},
         {"cluster_moments", m.cluster_moments},
         {"omega", m.omega},
         {"rank", m.rank}};
}

inline void from_json(const json& j, ClusterModel& m) {
    m.k = j.at("k").get<int>();
    m.centroids = j.at("centroids").get<std::vector<Feature>>();
    m.assignment = j.at("assignment").get<std::vector<int>>();
    m.objective = j.at("objective").get<double>();
    m.objective_trace = j.at("objective_trace").get<std::vector<double>>();
    m.iterations = j.at("iterations").get<int>();
    m.converged = j.at("converged").get<bool>();
    m.best_restart = j.at("best_restart").get<int>();
    m.cluster_moments = j.at("cluster_moments").get<std::vector<Moments>>();
    m.omega = j.at("omega").get<std::vector<double>>();
    m.rank = j.at("rank").get<std::vector<int>>();
}

inline void to_json(json& j, const CouplingEntry& e) {
    j = {{"rank", e.rank}, {"cluster_id", e.cluster_id}, {"primitive_label", e.primitive_label}, {"kl", e.kl},
         {"cov_floor_applied", e.floored}};
}

inline void from_json(const json& j, CouplingEntry& e) {
    e.rank = j.at("rank").get<int>();
    e.cluster_id = j.at("cluster_id").get<int>();
    e.primitive_label = j.at("primitive_label").get<int>();
    e.kl = j.at("kl").get<double>();
    e.floored = j.at("cov_floor_applied").get<bool>();
}

inline void to_json(json& j, const CouplingMap& m) {
    j = {{"direction", std::string(to_string(m.direction))}, {"entries", m.entries}};
}

inline void from_json(const json& j, CouplingMap& m) {
    m.direction = kl_direction_from_string(j.at("direction").get<std::string>());
    m.entries = j.at("entries").get<std::vector<CouplingEntry>>();
}

inline void to_json(json& j, const EvaluationResult& r) {
    json per = json::array();
    for (const auto& c : r.per_cluster) {
        per.push_back({{"rank", c.rank}, {"cluster_id", c.cluster_id}, {"primitive_label", c.primitive_label},
                       {"omega", c.omega}, {"E_i", c.e_value}, {"contribution", c.contribution}});
    }
    j = {{"channel", std::string(to_string(r.channel))}, {"E", r.E}, {"per_cluster", per}};
    j["mpg"] = r.mpg ? json(*r.mpg) : json(nullptr);
}

inline void from_json(const json& j, EvaluationResult& r) {
    r.channel = channel_from_string(j.at("channel").get<std::string>());
    r.E = j.at("E").get<double>();
    r.mpg = j.at("mpg").is_null() ? std::nullopt : std::optional<double>(j.at("mpg").get<double>());
    r.per_cluster.clear();
    for (const auto& c : j.at("per_cluster")) {
        r.per_cluster.push_back({c.at("rank").get<int>(), c.at("cluster_id").get<int>(), c.at("primitive_label").get<int>(),
                                 c.at("omega").get<double>(), c.at("E_i").get<double>(), c.at("contribution").get<double>()});
    }
}

namespace sim {

inline void to_json(json& j, const Regime& r) {
    j = {{"name", r.name}, {"mean", r.mean}, {"cov", r.cov}, {"dwell_steps", r.dwell_steps}, {"weight", r.weight}};
    if (r.fuel_mean) {
        j["fuel_mean"] = *r.fuel_mean;
        j["fuel_noise"] = r.fuel_noise;
    }
    if (r.emission_mean) {
        j["emission_mean"] = *r.emission_mean;
        j["emission_noise"] = r.emission_noise;
    }
}

inline void from_json(const json& j, Regime& r) {
    r = Regime{};
    r.name = j.value("name", std::string{});
    r.mean = j.at("mean").get<Vec2>();
    r.cov = j.at("cov").get<Mat2>();
    r.dwell_steps = j.at("dwell_steps").get<double>();
    r.weight = j.at("weight").get<double>();
    if (j.contains("fuel_mean")) r.fuel_mean = j.at("fuel_mean").get<double>();
    r.fuel_noise = j.value("fuel_noise", 0.0);
    if (j.contains("emission_mean")) r.emission_mean = j.at("emission_mean").get<double>();
    r.emission_noise = j.value("emission_noise", 0.0);
}

inline void to_json(json& j, const SyntheticFleetSpec& s) {
    j = {{"n_vehicles", s.n_vehicles},       {"trips_per_vehicle", s.trips_per_vehicle},
         {"trip_min_steps", s.trip_min_steps}, {"trip_max_steps", s.trip_max_steps},
         {"rate_hz", s.rate_hz},             {"vehicle_mean_jitter", s.vehicle_mean_jitter},
         {"id_prefix", s.id_prefix},         {"regimes", s.regimes}};
}

inline void from_json(const json& j, SyntheticFleetSpec& s) {
    s = SyntheticFleetSpec{};
    s.n_vehicles = j.value("n_vehicles", s.n_vehicles);
    s.trips_per_vehicle = j.value("trips_per_vehicle", s.trips_per_vehicle);
    s.trip_min_steps = j.value("trip_min_steps", s.trip_min_steps);
    s.trip_max_steps = j.value("trip_max_steps", s.trip_max_steps);
    s.rate_hz = j.value("rate_hz", s.rate_hz);
    s.vehicle_mean_jitter = j.value("vehicle_mean_jitter", s.vehicle_mean_jitter);
    s.id_prefix = j.value("id_prefix", s.id_prefix);
    s.regimes = j.at("regimes").get<std::vector<Regime>>();
    s.validate();
}

}  // namespace sim

}  // namespace dpe

#endif  // DPE_SERIALIZE_HPP
