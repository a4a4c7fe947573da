#ifndef DPE_PIPELINE_HPP
#define DPE_PIPELINE_HPP

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "clustering.hpp"
#include "coupling.hpp"
#include "error.hpp"
#include "hsmm.hpp"
#include "ingest.hpp"
#include "primitives.hpp"
#include "serialize.hpp"
#include "simulate.hpp"

namespace dpe {

namespace fs = std::filesystem;

struct PipelineConfig {
    fs::path store_dir = "store";
    FleetQuery fleet_query;
    hsmm::HsmmHyperParams hsmm;
    int k = 200;
    int restarts = 5;
    int max_iter = 300;
    double tail_fraction = 0.05;
    KlDirection kl_direction = KlDirection::cluster_to_primitive;
    // Eigenvalue floor for coupling, (m/s)^2 and (m/s^2)^2. Idle primitives
    // have exactly zero variance; below ~1e-6 their KL is dominated by
    // variance differences far under sensor resolution.
    double cov_floor = 1e-6;
    std::uint64_t seed = 0;
    double rate_hz = 10.0;  // used when a vehicle directory does not declare one
    int workers = 0;        // 0: one per hardware thread

    void validate() const {
        auto fail = [](const std::string& m) { throw InvalidConfig("config: " + m); };
        hsmm.validate();
        if (k < 1) fail("k must be positive");
        if (restarts < 1) fail("restarts must be positive");
        if (max_iter < 1) fail("max_iter must be positive");
        if (!(tail_fraction >= 0.0 && tail_fraction < 1.0)) fail("tail_fraction must be in [0, 1)");
        if (!(rate_hz > 0)) fail("rate_hz must be positive");
        if (!(cov_floor > 0)) fail("cov_floor must be positive");
        if (workers < 0) fail("workers must be non-negative");
        if (!(fleet_query.min_total_duration_s > 0)) fail("min_total_duration_s must be positive");
    }

    /// Settings that affect artifact contents. store_dir and workers do not.
    nlohmann::json provenance() const {
        nlohmann::json h = hsmm;
        h.erase("seed");
        return {{"fleet_query", fleet_query}, {"hsmm", h},
                {"k", k},
                {"restarts", restarts},
                {"max_iter", max_iter},
                {"tail_fraction", tail_fraction},
                {"kl_direction", std::string(to_string(kl_direction))},
                {"cov_floor", cov_floor},
                {"seed", seed},
                {"rate_hz", rate_hz}};
    }

    std::string hash() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(detail::fnv1a(provenance().dump())));
        return buf;
    }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
    j = c.provenance();
    j["workers"] = c.workers;
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
    static const std::set<std::string> known{"store_dir", "fleet_query", "hsmm", "k", "restarts", "max_iter",
                                             "tail_fraction", "kl_direction", "cov_floor", "seed", "rate_hz",
                                             "workers"};
    if (!j.is_object()) throw InvalidConfig("config must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.contains(key)) throw InvalidConfig("unknown config key '" + key + "'");
    c = PipelineConfig{};
    if (j.contains("store_dir")) c.store_dir = j.at("store_dir").get<std::string>();
    if (j.contains("fleet_query")) c.fleet_query = j.at("fleet_query").get<FleetQuery>();
    if (j.contains("hsmm")) c.hsmm = j.at("hsmm").get<hsmm::HsmmHyperParams>();
    c.k = j.value("k", c.k);
    c.restarts = j.value("restarts", c.restarts);
    c.max_iter = j.value("max_iter", c.max_iter);
    c.tail_fraction = j.value("tail_fraction", c.tail_fraction);
    if (j.contains("kl_direction")) c.kl_direction = kl_direction_from_string(j.at("kl_direction").get<std::string>());
    c.cov_floor = j.value("cov_floor", c.cov_floor);
    c.seed = j.value("seed", c.seed);
    c.rate_hz = j.value("rate_hz", c.rate_hz);
    c.workers = j.value("workers", c.workers);
    c.hsmm.seed = c.seed;
}

inline PipelineConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidConfig("cannot open config " + path.string());
    try {
        PipelineConfig c = nlohmann::json::parse(in).get<PipelineConfig>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(path.string() + ": " + e.what());
    } catch (const Error& e) {
        rethrow_with_context(e, path.string());
    }
}

/// Stage options shared by the commands.
struct RunOptions {
    bool force = false;    // accept a store written under another config
    bool verbose = true;   // print summaries to `out`
    std::ostream* out = &std::cout;
    std::ostream* log = &std::cerr;
};

// ---------------------------------------------------------------------------
// Artifact store

class Store {
public:
    Store(PipelineConfig cfg, RunOptions opt) : cfg_(std::move(cfg)), opt_(opt), hash_(cfg_.hash()) {}

    const PipelineConfig& config() const { return cfg_; }
    const RunOptions& options() const { return opt_; }
    const std::string& hash() const { return hash_; }
    fs::path path(const fs::path& rel) const { return cfg_.store_dir / rel; }
    bool exists(const fs::path& rel) const { return fs::exists(path(rel)); }

    void write_text(const fs::path& rel, const std::string& text) const {
        const fs::path p = path(rel);
        fs::create_directories(p.parent_path());
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out << text;
        if (!out) throw DataError("IoError", "cannot write " + p.string());
    }

    /// Writes `j` with the config hash embedded.
    void write_json(const fs::path& rel, nlohmann::json j) const {
        j["config_hash"] = hash_;
        write_text(rel, j.dump(1) + "\n");
    }

    /// Reads an artifact produced by `stage`, refusing foreign config hashes.
    nlohmann::json read_json(const fs::path& rel, const std::string& stage) const {
        const fs::path p = path(rel);
        std::ifstream in(p);
        if (!in) throw MissingArtifact(p.string() + " not found; run `dpe " + stage + "` first");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw MissingArtifact(p.string() + " is corrupt (" + e.what() + "); rerun `dpe " + stage + "`");
        }
        const std::string h = j.value("config_hash", std::string{});
        if (h != hash_ && !opt_.force) {
            throw ConfigMismatch(p.string() + " was written under config " + h + ", current config is " + hash_ +
                                 " (use --force to override)");
        }
        return j;
    }

    /// Confirms the store was initialized under the current config.
    void check_config() const {
        if (!exists("config.json")) throw MissingArtifact(path("config.json").string() + " not found; run `dpe ingest` first");
        read_json("config.json", "ingest");
    }

    TripSeries read_trip(const std::string& vehicle_id, const std::string& trip_id, const TripInfo& info) const {
        const fs::path p = path(fs::path("trips") / vehicle_id / (trip_id + ".csv"));
        std::ifstream in(p);
        if (!in) throw MissingArtifact(p.string() + " not found; run `dpe ingest` first");
        try {
            return parse_trip_csv(in, info);
        } catch (const Error& e) {
            rethrow_with_context(e, p.string());
        }
    }

    void warn(const std::string& msg) const {
        if (opt_.log) *opt_.log << "warning: " << msg << "\n";
    }

private:
    PipelineConfig cfg_;
    RunOptions opt_;
    std::string hash_;
};

namespace detail {

inline std::string fixed(double x, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << x;
    return s.str();
}

inline std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (directories ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

struct FleetVehicle {
    std::string vehicle_id;
    VehicleClass vehicle_class = VehicleClass::light_duty_car;
    double rate_hz = 10.0;
    std::vector<std::string> trip_ids;
};

inline std::vector<FleetVehicle> read_fleet(const Store& store) {
    const auto j = store.read_json("fleet.json", "ingest");
    std::vector<FleetVehicle> out;
    for (const auto& v : j.at("vehicles")) {
        FleetVehicle fv;
        fv.vehicle_id = v.at("vehicle_id").get<std::string>();
        fv.vehicle_class = v.at("vehicle_class").get<VehicleClass>();
        fv.rate_hz = v.at("rate_hz").get<double>();
        for (const auto& t : v.at("trips")) fv.trip_ids.push_back(t.at("trip_id").get<std::string>());
        out.push_back(std::move(fv));
    }
    return out;
}

inline std::vector<TripSeries> load_trips(const Store& store, const FleetVehicle& v) {
    std::vector<TripSeries> trips;
    for (const auto& tid : v.trip_ids) trips.push_back(store.read_trip(v.vehicle_id, tid, {v.vehicle_id, tid, v.rate_hz, v.vehicle_class}));
    return trips;
}

inline FleetVehicle find_vehicle(const Store& store, const std::string& vehicle_id) {
    for (auto& v : read_fleet(store))
        if (v.vehicle_id == vehicle_id) return v;
    throw MissingArtifact("vehicle '" + vehicle_id + "' is not in fleet.json");
}

/// Label sequences per trip, in fleet trip order.
inline std::vector<std::vector<int>> read_labels(const Store& store, const std::string& vehicle_id) {
    const auto j = store.read_json(fs::path("segmentation") / (vehicle_id + ".json"), "segment");
    std::vector<std::vector<int>> out;
    for (const auto& t : j.at("posterior").at("trips")) out.push_back(t.at("label_seq").get<std::vector<int>>());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

struct IngestSummary {
    struct Row {
        std::string vehicle_id;
        std::size_t trips = 0;
        std::size_t samples = 0;
        double duration_s = 0.0;
    };
    std::vector<Row> kept;
    std::vector<std::pair<std::string, std::string>> excluded;  // (vehicle, reason)
};

/**
 * Read one CSV per trip from `<input>/<vehicle_id>/` (optional
 * `vehicle.json` with "vehicle_class" and "rate_hz"), apply the fleet query
 * and (re)initialize the store with the surviving trips.
 */
inline IngestSummary cmd_ingest(const PipelineConfig& cfg, const fs::path& input, const RunOptions& opt = {}) {
    const Store store(cfg, opt);
    if (!fs::is_directory(input)) throw EmptyInput("input directory " + input.string() + " does not exist");
    if (store.exists("config.json") && !opt.force) {
        std::ifstream in(store.path("config.json"));
        const auto old = nlohmann::json::parse(in, nullptr, false);
        if (old.is_discarded() || old.value("config_hash", std::string{}) != store.hash()) {
            throw ConfigMismatch(store.path("config.json").string() +
                                 " belongs to another config (use --force to reinitialize the store)");
        }
    }

    std::vector<TripSeries> all;
    std::map<std::string, double> rates;
    for (const auto& vdir : detail::sorted_entries(input, true)) {
        TripInfo info{vdir.filename().string(), "", cfg.rate_hz, VehicleClass::light_duty_car};
        const fs::path meta = vdir / "vehicle.json";
        if (fs::exists(meta)) {
            try {
                std::ifstream in(meta);
                const auto j = nlohmann::json::parse(in);
                if (j.contains("vehicle_class")) info.vehicle_class = j.at("vehicle_class").get<VehicleClass>();
                info.rate_hz = j.value("rate_hz", info.rate_hz);
            } catch (const nlohmann::json::exception& e) {
                throw MalformedRow(meta.string() + ": " + e.what());
            } catch (const Error& e) {
                rethrow_with_context(e, meta.string());
            }
        }
        rates[info.vehicle_id] = info.rate_hz;
        for (const auto& file : detail::sorted_entries(vdir, false)) {
            if (file.extension() != ".csv") continue;
            info.trip_id = file.stem().string();
            std::ifstream in(file);
            try {
                all.push_back(parse_trip_csv(in, info));
            } catch (const Error& e) {
                rethrow_with_context(e, file.string());
            }
        }
    }
    if (all.empty()) throw EmptyInput("no trip CSV files under " + input.string());

    const auto fleet = filter_fleet(all, cfg.fleet_query);

    for (const char* stale : {"trips", "standardization", "segmentation", "primitives", "clusters", "coupling",
                              "evaluation", "report"})
        fs::remove_all(store.path(stale));
    fs::remove(store.path("fleet.json"));
    store.write_json("config.json", {{"config", cfg.provenance()}});

    IngestSummary summary;
    std::set<std::string> kept_ids;
    nlohmann::json vehicles = nlohmann::json::array();
    for (const auto& vt : fleet) {
        nlohmann::json trips = nlohmann::json::array();
        for (const auto& trip : vt.trips) {
            std::ostringstream csv;
            write_trip_csv(csv, trip);
            store.write_text(fs::path("trips") / vt.vehicle_id / (trip.trip_id + ".csv"), csv.str());
            trips.push_back({{"trip_id", trip.trip_id}, {"samples", trip.samples.size()}, {"duration_s", trip.duration_s()}});
        }
        vehicles.push_back({{"vehicle_id", vt.vehicle_id},
                            {"vehicle_class", vt.vehicle_class},
                            {"rate_hz", rates[vt.vehicle_id]},
                            {"total_duration_s", vt.total_duration_s()},
                            {"sample_count", vt.sample_count()},
                            {"trips", trips}});
        summary.kept.push_back({vt.vehicle_id, vt.trips.size(), vt.sample_count(), vt.total_duration_s()});
        kept_ids.insert(vt.vehicle_id);
    }
    std::map<std::string, std::string> excluded;
    for (const auto& t : all) {
        if (kept_ids.contains(t.vehicle_id) || excluded.contains(t.vehicle_id)) continue;
        excluded[t.vehicle_id] = cfg.fleet_query.allowed_classes.contains(t.vehicle_class)
                                     ? "below min_total_duration_s"
                                     : "vehicle class " + std::string(to_string(t.vehicle_class));
    }
    nlohmann::json ex = nlohmann::json::array();
    for (const auto& [vid, why] : excluded) {
        ex.push_back({{"vehicle_id", vid}, {"reason", why}});
        summary.excluded.emplace_back(vid, why);
    }
    store.write_json("fleet.json", {{"query", cfg.fleet_query}, {"vehicles", vehicles}, {"excluded", ex}});

    if (opt.verbose && opt.out) {
        auto& o = *opt.out;
        double total = 0.0;
        std::size_t trips = 0;
        for (const auto& r : summary.kept) {
            total += r.duration_s;
            trips += r.trips;
        }
        o << "Fleet summary\n";
        o << "  vehicles      " << summary.kept.size() << "\n";
        o << "  trips         " << trips << "\n";
        o << "  duration (h)  " << detail::fixed(total / 3600.0, 2) << "\n";
        o << "  excluded      " << summary.excluded.size() << "\n";
        o << "\n  vehicle_id            trips    samples  duration_h\n";
        for (const auto& r : summary.kept) {
            o << "  " << std::left << std::setw(20) << r.vehicle_id << std::right << std::setw(7) << r.trips
              << std::setw(11) << r.samples << std::setw(12) << detail::fixed(r.duration_s / 3600.0, 3) << "\n";
        }
        for (const auto& [vid, why] : summary.excluded) o << "  excluded " << vid << ": " << why << "\n";
    }
    return summary;
}

/// Write a synthetic fleet as ingestible trip CSVs plus truth labels.
inline void cmd_simulate(const sim::SyntheticFleetSpec& spec, const fs::path& out_dir, std::uint64_t seed,
                         const RunOptions& opt = {}) {
    spec.validate();
    fs::create_directories(out_dir);
    auto write = [](const fs::path& p, const std::string& text) {
        fs::create_directories(p.parent_path());
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out << text;
        if (!out) throw DataError("IoError", "cannot write " + p.string());
    };
    nlohmann::json names = nlohmann::json::array();
    for (const auto& r : spec.regimes) names.push_back(r.name);
    write(out_dir / "simulation.json", nlohmann::json{{"spec", spec}, {"seed", seed}}.dump(1) + "\n");
    std::size_t steps = 0;
    for (int i = 0; i < spec.n_vehicles; ++i) {
        const auto trips = sim::simulate_vehicle(spec, i, seed);
        const fs::path vdir = out_dir / spec.vehicle_id(i);
        write(vdir / "vehicle.json",
              nlohmann::json{{"vehicle_class", VehicleClass::light_duty_car}, {"rate_hz", spec.rate_hz}}.dump(1) + "\n");
        for (const auto& st : trips) {
            std::ostringstream csv;
            write_trip_csv(csv, st.trip);
            write(vdir / (st.trip.trip_id + ".csv"), csv.str());
            write(vdir / (st.trip.trip_id + ".truth.json"),
                  nlohmann::json{{"regimes", names}, {"labels", st.truth}}.dump() + "\n");
            steps += st.truth.size();
        }
    }
    if (opt.verbose && opt.out) {
        *opt.out << "simulated " << spec.n_vehicles << " vehicles, " << spec.n_vehicles * spec.trips_per_vehicle
                 << " trips, " << steps << " samples into " << out_dir.string() << "\n";
    }
}

struct SegmentResult {
    std::vector<std::string> segmented;
    std::vector<std::pair<std::string, std::string>> rejected;  // (vehicle, reason)
};

/**
 * Standardize, segment and summarize every vehicle. Vehicles are fitted
 * concurrently; each uses its own random stream keyed by vehicle_id, so the
 * worker count does not change any artifact.
 */
inline SegmentResult cmd_segment(const PipelineConfig& cfg, const RunOptions& opt = {}) {
    const Store store(cfg, opt);
    store.check_config();
    const auto fleet = detail::read_fleet(store);
    if (fleet.empty()) throw EmptyInput("fleet.json lists no vehicles");
    for (const char* stale : {"standardization", "segmentation", "primitives"}) fs::remove_all(store.path(stale));

    struct Outcome {
        std::optional<std::string> rejected;
        std::exception_ptr error;
    };
    std::vector<Outcome> outcomes(fleet.size());
    std::atomic<std::size_t> next{0};

    auto work = [&] {
        for (std::size_t i = next++; i < fleet.size(); i = next++) {
            const auto& v = fleet[i];
            try {
                const auto trips = detail::load_trips(store, v);
                std::vector<Vec2> pooled;
                for (const auto& t : trips) {
                    const auto p = t.points();
                    pooled.insert(pooled.end(), p.begin(), p.end());
                }
                std::vector<Vec2> z;
                StandardizationParams params;
                try {
                    std::tie(z, params) = standardize(pooled);
                } catch (const ZeroVariance& e) {
                    outcomes[i].rejected = e.message();
                    continue;
                }
                std::vector<hsmm::TripObs> obs;
                std::size_t offset = 0;
                for (const auto& t : trips) {
                    obs.push_back({t.trip_id, {z.begin() + static_cast<std::ptrdiff_t>(offset),
                                               z.begin() + static_cast<std::ptrdiff_t>(offset + t.samples.size())}});
                    offset += t.samples.size();
                }
                hsmm::HsmmHyperParams hp = cfg.hsmm;
                hp.seed = cfg.seed;
                hsmm::PosteriorSample sample;
                try {
                    sample = hsmm::fit(obs, hp, v.vehicle_id);
                } catch (const EmptyInput& e) {
                    outcomes[i].rejected = e.message();
                    continue;
                }

                std::vector<std::vector<int>> labels;
                nlohmann::json posterior = sample;
                for (std::size_t k = 0; k < trips.size(); ++k) {
                    labels.push_back(sample.trips[k].label_seq);
                    posterior["trips"][k]["trip_id"] = trips[k].trip_id;
                }
                auto prims = compute_primitives(labels, trips, v.vehicle_id);
                sort_by_rank(prims);
                const std::size_t pruned = tail_prune_count(prims.size(), cfg.tail_fraction);
                std::vector<int> retained;
                for (std::size_t r = 0; r + pruned < prims.size(); ++r) retained.push_back(prims[r].label);

                store.write_json(fs::path("standardization") / (v.vehicle_id + ".json"),
                                 {{"vehicle_id", v.vehicle_id}, {"params", params}});
                store.write_json(fs::path("segmentation") / (v.vehicle_id + ".json"),
                                 {{"vehicle_id", v.vehicle_id}, {"hyperparams", hp}, {"posterior", posterior}});
                store.write_json(fs::path("primitives") / (v.vehicle_id + ".json"),
                                 {{"vehicle_id", v.vehicle_id},
                                  {"tail_fraction", cfg.tail_fraction},
                                  {"primitives", prims},
                                  {"retained_labels", retained}});
            } catch (...) {
                outcomes[i].error = std::current_exception();
            }
        }
    };
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t n_workers = std::min<std::size_t>(fleet.size(), cfg.workers > 0 ? static_cast<std::size_t>(cfg.workers) : hw);
    if (n_workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    SegmentResult result;
    for (std::size_t i = 0; i < fleet.size(); ++i) {
        if (outcomes[i].error) {
            try {
                std::rethrow_exception(outcomes[i].error);
            } catch (const Error& e) {
                rethrow_with_context(e, "vehicle " + fleet[i].vehicle_id);
            }
        }
        if (outcomes[i].rejected) {
            result.rejected.emplace_back(fleet[i].vehicle_id, *outcomes[i].rejected);
            store.warn("vehicle " + fleet[i].vehicle_id + " rejected: " + *outcomes[i].rejected);
        } else {
            result.segmented.push_back(fleet[i].vehicle_id);
        }
    }
    nlohmann::json rej = nlohmann::json::array();
    for (const auto& [vid, why] : result.rejected) rej.push_back({{"vehicle_id", vid}, {"reason", why}});
    store.write_json("segmentation/index.json", {{"vehicles", result.segmented}, {"rejected", rej}});

    if (opt.verbose && opt.out) {
        *opt.out << "segmented " << result.segmented.size() << " vehicles";
        if (!result.rejected.empty()) *opt.out << ", rejected " << result.rejected.size();
        *opt.out << "\n";
        for (const auto& vid : result.segmented) {
            const auto j = store.read_json(fs::path("primitives") / (vid + ".json"), "segment");
            *opt.out << "  " << vid << ": " << j.at("primitives").size() << " primitives, "
                     << j.at("retained_labels").size() << " retained\n";
        }
    }
    return result;
}

inline std::vector<std::string> segmented_vehicles(const Store& store) {
    return store.read_json("segmentation/index.json", "segment").at("vehicles").get<std::vector<std::string>>();
}

inline std::vector<Primitive> read_primitives(const Store& store, const std::string& vehicle_id, bool retained_only) {
    const auto j = store.read_json(fs::path("primitives") / (vehicle_id + ".json"), "segment");
    auto prims = j.at("primitives").get<std::vector<Primitive>>();
    if (!retained_only) return prims;
    const auto keep = j.at("retained_labels").get<std::vector<int>>();
    std::vector<Primitive> out;
    for (int label : keep)
        for (const auto& p : prims)
            if (p.label == label) out.push_back(p);
    return out;
}

struct ClusterStage {
    ClusterModel model;
    std::vector<Primitive> members;
    FeatureScaling scaling;
};

/// Cluster the retained primitives of every segmented vehicle except `exclude`.
inline ClusterStage cmd_cluster(const PipelineConfig& cfg, const std::optional<std::string>& exclude,
                                const RunOptions& opt = {}) {
    const Store store(cfg, opt);
    store.check_config();
    const auto vehicles = segmented_vehicles(store);
    if (exclude && std::find(vehicles.begin(), vehicles.end(), *exclude) == vehicles.end())
        throw MissingArtifact("excluded vehicle '" + *exclude + "' has no segmentation");
    for (const char* stale : {"clusters", "coupling", "evaluation", "report"}) fs::remove_all(store.path(stale));

    ClusterStage st;
    for (const auto& vid : vehicles) {
        if (exclude && vid == *exclude) continue;
        for (auto& p : read_primitives(store, vid, true)) st.members.push_back(std::move(p));
    }
    if (st.members.empty()) throw EmptyInput("no primitives to cluster");

    std::vector<Feature> x;
    std::tie(x, st.scaling) = standardized_features(st.members);
    std::vector<std::string> groups;
    std::vector<std::uint64_t> weights;
    for (const auto& p : st.members) {
        groups.push_back(p.vehicle_id);
        weights.push_back(p.point_count);
    }
    KMeansOptions ko;
    ko.k = cfg.k;
    ko.seed = derive_key(cfg.seed, "cluster");
    ko.restarts = cfg.restarts;
    ko.max_iter = cfg.max_iter;
    if (static_cast<std::size_t>(ko.k) > x.size()) {
        store.warn("k = " + std::to_string(ko.k) + " exceeds the " + std::to_string(x.size()) +
                   " primitives; using k = " + std::to_string(x.size()));
        ko.k = static_cast<int>(x.size());
    }
    st.model = fit_constrained_kmeans(x, CannotLink::from_groups(groups), weights, ko);
    rank_clusters(st.model, st.members);

    nlohmann::json members = nlohmann::json::array();
    for (std::size_t i = 0; i < st.members.size(); ++i) {
        members.push_back({{"vehicle_id", st.members[i].vehicle_id},
                           {"label", st.members[i].label},
                           {"point_count", st.members[i].point_count},
                           {"cluster", st.model.assignment[i]}});
    }
    store.write_json("clusters/model.json", {{"excluded_vehicle", exclude ? nlohmann::json(*exclude) : nlohmann::json(nullptr)},
                                             {"k_requested", cfg.k},
                                             {"feature_scaling", st.scaling},
                                             {"members", members},
                                             {"model", st.model}});
    if (opt.verbose && opt.out) {
        auto& o = *opt.out;
        o << "clustered " << st.members.size() << " primitives from " << (vehicles.size() - (exclude ? 1 : 0))
          << " vehicles into k = " << st.model.k << " (objective " << detail::fixed(st.model.objective, 4) << ", "
          << st.model.iterations << " iterations)\n";
        o << "  rank  cluster   omega    mean_v  mean_a\n";
        for (std::size_t r = 0; r < std::min<std::size_t>(5, st.model.rank.size()); ++r) {
            const int c = st.model.rank[r];
            const auto& m = st.model.cluster_moments[static_cast<std::size_t>(c)];
            o << "  " << std::setw(4) << r + 1 << std::setw(9) << c << std::setw(8)
              << detail::fixed(st.model.omega[static_cast<std::size_t>(c)], 4) << std::setw(10) << detail::fixed(m.mean[0], 3)
              << std::setw(8) << detail::fixed(m.mean[1], 3) << "\n";
        }
    }
    return st;
}

inline ClusterModel read_cluster_model(const Store& store) {
    return store.read_json("clusters/model.json", "cluster").at("model").get<ClusterModel>();
}

struct CoupleStage {
    CouplingMap map;
    std::vector<double> omega;  // renormalized over coupled clusters
};

inline CoupleStage cmd_couple(const PipelineConfig& cfg, const std::string& eval_vehicle, const RunOptions& opt = {}) {
    const Store store(cfg, opt);
    store.check_config();
    const auto cj = store.read_json("clusters/model.json", "cluster");
    const auto model = cj.at("model").get<ClusterModel>();
    if (cj.at("excluded_vehicle") != nlohmann::json(eval_vehicle))
        store.warn("clusters were not trained with " + eval_vehicle + " held out");
    const auto eval = read_primitives(store, eval_vehicle, false);

    CoupleStage st;
    st.map = couple(model, eval, cfg.kl_direction, cfg.cov_floor);
    st.omega = coupled_omega(model, st.map);
    std::map<int, int> multiplicity;
    std::size_t floored = 0;
    for (const auto& e : st.map.entries) {
        ++multiplicity[e.primitive_label];
        if (e.floored) ++floored;
    }
    if (floored > 0) {
        store.warn(std::to_string(floored) + " coupled pairs needed the covariance floor " +
                   detail::format_double(cfg.cov_floor));
    }
    nlohmann::json mult = nlohmann::json::array();
    for (const auto& [label, n] : multiplicity) mult.push_back({{"primitive_label", label}, {"clusters", n}});
    store.write_json(fs::path("coupling") / (eval_vehicle + ".json"),
                     {{"eval_vehicle", eval_vehicle}, {"coupling", st.map}, {"omega", st.omega}, {"multiplicity", mult}});
    if (opt.verbose && opt.out) {
        *opt.out << "coupled " << st.map.entries.size() << " clusters to " << multiplicity.size() << " of " << eval.size()
                 << " primitives of " << eval_vehicle << "\n";
    }
    return st;
}

inline EvaluationResult cmd_evaluate(const PipelineConfig& cfg, const std::string& eval_vehicle, Channel channel,
                                     const RunOptions& opt = {}) {
    const Store store(cfg, opt);
    store.check_config();
    const auto cj = store.read_json(fs::path("coupling") / (eval_vehicle + ".json"), "couple");
    const auto map = cj.at("coupling").get<CouplingMap>();
    const auto omega = cj.at("omega").get<std::vector<double>>();
    const auto vehicle = detail::find_vehicle(store, eval_vehicle);
    const auto trips = detail::load_trips(store, vehicle);
    const auto labels = detail::read_labels(store, eval_vehicle);

    std::map<int, double> cache;
    std::vector<double> e_values;
    for (const auto& e : map.entries) {
        auto it = cache.find(e.primitive_label);
        if (it == cache.end())
            it = cache.emplace(e.primitive_label, aggregate_measurement(trips, labels, e.primitive_label, channel)).first;
        e_values.push_back(it->second);
    }
    const auto result = evaluate(map, omega, e_values, channel);
    store.write_json(fs::path("evaluation") / (eval_vehicle + ".json"), {{"eval_vehicle", eval_vehicle}, {"result", result}});
    if (opt.verbose && opt.out) {
        *opt.out << eval_vehicle << " " << to_string(channel) << ": E = " << detail::fixed(result.E, 6)
                 << (channel == Channel::fuel ? " gal/mi" : " g/mi");
        if (result.mpg) *opt.out << ", MPG = " << detail::fixed(*result.mpg, 4);
        *opt.out << "\n";
    }
    return result;
}

/// Emit the tables behind the rank, moment and coupling figures.
inline void cmd_report(const PipelineConfig& cfg, const std::string& eval_vehicle, const RunOptions& opt = {}) {
    const Store store(cfg, opt);
    store.check_config();
    const auto ej = store.read_json(fs::path("evaluation") / (eval_vehicle + ".json"), "evaluate");
    const auto result = ej.at("result").get<EvaluationResult>();
    const auto cj = store.read_json(fs::path("coupling") / (eval_vehicle + ".json"), "couple");
    const auto map = cj.at("coupling").get<CouplingMap>();
    const auto model = read_cluster_model(store);
    const auto eval = read_primitives(store, eval_vehicle, false);
    const fs::path dir = fs::path("report") / eval_vehicle;
    using detail::format_double;

    std::ostringstream ranks;
    ranks << "rank,cluster_id,omega,point_count,mean_v,mean_a,var_v,var_a,cov_va\n";
    for (std::size_t r = 0; r < model.rank.size(); ++r) {
        const auto c = static_cast<std::size_t>(model.rank[r]);
        const auto& m = model.cluster_moments[c];
        ranks << r + 1 << ',' << c << ',' << format_double(model.omega[c]) << ',' << m.count << ','
              << format_double(m.mean[0]) << ',' << format_double(m.mean[1]) << ',' << format_double(m.cov(0, 0)) << ','
              << format_double(m.cov(1, 1)) << ',' << format_double(m.cov(0, 1)) << '\n';
    }
    store.write_text(dir / "cluster_ranks.csv", ranks.str());

    std::map<int, const Primitive*> by_label;
    for (const auto& p : eval) by_label[p.label] = &p;
    std::map<int, int> multiplicity;
    for (const auto& e : map.entries) ++multiplicity[e.primitive_label];
    std::ostringstream pairs;
    pairs << "rank,cluster_id,primitive_label,kl,cluster_mean_v,primitive_mean_v,cluster_mean_a,primitive_mean_a,omega,E_i,"
             "contribution,multiplicity\n";
    for (std::size_t i = 0; i < map.entries.size(); ++i) {
        const auto& e = map.entries[i];
        const auto& cm = model.cluster_moments[static_cast<std::size_t>(e.cluster_id)];
        const Primitive& p = *by_label.at(e.primitive_label);
        const auto& pc = result.per_cluster.at(i);
        pairs << e.rank + 1 << ',' << e.cluster_id << ',' << e.primitive_label << ',' << format_double(e.kl) << ','
              << format_double(cm.mean[0]) << ',' << format_double(p.mean[0]) << ',' << format_double(cm.mean[1]) << ','
              << format_double(p.mean[1]) << ',' << format_double(pc.omega) << ',' << format_double(pc.e_value) << ','
              << format_double(pc.contribution) << ',' << multiplicity[e.primitive_label] << '\n';
    }
    store.write_text(dir / "coupling.csv", pairs.str());

    std::ostringstream s;
    const bool fuel = result.channel == Channel::fuel;
    s << "Evaluated vehicle: " << eval_vehicle << "\n";
    s << "Channel:           " << to_string(result.channel) << "\n";
    s << "Clusters:          " << model.k << " (" << map.entries.size() << " coupled)\n";
    s << "Primitives used:   " << multiplicity.size() << " of " << eval.size() << "\n";
    s << "KL direction:      " << to_string(map.direction) << "\n";
    s << "E:                 " << detail::fixed(result.E, 6) << (fuel ? " gal/mi" : " g/mi") << "\n";
    if (result.mpg) s << "MPG:               " << detail::fixed(*result.mpg, 4) << "\n";
    s << "\nTop clusters by omega\n";
    s << "  rank  cluster   omega    mean_v  mean_a  primitive  prim_mean_v       E_i\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, map.entries.size()); ++i) {
        const auto& e = map.entries[i];
        const auto& cm = model.cluster_moments[static_cast<std::size_t>(e.cluster_id)];
        s << "  " << std::setw(4) << e.rank + 1 << std::setw(9) << e.cluster_id << std::setw(8)
          << detail::fixed(model.omega[static_cast<std::size_t>(e.cluster_id)], 4) << std::setw(10)
          << detail::fixed(cm.mean[0], 3) << std::setw(8) << detail::fixed(cm.mean[1], 3) << std::setw(11)
          << e.primitive_label << std::setw(13) << detail::fixed(by_label.at(e.primitive_label)->mean[0], 3)
          << std::setw(10) << detail::fixed(result.per_cluster[i].e_value, 5) << "\n";
    }
    store.write_text(dir / "summary.txt", s.str());
    if (opt.verbose && opt.out) *opt.out << s.str();
}

}  // namespace dpe

#endif  // DPE_PIPELINE_HPP
