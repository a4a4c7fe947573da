#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "dpe/pipeline.hpp"

using namespace dpe;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = fs::temp_directory_path() / ("dpe_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

sim::Regime regime(const std::string& name, double v, double a, double sv, double sa, double dwell, double weight,
                   double fuel) {
    sim::Regime r;
    r.name = name;
    r.mean = Vec2(v, a);
    r.cov << sv * sv, 0, 0, sa * sa;
    r.dwell_steps = dwell;
    r.weight = weight;
    r.fuel_mean = fuel;
    r.fuel_noise = fuel / 20;
    r.emission_mean = fuel * 8900;
    r.emission_noise = fuel * 400;
    return r;
}

sim::SyntheticFleetSpec small_spec(int vehicles = 3) {
    sim::SyntheticFleetSpec s;
    s.n_vehicles = vehicles;
    s.trips_per_vehicle = 2;
    s.trip_min_steps = 500;
    s.trip_max_steps = 700;
    s.regimes = {regime("idle", 0, 0, 0, 0, 40, 0.4, 0.08), regime("slow", 5, 0.5, 1, 0.2, 30, 0.2, 0.05),
                 regime("mid", 13, 0, 1, 0.1, 30, 0.2, 0.035), regime("fast", 25, 0, 1, 0.1, 40, 0.2, 0.028)};
    return s;
}

PipelineConfig small_config(const fs::path& store) {
    PipelineConfig c;
    c.store_dir = store;
    c.fleet_query.min_total_duration_s = 60;
    c.hsmm.L = 6;
    c.hsmm.d_max = 80;
    c.hsmm.sweeps = 15;
    c.k = 6;
    c.restarts = 2;
    c.seed = 11;
    c.workers = 1;
    return c;
}

RunOptions quiet() {
    RunOptions o;
    o.verbose = false;
    o.log = nullptr;
    return o;
}

void run_all(const PipelineConfig& c, const fs::path& input, const std::string& eval) {
    cmd_ingest(c, input, quiet());
    cmd_segment(c, quiet());
    cmd_cluster(c, eval, quiet());
    cmd_couple(c, eval, quiet());
    cmd_evaluate(c, eval, Channel::fuel, quiet());
    cmd_report(c, eval, quiet());
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream s;
        s << in.rdbuf();
        out[fs::relative(e.path(), root).string()] = s.str();
    }
    return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(cell);
        rows.push_back(row);
    }
    return rows;
}

void write_file(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << text;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DPE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Ingest, ThreeVehicleFixture) {
    TempDir tmp;
    cmd_simulate(small_spec(), tmp.path() / "in", 1, quiet());
    const auto cfg = small_config(tmp.path() / "store");
    const auto summary = cmd_ingest(cfg, tmp.path() / "in", quiet());
    EXPECT_EQ(summary.kept.size(), 3u);
    std::ifstream in(cfg.store_dir / "fleet.json");
    const auto fleet = nlohmann::json::parse(in);
    EXPECT_EQ(fleet.at("vehicles").size(), 3u);
    EXPECT_EQ(fleet.at("config_hash"), cfg.hash());
}

TEST(Ingest, EmptyDirectoryIsAnError) {
    TempDir tmp;
    fs::create_directories(tmp.path() / "in");
    EXPECT_THROW(cmd_ingest(small_config(tmp.path() / "store"), tmp.path() / "in", quiet()), EmptyInput);
}

TEST(Ingest, BusVehicleExcluded) {
    TempDir tmp;
    cmd_simulate(small_spec(), tmp.path() / "in", 1, quiet());
    write_file(tmp.path() / "in" / "veh001" / "vehicle.json", R"({"vehicle_class": "bus"})");
    const auto summary = cmd_ingest(small_config(tmp.path() / "store"), tmp.path() / "in", quiet());
    ASSERT_EQ(summary.kept.size(), 2u);
    for (const auto& r : summary.kept) EXPECT_NE(r.vehicle_id, "veh001");
    ASSERT_EQ(summary.excluded.size(), 1u);
    EXPECT_EQ(summary.excluded[0].first, "veh001");
}

TEST(Ingest, ParseErrorsNameTheFile) {
    TempDir tmp;
    write_file(tmp.path() / "in" / "v1" / "t1.csv", "t,v,a,valid\n0,1,0,1\n0.1,x,0,1\n");
    try {
        cmd_ingest(small_config(tmp.path() / "store"), tmp.path() / "in", quiet());
        FAIL() << "expected MalformedRow";
    } catch (const MalformedRow& e) {
        EXPECT_NE(std::string(e.what()).find("t1.csv"), std::string::npos);
    }
}

TEST(Stages, OutOfOrderRaisesMissingArtifact) {
    TempDir tmp;
    const auto cfg = small_config(tmp.path() / "store");
    EXPECT_THROW(cmd_segment(cfg, quiet()), MissingArtifact);
    cmd_simulate(small_spec(), tmp.path() / "in", 1, quiet());
    cmd_ingest(cfg, tmp.path() / "in", quiet());
    EXPECT_THROW(cmd_cluster(cfg, std::nullopt, quiet()), MissingArtifact);
    cmd_segment(cfg, quiet());
    EXPECT_THROW(cmd_couple(cfg, "veh000", quiet()), MissingArtifact);
    cmd_cluster(cfg, "veh000", quiet());
    EXPECT_THROW(cmd_evaluate(cfg, "veh000", Channel::fuel, quiet()), MissingArtifact);
    EXPECT_THROW(cmd_report(cfg, "veh000", quiet()), MissingArtifact);
}

TEST(Stages, FullRunReportTables) {
    TempDir tmp;
    const auto cfg = small_config(tmp.path() / "store");
    cmd_simulate(small_spec(4), tmp.path() / "in", 2, quiet());
    run_all(cfg, tmp.path() / "in", "veh003");

    const auto ranks = read_csv(cfg.store_dir / "report" / "veh003" / "cluster_ranks.csv");
    ASSERT_GE(ranks.size(), 2u);
    double top = std::stod(ranks[1][2]), total = 0;
    for (std::size_t r = 1; r < ranks.size(); ++r) {
        EXPECT_LE(std::stod(ranks[r][2]), top);
        total += std::stod(ranks[r][2]);
    }
    EXPECT_NEAR(total, 1.0, 1e-9);

    std::ifstream in(cfg.store_dir / "clusters" / "model.json");
    const auto model = nlohmann::json::parse(in).at("model").get<ClusterModel>();
    std::size_t retained = 0;
    for (const auto& m : model.cluster_moments)
        if (m.count > 0) ++retained;
    const auto pairs = read_csv(cfg.store_dir / "report" / "veh003" / "coupling.csv");
    EXPECT_EQ(pairs.size() - 1, retained);
    double w = 0;
    for (std::size_t r = 1; r < pairs.size(); ++r) w += std::stod(pairs[r][8]);
    EXPECT_NEAR(w, 1.0, 1e-9);
    EXPECT_TRUE(fs::exists(cfg.store_dir / "report" / "veh003" / "summary.txt"));

    std::ifstream ev(cfg.store_dir / "evaluation" / "veh003.json");
    const auto result = nlohmann::json::parse(ev).at("result").get<EvaluationResult>();
    EXPECT_GT(result.E, 0.028 - 1e-9);
    EXPECT_LT(result.E, 0.08 + 1e-9);
    EXPECT_NEAR(*result.mpg, 1.0 / result.E, 1e-12);

    // The held-out vehicle contributes no cluster members.
    std::ifstream mj(cfg.store_dir / "clusters" / "model.json");
    for (const auto& m : nlohmann::json::parse(mj).at("members")) EXPECT_NE(m.at("vehicle_id"), "veh003");
}

TEST(Stages, RerunIsByteIdenticalAcrossWorkerCounts) {
    TempDir tmp;
    cmd_simulate(small_spec(4), tmp.path() / "in", 3, quiet());
    auto a = small_config(tmp.path() / "a");
    auto b = small_config(tmp.path() / "b");
    b.workers = 3;
    run_all(a, tmp.path() / "in", "veh000");
    run_all(b, tmp.path() / "in", "veh000");
    const auto sa = snapshot(a.store_dir), sb = snapshot(b.store_dir);
    EXPECT_EQ(sa.size(), sb.size());
    EXPECT_TRUE(sa == sb);
    run_all(a, tmp.path() / "in", "veh000");
    EXPECT_TRUE(snapshot(a.store_dir) == sa);
}

TEST(Stages, ConfigMismatchRefusedUnlessForced) {
    TempDir tmp;
    const auto cfg = small_config(tmp.path() / "store");
    cmd_simulate(small_spec(), tmp.path() / "in", 1, quiet());
    cmd_ingest(cfg, tmp.path() / "in", quiet());
    auto other = cfg;
    other.k = 5;
    EXPECT_THROW(cmd_segment(other, quiet()), ConfigMismatch);
    EXPECT_THROW(cmd_ingest(other, tmp.path() / "in", quiet()), ConfigMismatch);
    auto forced = quiet();
    forced.force = true;
    EXPECT_NO_THROW(cmd_ingest(other, tmp.path() / "in", forced));
    EXPECT_NO_THROW(cmd_segment(other, quiet()));
}

TEST(Stages, ZeroVarianceVehicleRejected) {
    TempDir tmp;
    cmd_simulate(small_spec(), tmp.path() / "in", 1, quiet());
    std::string parked = "t,v,a,valid\n";
    for (int i = 0; i < 1000; ++i) parked += std::to_string(i / 10.0) + ",0,0,1\n";
    write_file(tmp.path() / "in" / "parked" / "t0.csv", parked);
    const auto cfg = small_config(tmp.path() / "store");
    cmd_ingest(cfg, tmp.path() / "in", quiet());
    const auto seg = cmd_segment(cfg, quiet());
    EXPECT_EQ(seg.segmented.size(), 3u);
    ASSERT_EQ(seg.rejected.size(), 1u);
    EXPECT_EQ(seg.rejected[0].first, "parked");
    EXPECT_NO_THROW(cmd_cluster(cfg, std::nullopt, quiet()));
}

TEST(Config, HashIgnoresStoreAndWorkers) {
    PipelineConfig a, b;
    b.store_dir = "/elsewhere";
    b.workers = 7;
    EXPECT_EQ(a.hash(), b.hash());
    b.seed = 1;
    EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
    PipelineConfig c;
    c.k = 17;
    c.hsmm.L = 9;
    c.kl_direction = KlDirection::primitive_to_cluster;
    c.seed = 5;
    const auto back = nlohmann::json(c).get<PipelineConfig>();
    EXPECT_EQ(back.hash(), c.hash());
    EXPECT_THROW(nlohmann::json::parse(R"({"k": 3, "kk": 4})").get<PipelineConfig>(), InvalidConfig);
}

TEST(Cli, ExitCodes) {
    TempDir tmp;
    const std::string store = (tmp.path() / "store").string();
    EXPECT_EQ(run_cli(""), 2);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    EXPECT_EQ(run_cli("couple --store " + store), 2);
    EXPECT_EQ(run_cli("evaluate --store " + store + " --eval-vehicle v --channel diesel"), 2);
    EXPECT_EQ(run_cli("segment --store " + store), 3);

    const auto cfg = small_config(store);
    write_file(tmp.path() / "cfg.json", nlohmann::json(cfg).dump());
    write_file(tmp.path() / "spec.json", nlohmann::json(small_spec()).dump());
    write_file(tmp.path() / "bad.json", R"({"k": 0})");
    const std::string c = " --config " + (tmp.path() / "cfg.json").string() + " --store " + store;
    EXPECT_EQ(run_cli("simulate --spec " + (tmp.path() / "spec.json").string() + " --out " + (tmp.path() / "in").string() +
                      " --seed 4"),
              0);
    EXPECT_EQ(run_cli("ingest --config " + (tmp.path() / "bad.json").string() + " --input " + (tmp.path() / "in").string()), 2);
    EXPECT_EQ(run_cli("ingest" + c + " --input " + (tmp.path() / "in").string()), 0);
    EXPECT_EQ(run_cli("segment" + c), 0);
    EXPECT_EQ(run_cli("couple" + c + " --eval-vehicle veh000"), 3);
    EXPECT_EQ(run_cli("cluster" + c + " --eval-vehicle veh000"), 0);
    EXPECT_EQ(run_cli("couple" + c + " --eval-vehicle veh000"), 0);
    EXPECT_EQ(run_cli("evaluate" + c + " --eval-vehicle veh000 --channel emission"), 0);
    EXPECT_EQ(run_cli("evaluate" + c + " --eval-vehicle veh000"), 0);
    EXPECT_EQ(run_cli("report" + c + " --eval-vehicle veh000"), 0);
    EXPECT_EQ(run_cli("segment" + c + " --seed 99"), 3);
}
