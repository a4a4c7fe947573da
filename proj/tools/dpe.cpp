// dpe: staged driving-primitive pipeline.
//
//   dpe simulate --spec fleet.json --out data/ --seed 1
//   dpe ingest   --config cfg.json --store st/ --input data/
//   dpe segment | cluster | couple | evaluate | report ...

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dpe/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4 };

struct Common {
    std::string config;
    std::string store;
    std::optional<std::uint64_t> seed;
    bool force = false;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_store = true) {
    cmd->add_option("--config", c.config, "pipeline config (JSON)")->check(CLI::ExistingFile);
    if (with_store) cmd->add_option("--store", c.store, "artifact store directory");
    cmd->add_option("--seed", c.seed, "random seed (overrides the config)");
    cmd->add_flag("--force", c.force, "accept artifacts written under a different config");
    cmd->add_flag("-q,--quiet", c.quiet, "suppress summaries");
}

dpe::PipelineConfig resolve(const Common& c) {
    dpe::PipelineConfig cfg = c.config.empty() ? dpe::PipelineConfig{} : dpe::load_config(c.config);
    if (!c.store.empty()) cfg.store_dir = c.store;
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.hsmm.seed = *c.seed;
    }
    cfg.validate();
    return cfg;
}

dpe::RunOptions run_options(const Common& c) {
    dpe::RunOptions o;
    o.force = c.force;
    o.verbose = !c.quiet;
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Driving-primitive fleet pipeline"};
    app.require_subcommand(1);
    Common common;

    std::string input;
    auto* ingest = app.add_subcommand("ingest", "parse trip CSVs, apply the fleet query, initialize the store");
    add_common(ingest, common);
    ingest->add_option("--input", input, "directory of <vehicle_id>/<trip_id>.csv")->required()->check(CLI::ExistingDirectory);

    std::string spec_path, out_dir;
    auto* simulate = app.add_subcommand("simulate", "write a synthetic fleet with ground-truth labels");
    add_common(simulate, common, false);
    simulate->add_option("--spec", spec_path, "synthetic fleet spec (JSON)")->required()->check(CLI::ExistingFile);
    simulate->add_option("--out", out_dir, "output directory")->required();

    std::optional<int> workers;
    auto* segment = app.add_subcommand("segment", "standardize and segment every vehicle");
    add_common(segment, common);
    segment->add_option("--workers", workers, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);

    std::string eval_vehicle;
    auto* cluster = app.add_subcommand("cluster", "constrained k-means over fleet primitives");
    add_common(cluster, common);
    cluster->add_option("--eval-vehicle", eval_vehicle, "vehicle held out of clustering");

    auto* couple = app.add_subcommand("couple", "couple clusters to the evaluated vehicle's primitives");
    add_common(couple, common);
    couple->add_option("--eval-vehicle", eval_vehicle, "evaluated vehicle")->required();

    std::string channel = "fuel";
    auto* evaluate = app.add_subcommand("evaluate", "weighted fuel or emission estimate");
    add_common(evaluate, common);
    evaluate->add_option("--eval-vehicle", eval_vehicle, "evaluated vehicle")->required();
    evaluate->add_option("--channel", channel, "fuel | emission")->check(CLI::IsMember({"fuel", "emission"}));

    auto* report = app.add_subcommand("report", "write rank, moment and coupling tables");
    add_common(report, common);
    report->add_option("--eval-vehicle", eval_vehicle, "evaluated vehicle")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        const auto opt = run_options(common);
        if (simulate->parsed()) {
            std::ifstream in(spec_path);
            dpe::sim::SyntheticFleetSpec spec;
            try {
                spec = nlohmann::json::parse(in).get<dpe::sim::SyntheticFleetSpec>();
            } catch (const nlohmann::json::exception& e) {
                throw dpe::InvalidConfig(spec_path + ": " + e.what());
            }
            dpe::cmd_simulate(spec, out_dir, common.seed.value_or(0), opt);
            return kOk;
        }
        auto cfg = resolve(common);
        if (ingest->parsed()) {
            dpe::cmd_ingest(cfg, input, opt);
        } else if (segment->parsed()) {
            if (workers) cfg.workers = *workers;
            dpe::cmd_segment(cfg, opt);
        } else if (cluster->parsed()) {
            dpe::cmd_cluster(cfg, eval_vehicle.empty() ? std::nullopt : std::optional<std::string>(eval_vehicle), opt);
        } else if (couple->parsed()) {
            dpe::cmd_couple(cfg, eval_vehicle, opt);
        } else if (evaluate->parsed()) {
            dpe::cmd_evaluate(cfg, eval_vehicle, dpe::channel_from_string(channel), opt);
        } else if (report->parsed()) {
            dpe::cmd_report(cfg, eval_vehicle, opt);
        }
    } catch (const dpe::InvalidConfig& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const dpe::NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumerical;
    } catch (const dpe::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kOk;
}
