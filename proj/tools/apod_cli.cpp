#include "apod/orchestrator.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>

namespace orch = apod::orchestrator;

namespace {

struct Overrides {
    std::map<std::string, std::string> values;
};

void add_config_flags(CLI::App& cmd, Overrides& ov) {
    for (const auto& [key, help] : orch::config_keys()) {
        cmd.add_option_function<std::string>("--" + key, [&ov, key = key](const std::string& v) { ov.values[key] = v; },
                                             help);
    }
}

orch::ExperimentConfig build_config(const std::string& config_path, const Overrides& ov) {
    auto cfg = config_path.empty() ? orch::ExperimentConfig{} : orch::ExperimentConfig::load(config_path);
    if (const char* env = std::getenv("APOD_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
    for (const auto& [k, v] : ov.values) cfg.set(k, v);
    cfg.validate();
    return cfg;
}

void write_combined(const orch::ExperimentConfig& cfg, const std::vector<orch::RunResult>& runs) {
    if (cfg.output_dir.empty()) return;
    std::filesystem::create_directories(cfg.output_dir);
    std::ofstream out(cfg.output_dir / "results.jsonl");
    for (const auto& r : runs) orch::write_results(out, r);
    std::cout << "results: " << (cfg.output_dir / "results.jsonl").string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Active fairness-aware debiasing with a limited sensitive-attribute budget"};
    app.require_subcommand(1);
    app.fallthrough();
    bool verbose = false, quiet = false;
    app.add_flag("-v,--verbose", verbose, "log progress");
    app.add_flag("-q,--quiet", quiet, "log nothing");

    std::string run_config, sweep_config;
    Overrides run_ov, sweep_ov;
    auto* run = app.add_subcommand("run", "run one method for every configured seed");
    run->add_option("-c,--config", run_config, "key = value config file");
    add_config_flags(*run, run_ov);

    auto* sw = app.add_subcommand("sweep", "run one method over a lambda grid and seeds");
    sw->add_option("-c,--config", sweep_config, "key = value config file");
    add_config_flags(*sw, sweep_ov);

    std::vector<std::string> report_files;
    auto* report = app.add_subcommand("report", "aggregate summary records of results files");
    report->add_option("files", report_files, "results.jsonl files")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);
    apod::set_log_level(quiet ? apod::LogLevel::quiet : verbose ? apod::LogLevel::info : apod::LogLevel::warning);

    try {
        if (*run) {
            const auto cfg = build_config(run_config, run_ov);
            std::vector<orch::RunResult> runs;
            std::vector<orch::RunSummary> summaries;
            for (auto seed : cfg.seeds) {
                runs.push_back(orch::run_method(cfg, seed));
                const auto& s = runs.back().summary;
                summaries.push_back(s);
                std::cout << s.method << " seed " << seed << " " << s.status << " accuracy " << s.test.accuracy
                          << " |dEO| " << s.test.delta_eo_abs.value_or(-1.0) << " EOP " << s.test.eop.value_or(-1.0)
                          << " spent " << s.spent << "/" << s.budget << '\n';
            }
            write_combined(cfg, runs);
            orch::print_table(std::cout, orch::aggregate(summaries));
            for (const auto& s : summaries) {
                if (s.status != "ok") return 2;
            }
        } else if (*sw) {
            const auto cfg = build_config(sweep_config, sweep_ov);
            const auto result = orch::sweep(cfg, cfg.lambdas);
            write_combined(cfg, result.runs);
            orch::print_table(std::cout, result.table);
        } else if (*report) {
            std::vector<orch::RunSummary> all;
            for (const auto& f : report_files) {
                auto part = orch::read_summaries(std::filesystem::path(f));
                all.insert(all.end(), part.begin(), part.end());
            }
            orch::print_table(std::cout, orch::aggregate(all));
        }
    } catch (const apod::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 64;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
