#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "tsattr/experiment.hpp"

namespace fs = std::filesystem;
using tsattr::pipeline::ExperimentConfig;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out;
    int64_t seed = -1;
    std::vector<std::string> methods;
    int64_t jobs = 0;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "experiment config file (JSON)")->required();
    cmd->add_option("--out", f.out, "run directory (overrides the config)");
    cmd->add_option("--seed", f.seed, "global seed (overrides the config)");
    cmd->add_option("--methods", f.methods, "restrict to these method tags");
    cmd->add_option("--jobs", f.jobs, "parallel workers for attribution");
}

ExperimentConfig make_config(const CommonFlags& f) {
    ExperimentConfig cfg = tsattr::pipeline::load_config_file(f.config_path);
    if (f.seed >= 0) {
        // re-parse so every derived seed follows the override
        std::ifstream in(f.config_path);
        nlohmann::json j = nlohmann::json::parse(in);
        j["seed"] = f.seed;
        cfg = tsattr::pipeline::parse_config(j);
    }
    if (!f.out.empty()) cfg.output = f.out;
    if (f.jobs > 0) cfg.jobs = f.jobs;
    if (!f.methods.empty()) {
        std::vector<tsattr::pipeline::MethodSpec> kept;
        for (const std::string& tag : f.methods) {
            if (!tsattr::pipeline::is_method_tag(tag))
                throw tsattr::pipeline::ConfigError("unknown method tag \"" + tag + "\"");
            bool found = false;
            for (const auto& m : cfg.methods)
                if (m.name == tag) {
                    kept.push_back(m);
                    found = true;
                }
            if (!found) {
                tsattr::pipeline::MethodSpec spec{tag,
                                                  tsattr::pipeline::default_settings(tag)};
                spec.settings.seed = cfg.seed + 100 + kept.size();
                kept.push_back(std::move(spec));
            }
        }
        cfg.methods = std::move(kept);
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"time-series attribution experiment pipeline"};
    app.require_subcommand(1);

    CommonFlags f;
    CLI::App* c_data = app.add_subcommand("generate-data", "build and store the dataset");
    CLI::App* c_train = app.add_subcommand("train", "train the model(s)");
    CLI::App* c_attr = app.add_subcommand("attribute", "compute attribution archives");
    CLI::App* c_diag = app.add_subcommand("diagnose", "build the diagnostics report");
    CLI::App* c_render = app.add_subcommand("render", "render attribution heatmaps");
    CLI::App* c_report = app.add_subcommand("report", "print the report table");
    CLI::App* c_run = app.add_subcommand("run", "all stages in order");
    for (CLI::App* c : {c_data, c_train, c_attr, c_diag, c_render, c_report, c_run})
        add_common(c, f);

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = make_config(f);
        if (c_data->parsed()) {
            tsattr::pipeline::stage_data(cfg);
        } else if (c_train->parsed()) {
            tsattr::pipeline::stage_data(cfg);
            tsattr::pipeline::stage_train(cfg);
        } else if (c_attr->parsed()) {
            tsattr::pipeline::stage_data(cfg);
            tsattr::pipeline::stage_train(cfg);
            tsattr::pipeline::stage_attribute(cfg);
        } else if (c_diag->parsed() || c_report->parsed()) {
            tsattr::pipeline::stage_data(cfg);
            tsattr::pipeline::stage_train(cfg);
            tsattr::pipeline::stage_attribute(cfg);
            tsattr::pipeline::stage_diagnose(cfg);
            if (c_report->parsed()) {
                std::ifstream in(fs::path(tsattr::pipeline::resolve_output(cfg)) / "report" /
                                 "report.md");
                std::cout << in.rdbuf();
            }
        } else if (c_render->parsed()) {
            tsattr::pipeline::stage_data(cfg);
            tsattr::pipeline::stage_train(cfg);
            tsattr::pipeline::stage_attribute(cfg);
            tsattr::pipeline::stage_render(cfg);
        } else {
            tsattr::pipeline::RunManifest m = tsattr::pipeline::run(cfg);
            for (const auto& s : m.stages)
                std::fprintf(stderr, "%-10s %s (%.2fs)\n", s.name.c_str(),
                             s.skipped ? "skipped" : "ran", s.seconds);
            std::fprintf(stderr, "manifest: %s/manifest.json (%zu artifacts)\n",
                         tsattr::pipeline::resolve_output(cfg).c_str(), m.files.size());
        }
    } catch (const tsattr::pipeline::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
