#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "tsattr/experiment.hpp"
#include "tsattr/grad_attr.hpp"
#include "tsattr/render.hpp"

namespace fs = std::filesystem;
using namespace tsattr;
using namespace tsattr::pipeline;

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// small but complete config covering all method families
nlohmann::json tiny_config(const std::string& out) {
    nlohmann::json j;
    j["seed"] = 11;
    j["output"] = out;
    j["dataset"]["generator"] = {{"n", 24}, {"t", 32}, {"f", 4}, {"prevalence", 0.1},
                                 {"horizon", 6}};
    j["model"] = {{"arch", "crossformer"}, {"d_model", 16}, {"heads", 2}, {"seg_len", 8},
                  {"cross_d", 8}, {"cross_heads", 2}};
    j["train"] = {{"epochs", 2}, {"batch", 8}};
    j["methods"] = {"deeplift",
                    "occlusion",
                    "feature_permutation",
                    "retain",
                    "temporal_integrated_gradients",
                    nlohmann::json{{"name", "fit"}, {"samples", 2}},
                    nlohmann::json{{"name", "dynamask"}, {"iterations", 40}},
                    nlohmann::json{{"name", "extremal_mask"},
                                   {"iterations", 30},
                                   {"target_iterations", 20}}};
    j["diagnostics"] = {{"instances", 2}, {"pairs", 2}, {"max_lead", 6}};
    j["render"] = {{"instance", 0}, {"cell", 4}};
    return j;
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("method tag registry") {
    CHECK(method_tags().size() == 14);
    CHECK(is_method_tag("integrated_gradients"));
    CHECK(is_method_tag("extremal_mask"));
    CHECK(!is_method_tag("saliency"));
}

TEST_CASE("config parsing") {
    // defaults: every supported method, derived seeds
    ExperimentConfig cfg = parse_config(nlohmann::json{{"seed", 5}});
    CHECK(cfg.methods.size() == 14);
    CHECK(cfg.generator.seed == 5);
    CHECK(cfg.split.seed == 6);
    CHECK(cfg.model.features == cfg.generator.f);
    CHECK(cfg.model.max_seq == cfg.generator.t);

    // explicit subsection seeds win over the derived ones
    nlohmann::json j = {{"seed", 5}, {"dataset", {{"generator", {{"seed", 99}}}}}};
    CHECK(parse_config(j).generator.seed == 99);

    CHECK_THROWS_AS(parse_config(nlohmann::json{{"sede", 5}}), ConfigError);
    CHECK_THROWS_AS(parse_config(nlohmann::json{{"methods", {"gradientshap"}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(nlohmann::json{{"methods", {"deeplift", "deeplift"}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_config(nlohmann::json{{"methods", nlohmann::json::array()}}),
                    ConfigError);
    CHECK_THROWS_AS(
        parse_config(nlohmann::json{
            {"methods", {nlohmann::json{{"name", "deeplift"}, {"basline", "zeros"}}}}}),
        ConfigError);
    CHECK_THROWS_AS(load_config_file("/nonexistent/config.json"), ConfigError);

    // canonical snapshot round-trips
    ExperimentConfig tiny = parse_config(tiny_config("x"));
    nlohmann::json snap = config_json(tiny);
    ExperimentConfig again = parse_config(snap);
    CHECK(config_json(again) == snap);
}

TEST_CASE("output root env var") {
    ExperimentConfig cfg;
    cfg.output = "rel/run";
    setenv(kOutputRootEnv, "/tmp/tsattr_root", 1);
    CHECK(resolve_output(cfg) == "/tmp/tsattr_root/rel/run");
    cfg.output = "/abs/run";
    CHECK(resolve_output(cfg) == "/abs/run");
    unsetenv(kOutputRootEnv);
    cfg.output = "rel/run";
    CHECK(resolve_output(cfg) == "rel/run");
}

TEST_CASE("hashing") {
    // reference FNV-1a vectors
    CHECK(fnv1a64("", 0) == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cULL);
    fs::path p = fs::temp_directory_path() / "tsattr_hash_probe.txt";
    std::ofstream(p) << "a";
    CHECK(hash_file(p.string()) == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("diagnostic target selection") {
    std::vector<int64_t> steps = diag_target_steps(128, 10);
    CHECK(steps.size() == 20);
    for (size_t j = 0; j + 1 < steps.size(); j += 2) {
        CHECK(steps[j + 1] == steps[j] + 1);
        CHECK(steps[j] >= 0);
        CHECK(steps[j + 1] < 128);
        if (j >= 2) CHECK(steps[j] > steps[j - 1]);  // disjoint pairs
    }
    // short sequences keep pairs disjoint by dropping colliding ones
    std::vector<int64_t> tight = diag_target_steps(6, 10);
    CHECK(tight.size() >= 2);
    for (size_t j = 2; j < tight.size(); j += 2) CHECK(tight[j] > tight[j - 1]);
    CHECK_THROWS_AS(diag_target_steps(1, 2), std::invalid_argument);

    datasets::LabelTrack labels;
    labels.event_intervals = {{}, {{3, 5}}, {}, {{1, 2}}};
    CHECK(diag_instance_order(labels) == std::vector<int64_t>{1, 3, 0, 2});
}

TEST_CASE("heatmap rendering") {
    attr::AttributionTensor a;
    a.method = "probe";
    a.layout = attr::Layout::Track;
    a.values = Tensor({4, 3}, {1, -2, 0, 3, 0.5, -1, 0, 0, 2, -3, 1, 0.2});
    render::HeatmapOptions opt;
    opt.cell = 5;
    std::string svg = render::heatmap_svg(a, opt);
    // background + 12 cells
    size_t rects = 0;
    for (size_t pos = svg.find("<rect"); pos != std::string::npos;
         pos = svg.find("<rect", pos + 1))
        ++rects;
    CHECK(rects == 13);
    CHECK(svg.find("probe") != std::string::npos);
    CHECK(svg == render::heatmap_svg(a, opt));  // deterministic bytes

    opt.events = {{1, 3}};
    opt.target_marks = {2};
    std::string overlay = render::heatmap_svg(a, opt);
    CHECK(overlay.find("fill-opacity") != std::string::npos);
    CHECK(overlay.find("stroke=\"red\"") != std::string::npos);

    attr::AttributionTensor zero = a;
    zero.values = Tensor::zeros({4, 3});
    CHECK(render::heatmap_svg(zero, opt).find("all-zero attribution") != std::string::npos);

    attr::AttributionTensor sweep;
    sweep.method = "probe";
    sweep.layout = attr::Layout::FullSweep;
    sweep.values = Tensor::zeros({2, 4, 3, 1});
    sweep.target_steps = {1, 2};
    CHECK_THROWS_AS(render::heatmap_svg(sweep, render::HeatmapOptions{}),
                    std::invalid_argument);
    render::HeatmapOptions pick;
    pick.target_index = 1;
    CHECK(render::heatmap_svg(sweep, pick).find("<svg") == 0);
}

TEST_CASE("pipeline end to end") {
    fs::path dir = fresh_dir("tsattr_test_run");
    ExperimentConfig cfg = parse_config(tiny_config(dir.string()));
    RunManifest m1 = run(cfg);
    REQUIRE(m1.stages.size() == 5);
    for (const StageRecord& s : m1.stages) CHECK(!s.skipped);
    CHECK(fs::exists(dir / "report" / "report.json"));
    CHECK(fs::exists(dir / "report" / "report.md"));
    CHECK(read_file(dir / "report" / "report.md").rfind("| method |", 0) == 0);
    CHECK(m1.files.count("data/dataset.bin") == 1);
    CHECK(m1.files.count("model/model.bin") == 1);
    CHECK(m1.files.count("model/retain.bin") == 1);  // aux model for the retain method

    // one archive per (method, instance) plus the batch-level permutation map
    // and the per-target extremal refits
    nlohmann::json index = nlohmann::json::parse(read_file(dir / "attr" / "index.json"));
    int archives = 0, svg_count = 0;
    std::map<std::string, std::string> layouts;
    for (const auto& e : index.at("archives")) {
        ++archives;
        layouts[e.at("file").get<std::string>()] = e.at("layout").get<std::string>();
        CHECK(m1.files.count(e.at("file").get<std::string>()) == 1);
    }
    CHECK(archives == 7 * 2 + 1 + 2);  // 7 per-instance tags x 2 + permutation + refits
    CHECK(layouts.at("attr/deeplift.i" +
                     std::to_string(index.at("archives")[0].at("instance_id").get<int64_t>()) +
                     ".bin") == "full_sweep");
    for (const auto& [rel, hash] : m1.files)
        if (rel.size() > 4 && rel.substr(rel.size() - 4) == ".svg") ++svg_count;
    CHECK(svg_count >= 7);

    // rerun: everything cached, manifest byte-identical
    std::string manifest_bytes = read_file(dir / "manifest.json");
    RunManifest m2 = run(cfg);
    for (const StageRecord& s : m2.stages) CHECK(s.skipped);
    CHECK(read_file(dir / "manifest.json") == manifest_bytes);

    // deleting one artifact re-runs only its stage and restores the bytes
    fs::remove(dir / "report" / "report.json");
    RunManifest m3 = run(cfg);
    CHECK(m3.stages[0].skipped);
    CHECK(m3.stages[1].skipped);
    CHECK(m3.stages[2].skipped);
    CHECK(!m3.stages[3].skipped);
    CHECK(m3.stages[4].skipped);
    CHECK(read_file(dir / "manifest.json") == manifest_bytes);

    // a fresh run directory reproduces every artifact hash
    fs::path dir2 = fresh_dir("tsattr_test_run_b");
    ExperimentConfig cfg2 = cfg;
    cfg2.output = dir2.string();
    RunManifest m4 = run(cfg2);
    CHECK(m4.files == m1.files);

    // archives round-trip and the report carries every configured method
    nlohmann::json report = nlohmann::json::parse(read_file(dir / "report" / "report.json"));
    for (const auto& spec : cfg.methods)
        CHECK(report.at("methods").contains(spec.name));

    // stored dataset reload matches the generator's shapes
    StoredDataset ds = load_dataset(dir.string());
    CHECK(ds.train.series.t() == 32);
    CHECK(ds.train.series.f() == 4);
    CHECK(ds.train.series.n() + ds.validation.series.n() + ds.test.series.n() == 24);
    CHECK(ds.feature_names.size() == 4);
    models::PredictorModel model = load_model(dir.string(), "model");
    nlohmann::json mj = nlohmann::json::parse(read_file(dir / "model" / "model.json"));
    CHECK(mj.at("param_hash").get<std::string>().size() == 16);

    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("render stage input validation") {
    fs::path dir = fresh_dir("tsattr_test_badrender");
    nlohmann::json j = tiny_config(dir.string());
    j["render"]["instance"] = 9;  // outside the examined range
    ExperimentConfig cfg = parse_config(j);
    stage_data(cfg);
    stage_train(cfg);
    stage_attribute(cfg);
    CHECK_THROWS_AS(stage_render(cfg), StageError);
    fs::remove_all(dir);
}
