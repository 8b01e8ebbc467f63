#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsattr/datasets.hpp"
#include "tsattr/models.hpp"

namespace tsattr::pipeline {

inline constexpr const char* kVersion = "0.1.0";
// default output root for relative run directories
inline constexpr const char* kOutputRootEnv = "TSATTR_OUT_ROOT";

// configuration problems (bad file, unknown keys, unknown method tags);
// mapped to exit code 2 by the command-line tool
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// stage execution failures; mapped to exit code 3
struct StageError : std::runtime_error {
    StageError(const std::string& stage, const std::string& what)
        : std::runtime_error("stage " + stage + ": " + what), stage(stage) {}
    std::string stage;
};

// per-method knobs; parsing fills tag-appropriate defaults first
struct MethodSettings {
    std::string baseline = "zeros";  // zeros | channel_mean | sampled
    int64_t steps = 32;              // path resolution of the integral methods
    int64_t samples = 8;             // stochastic draws
    int64_t pool = 8;                // baseline pool size
    double noise = 0.1;
    int64_t window_time = 3, window_feature = 1, window_stride = 1;
    std::string sampler = "conditional_gaussian";  // | train_distribution
    double keep_ratio = 0.1;
    double lambda_size = 1.0, lambda_smooth = 0.1, lambda_anchor = 10.0;
    int64_t iterations = 300;
    double lr = 0.05;
    int64_t mask_window = 2;
    int64_t g_hidden = 16;
    int64_t target_iterations = 150;  // per-target mask refits
    int64_t max_targets = 0;          // cap on swept targets, 0 = all
    uint64_t seed = 1;
};

struct MethodSpec {
    std::string name;
    MethodSettings settings;
};

struct DiagnosticsConfig {
    int64_t instances = 8;  // examined test instances
    int64_t pairs = 10;     // consecutive target pairs per instance
    int64_t max_lead = 12;
};

struct RenderConfig {
    int64_t instance = 0;  // index into the examined instances
    bool per_feature_norm = false;
    int64_t cell = 6;  // pixel size of one heatmap cell
};

struct ExperimentConfig {
    uint64_t seed = 7;
    std::string output;  // run directory; relative paths resolve under the env root
    bool use_csv = false;
    std::string csv_path;
    datasets::CsvSchema csv_schema;
    datasets::GeneratorConfig generator;
    datasets::SplitSpec split;
    models::ModelConfig model;
    models::TrainConfig train;
    std::vector<MethodSpec> methods;  // defaults to all supported tags
    DiagnosticsConfig diagnostics;
    RenderConfig render;
    int64_t jobs = 1;
};

// the supported method tags, in canonical order
const std::vector<std::string>& method_tags();
bool is_method_tag(const std::string& name);
MethodSettings default_settings(const std::string& tag);

// strict parsing: unknown keys and unknown method tags are rejected
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config_file(const std::string& path);
// canonical snapshot with every default materialized
nlohmann::json config_json(const ExperimentConfig& cfg);
// run directory with the env-var output root applied
std::string resolve_output(const ExperimentConfig& cfg);

uint64_t fnv1a64(const void* data, size_t n);
uint64_t hash_file(const std::string& path);

struct StageRecord {
    std::string name;
    bool skipped = false;
    double seconds = 0.0;
};

struct RunManifest {
    std::string version;
    nlohmann::json config;
    std::vector<StageRecord> stages;
    std::map<std::string, std::string> files;  // relative path -> hex content hash
};

// manifest.json payload: version, config and file hashes (timings go to a
// separate log so reruns produce identical manifests)
std::string manifest_json(const RunManifest& m);

// diagnostic target selection: `pairs` evenly spaced consecutive step pairs
std::vector<int64_t> diag_target_steps(int64_t t_len, int64_t pairs);
// instance order: instances with events first, original order otherwise
std::vector<int64_t> diag_instance_order(const datasets::LabelTrack& labels);

// stage entry points; each reads its upstream artifacts from the run
// directory and throws StageError on failure
void stage_data(const ExperimentConfig& cfg);
void stage_train(const ExperimentConfig& cfg);
void stage_attribute(const ExperimentConfig& cfg);
void stage_diagnose(const ExperimentConfig& cfg);
void stage_render(const ExperimentConfig& cfg);

// all stages in order with hash-based skipping; writes manifest.json and
// timings.txt into the run directory
RunManifest run(const ExperimentConfig& cfg);

// artifact loaders, shared by the stages and by tests
struct StoredDataset {
    datasets::Dataset train, validation, test;
    std::vector<std::string> feature_names;
    double step_minutes = 5.0;
};
StoredDataset load_dataset(const std::string& run_dir);
models::PredictorModel load_model(const std::string& run_dir, const std::string& stem);

}  // namespace tsattr::pipeline
