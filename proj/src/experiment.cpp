#include "tsattr/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <thread>

#include "tsattr/archive.hpp"
#include "tsattr/attr_model.hpp"
#include "tsattr/diagnostics.hpp"
#include "tsattr/grad_attr.hpp"
#include "tsattr/mask_attr.hpp"
#include "tsattr/perturb_attr.hpp"
#include "tsattr/render.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tsattr::pipeline {

// ---------------------------------------------------------------------------
// method tags and settings

const std::vector<std::string>& method_tags() {
    static const std::vector<std::string> tags = {
        "integrated_gradients", "gradient_shap", "deeplift", "deeplift_shap",
        "sequential_integrated_gradients", "temporal_integrated_gradients", "occlusion",
        "augmented_occlusion", "feature_ablation", "feature_permutation", "retain", "fit",
        "dynamask", "extremal_mask"};
    return tags;
}

bool is_method_tag(const std::string& name) {
    const auto& tags = method_tags();
    return std::find(tags.begin(), tags.end(), name) != tags.end();
}

MethodSettings default_settings(const std::string& tag) {
    MethodSettings s;
    if (tag == "sequential_integrated_gradients") s.steps = 8;
    if (tag == "temporal_integrated_gradients") s.steps = 16;
    if (tag == "augmented_occlusion" || tag == "fit") s.samples = 4;
    if (tag == "extremal_mask") s.lambda_size = 0.1;
    return s;
}

// ---------------------------------------------------------------------------
// hashing

uint64_t fnv1a64(const void* data, size_t n) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = 14695981039346656037ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("hash_file: cannot read " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

namespace {

std::string hex64(uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

uint64_t hash_str(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace

// ---------------------------------------------------------------------------
// configuration

namespace {

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("config: unknown key \"" + it.key() + "\" in " + where);
}

template <typename T>
void read_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_generator(const json& j, datasets::GeneratorConfig& g) {
    check_keys(j,
               {"n", "t", "f", "horizon", "ramp_len", "prevalence", "seed", "ar_coef",
                "step_minutes", "lactate_baseline", "map_baseline", "lactate_threshold",
                "map_threshold", "lactate_noise", "map_noise", "distractor_noise", "overshoot",
                "cycles_min", "cycles_max", "hold", "fall"},
               "dataset.generator");
    read_to(j, "n", g.n);
    read_to(j, "t", g.t);
    read_to(j, "f", g.f);
    read_to(j, "horizon", g.horizon);
    read_to(j, "ramp_len", g.ramp_len);
    read_to(j, "prevalence", g.prevalence);
    read_to(j, "seed", g.seed);
    read_to(j, "ar_coef", g.ar_coef);
    read_to(j, "step_minutes", g.step_minutes);
    read_to(j, "lactate_baseline", g.lactate_baseline);
    read_to(j, "map_baseline", g.map_baseline);
    read_to(j, "lactate_threshold", g.lactate_threshold);
    read_to(j, "map_threshold", g.map_threshold);
    read_to(j, "lactate_noise", g.lactate_noise);
    read_to(j, "map_noise", g.map_noise);
    read_to(j, "distractor_noise", g.distractor_noise);
    read_to(j, "overshoot", g.overshoot);
    read_to(j, "cycles_min", g.cycles_min);
    read_to(j, "cycles_max", g.cycles_max);
    read_to(j, "hold", g.hold);
    read_to(j, "fall", g.fall);
}

void parse_settings(const json& j, MethodSettings& s, const std::string& where) {
    check_keys(j,
               {"name", "baseline", "steps", "samples", "pool", "noise", "window_time",
                "window_feature", "window_stride", "sampler", "keep_ratio", "lambda_size",
                "lambda_smooth", "lambda_anchor", "iterations", "lr", "mask_window", "g_hidden",
                "target_iterations", "max_targets", "seed"},
               where);
    read_to(j, "baseline", s.baseline);
    read_to(j, "steps", s.steps);
    read_to(j, "samples", s.samples);
    read_to(j, "pool", s.pool);
    read_to(j, "noise", s.noise);
    read_to(j, "window_time", s.window_time);
    read_to(j, "window_feature", s.window_feature);
    read_to(j, "window_stride", s.window_stride);
    read_to(j, "sampler", s.sampler);
    read_to(j, "keep_ratio", s.keep_ratio);
    read_to(j, "lambda_size", s.lambda_size);
    read_to(j, "lambda_smooth", s.lambda_smooth);
    read_to(j, "lambda_anchor", s.lambda_anchor);
    read_to(j, "iterations", s.iterations);
    read_to(j, "lr", s.lr);
    read_to(j, "mask_window", s.mask_window);
    read_to(j, "g_hidden", s.g_hidden);
    read_to(j, "target_iterations", s.target_iterations);
    read_to(j, "max_targets", s.max_targets);
    read_to(j, "seed", s.seed);
    if (s.baseline != "zeros" && s.baseline != "channel_mean" && s.baseline != "sampled")
        throw ConfigError("config: " + where + ": unknown baseline \"" + s.baseline + "\"");
    if (s.sampler != "train_distribution" && s.sampler != "conditional_gaussian")
        throw ConfigError("config: " + where + ": unknown sampler \"" + s.sampler + "\"");
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
    check_keys(j, {"seed", "output", "jobs", "dataset", "model", "train", "methods",
                   "diagnostics", "render"},
               "top level");
    ExperimentConfig cfg;
    read_to(j, "seed", cfg.seed);
    read_to(j, "output", cfg.output);
    read_to(j, "jobs", cfg.jobs);
    if (cfg.jobs < 1) throw ConfigError("config: jobs must be >= 1");

    cfg.generator.seed = cfg.seed;
    cfg.split.seed = cfg.seed + 1;
    cfg.model.init_seed = cfg.seed + 2;
    cfg.train.seed = cfg.seed + 3;

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_keys(d, {"generator", "csv", "split"}, "dataset");
        if (d.contains("csv") && !d.at("csv").is_null()) {
            const json& c = d.at("csv");
            check_keys(c, {"path", "time_column", "feature_columns", "label_column"},
                       "dataset.csv");
            cfg.use_csv = true;
            cfg.csv_path = c.at("path").get<std::string>();
            cfg.csv_schema.time_column = c.at("time_column").get<std::string>();
            cfg.csv_schema.feature_columns =
                c.at("feature_columns").get<std::vector<std::string>>();
            read_to(c, "label_column", cfg.csv_schema.label_column);
            if (!fs::exists(cfg.csv_path))
                throw ConfigError("config: dataset.csv.path does not exist: " + cfg.csv_path);
        }
        if (d.contains("generator")) parse_generator(d.at("generator"), cfg.generator);
        if (d.contains("split")) {
            const json& s = d.at("split");
            check_keys(s, {"train", "validation", "test", "seed"}, "dataset.split");
            read_to(s, "train", cfg.split.train);
            read_to(s, "validation", cfg.split.validation);
            read_to(s, "test", cfg.split.test);
            read_to(s, "seed", cfg.split.seed);
        }
    }

    cfg.model.features = cfg.generator.f;
    cfg.model.max_seq = cfg.generator.t;
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m,
                   {"arch", "features", "classes", "max_seq", "layers", "d_model", "heads",
                    "seg_len", "cross_d", "cross_heads", "retain_hidden", "retain_emb",
                    "init_seed"},
                   "model");
        if (m.contains("arch")) {
            try {
                cfg.model.arch = models::arch_from_name(m.at("arch").get<std::string>());
            } catch (const std::exception& e) {
                throw ConfigError(std::string("config: model.arch: ") + e.what());
            }
        }
        read_to(m, "features", cfg.model.features);
        read_to(m, "classes", cfg.model.classes);
        read_to(m, "max_seq", cfg.model.max_seq);
        read_to(m, "layers", cfg.model.layers);
        read_to(m, "d_model", cfg.model.d_model);
        read_to(m, "heads", cfg.model.heads);
        read_to(m, "seg_len", cfg.model.seg_len);
        read_to(m, "cross_d", cfg.model.cross_d);
        read_to(m, "cross_heads", cfg.model.cross_heads);
        read_to(m, "retain_hidden", cfg.model.retain_hidden);
        read_to(m, "retain_emb", cfg.model.retain_emb);
        read_to(m, "init_seed", cfg.model.init_seed);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, {"epochs", "batch", "lr", "seed", "pos_weight", "patience"}, "train");
        read_to(t, "epochs", cfg.train.epochs);
        read_to(t, "batch", cfg.train.batch);
        read_to(t, "lr", cfg.train.lr);
        read_to(t, "seed", cfg.train.seed);
        read_to(t, "pos_weight", cfg.train.pos_weight);
        read_to(t, "patience", cfg.train.patience);
    }

    if (j.contains("methods")) {
        if (!j.at("methods").is_array()) throw ConfigError("config: methods must be an array");
        size_t idx = 0;
        for (const json& m : j.at("methods")) {
            MethodSpec spec;
            if (m.is_string()) {
                spec.name = m.get<std::string>();
                spec.settings = default_settings(spec.name);
                spec.settings.seed = cfg.seed + 100 + idx;
            } else {
                if (!m.contains("name"))
                    throw ConfigError("config: methods[" + std::to_string(idx) +
                                      "] is missing \"name\"");
                spec.name = m.at("name").get<std::string>();
                spec.settings = default_settings(spec.name);
                spec.settings.seed = cfg.seed + 100 + idx;
                parse_settings(m, spec.settings, "methods[" + std::to_string(idx) + "]");
            }
            if (!is_method_tag(spec.name))
                throw ConfigError("config: unknown method tag \"" + spec.name + "\"");
            for (const MethodSpec& prev : cfg.methods)
                if (prev.name == spec.name)
                    throw ConfigError("config: duplicate method tag \"" + spec.name + "\"");
            cfg.methods.push_back(std::move(spec));
            ++idx;
        }
    } else {
        size_t idx = 0;
        for (const std::string& tag : method_tags()) {
            MethodSpec spec{tag, default_settings(tag)};
            spec.settings.seed = cfg.seed + 100 + idx++;
            cfg.methods.push_back(std::move(spec));
        }
    }
    if (cfg.methods.empty()) throw ConfigError("config: methods must not be empty");

    if (j.contains("diagnostics")) {
        const json& d = j.at("diagnostics");
        check_keys(d, {"instances", "pairs", "max_lead"}, "diagnostics");
        read_to(d, "instances", cfg.diagnostics.instances);
        read_to(d, "pairs", cfg.diagnostics.pairs);
        read_to(d, "max_lead", cfg.diagnostics.max_lead);
        if (cfg.diagnostics.instances < 1 || cfg.diagnostics.pairs < 1 ||
            cfg.diagnostics.max_lead < 1)
            throw ConfigError("config: diagnostics counts must be >= 1");
    }
    if (j.contains("render")) {
        const json& r = j.at("render");
        check_keys(r, {"instance", "per_feature_norm", "cell"}, "render");
        read_to(r, "instance", cfg.render.instance);
        read_to(r, "per_feature_norm", cfg.render.per_feature_norm);
        read_to(r, "cell", cfg.render.cell);
    }
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const std::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

json config_json(const ExperimentConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["output"] = cfg.output;
    j["jobs"] = cfg.jobs;
    json gen;
    gen["n"] = cfg.generator.n;
    gen["t"] = cfg.generator.t;
    gen["f"] = cfg.generator.f;
    gen["horizon"] = cfg.generator.horizon;
    gen["ramp_len"] = cfg.generator.ramp_len;
    gen["prevalence"] = cfg.generator.prevalence;
    gen["seed"] = cfg.generator.seed;
    gen["ar_coef"] = cfg.generator.ar_coef;
    gen["step_minutes"] = cfg.generator.step_minutes;
    gen["lactate_baseline"] = cfg.generator.lactate_baseline;
    gen["map_baseline"] = cfg.generator.map_baseline;
    gen["lactate_threshold"] = cfg.generator.lactate_threshold;
    gen["map_threshold"] = cfg.generator.map_threshold;
    gen["lactate_noise"] = cfg.generator.lactate_noise;
    gen["map_noise"] = cfg.generator.map_noise;
    gen["distractor_noise"] = cfg.generator.distractor_noise;
    gen["overshoot"] = cfg.generator.overshoot;
    gen["cycles_min"] = cfg.generator.cycles_min;
    gen["cycles_max"] = cfg.generator.cycles_max;
    gen["hold"] = cfg.generator.hold;
    gen["fall"] = cfg.generator.fall;
    j["dataset"]["generator"] = gen;
    if (cfg.use_csv) {
        j["dataset"]["csv"]["path"] = cfg.csv_path;
        j["dataset"]["csv"]["time_column"] = cfg.csv_schema.time_column;
        j["dataset"]["csv"]["feature_columns"] = cfg.csv_schema.feature_columns;
        j["dataset"]["csv"]["label_column"] = cfg.csv_schema.label_column;
    } else {
        j["dataset"]["csv"] = nullptr;
    }
    j["dataset"]["split"] = {{"train", cfg.split.train},
                             {"validation", cfg.split.validation},
                             {"test", cfg.split.test},
                             {"seed", cfg.split.seed}};
    j["model"] = {{"arch", models::arch_name(cfg.model.arch)},
                  {"features", cfg.model.features},
                  {"classes", cfg.model.classes},
                  {"max_seq", cfg.model.max_seq},
                  {"layers", cfg.model.layers},
                  {"d_model", cfg.model.d_model},
                  {"heads", cfg.model.heads},
                  {"seg_len", cfg.model.seg_len},
                  {"cross_d", cfg.model.cross_d},
                  {"cross_heads", cfg.model.cross_heads},
                  {"retain_hidden", cfg.model.retain_hidden},
                  {"retain_emb", cfg.model.retain_emb},
                  {"init_seed", cfg.model.init_seed}};
    j["train"] = {{"epochs", cfg.train.epochs},   {"batch", cfg.train.batch},
                  {"lr", cfg.train.lr},           {"seed", cfg.train.seed},
                  {"pos_weight", cfg.train.pos_weight}, {"patience", cfg.train.patience}};
    j["methods"] = json::array();
    for (const MethodSpec& m : cfg.methods) {
        const MethodSettings& s = m.settings;
        j["methods"].push_back({{"name", m.name},
                                {"baseline", s.baseline},
                                {"steps", s.steps},
                                {"samples", s.samples},
                                {"pool", s.pool},
                                {"noise", s.noise},
                                {"window_time", s.window_time},
                                {"window_feature", s.window_feature},
                                {"window_stride", s.window_stride},
                                {"sampler", s.sampler},
                                {"keep_ratio", s.keep_ratio},
                                {"lambda_size", s.lambda_size},
                                {"lambda_smooth", s.lambda_smooth},
                                {"lambda_anchor", s.lambda_anchor},
                                {"iterations", s.iterations},
                                {"lr", s.lr},
                                {"mask_window", s.mask_window},
                                {"g_hidden", s.g_hidden},
                                {"target_iterations", s.target_iterations},
                                {"max_targets", s.max_targets},
                                {"seed", s.seed}});
    }
    j["diagnostics"] = {{"instances", cfg.diagnostics.instances},
                        {"pairs", cfg.diagnostics.pairs},
                        {"max_lead", cfg.diagnostics.max_lead}};
    j["render"] = {{"instance", cfg.render.instance},
                   {"per_feature_norm", cfg.render.per_feature_norm},
                   {"cell", cfg.render.cell}};
    return j;
}

std::string resolve_output(const ExperimentConfig& cfg) {
    fs::path out = cfg.output.empty() ? fs::path("run") : fs::path(cfg.output);
    if (out.is_relative()) {
        const char* root = std::getenv(kOutputRootEnv);
        if (root && *root) out = fs::path(root) / out;
    }
    return out.string();
}

// ---------------------------------------------------------------------------
// diagnostic target / instance selection

std::vector<int64_t> diag_target_steps(int64_t t_len, int64_t pairs) {
    if (t_len < 2) throw std::invalid_argument("diag_target_steps: need at least 2 steps");
    if (pairs < 1) throw std::invalid_argument("diag_target_steps: pairs must be >= 1");
    std::vector<int64_t> steps;
    int64_t last_start = -2;
    for (int64_t k = 0; k < pairs; ++k) {
        auto start = static_cast<int64_t>(std::llround(
            static_cast<double>(k + 1) * static_cast<double>(t_len - 2) /
            static_cast<double>(pairs + 1)));
        start = std::clamp<int64_t>(start, 0, t_len - 2);
        if (start <= last_start + 1) continue;  // keep pairs disjoint on short sequences
        steps.push_back(start);
        steps.push_back(start + 1);
        last_start = start;
    }
    return steps;
}

std::vector<int64_t> diag_instance_order(const datasets::LabelTrack& labels) {
    std::vector<int64_t> with_events, without;
    for (size_t i = 0; i < labels.event_intervals.size(); ++i) {
        if (!labels.event_intervals[i].empty())
            with_events.push_back(static_cast<int64_t>(i));
        else
            without.push_back(static_cast<int64_t>(i));
    }
    with_events.insert(with_events.end(), without.begin(), without.end());
    return with_events;
}

// ---------------------------------------------------------------------------
// artifact storage

namespace {

void save_split(Archive& ar, json& meta, const std::string& p, const datasets::Dataset& d) {
    int64_t n = d.series.n(), t_len = d.series.t();
    meta[p]["n"] = n;
    if (n == 0) return;
    Tensor ids({1, n});
    for (int64_t i = 0; i < n; ++i) ids[i] = static_cast<double>(d.instance_ids[static_cast<size_t>(i)]);
    ar.put(p + ".ids", ids);
    Tensor y({n, t_len}), elig({n, t_len});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t t = 0; t < t_len; ++t) {
            y.at(i, t) = d.labels.labels[static_cast<size_t>(i)][static_cast<size_t>(t)];
            elig.at(i, t) = d.labels.eligible[static_cast<size_t>(i)][static_cast<size_t>(t)];
        }
    ar.put(p + ".y", y);
    ar.put(p + ".elig", elig);
    for (int64_t i = 0; i < n; ++i) {
        ar.put(p + ".x" + std::to_string(i), d.series.values[static_cast<size_t>(i)]);
        if (!d.saliency.cells.empty())
            ar.put(p + ".sal" + std::to_string(i), d.saliency.cells[static_cast<size_t>(i)]);
    }
}

datasets::Dataset load_split(const Archive& ar, const json& meta, const std::string& p,
                             const std::vector<std::string>& feature_names, double step_minutes,
                             bool has_saliency) {
    datasets::Dataset d;
    d.series.feature_names = feature_names;
    d.series.step_minutes = step_minutes;
    int64_t n = meta.at(p).at("n").get<int64_t>();
    if (n == 0) return d;
    const Tensor& ids = ar.get(p + ".ids");
    const Tensor& y = ar.get(p + ".y");
    const Tensor& elig = ar.get(p + ".elig");
    int64_t t_len = y.shape[1];
    for (int64_t i = 0; i < n; ++i) {
        d.instance_ids.push_back(static_cast<int64_t>(ids[i]));
        d.series.values.push_back(ar.get(p + ".x" + std::to_string(i)));
        if (has_saliency) d.saliency.cells.push_back(ar.get(p + ".sal" + std::to_string(i)));
        std::vector<uint8_t> yi(static_cast<size_t>(t_len)), ei(static_cast<size_t>(t_len));
        for (int64_t t = 0; t < t_len; ++t) {
            yi[static_cast<size_t>(t)] = y.at(i, t) != 0.0;
            ei[static_cast<size_t>(t)] = elig.at(i, t) != 0.0;
        }
        // events are exactly the maximal ineligible runs
        std::vector<std::pair<int64_t, int64_t>> events;
        int64_t t = 0;
        while (t < t_len) {
            if (!ei[static_cast<size_t>(t)]) {
                int64_t start = t;
                while (t < t_len && !ei[static_cast<size_t>(t)]) ++t;
                events.emplace_back(start, t);
            } else {
                ++t;
            }
        }
        d.labels.labels.push_back(std::move(yi));
        d.labels.eligible.push_back(std::move(ei));
        d.labels.event_intervals.push_back(std::move(events));
    }
    return d;
}

json model_config_json(const models::ModelConfig& m) {
    return {{"arch", models::arch_name(m.arch)},
            {"features", m.features},
            {"classes", m.classes},
            {"max_seq", m.max_seq},
            {"layers", m.layers},
            {"d_model", m.d_model},
            {"heads", m.heads},
            {"seg_len", m.seg_len},
            {"cross_d", m.cross_d},
            {"cross_heads", m.cross_heads},
            {"retain_hidden", m.retain_hidden},
            {"retain_emb", m.retain_emb},
            {"init_seed", m.init_seed}};
}

models::ModelConfig model_config_from_json(const json& j) {
    models::ModelConfig m;
    m.arch = models::arch_from_name(j.at("arch").get<std::string>());
    m.features = j.at("features").get<int64_t>();
    m.classes = j.at("classes").get<int64_t>();
    m.max_seq = j.at("max_seq").get<int64_t>();
    m.layers = j.at("layers").get<int64_t>();
    m.d_model = j.at("d_model").get<int64_t>();
    m.heads = j.at("heads").get<int64_t>();
    m.seg_len = j.at("seg_len").get<int64_t>();
    m.cross_d = j.at("cross_d").get<int64_t>();
    m.cross_heads = j.at("cross_heads").get<int64_t>();
    m.retain_hidden = j.at("retain_hidden").get<int64_t>();
    m.retain_emb = j.at("retain_emb").get<int64_t>();
    m.init_seed = j.at("init_seed").get<uint64_t>();
    return m;
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return json::parse(in);
}

}  // namespace

StoredDataset load_dataset(const std::string& run_dir) {
    fs::path dir(run_dir);
    json meta = read_json(dir / "data" / "dataset.json");
    Archive ar = Archive::load((dir / "data" / "dataset.bin").string());
    StoredDataset ds;
    ds.feature_names = meta.at("feature_names").get<std::vector<std::string>>();
    ds.step_minutes = meta.at("step_minutes").get<double>();
    bool has_sal = meta.at("has_saliency").get<bool>();
    ds.train = load_split(ar, meta, "train", ds.feature_names, ds.step_minutes, has_sal);
    ds.validation =
        load_split(ar, meta, "validation", ds.feature_names, ds.step_minutes, has_sal);
    ds.test = load_split(ar, meta, "test", ds.feature_names, ds.step_minutes, has_sal);
    return ds;
}

models::PredictorModel load_model(const std::string& run_dir, const std::string& stem) {
    fs::path dir(run_dir);
    json meta = read_json(dir / "model" / (stem + ".json"));
    models::PredictorModel model(model_config_from_json(meta.at("config")));
    Archive ar = Archive::load((dir / "model" / (stem + ".bin")).string());
    for (auto& [name, value] : model.params) value = ar.get(name);
    model.invalidate_cache();
    return model;
}

// ---------------------------------------------------------------------------
// stages

namespace {

using Outputs = std::vector<std::string>;  // paths relative to the run directory

Outputs exec_data(const ExperimentConfig& cfg) {
    fs::path dir(resolve_output(cfg));
    datasets::SeriesBatch batch;
    datasets::LabelTrack labels;
    datasets::GroundTruthSaliency saliency;
    if (cfg.use_csv) {
        datasets::CsvData csv = datasets::load_csv(cfg.csv_path, cfg.csv_schema);
        batch = csv.series;
        labels = csv.has_labels
                     ? csv.labels
                     : datasets::derive_labels(batch, cfg.generator.lactate_threshold,
                                               cfg.generator.map_threshold,
                                               cfg.generator.horizon);
    } else {
        datasets::SyntheticData data = datasets::generate_synthetic(cfg.generator);
        batch = std::move(data.series);
        labels = std::move(data.labels);
        saliency = std::move(data.saliency);
    }
    datasets::SplitResult split =
        datasets::standardize_split(batch, labels, saliency, cfg.split);

    Archive ar;
    json meta;
    meta["feature_names"] = batch.feature_names;
    meta["step_minutes"] = batch.step_minutes;
    meta["has_saliency"] = !saliency.cells.empty();
    meta["prevalence"] = datasets::positive_fraction(labels);
    meta["stats"] = {{"mean", split.stats.mean}, {"std", split.stats.std}};
    save_split(ar, meta, "train", split.train);
    save_split(ar, meta, "validation", split.validation);
    save_split(ar, meta, "test", split.test);
    fs::create_directories(dir / "data");
    ar.save((dir / "data" / "dataset.bin").string());
    write_text(dir / "data" / "dataset.json", meta.dump(2) + "\n");
    return {"data/dataset.bin", "data/dataset.json"};
}

json train_one(const fs::path& dir, const StoredDataset& ds, const models::ModelConfig& mc,
               const models::TrainConfig& tc, const std::string& stem) {
    models::PredictorModel model(mc);
    models::TrainResult tr = models::train(model, ds.train, ds.validation, tc);
    json meta;
    meta["config"] = model_config_json(mc);
    meta["train"] = {{"epochs", tc.epochs},   {"batch", tc.batch},
                     {"lr", tc.lr},           {"seed", tc.seed},
                     {"pos_weight", tc.pos_weight}, {"patience", tc.patience}};
    meta["best_epoch"] = tr.best_epoch;
    meta["best_val_auprc"] = tr.best_val_auprc;
    json hist = json::array();
    for (const models::EpochStats& e : tr.history)
        hist.push_back({{"train_loss", e.train_loss},
                        {"val_auroc", e.val_auroc},
                        {"val_auprc", e.val_auprc}});
    meta["history"] = hist;
    meta["param_hash"] = hex64(model.param_hash());
    meta["param_count"] = model.param_count();
    try {
        std::vector<Tensor> probs;
        for (const Tensor& x : ds.test.series.values) probs.push_back(model.forward(x));
        models::MetricsBundle mb = models::evaluate_metrics(probs, ds.test.labels);
        meta["test"] = {{"auroc", mb.auroc}, {"auprc", mb.auprc}, {"f1", mb.f1},
                        {"mcc", mb.mcc}};
    } catch (const std::exception& e) {
        meta["test"] = {{"error", e.what()}};
    }
    Archive ar;
    for (const auto& [name, value] : model.params) ar.put(name, value);
    fs::create_directories(dir / "model");
    ar.save((dir / "model" / (stem + ".bin")).string());
    write_text(dir / "model" / (stem + ".json"), meta.dump(2) + "\n");
    return meta;
}

bool wants_retain_aux(const ExperimentConfig& cfg) {
    if (cfg.model.arch == models::Arch::Retain) return false;
    for (const MethodSpec& m : cfg.methods)
        if (m.name == "retain") return true;
    return false;
}

Outputs exec_train(const ExperimentConfig& cfg) {
    fs::path dir(resolve_output(cfg));
    StoredDataset ds = load_dataset(dir.string());
    if (ds.train.series.n() == 0) throw std::runtime_error("training split is empty");
    models::ModelConfig mc = cfg.model;
    mc.features = ds.train.series.f();
    mc.max_seq = ds.train.series.t();
    train_one(dir, ds, mc, cfg.train, "model");
    Outputs out = {"model/model.bin", "model/model.json"};
    if (wants_retain_aux(cfg)) {
        models::ModelConfig rc = mc;
        rc.arch = models::Arch::Retain;
        rc.init_seed = mc.init_seed + 7;
        train_one(dir, ds, rc, cfg.train, "retain");
        out.push_back("model/retain.bin");
        out.push_back("model/retain.json");
    }
    return out;
}

// one attribution work item; results are written in task order
struct ArchiveOut {
    std::string stem;  // attr/<stem>.bin
    attr::AttributionTensor tensor;
    int64_t instance_index = -1;  // position among the examined instances
    int64_t instance_id = -1;
};

std::vector<uint8_t> onehot_eligible(int64_t t_len, int64_t t) {
    std::vector<uint8_t> e(static_cast<size_t>(t_len), 0);
    e[static_cast<size_t>(t)] = 1;
    return e;
}

Outputs exec_attribute(const ExperimentConfig& cfg) {
    fs::path dir(resolve_output(cfg));
    StoredDataset ds = load_dataset(dir.string());
    models::PredictorModel model = load_model(dir.string(), "model");
    std::shared_ptr<models::PredictorModel> retain_model;
    if (model.config.arch == models::Arch::Retain) {
        retain_model = std::make_shared<models::PredictorModel>(model);
    } else if (wants_retain_aux(cfg)) {
        retain_model =
            std::make_shared<models::PredictorModel>(load_model(dir.string(), "retain"));
    }
    attr::PredictorAdapter adapter(model);

    int64_t n_test = ds.test.series.n();
    if (n_test == 0) throw std::runtime_error("test split is empty");
    int64_t t_len = ds.test.series.t(), f_cnt = ds.test.series.f();
    std::vector<int64_t> order = diag_instance_order(ds.test.labels);
    order.resize(static_cast<size_t>(std::min<int64_t>(cfg.diagnostics.instances, n_test)));
    std::vector<int64_t> steps = diag_target_steps(t_len, cfg.diagnostics.pairs);

    datasets::SeriesBatch diag_batch;
    diag_batch.feature_names = ds.feature_names;
    diag_batch.step_minutes = ds.step_minutes;
    for (int64_t k : order)
        diag_batch.values.push_back(ds.test.series.values[static_cast<size_t>(k)]);

    // shared per-method context, fixed before the parallel section
    struct Ctx {
        MethodSpec spec;
        attr::MethodConfig mc;
        attr::OcclusionWindow window;
        attr::CounterfactualSampler sampler;
        std::vector<int64_t> steps;
    };
    std::vector<std::shared_ptr<Ctx>> contexts;
    bool need_prefix_graphs = false;
    for (const MethodSpec& spec : cfg.methods) {
        auto ctx = std::make_shared<Ctx>();
        ctx->spec = spec;
        const MethodSettings& s = spec.settings;
        if (s.baseline == "zeros")
            ctx->mc.baseline = attr::zeros_baseline(t_len, f_cnt);
        else if (s.baseline == "channel_mean")
            ctx->mc.baseline = attr::channel_mean_baseline(ds.train.series, t_len);
        else
            ctx->mc.baseline = attr::sampled_baseline(ds.train.series, s.seed);
        if (spec.name == "gradient_shap" || spec.name == "deeplift_shap")
            ctx->mc.pool = attr::baseline_pool(ds.train.series, s.pool, s.seed);
        ctx->mc.ig_steps = s.steps;
        ctx->mc.n_samples = s.samples;
        ctx->mc.noise_std = s.noise;
        ctx->mc.seed = s.seed;
        ctx->window = {s.window_time, s.window_feature, s.window_stride};
        if (spec.name == "augmented_occlusion" || spec.name == "fit")
            ctx->sampler = s.sampler == "train_distribution"
                               ? attr::CounterfactualSampler::fit_train_distribution(
                                     ds.train.series)
                               : attr::CounterfactualSampler::fit_conditional_gaussian(
                                     ds.train.series);
        ctx->steps = steps;
        if (s.max_targets > 0 &&
            static_cast<int64_t>(ctx->steps.size()) > s.max_targets)
            ctx->steps.resize(static_cast<size_t>(s.max_targets));
        if (spec.name == "temporal_integrated_gradients") need_prefix_graphs = true;
        contexts.push_back(std::move(ctx));
    }

    std::vector<std::function<ArchiveOut()>> tasks;
    for (const auto& ctx : contexts) {
        const std::string& tag = ctx->spec.name;
        if (tag == "feature_permutation") {
            tasks.push_back([&adapter, &diag_batch, ctx]() {
                ArchiveOut out;
                out.stem = "feature_permutation";
                out.tensor = attr::feature_permutation_sweep(adapter, diag_batch, 0,
                                                             {ctx->steps, 1LL << 30},
                                                             ctx->spec.settings.seed);
                return out;
            });
            continue;
        }
        for (size_t k = 0; k < order.size(); ++k) {
            int64_t id = ds.test.instance_ids[static_cast<size_t>(order[k])];
            const Tensor& x = ds.test.series.values[static_cast<size_t>(order[k])];
            const std::vector<uint8_t>& elig =
                ds.test.labels.eligible[static_cast<size_t>(order[k])];
            auto base_out = [id, k, tag](attr::AttributionTensor t) {
                ArchiveOut out;
                out.stem = tag + ".i" + std::to_string(id);
                out.tensor = std::move(t);
                out.tensor.instance_id = id;
                out.instance_index = static_cast<int64_t>(k);
                out.instance_id = id;
                return out;
            };
            if (tag == "integrated_gradients" || tag == "gradient_shap" || tag == "deeplift" ||
                tag == "deeplift_shap" || tag == "sequential_integrated_gradients") {
                tasks.push_back([&adapter, &x, ctx, base_out, tag]() {
                    return base_out(attr::full_sweep(tag, adapter, x, 0, ctx->mc,
                                                     {ctx->steps, 1LL << 30}));
                });
            } else if (tag == "temporal_integrated_gradients") {
                tasks.push_back([&adapter, &x, ctx, base_out]() {
                    return base_out(attr::temporal_integrated_gradients(
                        adapter, x, ctx->mc.baseline.data, 0, ctx->spec.settings.steps));
                });
            } else if (tag == "occlusion") {
                tasks.push_back([&adapter, &x, ctx, base_out]() {
                    return base_out(attr::occlusion_sweep(adapter, x, ctx->window,
                                                          ctx->mc.baseline.data, 0,
                                                          {ctx->steps, 1LL << 30}));
                });
            } else if (tag == "augmented_occlusion") {
                tasks.push_back([&adapter, &x, ctx, base_out]() {
                    return base_out(attr::augmented_occlusion_sweep(
                        adapter, x, ctx->window, ctx->sampler, ctx->spec.settings.samples, 0,
                        {ctx->steps, 1LL << 30}, ctx->spec.settings.seed));
                });
            } else if (tag == "feature_ablation") {
                tasks.push_back([&adapter, &x, ctx, base_out]() {
                    return base_out(attr::feature_ablation_sweep(adapter, x,
                                                                 ctx->mc.baseline.data, 0,
                                                                 {ctx->steps, 1LL << 30}));
                });
            } else if (tag == "retain") {
                if (!retain_model) throw std::runtime_error("retain model artifact is missing");
                tasks.push_back([retain_model, &x, base_out]() {
                    models::RetainAttribution ra =
                        models::retain_forward_and_attribute(*retain_model, x);
                    attr::AttributionTensor t;
                    t.method = "retain";
                    t.layout = attr::Layout::Track;
                    t.values = ra.attributions;
                    return base_out(std::move(t));
                });
            } else if (tag == "fit") {
                tasks.push_back([&adapter, &x, ctx, base_out]() {
                    attr::FitResult fr =
                        attr::fit_importance(adapter, x, ctx->sampler,
                                             ctx->spec.settings.samples, ctx->spec.settings.seed);
                    attr::AttributionTensor t;
                    t.method = "fit";
                    t.layout = attr::Layout::Track;
                    t.values = std::move(fr.values);
                    return base_out(std::move(t));
                });
            } else if (tag == "dynamask") {
                tasks.push_back([&adapter, &x, ctx, base_out, &elig]() {
                    attr::MaskConfig mc;
                    const MethodSettings& s = ctx->spec.settings;
                    mc.keep_ratio = s.keep_ratio;
                    mc.lambda_size = s.lambda_size;
                    mc.lambda_smooth = s.lambda_smooth;
                    mc.iterations = s.iterations;
                    mc.lr = s.lr;
                    mc.window = s.mask_window;
                    mc.seed = s.seed;
                    mc.eligible = elig;
                    attr::MaskState st = attr::dynamask_fit(adapter, x, mc);
                    attr::AttributionTensor t;
                    t.method = "dynamask";
                    t.layout = attr::Layout::Track;
                    t.values = std::move(st.attribution);
                    return base_out(std::move(t));
                });
            } else if (tag == "extremal_mask") {
                tasks.push_back([&adapter, &x, ctx, base_out, &elig]() {
                    attr::MaskConfig mc;
                    const MethodSettings& s = ctx->spec.settings;
                    mc.lambda_size = s.lambda_size;
                    mc.lambda_smooth = s.lambda_smooth;
                    mc.lambda_anchor = s.lambda_anchor;
                    mc.iterations = s.iterations;
                    mc.lr = s.lr;
                    mc.g_hidden = s.g_hidden;
                    mc.seed = s.seed;
                    mc.eligible = elig;
                    attr::ExtremalResult res = attr::extremal_mask_fit(adapter, x, mc);
                    attr::AttributionTensor t;
                    t.method = "extremal_mask";
                    t.layout = attr::Layout::Track;
                    t.values = std::move(res.state.attribution);
                    return base_out(std::move(t));
                });
                // per-target refits feed the consistency diagnostics
                tasks.push_back([&adapter, &x, ctx, id, k, t_len, f_cnt]() {
                    const MethodSettings& s = ctx->spec.settings;
                    attr::AttributionTensor sw = attr::sweep_shell(
                        "extremal_mask", t_len, f_cnt, 0, {ctx->steps, 1LL << 30});
                    int64_t map_sz = t_len * f_cnt;
                    for (size_t j = 0; j < sw.target_steps.size(); ++j) {
                        attr::MaskConfig mc;
                        mc.lambda_size = s.lambda_size;
                        mc.lambda_smooth = s.lambda_smooth;
                        mc.lambda_anchor = s.lambda_anchor;
                        mc.iterations = s.target_iterations;
                        mc.lr = s.lr;
                        mc.g_hidden = s.g_hidden;
                        mc.seed = s.seed + static_cast<uint64_t>(j);
                        mc.eligible = onehot_eligible(t_len, sw.target_steps[j]);
                        attr::ExtremalResult res = attr::extremal_mask_fit(adapter, x, mc);
                        std::copy(res.state.attribution.v.begin(),
                                  res.state.attribution.v.end(),
                                  sw.values.v.begin() + static_cast<int64_t>(j) * map_sz);
                        sw.target_seconds.push_back(0.0);
                    }
                    ArchiveOut out;
                    out.stem = "extremal_mask.targets.i" + std::to_string(id);
                    out.tensor = std::move(sw);
                    out.tensor.instance_id = id;
                    out.instance_index = static_cast<int64_t>(k);
                    out.instance_id = id;
                    return out;
                });
            } else {
                throw std::runtime_error("unhandled method tag " + tag);
            }
        }
    }

    // warm the shared graph caches so parallel workers only read them
    model.forward_graph(t_len);
    if (!ds.test.series.values.empty()) model.bindings_for(ds.test.series.values[0]);
    if (need_prefix_graphs)
        for (int64_t t = 1; t <= t_len; ++t) model.forward_graph(t);
    if (retain_model) {
        retain_model->forward_graph(t_len);
        if (!ds.test.series.values.empty())
            retain_model->bindings_for(ds.test.series.values[0]);
    }

    std::vector<ArchiveOut> results(tasks.size());
    int64_t jobs = std::min<int64_t>(cfg.jobs, static_cast<int64_t>(tasks.size()));
    if (jobs <= 1) {
        for (size_t i = 0; i < tasks.size(); ++i) results[i] = tasks[i]();
    } else {
        std::atomic<size_t> next{0};
        std::mutex err_mutex;
        std::exception_ptr first_error;
        auto worker = [&]() {
            while (true) {
                size_t i = next.fetch_add(1);
                if (i >= tasks.size()) return;
                try {
                    results[i] = tasks[i]();
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        };
        std::vector<std::thread> pool;
        for (int64_t w = 0; w < jobs; ++w) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    // fixed reduction order: write in task order regardless of worker timing
    fs::create_directories(dir / "attr");
    Outputs outputs;
    json index = json::array();
    for (const ArchiveOut& r : results) {
        std::string rel = "attr/" + r.stem + ".bin";
        attr::save_attribution(r.tensor, (dir / rel).string());
        outputs.push_back(rel);
        outputs.push_back(rel + ".json");
        index.push_back({{"file", rel},
                         {"method", r.tensor.method},
                         {"layout", attr::layout_name(r.tensor.layout)},
                         {"instance_index", r.instance_index},
                         {"instance_id", r.instance_id}});
    }
    json index_doc;
    index_doc["archives"] = index;
    index_doc["target_steps"] = steps;
    json order_json = json::array();
    for (int64_t k : order) order_json.push_back(k);
    index_doc["instance_order"] = order_json;
    write_text(dir / "attr" / "index.json", index_doc.dump(2) + "\n");
    outputs.push_back("attr/index.json");
    return outputs;
}

Tensor sweep_map(const attr::AttributionTensor& a, size_t j) {
    int64_t t_len = a.values.shape[1], f_cnt = a.values.shape[2];
    Tensor map({t_len, f_cnt});
    std::copy(a.values.v.begin() + static_cast<int64_t>(j) * t_len * f_cnt,
              a.values.v.begin() + static_cast<int64_t>(j + 1) * t_len * f_cnt, map.v.begin());
    return map;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? diag::Sample::nan_value() : s / static_cast<double>(v.size());
}

Outputs exec_diagnose(const ExperimentConfig& cfg) {
    fs::path dir(resolve_output(cfg));
    StoredDataset ds = load_dataset(dir.string());
    json model_meta = read_json(dir / "model" / "model.json");
    json index_doc = read_json(dir / "attr" / "index.json");
    std::vector<int64_t> order = index_doc.at("instance_order").get<std::vector<int64_t>>();

    diag::Provenance prov;
    prov.dataset_hash = hash_file((dir / "data" / "dataset.bin").string());
    prov.model_hash =
        std::stoull(model_meta.at("param_hash").get<std::string>(), nullptr, 16);
    prov.seed = cfg.seed;

    std::vector<diag::Sample> samples;
    for (const json& entry : index_doc.at("archives")) {
        std::string file = entry.at("file").get<std::string>();
        attr::AttributionTensor a = attr::load_attribution((dir / file).string());
        int64_t inst_idx = entry.at("instance_index").get<int64_t>();

        auto instance_metrics = [&](diag::Sample& s, const Tensor& track) {
            if (inst_idx < 0 || inst_idx >= static_cast<int64_t>(order.size())) return;
            size_t test_i = static_cast<size_t>(order[static_cast<size_t>(inst_idx)]);
            diag::OnsetLead lead = diag::onset_lead(track, ds.test.labels.event_intervals[test_i],
                                                    cfg.diagnostics.max_lead);
            if (lead.has_events) {
                s.onset_lead_curve = lead.curve;
                s.post_onset_mean = lead.post_onset_mean;
            }
            if (!ds.test.saliency.cells.empty() &&
                ds.test.saliency.cells[test_i].sum() > 0.0) {
                diag::SaliencyPr pr = diag::saliency_pr(track, ds.test.saliency.cells[test_i]);
                s.saliency_auprc = pr.auprc;
                s.saliency_aup = pr.aup;
                s.saliency_aur = pr.aur;
            }
        };

        diag::Sample s;
        s.method = a.method;
        s.provenance = prov;
        if (a.layout == attr::Layout::FullSweep) {
            std::vector<double> dist, recency, leak, tv, ent;
            for (size_t j = 0; j + 1 < a.target_steps.size(); j += 2) {
                if (a.target_steps[j + 1] != a.target_steps[j] + 1) continue;
                diag::AdjacentResult ar = diag::adjacent_consistency(
                    sweep_map(a, j), sweep_map(a, j + 1), a.target_steps[j]);
                dist.push_back(ar.distance);
                s.degenerate = s.degenerate || ar.degenerate;
            }
            Tensor mean_abs = Tensor::zeros({a.values.shape[1], a.values.shape[2]});
            for (size_t j = 0; j < a.target_steps.size(); ++j) {
                Tensor map = sweep_map(a, j);
                diag::MassProfile mp = diag::target_mass_profile(map, a.target_steps[j]);
                if (!mp.degenerate) {
                    recency.push_back(mp.recency_mass);
                    leak.push_back(mp.future_leakage);
                }
                diag::TemporalProfile tp = diag::temporal_profile(map);
                if (!tp.degenerate) {
                    tv.push_back(tp.temporal_tv);
                    ent.push_back(tp.feature_entropy);
                }
                for (size_t i = 0; i < map.v.size(); ++i)
                    mean_abs.v[i] += std::fabs(map.v[i]);
            }
            s.adjacent_inconsistency = mean_of(dist);
            s.recency_mass = mean_of(recency);
            s.future_leakage = mean_of(leak);
            s.temporal_tv = mean_of(tv);
            s.feature_entropy = mean_of(ent);
            if (a.method == "feature_permutation") {
                // batch-level maps are scored against every examined instance
                for (size_t k = 0; k < order.size(); ++k) {
                    size_t test_i = static_cast<size_t>(order[k]);
                    if (ds.test.saliency.cells.empty() ||
                        ds.test.saliency.cells[test_i].sum() <= 0.0)
                        continue;
                    diag::Sample ps;
                    ps.method = a.method;
                    ps.provenance = prov;
                    diag::SaliencyPr pr =
                        diag::saliency_pr(mean_abs, ds.test.saliency.cells[test_i]);
                    ps.saliency_auprc = pr.auprc;
                    ps.saliency_aup = pr.aup;
                    ps.saliency_aur = pr.aur;
                    samples.push_back(std::move(ps));
                }
            } else {
                instance_metrics(s, mean_abs);
            }
        } else {
            Tensor track = a.values;
            if (a.layout == attr::Layout::SingleClass)
                track.shape = {a.values.shape[1], a.values.shape[2]};
            diag::TemporalProfile tp = diag::temporal_profile(track);
            s.degenerate = tp.degenerate;
            if (!tp.degenerate) {
                s.temporal_tv = tp.temporal_tv;
                s.feature_entropy = tp.feature_entropy;
            }
            instance_metrics(s, track);
        }
        samples.push_back(std::move(s));
    }

    diag::Report report = diag::build_report(samples);
    fs::create_directories(dir / "report");
    write_text(dir / "report" / "report.json", diag::report_to_json(report));
    write_text(dir / "report" / "report.csv", diag::report_to_csv(report));
    write_text(dir / "report" / "report.md", diag::report_to_markdown(report));
    return {"report/report.json", "report/report.csv", "report/report.md"};
}

Outputs exec_render(const ExperimentConfig& cfg) {
    fs::path dir(resolve_output(cfg));
    StoredDataset ds = load_dataset(dir.string());
    json index_doc = read_json(dir / "attr" / "index.json");
    std::vector<int64_t> order = index_doc.at("instance_order").get<std::vector<int64_t>>();
    std::vector<int64_t> steps = index_doc.at("target_steps").get<std::vector<int64_t>>();
    int64_t pick = cfg.render.instance;
    if (pick < 0 || pick >= static_cast<int64_t>(order.size()))
        throw std::runtime_error("render.instance " + std::to_string(pick) +
                                 " is outside the examined range [0," +
                                 std::to_string(order.size()) + ")");
    size_t test_i = static_cast<size_t>(order[static_cast<size_t>(pick)]);

    fs::create_directories(dir / "render");
    Outputs outputs;
    for (const json& entry : index_doc.at("archives")) {
        int64_t inst_idx = entry.at("instance_index").get<int64_t>();
        if (inst_idx != pick && inst_idx != -1) continue;
        std::string file = entry.at("file").get<std::string>();
        attr::AttributionTensor a = attr::load_attribution((dir / file).string());
        render::HeatmapOptions opt;
        opt.per_feature_norm = cfg.render.per_feature_norm;
        opt.cell = cfg.render.cell;
        opt.feature_names = ds.feature_names;
        if (inst_idx == pick) opt.events = ds.test.labels.event_intervals[test_i];
        std::string title = a.method;
        if (a.layout == attr::Layout::FullSweep) {
            opt.target_index = 0;
            if (!a.target_steps.empty()) {
                opt.target_marks = {a.target_steps[0]};
                title += " @ t=" + std::to_string(a.target_steps[0]);
            }
        }
        if (inst_idx >= 0) title += " · instance " + std::to_string(a.instance_id);
        opt.title = title;
        std::string stem = fs::path(file).stem().string();  // strips ".bin"
        std::string rel = "render/" + stem + ".svg";
        write_text(dir / rel, render::heatmap_svg(a, opt));
        outputs.push_back(rel);
    }
    return outputs;
}

// ---------------------------------------------------------------------------
// stage orchestration

struct StageState {
    std::string key;
    std::map<std::string, std::string> outputs;  // rel path -> hex hash
};

std::string stage_key(const ExperimentConfig& cfg, const std::string& name) {
    json cj = config_json(cfg);
    std::string data_key = hex64(hash_str("data:" + cj.at("dataset").dump()));
    if (name == "data") return data_key;
    std::string train_key = hex64(hash_str("train:" + data_key + cj.at("model").dump() +
                                           cj.at("train").dump() +
                                           (wants_retain_aux(cfg) ? "+retain" : "")));
    if (name == "train") return train_key;
    std::string attr_key = hex64(hash_str("attribute:" + train_key + cj.at("methods").dump() +
                                          cj.at("diagnostics").dump()));
    if (name == "attribute") return attr_key;
    if (name == "diagnose")
        return hex64(hash_str("diagnose:" + attr_key + cj.at("diagnostics").dump()));
    if (name == "render") return hex64(hash_str("render:" + attr_key + cj.at("render").dump()));
    throw std::invalid_argument("stage_key: unknown stage " + name);
}

bool can_skip(const fs::path& dir, const std::string& name, const std::string& key) {
    fs::path sf = dir / "state" / (name + ".json");
    if (!fs::exists(sf)) return false;
    json st;
    try {
        st = read_json(sf);
    } catch (...) {
        return false;
    }
    if (!st.contains("key") || st.at("key").get<std::string>() != key) return false;
    for (auto& [rel, h] : st.at("outputs").items()) {
        fs::path p = dir / rel;
        if (!fs::exists(p)) return false;
        if (hex64(hash_file(p.string())) != h.get<std::string>()) return false;
    }
    return true;
}

StageRecord run_stage(const ExperimentConfig& cfg, const std::string& name,
                      Outputs (*exec)(const ExperimentConfig&)) {
    fs::path dir(resolve_output(cfg));
    StageRecord rec{name, false, 0.0};
    std::string key = stage_key(cfg, name);
    if (can_skip(dir, name, key)) {
        rec.skipped = true;
        return rec;
    }
    auto t0 = std::chrono::steady_clock::now();
    Outputs outputs;
    try {
        outputs = exec(cfg);
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json st;
    st["key"] = key;
    json outs = json::object();
    for (const std::string& rel : outputs) outs[rel] = hex64(hash_file((dir / rel).string()));
    st["outputs"] = outs;
    write_text(dir / "state" / (name + ".json"), st.dump(2) + "\n");
    return rec;
}

}  // namespace

void stage_data(const ExperimentConfig& cfg) { run_stage(cfg, "data", exec_data); }
void stage_train(const ExperimentConfig& cfg) { run_stage(cfg, "train", exec_train); }
void stage_attribute(const ExperimentConfig& cfg) {
    run_stage(cfg, "attribute", exec_attribute);
}
void stage_diagnose(const ExperimentConfig& cfg) { run_stage(cfg, "diagnose", exec_diagnose); }
void stage_render(const ExperimentConfig& cfg) { run_stage(cfg, "render", exec_render); }

std::string manifest_json(const RunManifest& m) {
    json j;
    j["version"] = m.version;
    j["config"] = m.config;
    json files = json::object();
    for (const auto& [rel, h] : m.files) files[rel] = h;
    j["files"] = files;
    return j.dump(2) + "\n";
}

RunManifest run(const ExperimentConfig& cfg) {
    fs::path dir(resolve_output(cfg));
    fs::create_directories(dir);
    RunManifest manifest;
    manifest.version = kVersion;
    manifest.config = config_json(cfg);

    manifest.stages.push_back(run_stage(cfg, "data", exec_data));
    manifest.stages.push_back(run_stage(cfg, "train", exec_train));
    manifest.stages.push_back(run_stage(cfg, "attribute", exec_attribute));
    manifest.stages.push_back(run_stage(cfg, "diagnose", exec_diagnose));
    manifest.stages.push_back(run_stage(cfg, "render", exec_render));

    // every artifact in the run directory, hashed; the manifest itself and
    // the timing log stay out so reruns reproduce the manifest byte for byte
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const fs::path& p : paths) {
        std::string rel = fs::relative(p, dir).generic_string();
        if (rel == "manifest.json" || rel == "timings.txt") continue;
        manifest.files[rel] = hex64(hash_file(p.string()));
    }
    write_text(dir / "manifest.json", manifest_json(manifest));
    std::string timings;
    for (const StageRecord& s : manifest.stages) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%s,%.3f,%s\n", s.name.c_str(), s.seconds,
                      s.skipped ? "skipped" : "ran");
        timings += buf;
    }
    write_text(dir / "timings.txt", timings);
    return manifest;
}

}  // namespace tsattr::pipeline
