#include "tsattr/grad_attr.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "tsattr/archive.hpp"
#include "tsattr/rng.hpp"

namespace tsattr::attr {

const char* layout_name(Layout l) {
    switch (l) {
        case Layout::FullSweep: return "full_sweep";
        case Layout::Track: return "track";
        case Layout::SingleClass: return "single_class";
    }
    return "?";
}

Layout layout_from_name(const std::string& name) {
    if (name == "full_sweep") return Layout::FullSweep;
    if (name == "track") return Layout::Track;
    if (name == "single_class") return Layout::SingleClass;
    throw std::invalid_argument("unknown attribution layout: " + name);
}

void save_attribution(const AttributionTensor& a, const std::string& path) {
    Archive ar;
    ar.put("values", a.values);
    ar.save(path);
    nlohmann::json m;
    m["method"] = a.method;
    m["layout"] = layout_name(a.layout);
    m["instance_id"] = a.instance_id;
    m["target_class"] = a.target_class;
    // timing stays in memory only so archives are byte-stable across reruns
    m["target_steps"] = a.target_steps;
    m["shape"] = a.values.shape;
    std::ofstream out(path + ".json");
    if (!out) throw std::runtime_error("save_attribution: cannot write " + path + ".json");
    out << m.dump(2) << "\n";
}

AttributionTensor load_attribution(const std::string& path) {
    AttributionTensor a;
    Archive ar = Archive::load(path);
    a.values = ar.get("values");
    std::ifstream in(path + ".json");
    if (!in) throw std::runtime_error("load_attribution: cannot read " + path + ".json");
    nlohmann::json m = nlohmann::json::parse(in);
    a.method = m.at("method").get<std::string>();
    a.layout = layout_from_name(m.at("layout").get<std::string>());
    a.instance_id = m.at("instance_id").get<int64_t>();
    a.target_class = m.at("target_class").get<int64_t>();
    a.target_steps = m.at("target_steps").get<std::vector<int64_t>>();
    return a;
}

const char* baseline_kind_name(Baseline::Kind k) {
    switch (k) {
        case Baseline::Kind::Zeros: return "zeros";
        case Baseline::Kind::ChannelMean: return "channel_mean";
        case Baseline::Kind::Sampled: return "sampled";
        case Baseline::Kind::Custom: return "custom";
    }
    return "?";
}

Baseline zeros_baseline(int64_t t, int64_t f) {
    return {Baseline::Kind::Zeros, Tensor::zeros({t, f})};
}

Baseline channel_mean_baseline(const datasets::SeriesBatch& batch, int64_t t) {
    if (batch.n() == 0) throw std::invalid_argument("channel_mean_baseline: empty batch");
    int64_t f = batch.f();
    std::vector<double> mean(static_cast<size_t>(f), 0.0);
    int64_t cells = batch.n() * batch.t();
    for (const Tensor& inst : batch.values)
        for (int64_t s = 0; s < inst.shape[0]; ++s)
            for (int64_t c = 0; c < f; ++c) mean[static_cast<size_t>(c)] += inst.at(s, c);
    Baseline b{Baseline::Kind::ChannelMean, Tensor({t, f})};
    for (int64_t s = 0; s < t; ++s)
        for (int64_t c = 0; c < f; ++c)
            b.data.at(s, c) = mean[static_cast<size_t>(c)] / static_cast<double>(cells);
    return b;
}

Baseline sampled_baseline(const datasets::SeriesBatch& batch, uint64_t seed) {
    if (batch.n() == 0) throw std::invalid_argument("sampled_baseline: empty batch");
    Rng rng(seed);
    return {Baseline::Kind::Sampled,
            batch.values[static_cast<size_t>(rng.uniform_int(batch.n()))]};
}

Baseline custom_baseline(Tensor data) { return {Baseline::Kind::Custom, std::move(data)}; }

std::vector<Tensor> baseline_pool(const datasets::SeriesBatch& batch, int64_t n, uint64_t seed) {
    if (batch.n() == 0) throw std::invalid_argument("baseline_pool: empty batch");
    Rng rng(seed);
    std::vector<Tensor> pool;
    for (int64_t i = 0; i < n; ++i)
        pool.push_back(batch.values[static_cast<size_t>(rng.uniform_int(batch.n()))]);
    return pool;
}

namespace {

void check_target(const Tensor& x, Target target, const models::ForwardGraph& fg,
                  const char* who) {
    int64_t classes = fg.graph.node_cols(fg.logit);
    if (target.t < 0 || target.t >= x.shape[0])
        throw std::invalid_argument(std::string(who) + ": target step " + std::to_string(target.t) +
                                    " outside [0," + std::to_string(x.shape[0]) + ")");
    if (target.c < 0 || target.c >= classes)
        throw std::invalid_argument(std::string(who) + ": target class " +
                                    std::to_string(target.c) + " outside [0," +
                                    std::to_string(classes) + ")");
}

void check_baseline(const Tensor& x, const Tensor& baseline, const char* who) {
    if (!x.same_shape(baseline))
        throw std::invalid_argument(std::string(who) + ": baseline shape " +
                                    shape_str(baseline.shape) + " does not match input " +
                                    shape_str(x.shape));
}

// gradient of score(target) w.r.t. the input leaf
Tensor score_input_gradient(const Model& model, const Tensor& x, Target target) {
    const models::ForwardGraph& fg = model.graph(x.shape[0]);
    auto vals = evaluate(fg.graph, model.bind(x));
    Tensor seed = Tensor::zeros(fg.graph.shape(fg.logit));
    seed.at(target.t, target.c) = 1.0;
    return gradient(fg.graph, vals, fg.logit, &seed).at("x");
}

Tensor lerp(const Tensor& a, const Tensor& b, double alpha) {
    Tensor out = a;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += alpha * (b.v[i] - a.v[i]);
    return out;
}

}  // namespace

Tensor integrated_gradients(const Model& model, const Tensor& x, const Tensor& baseline,
                            Target target, int64_t steps) {
    if (steps < 8)
        throw std::invalid_argument("integrated_gradients: need at least 8 path steps, got " +
                                    std::to_string(steps));
    check_baseline(x, baseline, "integrated_gradients");
    check_target(x, target, model.graph(x.shape[0]), "integrated_gradients");
    Tensor avg = Tensor::zeros(x.shape);
    for (int64_t k = 0; k < steps; ++k) {
        double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
        try {
            avg.add_(score_input_gradient(model, lerp(baseline, x, alpha), target));
        } catch (const std::exception& e) {
            throw std::runtime_error("integrated_gradients: failure at interpolation index " +
                                     std::to_string(k) + ": " + e.what());
        }
    }
    avg.scale_(1.0 / static_cast<double>(steps));
    for (size_t i = 0; i < avg.v.size(); ++i) avg.v[i] *= x.v[i] - baseline.v[i];
    return avg;
}

Tensor gradient_shap(const Model& model, const Tensor& x, const std::vector<Tensor>& pool,
                     Target target, int64_t n_samples, double noise_std, uint64_t seed) {
    if (pool.empty()) throw std::invalid_argument("gradient_shap: empty baseline pool");
    if (n_samples < 1) throw std::invalid_argument("gradient_shap: n_samples must be >= 1");
    for (const Tensor& b : pool) check_baseline(x, b, "gradient_shap");
    check_target(x, target, model.graph(x.shape[0]), "gradient_shap");
    Rng rng(seed);
    Tensor acc = Tensor::zeros(x.shape);
    for (int64_t s = 0; s < n_samples; ++s) {
        const Tensor& b = pool[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(pool.size())))];
        double alpha = rng.uniform();
        Tensor noisy = x;
        if (noise_std > 0)
            for (double& v : noisy.v) v += rng.normal(0.0, noise_std);
        Tensor grad;
        try {
            grad = score_input_gradient(model, lerp(b, noisy, alpha), target);
        } catch (const std::exception& e) {
            throw std::runtime_error("gradient_shap: failure at sample " + std::to_string(s) +
                                     ": " + e.what());
        }
        for (size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += grad.v[i] * (x.v[i] - b.v[i]);
    }
    acc.scale_(1.0 / static_cast<double>(n_samples));
    return acc;
}

Tensor deeplift_rescale(const Model& model, const Tensor& x, const Tensor& baseline,
                        Target target) {
    check_baseline(x, baseline, "deeplift_rescale");
    const models::ForwardGraph& fg = model.graph(x.shape[0]);
    check_target(x, target, fg, "deeplift_rescale");
    auto vx = evaluate(fg.graph, model.bind(x));
    auto vb = evaluate(fg.graph, model.bind(baseline));
    Tensor seed = Tensor::zeros(fg.graph.shape(fg.logit));
    seed.at(target.t, target.c) = 1.0;
    Tensor mult = deeplift_multipliers(fg.graph, vx, vb, fg.logit, &seed).at("x");
    for (size_t i = 0; i < mult.v.size(); ++i) mult.v[i] *= x.v[i] - baseline.v[i];
    return mult;
}

Tensor deeplift_shap(const Model& model, const Tensor& x, const std::vector<Tensor>& pool,
                     Target target, int64_t n_samples, uint64_t seed) {
    if (pool.empty()) throw std::invalid_argument("deeplift_shap: empty baseline pool");
    if (n_samples < 1) throw std::invalid_argument("deeplift_shap: n_samples must be >= 1");
    Rng rng(seed);
    Tensor acc = Tensor::zeros(x.shape);
    for (int64_t s = 0; s < n_samples; ++s) {
        const Tensor& b = pool[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(pool.size())))];
        acc.add_(deeplift_rescale(model, x, b, target));
    }
    acc.scale_(1.0 / static_cast<double>(n_samples));
    return acc;
}

Tensor sequential_integrated_gradients(const Model& model, const Tensor& x,
                                       const Tensor& baseline, Target target, int64_t steps) {
    if (steps < 8)
        throw std::invalid_argument(
            "sequential_integrated_gradients: need at least 8 path steps, got " +
            std::to_string(steps));
    check_baseline(x, baseline, "sequential_integrated_gradients");
    check_target(x, target, model.graph(x.shape[0]), "sequential_integrated_gradients");
    int64_t f_cnt = x.shape[1];
    Tensor out = Tensor::zeros(x.shape);
    // one straight path per step s: only row s moves, the rest stay at x
    for (int64_t s = 0; s <= target.t; ++s) {
        Tensor row_avg = Tensor::zeros({f_cnt});
        for (int64_t k = 0; k < steps; ++k) {
            double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
            Tensor xi = x;
            for (int64_t f = 0; f < f_cnt; ++f)
                xi.at(s, f) = baseline.at(s, f) + alpha * (x.at(s, f) - baseline.at(s, f));
            Tensor grad;
            try {
                grad = score_input_gradient(model, xi, target);
            } catch (const std::exception& e) {
                throw std::runtime_error(
                    "sequential_integrated_gradients: failure at step " + std::to_string(s) +
                    ", interpolation index " + std::to_string(k) + ": " + e.what());
            }
            for (int64_t f = 0; f < f_cnt; ++f) row_avg[f] += grad.at(s, f);
        }
        for (int64_t f = 0; f < f_cnt; ++f)
            out.at(s, f) = row_avg[f] / static_cast<double>(steps) *
                           (x.at(s, f) - baseline.at(s, f));
    }
    return out;
}

AttributionTensor temporal_integrated_gradients(const Model& model, const Tensor& x,
                                                const Tensor& baseline, int64_t c,
                                                int64_t steps) {
    check_baseline(x, baseline, "temporal_integrated_gradients");
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    AttributionTensor out;
    out.method = "temporal_integrated_gradients";
    out.layout = Layout::SingleClass;
    out.target_class = c;
    out.values = Tensor::zeros({1, t_len, f_cnt});
    for (int64_t t = 0; t < t_len; ++t) {
        auto t0 = std::chrono::steady_clock::now();
        Tensor px({t + 1, f_cnt}), pb({t + 1, f_cnt});
        std::copy(x.v.begin(), x.v.begin() + (t + 1) * f_cnt, px.v.begin());
        std::copy(baseline.v.begin(), baseline.v.begin() + (t + 1) * f_cnt, pb.v.begin());
        Tensor map = integrated_gradients(model, px, pb, {t, c}, steps);
        for (int64_t f = 0; f < f_cnt; ++f) out.values.v[static_cast<size_t>(t * f_cnt + f)] =
            map.at(t, f);
        out.target_steps.push_back(t);
        out.target_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return out;
}

Tensor gradient_target_map(const std::string& method, const Model& model, const Tensor& x,
                           Target target, const MethodConfig& cfg) {
    if (method == "integrated_gradients")
        return integrated_gradients(model, x, cfg.baseline.data, target, cfg.ig_steps);
    if (method == "gradient_shap")
        return gradient_shap(model, x, cfg.pool, target, cfg.n_samples, cfg.noise_std, cfg.seed);
    if (method == "deeplift") return deeplift_rescale(model, x, cfg.baseline.data, target);
    if (method == "deeplift_shap")
        return deeplift_shap(model, x, cfg.pool, target, cfg.n_samples, cfg.seed);
    if (method == "sequential_integrated_gradients")
        return sequential_integrated_gradients(model, x, cfg.baseline.data, target, cfg.ig_steps);
    throw std::invalid_argument("gradient_target_map: unknown method tag " + method);
}

int64_t sweep_bytes(int64_t n_targets, int64_t t_len, int64_t f_cnt) {
    return n_targets * t_len * f_cnt * static_cast<int64_t>(sizeof(double));
}

AttributionTensor sweep_shell(const std::string& method, int64_t t_len, int64_t f_cnt, int64_t c,
                              const SweepConfig& sweep) {
    std::vector<int64_t> steps = sweep.steps;
    if (steps.empty())
        for (int64_t t = 0; t < t_len; ++t) steps.push_back(t);
    for (int64_t t : steps)
        if (t < 0 || t >= t_len)
            throw std::invalid_argument("full_sweep: target step " + std::to_string(t) +
                                        " outside [0," + std::to_string(t_len) + ")");
    int64_t bytes = sweep_bytes(static_cast<int64_t>(steps.size()), t_len, f_cnt);
    if (bytes > sweep.max_bytes)
        throw std::runtime_error(
            "full_sweep: declared size " + std::to_string(bytes) + " bytes (" +
            std::to_string(steps.size()) + " targets x " + std::to_string(t_len) + " x " +
            std::to_string(f_cnt) + " x 1 f64) exceeds the " +
            std::to_string(sweep.max_bytes) +
            "-byte limit; restrict the target step subset or raise the limit");
    AttributionTensor out;
    out.method = method;
    out.layout = Layout::FullSweep;
    out.target_class = c;
    out.target_steps = steps;
    out.values = Tensor::zeros({static_cast<int64_t>(steps.size()), t_len, f_cnt, 1});
    return out;
}

AttributionTensor full_sweep(const std::string& method, int64_t t_len, int64_t f_cnt, int64_t c,
                             const std::function<Tensor(Target)>& per_target,
                             const SweepConfig& sweep) {
    AttributionTensor out = sweep_shell(method, t_len, f_cnt, c, sweep);
    const std::vector<int64_t>& steps = out.target_steps;
    int64_t map_sz = t_len * f_cnt;
    for (size_t i = 0; i < steps.size(); ++i) {
        auto t0 = std::chrono::steady_clock::now();
        Tensor map = per_target({steps[i], c});
        if (map.shape != std::vector<int64_t>{t_len, f_cnt})
            throw std::runtime_error("full_sweep: per-target map for step " +
                                     std::to_string(steps[i]) + " has shape " +
                                     shape_str(map.shape) + ", expected " +
                                     shape_str({t_len, f_cnt}));
        std::copy(map.v.begin(), map.v.end(),
                  out.values.v.begin() + static_cast<int64_t>(i) * map_sz);
        out.target_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return out;
}

AttributionTensor full_sweep(const std::string& method, const Model& model, const Tensor& x,
                             int64_t c, const MethodConfig& cfg, const SweepConfig& sweep) {
    return full_sweep(
        method, x.shape[0], x.shape[1], c,
        [&](Target t) { return gradient_target_map(method, model, x, t, cfg); }, sweep);
}

}  // namespace tsattr::attr
