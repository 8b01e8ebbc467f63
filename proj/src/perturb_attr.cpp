#include "tsattr/perturb_attr.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace tsattr::attr {

CounterfactualSampler CounterfactualSampler::fit_train_distribution(
    const datasets::SeriesBatch& train) {
    if (train.n() == 0)
        throw std::invalid_argument("fit_train_distribution: empty training batch");
    CounterfactualSampler s;
    s.kind_ = Kind::TrainDistribution;
    s.pool_.resize(static_cast<size_t>(train.f()));
    for (const Tensor& inst : train.values)
        for (int64_t t = 0; t < inst.shape[0]; ++t)
            for (int64_t f = 0; f < inst.shape[1]; ++f)
                s.pool_[static_cast<size_t>(f)].push_back(inst.at(t, f));
    s.fitted_ = true;
    return s;
}

CounterfactualSampler CounterfactualSampler::fit_conditional_gaussian(
    const datasets::SeriesBatch& train) {
    if (train.n() == 0)
        throw std::invalid_argument("fit_conditional_gaussian: empty training batch");
    CounterfactualSampler s;
    s.kind_ = Kind::ConditionalGaussian;
    int64_t f_cnt = train.f();
    s.mean_.assign(static_cast<size_t>(f_cnt), 0.0);
    s.coef_.assign(static_cast<size_t>(f_cnt), 0.0);
    s.sigma_.assign(static_cast<size_t>(f_cnt), 0.0);
    for (int64_t f = 0; f < f_cnt; ++f) {
        double sum = 0.0;
        int64_t cells = 0;
        for (const Tensor& inst : train.values)
            for (int64_t t = 0; t < inst.shape[0]; ++t) {
                sum += inst.at(t, f);
                ++cells;
            }
        double mean = sum / static_cast<double>(cells);
        // lag-1 least squares on centered values
        double num = 0.0, den = 0.0;
        for (const Tensor& inst : train.values)
            for (int64_t t = 1; t < inst.shape[0]; ++t) {
                double prev = inst.at(t - 1, f) - mean, cur = inst.at(t, f) - mean;
                num += prev * cur;
                den += prev * prev;
            }
        double coef = den > 0 ? num / den : 0.0;
        coef = std::clamp(coef, -0.999, 0.999);
        double res = 0.0;
        int64_t pairs = 0;
        for (const Tensor& inst : train.values)
            for (int64_t t = 1; t < inst.shape[0]; ++t) {
                double e = (inst.at(t, f) - mean) - coef * (inst.at(t - 1, f) - mean);
                res += e * e;
                ++pairs;
            }
        s.mean_[static_cast<size_t>(f)] = mean;
        s.coef_[static_cast<size_t>(f)] = coef;
        s.sigma_[static_cast<size_t>(f)] = pairs > 0 ? std::sqrt(res / static_cast<double>(pairs))
                                                     : 0.0;
    }
    s.fitted_ = true;
    return s;
}

const char* CounterfactualSampler::kind_name() const {
    return kind_ == Kind::TrainDistribution ? "train_distribution" : "conditional_gaussian";
}

double CounterfactualSampler::sample(int64_t f, double prev, Rng& rng) const {
    if (!fitted_) throw std::invalid_argument("CounterfactualSampler: sample before fit");
    if (kind_ == Kind::TrainDistribution) {
        const auto& pool = pool_.at(static_cast<size_t>(f));
        return pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))];
    }
    size_t i = static_cast<size_t>(f);
    return mean_[i] + coef_[i] * (prev - mean_[i]) + sigma_[i] * rng.normal();
}

namespace {

void check_window(const OcclusionWindow& w, int64_t t_len, int64_t f_cnt) {
    if (w.time < 1 || w.feature < 1 || w.stride < 1)
        throw std::invalid_argument("occlusion: window extents and stride must be >= 1");
    if (w.time > t_len || w.feature > f_cnt)
        throw std::invalid_argument("occlusion: window " + std::to_string(w.time) + "x" +
                                    std::to_string(w.feature) + " exceeds input " +
                                    std::to_string(t_len) + "x" + std::to_string(f_cnt));
}

// placement origins covering every cell: strided positions plus the tail
std::vector<int64_t> origins(int64_t extent, int64_t window, int64_t stride) {
    std::vector<int64_t> out;
    for (int64_t o = 0; o + window <= extent; o += stride) out.push_back(o);
    if (out.empty() || out.back() + window < extent) out.push_back(extent - window);
    return out;
}

double target_score(const Model& model, const Tensor& x, Target target) {
    return model.scores(x).at(target.t, target.c);
}

// shared occlusion loop; fill(covered rows, covered cols, x_perturbed) writes
// the replacement values, once per sample
template <typename Fill>
Tensor occlusion_loop(const Model& model, const Tensor& x, const OcclusionWindow& window,
                      Target target, int64_t n_samples, Fill fill) {
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    check_window(window, t_len, f_cnt);
    if (target.t < 0 || target.t >= t_len)
        throw std::invalid_argument("occlusion: target step out of range");
    double base = target_score(model, x, target);
    Tensor acc = Tensor::zeros({t_len, f_cnt});
    Tensor count = Tensor::zeros({t_len, f_cnt});
    // cap the stride at the window extent so every cell is covered; at a
    // unit window the stride therefore has no effect
    for (int64_t s0 : origins(t_len, window.time, std::min(window.stride, window.time)))
        for (int64_t f0 : origins(f_cnt, window.feature, std::min(window.stride, window.feature))) {
            double drop = 0.0;
            for (int64_t k = 0; k < n_samples; ++k) {
                Tensor xp = x;
                fill(s0, s0 + window.time, f0, f0 + window.feature, xp);
                drop += base - target_score(model, xp, target);
            }
            drop /= static_cast<double>(n_samples);
            for (int64_t s = s0; s < s0 + window.time; ++s)
                for (int64_t f = f0; f < f0 + window.feature; ++f) {
                    acc.at(s, f) += drop;
                    count.at(s, f) += 1.0;
                }
        }
    for (size_t i = 0; i < acc.v.size(); ++i) acc.v[i] /= count.v[i];
    return acc;
}

}  // namespace

Tensor occlusion(const Model& model, const Tensor& x, const OcclusionWindow& window,
                 const Tensor& baseline, Target target) {
    if (!x.same_shape(baseline))
        throw std::invalid_argument("occlusion: baseline shape " + shape_str(baseline.shape) +
                                    " does not match input " + shape_str(x.shape));
    return occlusion_loop(model, x, window, target, 1,
                          [&](int64_t s0, int64_t s1, int64_t f0, int64_t f1, Tensor& xp) {
                              for (int64_t s = s0; s < s1; ++s)
                                  for (int64_t f = f0; f < f1; ++f)
                                      xp.at(s, f) = baseline.at(s, f);
                          });
}

Tensor augmented_occlusion(const Model& model, const Tensor& x, const OcclusionWindow& window,
                           const CounterfactualSampler& sampler, int64_t n_samples,
                           Target target, uint64_t seed) {
    if (!sampler.fitted())
        throw std::invalid_argument("augmented_occlusion: sampler is not fitted");
    if (n_samples < 1) throw std::invalid_argument("augmented_occlusion: n_samples must be >= 1");
    Rng rng(seed);
    return occlusion_loop(model, x, window, target, n_samples,
                          [&](int64_t s0, int64_t s1, int64_t f0, int64_t f1, Tensor& xp) {
                              for (int64_t s = s0; s < s1; ++s)
                                  for (int64_t f = f0; f < f1; ++f) {
                                      double prev = s > 0 ? xp.at(s - 1, f) : xp.at(s, f);
                                      xp.at(s, f) = sampler.sample(f, prev, rng);
                                  }
                          });
}

Tensor feature_ablation(const Model& model, const Tensor& x, const Tensor& baseline,
                        Target target) {
    return occlusion(model, x, {1, 1, 1}, baseline, target);
}

Tensor feature_permutation(const Model& model, const datasets::SeriesBatch& batch, Target target,
                           uint64_t seed) {
    int64_t n = batch.n();
    if (n < 2)
        throw std::invalid_argument(
            "feature_permutation: need at least 2 instances to permute, got " +
            std::to_string(n));
    int64_t t_len = batch.t(), f_cnt = batch.f();
    if (target.t < 0 || target.t >= t_len)
        throw std::invalid_argument("feature_permutation: target step out of range");
    std::vector<double> base(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        base[static_cast<size_t>(i)] =
            target_score(model, batch.values[static_cast<size_t>(i)], target);
    Rng rng(seed);
    Tensor out = Tensor::zeros({t_len, f_cnt});
    std::vector<int64_t> perm(static_cast<size_t>(n));
    for (int64_t s = 0; s < t_len; ++s)
        for (int64_t f = 0; f < f_cnt; ++f) {
            for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
            rng.shuffle(perm);
            double drop = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                Tensor xp = batch.values[static_cast<size_t>(i)];
                xp.at(s, f) =
                    batch.values[static_cast<size_t>(perm[static_cast<size_t>(i)])].at(s, f);
                drop += base[static_cast<size_t>(i)] - target_score(model, xp, target);
            }
            out.at(s, f) = drop / static_cast<double>(n);
        }
    return out;
}

FitResult fit_importance(const Model& model, const Tensor& x, const CounterfactualSampler& sampler,
                         int64_t n_samples, uint64_t seed) {
    if (!sampler.fitted()) throw std::invalid_argument("fit_importance: sampler is not fitted");
    if (n_samples < 1) throw std::invalid_argument("fit_importance: n_samples must be >= 1");
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    FitResult res;
    res.values = Tensor::zeros({t_len, f_cnt});
    Tensor probs = model.probabilities(x);
    Rng rng(seed);
    auto clamp_p = [&](double p) {
        if (p < 1e-7 || p > 1.0 - 1e-7) {
            ++res.clamp_events;
            return std::clamp(p, 1e-7, 1.0 - 1e-7);
        }
        return p;
    };
    for (int64_t t = 0; t < t_len; ++t) {
        double p = clamp_p(probs.at(t, 0));
        for (int64_t f = 0; f < f_cnt; ++f) {
            double kl_sum = 0.0;
            for (int64_t k = 0; k < n_samples; ++k) {
                Tensor xp = x;
                for (int64_t g = 0; g < f_cnt; ++g) {
                    if (g == f) continue;
                    double prev = t > 0 ? x.at(t - 1, g) : x.at(t, g);
                    xp.at(t, g) = sampler.sample(g, prev, rng);
                }
                double q = clamp_p(model.probabilities(xp).at(t, 0));
                kl_sum += p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
            }
            res.values.at(t, f) = kl_sum / static_cast<double>(n_samples);
        }
    }
    return res;
}

Tensor perturb_target_map(const std::string& method, const Model& model, const Tensor& x,
                          Target target, const PerturbConfig& cfg) {
    if (method == "occlusion") return occlusion(model, x, cfg.window, cfg.baseline, target);
    if (method == "augmented_occlusion")
        return augmented_occlusion(model, x, cfg.window, cfg.sampler, cfg.n_samples, target,
                                   cfg.seed);
    if (method == "feature_ablation") return feature_ablation(model, x, cfg.baseline, target);
    throw std::invalid_argument("perturb_target_map: unknown method tag " + method);
}

AttributionTensor perturb_full_sweep(const std::string& method, const Model& model,
                                     const Tensor& x, int64_t c, const PerturbConfig& cfg,
                                     const SweepConfig& sweep) {
    return full_sweep(
        method, x.shape[0], x.shape[1], c,
        [&](Target t) { return perturb_target_map(method, model, x, t, cfg); }, sweep);
}

namespace {

// batched loop: every placement is evaluated once (per draw) and the score
// track feeds the drop at every requested target
template <typename Fill>
AttributionTensor occlusion_sweep_loop(const std::string& method, const Model& model,
                                       const Tensor& x, const OcclusionWindow& window, int64_t c,
                                       const SweepConfig& sweep, int64_t n_samples, Fill fill) {
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    check_window(window, t_len, f_cnt);
    AttributionTensor out = sweep_shell(method, t_len, f_cnt, c, sweep);
    auto t0 = std::chrono::steady_clock::now();
    int64_t n_t = static_cast<int64_t>(out.target_steps.size());
    Tensor base = model.scores(x);
    Tensor count = Tensor::zeros({t_len, f_cnt});
    std::vector<double> drop(static_cast<size_t>(n_t));
    for (int64_t s0 : origins(t_len, window.time, std::min(window.stride, window.time)))
        for (int64_t f0 : origins(f_cnt, window.feature, std::min(window.stride, window.feature))) {
            std::fill(drop.begin(), drop.end(), 0.0);
            for (int64_t k = 0; k < n_samples; ++k) {
                Tensor xp = x;
                fill(s0, s0 + window.time, f0, f0 + window.feature, xp);
                Tensor sc = model.scores(xp);
                for (int64_t j = 0; j < n_t; ++j) {
                    int64_t t = out.target_steps[static_cast<size_t>(j)];
                    drop[static_cast<size_t>(j)] += base.at(t, c) - sc.at(t, c);
                }
            }
            for (int64_t s = s0; s < s0 + window.time; ++s)
                for (int64_t f = f0; f < f0 + window.feature; ++f) {
                    count.at(s, f) += 1.0;
                    for (int64_t j = 0; j < n_t; ++j)
                        out.values.v[static_cast<size_t>(((j * t_len) + s) * f_cnt + f)] +=
                            drop[static_cast<size_t>(j)] / static_cast<double>(n_samples);
                }
        }
    for (int64_t j = 0; j < n_t; ++j)
        for (int64_t s = 0; s < t_len; ++s)
            for (int64_t f = 0; f < f_cnt; ++f)
                out.values.v[static_cast<size_t>(((j * t_len) + s) * f_cnt + f)] /= count.at(s, f);
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.target_seconds.assign(static_cast<size_t>(n_t), elapsed / static_cast<double>(n_t));
    return out;
}

}  // namespace

AttributionTensor occlusion_sweep(const Model& model, const Tensor& x,
                                  const OcclusionWindow& window, const Tensor& baseline,
                                  int64_t c, const SweepConfig& sweep) {
    if (!x.same_shape(baseline))
        throw std::invalid_argument("occlusion_sweep: baseline shape does not match input");
    return occlusion_sweep_loop("occlusion", model, x, window, c, sweep, 1,
                                [&](int64_t s0, int64_t s1, int64_t f0, int64_t f1, Tensor& xp) {
                                    for (int64_t s = s0; s < s1; ++s)
                                        for (int64_t f = f0; f < f1; ++f)
                                            xp.at(s, f) = baseline.at(s, f);
                                });
}

AttributionTensor augmented_occlusion_sweep(const Model& model, const Tensor& x,
                                            const OcclusionWindow& window,
                                            const CounterfactualSampler& sampler,
                                            int64_t n_samples, int64_t c,
                                            const SweepConfig& sweep, uint64_t seed) {
    if (!sampler.fitted())
        throw std::invalid_argument("augmented_occlusion_sweep: sampler is not fitted");
    if (n_samples < 1)
        throw std::invalid_argument("augmented_occlusion_sweep: n_samples must be >= 1");
    Rng rng(seed);
    return occlusion_sweep_loop("augmented_occlusion", model, x, window, c, sweep, n_samples,
                                [&](int64_t s0, int64_t s1, int64_t f0, int64_t f1, Tensor& xp) {
                                    for (int64_t s = s0; s < s1; ++s)
                                        for (int64_t f = f0; f < f1; ++f) {
                                            double prev = s > 0 ? xp.at(s - 1, f) : xp.at(s, f);
                                            xp.at(s, f) = sampler.sample(f, prev, rng);
                                        }
                                });
}

AttributionTensor feature_ablation_sweep(const Model& model, const Tensor& x,
                                         const Tensor& baseline, int64_t c,
                                         const SweepConfig& sweep) {
    if (!x.same_shape(baseline))
        throw std::invalid_argument("feature_ablation_sweep: baseline shape does not match input");
    AttributionTensor out =
        occlusion_sweep_loop("feature_ablation", model, x, {1, 1, 1}, c, sweep, 1,
                             [&](int64_t s0, int64_t s1, int64_t f0, int64_t f1, Tensor& xp) {
                                 for (int64_t s = s0; s < s1; ++s)
                                     for (int64_t f = f0; f < f1; ++f)
                                         xp.at(s, f) = baseline.at(s, f);
                             });
    return out;
}

AttributionTensor feature_permutation_sweep(const Model& model,
                                            const datasets::SeriesBatch& batch, int64_t c,
                                            const SweepConfig& sweep, uint64_t seed) {
    int64_t n = batch.n();
    if (n < 2)
        throw std::invalid_argument(
            "feature_permutation_sweep: need at least 2 instances to permute, got " +
            std::to_string(n));
    int64_t t_len = batch.t(), f_cnt = batch.f();
    AttributionTensor out = sweep_shell("feature_permutation", t_len, f_cnt, c, sweep);
    auto t0 = std::chrono::steady_clock::now();
    int64_t n_t = static_cast<int64_t>(out.target_steps.size());
    std::vector<Tensor> base;
    for (const Tensor& inst : batch.values) base.push_back(model.scores(inst));
    Rng rng(seed);
    std::vector<int64_t> perm(static_cast<size_t>(n));
    for (int64_t s = 0; s < t_len; ++s)
        for (int64_t f = 0; f < f_cnt; ++f) {
            for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
            rng.shuffle(perm);
            for (int64_t i = 0; i < n; ++i) {
                Tensor xp = batch.values[static_cast<size_t>(i)];
                xp.at(s, f) =
                    batch.values[static_cast<size_t>(perm[static_cast<size_t>(i)])].at(s, f);
                Tensor sc = model.scores(xp);
                for (int64_t j = 0; j < n_t; ++j) {
                    int64_t t = out.target_steps[static_cast<size_t>(j)];
                    out.values.v[static_cast<size_t>(((j * t_len) + s) * f_cnt + f)] +=
                        (base[static_cast<size_t>(i)].at(t, c) - sc.at(t, c)) /
                        static_cast<double>(n);
                }
            }
        }
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.target_seconds.assign(static_cast<size_t>(n_t), elapsed / static_cast<double>(n_t));
    return out;
}

}  // namespace tsattr::attr
