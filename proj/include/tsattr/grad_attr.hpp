#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tsattr/attr_model.hpp"
#include "tsattr/datasets.hpp"

namespace tsattr::attr {

enum class Layout { FullSweep, Track, SingleClass };
const char* layout_name(Layout l);
Layout layout_from_name(const std::string& name);

// One attribution result. Value shapes by layout:
//   FullSweep   {T_pred, T_in, F, C}   stacked per-target maps
//   Track       {T, F}                 one map per instance
//   SingleClass {1, T, F}              one map for a fixed class
struct AttributionTensor {
    std::string method;
    Layout layout = Layout::Track;
    Tensor values;
    int64_t instance_id = -1;
    int64_t target_class = 0;
    std::vector<int64_t> target_steps;   // FullSweep: prediction steps, in order
    std::vector<double> target_seconds;  // per-target wall time
};

void save_attribution(const AttributionTensor& a, const std::string& path);
AttributionTensor load_attribution(const std::string& path);

struct Baseline {
    enum class Kind { Zeros, ChannelMean, Sampled, Custom };
    Kind kind = Kind::Zeros;
    Tensor data;  // T x F realization
};

const char* baseline_kind_name(Baseline::Kind k);
Baseline zeros_baseline(int64_t t, int64_t f);
Baseline channel_mean_baseline(const datasets::SeriesBatch& batch, int64_t t);
Baseline sampled_baseline(const datasets::SeriesBatch& batch, uint64_t seed);
Baseline custom_baseline(Tensor data);
std::vector<Tensor> baseline_pool(const datasets::SeriesBatch& batch, int64_t n, uint64_t seed);

struct Target {
    int64_t t = 0;
    int64_t c = 0;
};

Tensor integrated_gradients(const Model& model, const Tensor& x, const Tensor& baseline,
                            Target target, int64_t steps = 64);
Tensor gradient_shap(const Model& model, const Tensor& x, const std::vector<Tensor>& pool,
                     Target target, int64_t n_samples, double noise_std, uint64_t seed);
Tensor deeplift_rescale(const Model& model, const Tensor& x, const Tensor& baseline,
                        Target target);
Tensor deeplift_shap(const Model& model, const Tensor& x, const std::vector<Tensor>& pool,
                     Target target, int64_t n_samples, uint64_t seed);
Tensor sequential_integrated_gradients(const Model& model, const Tensor& x,
                                       const Tensor& baseline, Target target,
                                       int64_t steps = 32);
// prefix construction: step t's row comes from attributing output(t,c) on
// the truncated sequence x[0..t]
AttributionTensor temporal_integrated_gradients(const Model& model, const Tensor& x,
                                                const Tensor& baseline, int64_t c,
                                                int64_t steps = 32);

struct MethodConfig {
    Baseline baseline;
    std::vector<Tensor> pool;  // for the *shap variants
    int64_t ig_steps = 64;
    int64_t n_samples = 16;
    double noise_std = 0.1;
    uint64_t seed = 1;
};

// per-target dispatch for the gradient family tags: integrated_gradients,
// gradient_shap, deeplift, deeplift_shap, sequential_integrated_gradients
Tensor gradient_target_map(const std::string& method, const Model& model, const Tensor& x,
                           Target target, const MethodConfig& cfg);

struct SweepConfig {
    std::vector<int64_t> steps;  // prediction steps; empty = all
    int64_t max_bytes = 1LL << 30;
};

// generic stacker: calls per_target for each requested prediction step and
// assembles {T_pred, T_in, F, 1}; refuses oversized requests up front with a
// size estimate
AttributionTensor full_sweep(const std::string& method, int64_t t_len, int64_t f_cnt, int64_t c,
                             const std::function<Tensor(Target)>& per_target,
                             const SweepConfig& sweep);

// declared payload size of a sweep, bytes
int64_t sweep_bytes(int64_t n_targets, int64_t t_len, int64_t f_cnt);

// validated empty sweep container: resolves the step list, applies the size
// guard and allocates the zeroed value stack
AttributionTensor sweep_shell(const std::string& method, int64_t t_len, int64_t f_cnt, int64_t c,
                              const SweepConfig& sweep);

AttributionTensor full_sweep(const std::string& method, const Model& model, const Tensor& x,
                             int64_t c, const MethodConfig& cfg, const SweepConfig& sweep);

}  // namespace tsattr::attr
