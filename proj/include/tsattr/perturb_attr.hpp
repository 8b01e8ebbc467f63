#pragma once

#include <vector>

#include "tsattr/datasets.hpp"
#include "tsattr/grad_attr.hpp"
#include "tsattr/rng.hpp"

namespace tsattr::attr {

struct OcclusionWindow {
    int64_t time = 3;
    int64_t feature = 1;
    int64_t stride = 1;
};

// Replacement-value source for augmented occlusion and FIT. Both kinds are
// fitted on training series in physical units and draw deterministically
// from a caller-provided stream.
class CounterfactualSampler {
  public:
    enum class Kind { TrainDistribution, ConditionalGaussian };

    CounterfactualSampler() = default;

    // empirical per-channel pool: a draw is a uniformly sampled observed value
    static CounterfactualSampler fit_train_distribution(const datasets::SeriesBatch& train);
    // per-channel AR(1) gaussian: draw = mean + coef*(prev - mean) + sigma*N(0,1)
    static CounterfactualSampler fit_conditional_gaussian(const datasets::SeriesBatch& train);

    bool fitted() const { return fitted_; }
    Kind kind() const { return kind_; }
    const char* kind_name() const;

    // replacement for a cell of channel f; prev is the channel's value one
    // step earlier (ignored by the train-distribution kind)
    double sample(int64_t f, double prev, Rng& rng) const;

  private:
    bool fitted_ = false;
    Kind kind_ = Kind::TrainDistribution;
    std::vector<std::vector<double>> pool_;          // per channel
    std::vector<double> mean_, coef_, sigma_;        // per channel
};

// positive importance = removing the cell lowers the target score
Tensor occlusion(const Model& model, const Tensor& x, const OcclusionWindow& window,
                 const Tensor& baseline, Target target);
Tensor augmented_occlusion(const Model& model, const Tensor& x, const OcclusionWindow& window,
                           const CounterfactualSampler& sampler, int64_t n_samples,
                           Target target, uint64_t seed);
Tensor feature_ablation(const Model& model, const Tensor& x, const Tensor& baseline,
                        Target target);
// one shared permutation per cell across the batch; returns the mean score
// drop over instances
Tensor feature_permutation(const Model& model, const datasets::SeriesBatch& batch, Target target,
                           uint64_t seed);

struct FitResult {
    Tensor values;            // T x F, track layout
    int64_t clamp_events = 0;  // probabilities pushed back inside (1e-7, 1-1e-7)
};

// per-cell KL divergence between the model's step-t distribution and the
// same distribution after replacing every other feature at step t with
// counterfactual draws conditioned on the previous step
FitResult fit_importance(const Model& model, const Tensor& x, const CounterfactualSampler& sampler,
                         int64_t n_samples, uint64_t seed);

struct PerturbConfig {
    OcclusionWindow window;
    Tensor baseline;  // for occlusion / feature_ablation
    CounterfactualSampler sampler;
    int64_t n_samples = 8;
    uint64_t seed = 1;
    int64_t group = 64;  // placement batch size for evaluation scheduling
};

// per-target dispatch for the sweep-capable tags: occlusion,
// augmented_occlusion, feature_ablation
Tensor perturb_target_map(const std::string& method, const Model& model, const Tensor& x,
                          Target target, const PerturbConfig& cfg);

AttributionTensor perturb_full_sweep(const std::string& method, const Model& model,
                                     const Tensor& x, int64_t c, const PerturbConfig& cfg,
                                     const SweepConfig& sweep);

// Batched sweeps: one model evaluation per placement (and per draw) serves
// every requested target at once by reading the whole score track. Occlusion
// and ablation agree exactly with the per-target functions; the sampled
// variants share one draw sequence across targets instead of redrawing.
AttributionTensor occlusion_sweep(const Model& model, const Tensor& x,
                                  const OcclusionWindow& window, const Tensor& baseline,
                                  int64_t c, const SweepConfig& sweep);
AttributionTensor augmented_occlusion_sweep(const Model& model, const Tensor& x,
                                            const OcclusionWindow& window,
                                            const CounterfactualSampler& sampler,
                                            int64_t n_samples, int64_t c,
                                            const SweepConfig& sweep, uint64_t seed);
AttributionTensor feature_ablation_sweep(const Model& model, const Tensor& x,
                                         const Tensor& baseline, int64_t c,
                                         const SweepConfig& sweep);
AttributionTensor feature_permutation_sweep(const Model& model,
                                            const datasets::SeriesBatch& batch, int64_t c,
                                            const SweepConfig& sweep, uint64_t seed);

}  // namespace tsattr::attr
