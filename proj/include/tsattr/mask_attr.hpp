#pragma once

#include <vector>

#include "tsattr/attr_model.hpp"
#include "tsattr/grad_attr.hpp"

namespace tsattr::attr {

enum class MaskGame { Preserve, Delete };
enum class MaskOperator { MovingAverage, GaussianBlur, Learned };
const char* mask_game_name(MaskGame g);
const char* mask_operator_name(MaskOperator k);

struct MaskConfig {
    double keep_ratio = 0.1;     // dynamask target fraction of kept cells
    double lambda_size = 1.0;
    double lambda_smooth = 0.1;  // temporal total variation
    double lambda_entropy = 0.0; // optional concentration term
    double lambda_anchor = 10.0; // pulls the learned operator's output toward
                                 // the neutral value; without it the net just
                                 // reconstructs the prediction and the mask
                                 // receives no gradient
    int64_t iterations = 500;
    double lr = 0.05;
    MaskGame game = MaskGame::Preserve;
    MaskOperator op = MaskOperator::MovingAverage;
    int64_t window = 2;      // moving-average width, past-only
    double sigma_max = 2.0;  // blur width at m = 0
    int64_t g_hidden = 16;   // learned operator hidden width
    uint64_t seed = 1;
    std::vector<uint8_t> eligible;  // steps entering the consistency term; empty = all
};

struct LossTerms {
    double consistency = 0, size = 0, smooth = 0, entropy = 0, anchor = 0;
    double total() const { return consistency + size + smooth + entropy + anchor; }
};

struct MaskState {
    Tensor m;            // T x F in [0,1]
    Tensor attribution;  // m, or 1-m under the delete game
    std::vector<LossTerms> history;  // one entry per completed iteration
    MaskConfig config;
};

// causal mean of the past `window` steps ending at each step
Tensor moving_average_surrogate(const Tensor& x, int64_t window);
// causal gaussian-weighted average, per-cell sigma = sigma_max * (1 - m)
Tensor gaussian_blur_surrogate(const Tensor& x, const Tensor& m, double sigma_max);

// x' = m (.) x + (1-m) (.) surrogate; for the learned operator the caller
// supplies g(x) via `gx`
Tensor apply_perturbation(const Tensor& x, const Tensor& m, const MaskConfig& cfg,
                          const Tensor* gx = nullptr);

// fixed-operator mask optimization (moving-average or gaussian-blur)
MaskState dynamask_fit(const Model& model, const Tensor& x, const MaskConfig& cfg);

struct ExtremalResult {
    MaskState state;
    std::map<std::string, Tensor> operator_params;  // the learned g network
    Tensor gx;                                      // g(x) at convergence
};

// joint optimization of the mask and a small causal perturbation net
ExtremalResult extremal_mask_fit(const Model& model, const Tensor& x, const MaskConfig& cfg);

// loss-history table as CSV text: iteration, consistency, size, smooth,
// entropy, anchor, total
std::string loss_history_csv(const std::vector<LossTerms>& history);

}  // namespace tsattr::attr
