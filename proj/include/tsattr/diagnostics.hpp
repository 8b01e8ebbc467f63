#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tsattr/tensor.hpp"

namespace tsattr::diag {

struct AdjacentResult {
    double distance = 0.0;  // in [0,1]
    bool degenerate = false;
};

// 1 - cosine similarity of two per-target maps from consecutive targets
// (t, t+1), restricted to the shared causal support rows [0, shared_t];
// zero-norm restrictions are degenerate and score 1
AdjacentResult adjacent_consistency(const Tensor& a, const Tensor& b, int64_t shared_t,
                                    bool absolute = false);

struct MassProfile {
    double recency_mass = 0.0;     // |attribution| share at the target step
    double future_leakage = 0.0;   // share at steps after the target
    std::vector<double> past_mass_curve;  // index k = share at step target-1-k
    bool degenerate = false;       // all-zero map, shares undefined
};

MassProfile target_mass_profile(const Tensor& attr, int64_t target);

struct TemporalProfile {
    double temporal_tv = 0.0;      // mean range-normalized total variation per feature
    double feature_entropy = 0.0;  // entropy of per-feature mass, / log F
    bool degenerate = false;
};

TemporalProfile temporal_profile(const Tensor& track);

struct OnsetLead {
    std::vector<double> curve;  // index 0 = lead max_lead, last = lead 1
    double post_onset_mean = 0.0;
    bool has_events = false;
};

OnsetLead onset_lead(const Tensor& track,
                     const std::vector<std::pair<int64_t, int64_t>>& events, int64_t max_lead);

struct SaliencyPr {
    double auprc = 0.0;  // average precision of |attr| ranking against truth cells
    double aup = 0.0;    // area under precision across 50 quantile thresholds
    double aur = 0.0;    // area under recall across the same thresholds
};

SaliencyPr saliency_pr(const Tensor& attr, const Tensor& truth);

// ---------------------------------------------------------------------------
// report assembly

struct Provenance {
    uint64_t dataset_hash = 0;
    uint64_t model_hash = 0;
    uint64_t seed = 0;
};

// raw metrics for one (method, instance); quiet NaN marks a metric that was
// not computed for this sample
struct Sample {
    std::string method;
    Provenance provenance;
    double adjacent_inconsistency = nan_value();
    double recency_mass = nan_value();
    double future_leakage = nan_value();
    double temporal_tv = nan_value();
    double feature_entropy = nan_value();
    std::vector<double> onset_lead_curve;
    double post_onset_mean = nan_value();
    double saliency_auprc = nan_value();
    double saliency_aup = nan_value();
    double saliency_aur = nan_value();
    bool degenerate = false;

    static double nan_value();
};

struct MetricSummary {
    double mean = 0.0, std = 0.0;
    int64_t count = 0;  // 0 = metric absent for this method
};

struct MethodDiagnostics {
    std::string method;
    MetricSummary adjacent_inconsistency, recency_mass, future_leakage;
    MetricSummary temporal_tv, feature_entropy, post_onset_mean;
    MetricSummary saliency_auprc, saliency_aup, saliency_aur;
    std::vector<double> onset_lead_curve;  // element-wise mean
    int64_t degenerate_count = 0;
    int64_t samples = 0;
};

struct Report {
    Provenance provenance;
    std::vector<MethodDiagnostics> rows;  // sorted by method tag
};

// aggregates per method; all samples must carry the same model hash
Report build_report(const std::vector<Sample>& samples);

// deterministic serializations; csv and markdown rows are ranked by
// saliency auprc, with fixed column order
std::string report_to_json(const Report& report);
std::string report_to_csv(const Report& report);
std::string report_to_markdown(const Report& report);

}  // namespace tsattr::diag
