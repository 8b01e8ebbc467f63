#pragma once

#include <vector>

#include "tsattr/datasets.hpp"

namespace tsattr::models {

// Scaled-percentage metrics as reported in clinical benchmarking: auroc,
// auprc, f1 in [0,100]; mcc in [-100,100]. std fields cover multi-run
// aggregation.
struct MetricsBundle {
    double auroc = 0, auprc = 0, f1 = 0, mcc = 0;
    double auroc_std = 0, auprc_std = 0, f1_std = 0, mcc_std = 0;
};

// pooled over eligible steps only; throws if labels are single-class
MetricsBundle evaluate_metrics(const std::vector<Tensor>& probability_tracks,
                               const datasets::LabelTrack& labels, double threshold = 0.5);

MetricsBundle aggregate_runs(const std::vector<MetricsBundle>& runs);

// flat variants used by the bundle and directly by tests
double auroc_percent(const std::vector<int>& y, const std::vector<double>& scores);
double auprc_percent(const std::vector<int>& y, const std::vector<double>& scores);
double f1_percent(const std::vector<int>& y, const std::vector<double>& scores, double threshold);
double mcc_percent(const std::vector<int>& y, const std::vector<double>& scores, double threshold);

}  // namespace tsattr::models
