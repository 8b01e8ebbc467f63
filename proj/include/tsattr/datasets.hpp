#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tsattr/tensor.hpp"

namespace tsattr::datasets {

struct SeriesBatch {
    std::vector<Tensor> values;  // N instances, each T x F, physical units
    double step_minutes = 5.0;
    std::vector<std::string> feature_names;

    int64_t n() const { return static_cast<int64_t>(values.size()); }
    int64_t t() const { return values.empty() ? 0 : values[0].shape[0]; }
    int64_t f() const { return values.empty() ? 0 : values[0].shape[1]; }
};

struct LabelTrack {
    std::vector<std::vector<uint8_t>> labels;    // N x T
    std::vector<std::vector<uint8_t>> eligible;  // N x T, false while in-event
    std::vector<std::vector<std::pair<int64_t, int64_t>>> event_intervals;  // [start,end)
};

struct GroundTruthSaliency {
    std::vector<Tensor> cells;  // N instances, each T x F in {0,1}
    bool empty() const {
        for (const auto& c : cells)
            if (c.sum() > 0) return false;
        return true;
    }
};

struct GeneratorConfig {
    int64_t n = 256, t = 128, f = 16;
    int64_t horizon = 12;   // label lookahead, steps
    int64_t ramp_len = 8;   // injected ramp rise, steps
    double prevalence = 0.05;
    uint64_t seed = 7;

    double ar_coef = 0.9;
    double step_minutes = 5.0;
    double lactate_baseline = 1.2, map_baseline = 78.0;
    double lactate_threshold = 2.0, map_threshold = 65.0;
    double lactate_noise = 0.05, map_noise = 1.0, distractor_noise = 1.0;
    double overshoot = 1.35;  // ramp peak relative to the threshold gap

    // events arrive in episodes of consecutive ramp cycles
    int64_t cycles_min = 5, cycles_max = 9;
    int64_t hold = 2, fall = 2;  // plateau / decay steps per cycle
};

struct SyntheticData {
    SeriesBatch series;
    LabelTrack labels;
    GroundTruthSaliency saliency;
    GeneratorConfig config;
};

SyntheticData generate_synthetic(const GeneratorConfig& cfg);

// Scan a raw series with the event rule (lactate > thr0 AND map < thr1),
// derive intervals, eligibility and horizon labels. The generator itself
// uses this, so labels always match an independent re-scan.
LabelTrack derive_labels(const SeriesBatch& batch, double lactate_thr, double map_thr,
                         int64_t horizon);

double positive_fraction(const LabelTrack& labels);

struct CsvSchema {
    std::string time_column;
    std::vector<std::string> feature_columns;
    std::string label_column;  // optional, empty = unlabeled
};

struct CsvData {
    SeriesBatch series;  // 1 x T x F
    bool has_labels = false;
    LabelTrack labels;
};

// Missing cells are imputed by forward fill, then channel median for
// leading gaps. Rows are ordered by the time column.
CsvData load_csv(const std::string& path, const CsvSchema& schema);

struct SplitSpec {
    double train = 0.7, validation = 0.15, test = 0.15;
    uint64_t seed = 1;
};

struct ChannelStats {
    std::vector<double> mean, std;
};

struct Dataset {
    SeriesBatch series;  // standardized
    LabelTrack labels;
    GroundTruthSaliency saliency;
    std::vector<int64_t> instance_ids;  // indices into the source batch
};

struct SplitResult {
    Dataset train, validation, test;
    ChannelStats stats;  // fitted on train only
};

SplitResult standardize_split(const SeriesBatch& batch, const LabelTrack& labels,
                              const GroundTruthSaliency& saliency, const SplitSpec& spec);

}  // namespace tsattr::datasets
