#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tsattr/grad_attr.hpp"

namespace tsattr::render {

struct HeatmapOptions {
    bool per_feature_norm = false;  // color scale per feature row
    std::vector<std::pair<int64_t, int64_t>> events;  // [start, end) step bands
    std::vector<int64_t> target_marks;                // vertical markers at step midpoints
    std::vector<std::string> feature_names;
    std::string title;
    int64_t cell = 6;          // pixel size of one cell
    int64_t target_index = -1; // selects one map from a full-sweep archive
};

// deterministic SVG: time left-to-right, features top-to-bottom, diverging
// color scale symmetric about zero; full-sweep archives require a selected
// target index
std::string heatmap_svg(const attr::AttributionTensor& a, const HeatmapOptions& opt);

}  // namespace tsattr::render
