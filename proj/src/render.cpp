#include "tsattr/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace tsattr::render {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

// diverging scale symmetric about zero: blue for negative, red for positive
std::string cell_color(double v, double vmax) {
    if (vmax <= 0.0) return "rgb(255,255,255)";
    double t = std::clamp(v / vmax, -1.0, 1.0);
    double r = 255, g = 255, b = 255;
    if (t >= 0) {
        r = 255 + t * (178 - 255);
        g = 255 + t * (24 - 255);
        b = 255 + t * (43 - 255);
    } else {
        r = 255 - t * (33 - 255);
        g = 255 - t * (102 - 255);
        b = 255 - t * (172 - 255);
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "rgb(%d,%d,%d)", static_cast<int>(std::lround(r)),
                  static_cast<int>(std::lround(g)), static_cast<int>(std::lround(b)));
    return buf;
}

}  // namespace

std::string heatmap_svg(const attr::AttributionTensor& a, const HeatmapOptions& opt) {
    Tensor map;
    int64_t t_len = 0, f_cnt = 0;
    if (a.layout == attr::Layout::Track) {
        t_len = a.values.shape[0];
        f_cnt = a.values.shape[1];
        map = a.values;
    } else if (a.layout == attr::Layout::SingleClass) {
        t_len = a.values.shape[1];
        f_cnt = a.values.shape[2];
        map = a.values;
        map.shape = {t_len, f_cnt};
    } else {
        if (opt.target_index < 0 || opt.target_index >= a.values.shape[0])
            throw std::invalid_argument(
                "heatmap_svg: full-sweep archives hold one map per target; pass target_index in "
                "[0," +
                std::to_string(a.values.shape[0]) + ") to select one");
        t_len = a.values.shape[1];
        f_cnt = a.values.shape[2];
        map = Tensor({t_len, f_cnt});
        size_t off = static_cast<size_t>(opt.target_index * t_len * f_cnt);
        std::copy(a.values.v.begin() + static_cast<int64_t>(off),
                  a.values.v.begin() + static_cast<int64_t>(off) + t_len * f_cnt, map.v.begin());
    }
    if (opt.cell < 1) throw std::invalid_argument("heatmap_svg: cell size must be >= 1");

    double vmax_all = 0.0;
    std::vector<double> vmax_row(static_cast<size_t>(f_cnt), 0.0);
    for (int64_t t = 0; t < t_len; ++t)
        for (int64_t f = 0; f < f_cnt; ++f) {
            double m = std::fabs(map.at(t, f));
            vmax_all = std::max(vmax_all, m);
            vmax_row[static_cast<size_t>(f)] = std::max(vmax_row[static_cast<size_t>(f)], m);
        }

    int64_t cell = opt.cell;
    int64_t left = 110, top = 28, bottom = 34, right = 16;
    int64_t width = left + t_len * cell + right;
    int64_t height = top + f_cnt * cell + bottom;

    std::string title = opt.title.empty() ? a.method : opt.title;
    if (vmax_all == 0.0) title += " (all-zero attribution)";

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    svg << "<text x=\"" << left << "\" y=\"18\" font-family=\"monospace\" font-size=\"12\">"
        << esc(title) << "</text>\n";

    for (int64_t f = 0; f < f_cnt; ++f) {
        double vmax = opt.per_feature_norm ? vmax_row[static_cast<size_t>(f)] : vmax_all;
        for (int64_t t = 0; t < t_len; ++t)
            svg << "<rect x=\"" << left + t * cell << "\" y=\"" << top + f * cell << "\" width=\""
                << cell << "\" height=\"" << cell << "\" fill=\""
                << cell_color(map.at(t, f), vmax) << "\"/>\n";
    }

    // event-interval bands over the full feature extent
    for (const auto& [start, end] : opt.events) {
        int64_t s = std::clamp<int64_t>(start, 0, t_len);
        int64_t e = std::clamp<int64_t>(end, 0, t_len);
        if (e <= s) continue;
        svg << "<rect x=\"" << left + s * cell << "\" y=\"" << top << "\" width=\""
            << (e - s) * cell << "\" height=\"" << f_cnt * cell
            << "\" fill=\"#2ca02c\" fill-opacity=\"0.18\"/>\n";
    }

    // target markers at step-column midpoints
    for (int64_t t : opt.target_marks) {
        if (t < 0 || t >= t_len) continue;
        double x = static_cast<double>(left) + (static_cast<double>(t) + 0.5) *
                                                  static_cast<double>(cell);
        svg << "<line x1=\"" << fmt(x) << "\" y1=\"" << top << "\" x2=\"" << fmt(x) << "\" y2=\""
            << top + f_cnt * cell << "\" stroke=\"red\" stroke-width=\"1.5\"/>\n";
    }

    // axes: feature labels on the left, step ticks below
    int64_t label_size = std::min<int64_t>(10, std::max<int64_t>(6, cell));
    for (int64_t f = 0; f < f_cnt; ++f) {
        std::string name = f < static_cast<int64_t>(opt.feature_names.size())
                               ? opt.feature_names[static_cast<size_t>(f)]
                               : "f" + std::to_string(f);
        svg << "<text x=\"" << left - 6 << "\" y=\""
            << fmt(static_cast<double>(top + f * cell) + 0.5 * static_cast<double>(cell) + 3.0)
            << "\" font-family=\"monospace\" font-size=\"" << label_size
            << "\" text-anchor=\"end\">" << esc(name) << "</text>\n";
    }
    int64_t tick = std::max<int64_t>(1, t_len / 8);
    for (int64_t t = 0; t < t_len; t += tick)
        svg << "<text x=\"" << left + t * cell << "\" y=\"" << top + f_cnt * cell + 16
            << "\" font-family=\"monospace\" font-size=\"10\">" << t << "</text>\n";
    svg << "<text x=\"" << left << "\" y=\"" << top + f_cnt * cell + 30
        << "\" font-family=\"monospace\" font-size=\"10\">time step</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace tsattr::render
