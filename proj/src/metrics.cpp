#include "tsattr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tsattr::models {

namespace {

void check_two_class(const std::vector<int>& y) {
    int64_t pos = 0;
    for (int v : y) pos += v;
    if (pos == 0 || pos == static_cast<int64_t>(y.size()))
        throw std::invalid_argument(
            "metrics: label set contains a single class; AUROC/AUPRC are undefined "
            "(need at least one positive and one negative eligible step)");
}

struct Counts {
    int64_t tp, fp, tn, fn;
};

Counts confusion(const std::vector<int>& y, const std::vector<double>& s, double thr) {
    Counts c{0, 0, 0, 0};
    for (size_t i = 0; i < y.size(); ++i) {
        bool pred = s[i] >= thr;
        if (y[i] == 1) (pred ? c.tp : c.fn)++;
        else (pred ? c.fp : c.tn)++;
    }
    return c;
}

}  // namespace

double auroc_percent(const std::vector<int>& y, const std::vector<double>& s) {
    check_two_class(y);
    // Mann-Whitney rank statistic with midranks for ties
    std::vector<size_t> order(y.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return s[a] < s[b]; });
    std::vector<double> rank(y.size());
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && s[order[j]] == s[order[i]]) ++j;
        double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t k = i; k < j; ++k) rank[order[k]] = mid;
        i = j;
    }
    double rank_sum = 0.0;
    int64_t n_pos = 0;
    for (size_t k = 0; k < y.size(); ++k)
        if (y[k] == 1) {
            rank_sum += rank[k];
            ++n_pos;
        }
    int64_t n_neg = static_cast<int64_t>(y.size()) - n_pos;
    double u = rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return 100.0 * u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auprc_percent(const std::vector<int>& y, const std::vector<double>& s) {
    check_two_class(y);
    // precision summed per positive, evaluated at the end of each tied block
    std::vector<size_t> order(y.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return s[a] > s[b]; });
    int64_t total_pos = 0;
    for (int v : y) total_pos += v;
    double ap = 0.0;
    int64_t tp = 0, seen = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        int64_t block_pos = 0;
        while (j < order.size() && s[order[j]] == s[order[i]]) {
            block_pos += y[order[j]];
            ++j;
        }
        tp += block_pos;
        seen += static_cast<int64_t>(j - i);
        ap += static_cast<double>(block_pos) * static_cast<double>(tp) / static_cast<double>(seen);
        i = j;
    }
    return 100.0 * ap / static_cast<double>(total_pos);
}

double f1_percent(const std::vector<int>& y, const std::vector<double>& s, double thr) {
    Counts c = confusion(y, s, thr);
    double denom = 2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp) + static_cast<double>(c.fn);
    return denom == 0 ? 0.0 : 100.0 * 2.0 * static_cast<double>(c.tp) / denom;
}

double mcc_percent(const std::vector<int>& y, const std::vector<double>& s, double thr) {
    Counts c = confusion(y, s, thr);
    double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
    double denom = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
    return denom == 0 ? 0.0 : 100.0 * (tp * tn - fp * fn) / denom;
}

MetricsBundle evaluate_metrics(const std::vector<Tensor>& probability_tracks,
                               const datasets::LabelTrack& labels, double threshold) {
    if (probability_tracks.size() != labels.labels.size())
        throw std::invalid_argument("evaluate_metrics: track/label count mismatch");
    std::vector<int> y;
    std::vector<double> s;
    for (size_t i = 0; i < probability_tracks.size(); ++i) {
        const Tensor& p = probability_tracks[i];
        if (static_cast<size_t>(p.shape[0]) != labels.labels[i].size())
            throw std::invalid_argument("evaluate_metrics: track length mismatch at instance " +
                                        std::to_string(i));
        for (size_t t = 0; t < labels.labels[i].size(); ++t) {
            if (!labels.eligible[i][t]) continue;
            y.push_back(labels.labels[i][t]);
            s.push_back(p.at(static_cast<int64_t>(t), 0));
        }
    }
    MetricsBundle m;
    m.auroc = auroc_percent(y, s);
    m.auprc = auprc_percent(y, s);
    m.f1 = f1_percent(y, s, threshold);
    m.mcc = mcc_percent(y, s, threshold);
    return m;
}

MetricsBundle aggregate_runs(const std::vector<MetricsBundle>& runs) {
    if (runs.empty()) throw std::invalid_argument("aggregate_runs: no runs");
    auto mean_std = [&](auto get) {
        double mean = 0;
        for (const auto& r : runs) mean += get(r);
        mean /= static_cast<double>(runs.size());
        double var = 0;
        for (const auto& r : runs) var += (get(r) - mean) * (get(r) - mean);
        return std::pair<double, double>{mean, std::sqrt(var / static_cast<double>(runs.size()))};
    };
    MetricsBundle out;
    std::tie(out.auroc, out.auroc_std) = mean_std([](const MetricsBundle& r) { return r.auroc; });
    std::tie(out.auprc, out.auprc_std) = mean_std([](const MetricsBundle& r) { return r.auprc; });
    std::tie(out.f1, out.f1_std) = mean_std([](const MetricsBundle& r) { return r.f1; });
    std::tie(out.mcc, out.mcc_std) = mean_std([](const MetricsBundle& r) { return r.mcc; });
    return out;
}

}  // namespace tsattr::models
