#pragma once

// Test-only oracles, independent of the library's backward pass / metric
// implementations.

#include <algorithm>
#include <cmath>
#include <vector>

#include "tsattr/graph.hpp"

namespace oracles {

// central finite difference of a scalar graph output w.r.t. one leaf entry
inline double fd_partial(const tsattr::Graph& g, tsattr::Bindings bindings, int out,
                         const std::string& leaf, int64_t flat_index, double h = 1e-5) {
    tsattr::Tensor& x = bindings.at(leaf);
    double orig = x[flat_index];
    x[flat_index] = orig + h;
    double fp = tsattr::evaluate(g, bindings)[static_cast<size_t>(out)].v[0];
    x[flat_index] = orig - h;
    double fm = tsattr::evaluate(g, bindings)[static_cast<size_t>(out)].v[0];
    x[flat_index] = orig;
    return (fp - fm) / (2.0 * h);
}

inline double rel_err(double got, double want) {
    return std::fabs(got - want) / std::max(1.0, std::fabs(want));
}

// brute-force pairwise AUROC (0..1), ties count half
inline double pair_auroc(const std::vector<int>& y, const std::vector<double>& s) {
    double num = 0.0;
    int64_t pairs = 0;
    for (size_t i = 0; i < y.size(); ++i)
        for (size_t j = 0; j < y.size(); ++j) {
            if (y[i] != 1 || y[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j]) num += 1.0;
            else if (s[i] == s[j]) num += 0.5;
        }
    return pairs ? num / static_cast<double>(pairs) : 0.5;
}

// average precision by direct enumeration over descending scores
inline double enum_auprc(const std::vector<int>& y, const std::vector<double>& s) {
    std::vector<size_t> order(y.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return a < b;
    });
    int64_t total_pos = 0;
    for (int v : y) total_pos += v;
    // per-positive enumeration; ties share the precision at their block end
    double ap = 0.0;
    for (size_t i = 0; i < order.size(); ++i) {
        if (y[order[i]] != 1) continue;
        size_t end = i;
        while (end + 1 < order.size() && s[order[end + 1]] == s[order[i]]) ++end;
        int64_t tp_at = 0;
        for (size_t k = 0; k <= end; ++k) tp_at += y[order[k]];
        ap += static_cast<double>(tp_at) / static_cast<double>(end + 1);
    }
    return total_pos ? ap / static_cast<double>(total_pos) : 0.0;
}

struct Confusion {
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Confusion enum_confusion(const std::vector<int>& y, const std::vector<double>& s,
                                double thr) {
    Confusion c;
    for (size_t i = 0; i < y.size(); ++i) {
        bool pred = s[i] >= thr;
        if (y[i] == 1 && pred) ++c.tp;
        else if (y[i] == 1) ++c.fn;
        else if (pred) ++c.fp;
        else ++c.tn;
    }
    return c;
}

inline double enum_f1(const Confusion& c) {
    double denom = 2.0 * c.tp + c.fp + c.fn;
    return denom == 0 ? 0.0 : 2.0 * c.tp / denom;
}

inline double enum_mcc(const Confusion& c) {
    double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
    double denom = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
    return denom == 0 ? 0.0 : (tp * tn - fp * fn) / denom;
}

}  // namespace oracles
