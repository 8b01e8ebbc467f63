#include "tsattr/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "tsattr/metrics.hpp"

namespace tsattr::diag {

double Sample::nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

AdjacentResult adjacent_consistency(const Tensor& a, const Tensor& b, int64_t shared_t,
                                    bool absolute) {
    if (!a.same_shape(b))
        throw std::invalid_argument("adjacent_consistency: map shapes differ: " +
                                    shape_str(a.shape) + " vs " + shape_str(b.shape));
    if (shared_t < 0 || shared_t >= a.shape[0])
        throw std::invalid_argument("adjacent_consistency: shared support step out of range");
    int64_t f_cnt = a.shape[1];
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t s = 0; s <= shared_t; ++s)
        for (int64_t f = 0; f < f_cnt; ++f) {
            double va = a.at(s, f), vb = b.at(s, f);
            if (absolute) {
                va = std::fabs(va);
                vb = std::fabs(vb);
            }
            dot += va * vb;
            na += va * va;
            nb += vb * vb;
        }
    if (na == 0.0 || nb == 0.0) return {1.0, true};
    double cosine = dot / (std::sqrt(na) * std::sqrt(nb));
    return {std::clamp(1.0 - cosine, 0.0, 1.0), false};
}

MassProfile target_mass_profile(const Tensor& attr, int64_t target) {
    int64_t t_len = attr.shape[0], f_cnt = attr.shape[1];
    if (target < 0 || target >= t_len)
        throw std::invalid_argument("target_mass_profile: target step out of range");
    double total = attr.abs_sum();
    MassProfile p;
    if (total == 0.0) {
        p.degenerate = true;
        p.past_mass_curve.assign(static_cast<size_t>(target), 0.0);
        return p;
    }
    auto row_mass = [&](int64_t s) {
        double m = 0.0;
        for (int64_t f = 0; f < f_cnt; ++f) m += std::fabs(attr.at(s, f));
        return m / total;
    };
    p.recency_mass = row_mass(target);
    for (int64_t s = target + 1; s < t_len; ++s) p.future_leakage += row_mass(s);
    for (int64_t k = 1; k <= target; ++k) p.past_mass_curve.push_back(row_mass(target - k));
    return p;
}

TemporalProfile temporal_profile(const Tensor& track) {
    int64_t t_len = track.shape[0], f_cnt = track.shape[1];
    TemporalProfile p;
    // range-normalized total variation, averaged over non-flat features
    double tv_sum = 0.0;
    int64_t tv_features = 0;
    for (int64_t f = 0; f < f_cnt; ++f) {
        double lo = track.at(0, f), hi = lo, tv = 0.0;
        for (int64_t t = 0; t < t_len; ++t) {
            lo = std::min(lo, track.at(t, f));
            hi = std::max(hi, track.at(t, f));
            if (t + 1 < t_len) tv += std::fabs(track.at(t + 1, f) - track.at(t, f));
        }
        if (hi > lo) {
            tv_sum += tv / (hi - lo);
            ++tv_features;
        }
    }
    if (tv_features > 0) p.temporal_tv = tv_sum / static_cast<double>(tv_features);

    double total = track.abs_sum();
    if (total == 0.0) {
        p.degenerate = true;
        return p;
    }
    if (f_cnt > 1) {
        double ent = 0.0;
        for (int64_t f = 0; f < f_cnt; ++f) {
            double mass = 0.0;
            for (int64_t t = 0; t < t_len; ++t) mass += std::fabs(track.at(t, f));
            double q = mass / total;
            if (q > 0) ent -= q * std::log(q);
        }
        p.feature_entropy = ent / std::log(static_cast<double>(f_cnt));
    }
    return p;
}

OnsetLead onset_lead(const Tensor& track,
                     const std::vector<std::pair<int64_t, int64_t>>& events, int64_t max_lead) {
    if (max_lead < 1) throw std::invalid_argument("onset_lead: max_lead must be >= 1");
    OnsetLead out;
    if (events.empty()) return out;
    out.has_events = true;
    int64_t t_len = track.shape[0], f_cnt = track.shape[1];
    auto row_mean = [&](int64_t s) {
        double m = 0.0;
        for (int64_t f = 0; f < f_cnt; ++f) m += std::fabs(track.at(s, f));
        return m / static_cast<double>(f_cnt);
    };
    std::vector<double> sums(static_cast<size_t>(max_lead), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(max_lead), 0);
    double post_sum = 0.0;
    int64_t post_count = 0;
    for (const auto& [start, end] : events) {
        for (int64_t lead = max_lead; lead >= 1; --lead) {
            int64_t s = start - lead;
            if (s < 0 || s >= t_len) continue;
            sums[static_cast<size_t>(max_lead - lead)] += row_mean(s);
            ++counts[static_cast<size_t>(max_lead - lead)];
        }
        for (int64_t s = std::max<int64_t>(0, start); s < std::min(end, t_len); ++s) {
            post_sum += row_mean(s);
            ++post_count;
        }
    }
    out.curve.resize(static_cast<size_t>(max_lead), 0.0);
    for (int64_t i = 0; i < max_lead; ++i)
        if (counts[static_cast<size_t>(i)] > 0)
            out.curve[static_cast<size_t>(i)] =
                sums[static_cast<size_t>(i)] / static_cast<double>(counts[static_cast<size_t>(i)]);
    if (post_count > 0) out.post_onset_mean = post_sum / static_cast<double>(post_count);
    return out;
}

SaliencyPr saliency_pr(const Tensor& attr, const Tensor& truth) {
    if (!attr.same_shape(truth))
        throw std::invalid_argument("saliency_pr: attribution shape " + shape_str(attr.shape) +
                                    " does not match ground truth " + shape_str(truth.shape));
    std::vector<int> y;
    std::vector<double> s;
    int64_t positives = 0;
    for (int64_t i = 0; i < attr.numel(); ++i) {
        y.push_back(truth[i] > 0 ? 1 : 0);
        positives += y.back();
        s.push_back(std::fabs(attr[i]));
    }
    if (positives == 0)
        throw std::invalid_argument("saliency_pr: ground truth has no salient cells");
    SaliencyPr out;
    out.auprc = positives == attr.numel() ? 1.0 : models::auprc_percent(y, s) / 100.0;

    // precision/recall swept over 50 evenly spaced quantile thresholds
    std::vector<double> sorted = s;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) {
        double frac = static_cast<double>(i) / 50.0;
        double thr = sorted[static_cast<size_t>(frac * static_cast<double>(sorted.size() - 1))];
        int64_t tp = 0, pred = 0;
        for (size_t k = 0; k < s.size(); ++k)
            if (s[k] >= thr) {
                ++pred;
                tp += y[k];
            }
        out.aup += pred > 0 ? static_cast<double>(tp) / static_cast<double>(pred) : 1.0;
        out.aur += static_cast<double>(tp) / static_cast<double>(positives);
    }
    out.aup /= 50.0;
    out.aur /= 50.0;
    return out;
}

namespace {

MetricSummary summarize(const std::vector<double>& xs) {
    MetricSummary m;
    for (double x : xs)
        if (!std::isnan(x)) ++m.count;
    if (m.count == 0) return m;
    for (double x : xs)
        if (!std::isnan(x)) m.mean += x;
    m.mean /= static_cast<double>(m.count);
    for (double x : xs)
        if (!std::isnan(x)) m.std += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(m.std / static_cast<double>(m.count));
    return m;
}

nlohmann::json summary_json(const MetricSummary& m) {
    nlohmann::json j;
    j["count"] = m.count;
    if (m.count > 0) {
        j["mean"] = m.mean;
        j["std"] = m.std;
    }
    return j;
}

}  // namespace

Report build_report(const std::vector<Sample>& samples) {
    if (samples.empty()) throw std::invalid_argument("build_report: no samples");
    for (const Sample& s : samples)
        if (s.provenance.model_hash != samples[0].provenance.model_hash)
            throw std::invalid_argument(
                "build_report: mixed provenance, samples come from different model hashes (" +
                std::to_string(samples[0].provenance.model_hash) + " vs " +
                std::to_string(s.provenance.model_hash) + ")");
    std::map<std::string, std::vector<const Sample*>> by_method;
    for (const Sample& s : samples) by_method[s.method].push_back(&s);

    Report report;
    report.provenance = samples[0].provenance;
    for (const auto& [method, group] : by_method) {
        MethodDiagnostics row;
        row.method = method;
        row.samples = static_cast<int64_t>(group.size());
        auto collect = [&](auto field) {
            std::vector<double> xs;
            for (const Sample* s : group) xs.push_back(s->*field);
            return summarize(xs);
        };
        row.adjacent_inconsistency = collect(&Sample::adjacent_inconsistency);
        row.recency_mass = collect(&Sample::recency_mass);
        row.future_leakage = collect(&Sample::future_leakage);
        row.temporal_tv = collect(&Sample::temporal_tv);
        row.feature_entropy = collect(&Sample::feature_entropy);
        row.post_onset_mean = collect(&Sample::post_onset_mean);
        row.saliency_auprc = collect(&Sample::saliency_auprc);
        row.saliency_aup = collect(&Sample::saliency_aup);
        row.saliency_aur = collect(&Sample::saliency_aur);
        for (const Sample* s : group) row.degenerate_count += s->degenerate;
        size_t max_len = 0;
        for (const Sample* s : group) max_len = std::max(max_len, s->onset_lead_curve.size());
        row.onset_lead_curve.assign(max_len, 0.0);
        std::vector<int64_t> counts(max_len, 0);
        for (const Sample* s : group)
            for (size_t i = 0; i < s->onset_lead_curve.size(); ++i) {
                row.onset_lead_curve[i] += s->onset_lead_curve[i];
                ++counts[i];
            }
        for (size_t i = 0; i < max_len; ++i)
            if (counts[i] > 0) row.onset_lead_curve[i] /= static_cast<double>(counts[i]);
        report.rows.push_back(std::move(row));
    }
    return report;
}

std::string report_to_json(const Report& report) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["provenance"]["dataset_hash"] = report.provenance.dataset_hash;
    j["provenance"]["model_hash"] = report.provenance.model_hash;
    j["provenance"]["seed"] = report.provenance.seed;
    nlohmann::json methods = nlohmann::json::object();
    for (const MethodDiagnostics& row : report.rows) {
        nlohmann::json r;
        r["samples"] = row.samples;
        r["degenerate_count"] = row.degenerate_count;
        r["adjacent_inconsistency"] = summary_json(row.adjacent_inconsistency);
        r["recency_mass"] = summary_json(row.recency_mass);
        r["future_leakage"] = summary_json(row.future_leakage);
        r["temporal_tv"] = summary_json(row.temporal_tv);
        r["feature_entropy"] = summary_json(row.feature_entropy);
        r["post_onset_mean"] = summary_json(row.post_onset_mean);
        r["saliency_auprc"] = summary_json(row.saliency_auprc);
        r["saliency_aup"] = summary_json(row.saliency_aup);
        r["saliency_aur"] = summary_json(row.saliency_aur);
        r["onset_lead_curve"] = row.onset_lead_curve;
        methods[row.method] = r;
    }
    j["methods"] = methods;
    return j.dump(2) + "\n";
}

std::string report_to_csv(const Report& report) {
    std::vector<const MethodDiagnostics*> rows;
    for (const MethodDiagnostics& r : report.rows) rows.push_back(&r);
    std::stable_sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) {
        return a->saliency_auprc.mean > b->saliency_auprc.mean;
    });
    std::ostringstream out;
    out << "method,samples,degenerate,adjacent_inconsistency,recency_mass,future_leakage,"
           "temporal_tv,feature_entropy,post_onset_mean,saliency_auprc,saliency_aup,"
           "saliency_aur\n";
    auto cell = [](const MetricSummary& m) {
        return m.count > 0 ? std::to_string(m.mean) : std::string("");
    };
    for (const auto* r : rows)
        out << r->method << ',' << r->samples << ',' << r->degenerate_count << ','
            << cell(r->adjacent_inconsistency) << ',' << cell(r->recency_mass) << ','
            << cell(r->future_leakage) << ',' << cell(r->temporal_tv) << ','
            << cell(r->feature_entropy) << ',' << cell(r->post_onset_mean) << ','
            << cell(r->saliency_auprc) << ',' << cell(r->saliency_aup) << ','
            << cell(r->saliency_aur) << "\n";
    return out.str();
}

std::string report_to_markdown(const Report& report) {
    std::vector<const MethodDiagnostics*> rows;
    for (const MethodDiagnostics& r : report.rows) rows.push_back(&r);
    std::stable_sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) {
        return a->saliency_auprc.mean > b->saliency_auprc.mean;
    });
    std::ostringstream out;
    out << "| method | samples | adjacent_inconsistency | recency_mass | future_leakage | "
           "temporal_tv | feature_entropy | post_onset_mean | saliency_auprc | saliency_aup | "
           "saliency_aur |\n";
    out << "|---|---|---|---|---|---|---|---|---|---|---|\n";
    auto cell = [](const MetricSummary& m) {
        if (m.count == 0) return std::string("-");
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f ± %.4f", m.mean, m.std);
        return std::string(buf);
    };
    for (const auto* r : rows)
        out << "| " << r->method << " | " << r->samples << " | "
            << cell(r->adjacent_inconsistency) << " | " << cell(r->recency_mass) << " | "
            << cell(r->future_leakage) << " | " << cell(r->temporal_tv) << " | "
            << cell(r->feature_entropy) << " | " << cell(r->post_onset_mean) << " | "
            << cell(r->saliency_auprc) << " | " << cell(r->saliency_aup) << " | "
            << cell(r->saliency_aur) << " |\n";
    return out.str();
}

}  // namespace tsattr::diag
