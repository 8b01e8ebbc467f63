#include "tsattr/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "tsattr/rng.hpp"

namespace tsattr::datasets {

LabelTrack derive_labels(const SeriesBatch& batch, double lactate_thr, double map_thr,
                         int64_t horizon) {
    int64_t n = batch.n(), t_len = batch.t();
    LabelTrack out;
    out.labels.assign(static_cast<size_t>(n), std::vector<uint8_t>(static_cast<size_t>(t_len), 0));
    out.eligible.assign(static_cast<size_t>(n), std::vector<uint8_t>(static_cast<size_t>(t_len), 1));
    out.event_intervals.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const Tensor& x = batch.values[static_cast<size_t>(i)];
        std::vector<uint8_t> event(static_cast<size_t>(t_len), 0);
        for (int64_t t = 0; t < t_len; ++t)
            event[static_cast<size_t>(t)] = x.at(t, 0) > lactate_thr && x.at(t, 1) < map_thr;
        int64_t t = 0;
        while (t < t_len) {
            if (event[static_cast<size_t>(t)]) {
                int64_t start = t;
                while (t < t_len && event[static_cast<size_t>(t)]) ++t;
                out.event_intervals[static_cast<size_t>(i)].emplace_back(start, t);
            } else {
                ++t;
            }
        }
        for (int64_t s = 0; s < t_len; ++s) {
            if (event[static_cast<size_t>(s)]) out.eligible[static_cast<size_t>(i)][static_cast<size_t>(s)] = 0;
        }
        for (int64_t s = 0; s < t_len; ++s) {
            if (!out.eligible[static_cast<size_t>(i)][static_cast<size_t>(s)]) continue;
            for (int64_t u = s + 1; u <= std::min(t_len - 1, s + horizon); ++u)
                if (event[static_cast<size_t>(u)]) {
                    out.labels[static_cast<size_t>(i)][static_cast<size_t>(s)] = 1;
                    break;
                }
        }
    }
    return out;
}

double positive_fraction(const LabelTrack& labels) {
    int64_t pos = 0, elig = 0;
    for (size_t i = 0; i < labels.labels.size(); ++i)
        for (size_t t = 0; t < labels.labels[i].size(); ++t) {
            if (labels.eligible[i][t]) {
                ++elig;
                pos += labels.labels[i][t];
            }
        }
    return elig ? static_cast<double>(pos) / static_cast<double>(elig) : 0.0;
}

namespace {

struct EpisodePlan {
    int64_t start = 0;  // may be negative: admitted mid-episode
    int64_t cycles = 0;
};

// One instance: AR(1) background plus, if planned, an episode of ramp
// cycles on the two trigger channels.
Tensor make_instance(const GeneratorConfig& cfg, Rng rng, const EpisodePlan* episode,
                     Tensor* saliency) {
    Tensor x({cfg.t, cfg.f});
    for (int64_t f = 0; f < cfg.f; ++f) {
        double base = f == 0 ? cfg.lactate_baseline : f == 1 ? cfg.map_baseline : 0.0;
        double sigma = f == 0 ? cfg.lactate_noise : f == 1 ? cfg.map_noise : cfg.distractor_noise;
        double stationary = sigma / std::sqrt(1.0 - cfg.ar_coef * cfg.ar_coef);
        double b = rng.normal(0.0, stationary);
        for (int64_t t = 0; t < cfg.t; ++t) {
            x.at(t, f) = base + b;
            b = cfg.ar_coef * b + rng.normal(0.0, sigma);
        }
    }
    if (!episode) return x;

    double lac_amp = (cfg.lactate_threshold - cfg.lactate_baseline) * cfg.overshoot;
    double map_amp = (cfg.map_baseline - cfg.map_threshold) * cfg.overshoot;
    int64_t cycle_len = cfg.ramp_len + cfg.hold + cfg.fall;
    for (int64_t c = 0; c < episode->cycles; ++c) {
        int64_t s = episode->start + c * cycle_len;
        for (int64_t k = 0; k < cycle_len; ++k) {
            int64_t t = s + k;
            if (t < 0 || t >= cfg.t) continue;
            double frac;
            if (k < cfg.ramp_len) frac = static_cast<double>(k + 1) / static_cast<double>(cfg.ramp_len);
            else if (k < cfg.ramp_len + cfg.hold) frac = 1.0;
            else frac = 1.0 - static_cast<double>(k - cfg.ramp_len - cfg.hold + 1) /
                              static_cast<double>(cfg.fall);
            x.at(t, 0) += lac_amp * frac;
            x.at(t, 1) -= map_amp * frac;
            if (saliency && k < cfg.ramp_len) {
                saliency->at(t, 0) = 1.0;
                saliency->at(t, 1) = 1.0;
            }
        }
    }
    return x;
}

}  // namespace

SyntheticData generate_synthetic(const GeneratorConfig& cfg) {
    if (cfg.f < 3) throw std::invalid_argument("generate_synthetic: need F >= 3 (two triggers plus a distractor)");
    if (cfg.ramp_len >= cfg.t || cfg.horizon >= cfg.t)
        throw std::invalid_argument("generate_synthetic: ramp_len and horizon must be < T");
    if (cfg.prevalence < 0.0 || cfg.prevalence >= 1.0)
        throw std::invalid_argument("generate_synthetic: prevalence must be in [0,1)");

    int64_t cycle_len = cfg.ramp_len + cfg.hold + cfg.fall;
    // every instance with an episode yields roughly this many positives
    double pos_per_episode =
        static_cast<double>(cfg.horizon / 2 + (cfg.cycles_min + cfg.cycles_max) / 2 * (cycle_len - 4));

    auto build = [&](int64_t episode_instances) {
        SyntheticData data;
        data.config = cfg;
        data.series.step_minutes = cfg.step_minutes;
        data.series.feature_names = {"lactate", "map"};
        for (int64_t f = 2; f < cfg.f; ++f) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "feat_%02d", static_cast<int>(f));
            data.series.feature_names.push_back(buf);
        }
        Rng root(cfg.seed);
        // which instances carry an episode: evenly spread, deterministic
        std::vector<int64_t> ids(static_cast<size_t>(cfg.n));
        for (int64_t i = 0; i < cfg.n; ++i) ids[static_cast<size_t>(i)] = i;
        Rng pick = root.fork(1);
        pick.shuffle(ids);
        std::vector<uint8_t> has_episode(static_cast<size_t>(cfg.n), 0);
        for (int64_t k = 0; k < std::min(episode_instances, cfg.n); ++k)
            has_episode[static_cast<size_t>(ids[static_cast<size_t>(k)])] = 1;

        for (int64_t i = 0; i < cfg.n; ++i) {
            Rng inst = root.fork(100 + static_cast<uint64_t>(i));
            Tensor sal({cfg.t, cfg.f});
            Tensor x;
            if (has_episode[static_cast<size_t>(i)]) {
                EpisodePlan ep;
                ep.cycles = cfg.cycles_min + inst.uniform_int(cfg.cycles_max - cfg.cycles_min + 1);
                int64_t ep_len = ep.cycles * cycle_len;
                // start may fall before t=0 (stay begins mid-episode), but keep
                // at least two cycles inside the window
                int64_t lo = std::min<int64_t>(0, -(ep_len - 2 * cycle_len));
                int64_t hi = std::max<int64_t>(lo, cfg.t - ep_len - 1);
                ep.start = lo + inst.uniform_int(hi - lo + 1);
                x = make_instance(cfg, inst.fork(2), &ep, &sal);
            } else {
                x = make_instance(cfg, inst.fork(2), nullptr, nullptr);
            }
            data.series.values.push_back(std::move(x));
            data.saliency.cells.push_back(std::move(sal));
        }
        data.labels = derive_labels(data.series, cfg.lactate_threshold, cfg.map_threshold, cfg.horizon);
        return data;
    };

    if (cfg.prevalence == 0.0) return build(0);

    double target_pos = cfg.prevalence * static_cast<double>(cfg.n * cfg.t);
    int64_t k = std::max<int64_t>(1, static_cast<int64_t>(std::llround(target_pos / pos_per_episode)));
    SyntheticData data = build(k);
    // steer measured prevalence into [0.8, 1.25] x target
    for (int iter = 0; iter < 8; ++iter) {
        double frac = positive_fraction(data.labels);
        if (frac >= 0.8 * cfg.prevalence && frac <= 1.25 * cfg.prevalence) return data;
        if (frac <= 0.0) {
            k += 1;
        } else {
            int64_t k2 = static_cast<int64_t>(std::llround(static_cast<double>(k) * cfg.prevalence / frac));
            k = k2 == k ? (frac < cfg.prevalence ? k + 1 : k - 1) : k2;
        }
        if (k < 1 || k > cfg.n) {
            double bound = positive_fraction(build(std::clamp<int64_t>(k, 1, cfg.n)).labels);
            throw std::runtime_error(
                "generate_synthetic: prevalence target " + std::to_string(cfg.prevalence) +
                " infeasible for N=" + std::to_string(cfg.n) + ", T=" + std::to_string(cfg.t) +
                "; achievable about " + std::to_string(bound));
        }
        data = build(k);
    }
    double frac = positive_fraction(data.labels);
    if (frac < 0.8 * cfg.prevalence || frac > 1.25 * cfg.prevalence)
        throw std::runtime_error("generate_synthetic: prevalence steering did not converge; reached " +
                                 std::to_string(frac));
    return data;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    return cells;
}

bool cell_missing(const std::string& s) {
    if (s.empty()) return true;
    std::string low;
    for (char c : s) low.push_back(static_cast<char>(std::tolower(c)));
    return low == "na" || low == "nan" || low == "null";
}

double parse_cell(const std::string& s, size_t row, const std::string& col) {
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        while (used < s.size() && std::isspace(static_cast<unsigned char>(s[used]))) ++used;
        if (used != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (...) {
        throw std::runtime_error("load_csv: unparseable numeric cell '" + s + "' at row " +
                                 std::to_string(row) + ", column " + col);
    }
}

}  // namespace

CsvData load_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_csv: cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("load_csv: empty file " + path);
    auto header = split_csv_line(line);
    auto col_of = [&](const std::string& name) {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int64_t>(i);
        throw std::runtime_error("load_csv: missing column " + name);
    };
    int64_t time_col = col_of(schema.time_column);
    std::vector<int64_t> feat_cols;
    for (const auto& c : schema.feature_columns) feat_cols.push_back(col_of(c));
    int64_t label_col = schema.label_column.empty() ? -1 : col_of(schema.label_column);

    struct Row {
        double time;
        std::vector<double> feats;  // NaN = missing
        double label;
    };
    std::vector<Row> rows;
    size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        Row r;
        r.time = parse_cell(cells.at(static_cast<size_t>(time_col)), lineno, schema.time_column);
        for (size_t k = 0; k < feat_cols.size(); ++k) {
            const std::string& cell = cells.at(static_cast<size_t>(feat_cols[k]));
            r.feats.push_back(cell_missing(cell) ? std::numeric_limits<double>::quiet_NaN()
                                                 : parse_cell(cell, lineno, schema.feature_columns[k]));
        }
        r.label = 0.0;
        if (label_col >= 0)
            r.label = parse_cell(cells.at(static_cast<size_t>(label_col)), lineno, schema.label_column);
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw std::runtime_error("load_csv: no data rows in " + path);
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.time < b.time; });

    int64_t t_len = static_cast<int64_t>(rows.size());
    int64_t f_cnt = static_cast<int64_t>(feat_cols.size());
    Tensor x({t_len, f_cnt});
    for (int64_t j = 0; j < f_cnt; ++j) {
        // forward fill
        double prev = std::numeric_limits<double>::quiet_NaN();
        for (int64_t t = 0; t < t_len; ++t) {
            double v = rows[static_cast<size_t>(t)].feats[static_cast<size_t>(j)];
            if (std::isnan(v)) v = prev;
            x.at(t, j) = v;
            if (!std::isnan(v)) prev = v;
        }
        // leading gaps get the channel median of observed values
        std::vector<double> seen;
        for (int64_t t = 0; t < t_len; ++t) {
            double v = rows[static_cast<size_t>(t)].feats[static_cast<size_t>(j)];
            if (!std::isnan(v)) seen.push_back(v);
        }
        if (seen.empty())
            throw std::runtime_error("load_csv: column " + schema.feature_columns[static_cast<size_t>(j)] +
                                     " has no observed values");
        std::sort(seen.begin(), seen.end());
        double median = seen.size() % 2 ? seen[seen.size() / 2]
                                        : 0.5 * (seen[seen.size() / 2 - 1] + seen[seen.size() / 2]);
        for (int64_t t = 0; t < t_len; ++t)
            if (std::isnan(x.at(t, j))) x.at(t, j) = median;
    }

    CsvData out;
    out.series.values.push_back(std::move(x));
    out.series.feature_names = schema.feature_columns;
    if (rows.size() >= 2) out.series.step_minutes = rows[1].time - rows[0].time;
    if (label_col >= 0) {
        out.has_labels = true;
        out.labels.labels.push_back({});
        out.labels.eligible.push_back(std::vector<uint8_t>(rows.size(), 1));
        out.labels.event_intervals.push_back({});
        for (const Row& r : rows)
            out.labels.labels[0].push_back(r.label != 0.0 ? 1 : 0);
    }
    return out;
}

SplitResult standardize_split(const SeriesBatch& batch, const LabelTrack& labels,
                              const GroundTruthSaliency& saliency, const SplitSpec& spec) {
    int64_t n = batch.n();
    if (n < 3) throw std::invalid_argument("standardize_split: need N >= 3");
    if (std::fabs(spec.train + spec.validation + spec.test - 1.0) > 1e-9)
        throw std::invalid_argument("standardize_split: ratios must sum to 1");
    int64_t n_train = std::llround(spec.train * static_cast<double>(n));
    int64_t n_val = std::llround(spec.validation * static_cast<double>(n));
    int64_t n_test = n - n_train - n_val;
    if (n_train < 1 || n_val < 1 || n_test < 1)
        throw std::invalid_argument("standardize_split: degenerate ratio leaves an empty split");

    std::vector<int64_t> ids(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = i;
    Rng rng(spec.seed);
    rng.shuffle(ids);

    auto take = [&](int64_t from, int64_t count) {
        Dataset d;
        d.series.step_minutes = batch.step_minutes;
        d.series.feature_names = batch.feature_names;
        for (int64_t k = from; k < from + count; ++k) {
            int64_t id = ids[static_cast<size_t>(k)];
            d.instance_ids.push_back(id);
            d.series.values.push_back(batch.values[static_cast<size_t>(id)]);
            d.labels.labels.push_back(labels.labels[static_cast<size_t>(id)]);
            d.labels.eligible.push_back(labels.eligible[static_cast<size_t>(id)]);
            d.labels.event_intervals.push_back(labels.event_intervals[static_cast<size_t>(id)]);
            if (!saliency.cells.empty())
                d.saliency.cells.push_back(saliency.cells[static_cast<size_t>(id)]);
        }
        return d;
    };

    SplitResult out;
    out.train = take(0, n_train);
    out.validation = take(n_train, n_val);
    out.test = take(n_train + n_val, n_test);

    int64_t f_cnt = batch.f();
    out.stats.mean.assign(static_cast<size_t>(f_cnt), 0.0);
    out.stats.std.assign(static_cast<size_t>(f_cnt), 0.0);
    int64_t count = out.train.series.n() * out.train.series.t();
    for (const Tensor& x : out.train.series.values)
        for (int64_t t = 0; t < x.shape[0]; ++t)
            for (int64_t j = 0; j < f_cnt; ++j) out.stats.mean[static_cast<size_t>(j)] += x.at(t, j);
    for (double& m : out.stats.mean) m /= static_cast<double>(count);
    for (const Tensor& x : out.train.series.values)
        for (int64_t t = 0; t < x.shape[0]; ++t)
            for (int64_t j = 0; j < f_cnt; ++j) {
                double d = x.at(t, j) - out.stats.mean[static_cast<size_t>(j)];
                out.stats.std[static_cast<size_t>(j)] += d * d;
            }
    for (double& s : out.stats.std) s = std::max(std::sqrt(s / static_cast<double>(count)), 1e-6);

    for (Dataset* d : {&out.train, &out.validation, &out.test})
        for (Tensor& x : d->series.values)
            for (int64_t t = 0; t < x.shape[0]; ++t)
                for (int64_t j = 0; j < f_cnt; ++j)
                    x.at(t, j) = (x.at(t, j) - out.stats.mean[static_cast<size_t>(j)]) /
                                 out.stats.std[static_cast<size_t>(j)];
    return out;
}

}  // namespace tsattr::datasets
