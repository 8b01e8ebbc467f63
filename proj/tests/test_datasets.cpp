#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "tsattr/datasets.hpp"

using namespace tsattr;
using namespace tsattr::datasets;

static GeneratorConfig desk_default() { return GeneratorConfig{}; }

// independent re-scan of the raw series with the threshold rule; this is the
// oracle the generator's labels must agree with
static void check_labels_against_rescan(const SyntheticData& d) {
    const auto& cfg = d.config;
    for (int64_t i = 0; i < d.series.n(); ++i) {
        const Tensor& x = d.series.values[static_cast<size_t>(i)];
        std::vector<bool> event(static_cast<size_t>(cfg.t));
        for (int64_t t = 0; t < cfg.t; ++t)
            event[static_cast<size_t>(t)] =
                x.at(t, 0) > cfg.lactate_threshold && x.at(t, 1) < cfg.map_threshold;
        for (int64_t t = 0; t < cfg.t; ++t) {
            bool eligible = !event[static_cast<size_t>(t)];
            bool label = false;
            if (eligible)
                for (int64_t u = t + 1; u <= std::min(cfg.t - 1, t + cfg.horizon); ++u)
                    if (event[static_cast<size_t>(u)]) label = true;
            REQUIRE(d.labels.eligible[static_cast<size_t>(i)][static_cast<size_t>(t)] == (eligible ? 1 : 0));
            REQUIRE(d.labels.labels[static_cast<size_t>(i)][static_cast<size_t>(t)] == (label ? 1 : 0));
        }
    }
}

TEST_CASE("generator: zero injected events means all labels and saliency zero") {
    GeneratorConfig cfg = desk_default();
    cfg.n = 16;
    cfg.prevalence = 0.0;
    auto d = generate_synthetic(cfg);
    CHECK(positive_fraction(d.labels) == 0.0);
    for (const auto& lab : d.labels.labels)
        for (uint8_t v : lab) CHECK(v == 0);
    CHECK(d.saliency.empty());
}

TEST_CASE("generator: desk default hits the prevalence band and matches a re-scan") {
    auto d = generate_synthetic(desk_default());
    double frac = positive_fraction(d.labels);
    CHECK(frac >= 0.04);
    CHECK(frac <= 0.0625);
    check_labels_against_rescan(d);
}

TEST_CASE("generator: saliency only on trigger channels, every positive has a cell in its horizon") {
    auto d = generate_synthetic(desk_default());
    bool any = false;
    for (int64_t i = 0; i < d.series.n(); ++i) {
        const Tensor& sal = d.saliency.cells[static_cast<size_t>(i)];
        for (int64_t t = 0; t < d.config.t; ++t)
            for (int64_t f = 2; f < d.config.f; ++f) CHECK(sal.at(t, f) == 0.0);
        for (int64_t t = 0; t < d.config.t; ++t) {
            if (!d.labels.labels[static_cast<size_t>(i)][static_cast<size_t>(t)]) continue;
            any = true;
            bool found = false;
            for (int64_t u = t; u <= std::min(d.config.t - 1, t + d.config.horizon); ++u)
                if (sal.at(u, 0) > 0 || sal.at(u, 1) > 0) found = true;
            CHECK(found);
        }
    }
    CHECK(any);
}

TEST_CASE("generator: paper-scale shape request yields 465696 cells per instance") {
    GeneratorConfig cfg = desk_default();
    cfg.n = 2;
    cfg.t = 2016;
    cfg.f = 231;
    cfg.horizon = 144;
    auto d = generate_synthetic(cfg);
    CHECK(d.series.values[0].numel() == 465696);
}

TEST_CASE("generator: determinism and infeasible prevalence") {
    GeneratorConfig cfg = desk_default();
    cfg.n = 32;
    auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
    CHECK(a.series.values[5].v == b.series.values[5].v);

    cfg.prevalence = 0.9;
    CHECK_THROWS_WITH_AS(static_cast<void>(generate_synthetic(cfg)),
                         doctest::Contains("achievable"), std::runtime_error);
}

static std::string write_temp_csv(const std::string& body) {
    std::string path = "test_tmp.csv";
    std::ofstream f(path, std::ios::trunc);
    f << body;
    return path;
}

TEST_CASE("load_csv: complete file passes through verbatim") {
    auto path = write_temp_csv("time,a,b\n0,1.5,10\n5,2.5,20\n10,3.5,30\n");
    auto d = load_csv(path, {"time", {"a", "b"}, ""});
    REQUIRE(d.series.n() == 1);
    REQUIRE(d.series.t() == 3);
    REQUIRE(d.series.f() == 2);
    CHECK(d.series.values[0].at(1, 0) == 2.5);
    CHECK(d.series.values[0].at(2, 1) == 30.0);
    CHECK(d.series.step_minutes == 5.0);
    std::remove(path.c_str());
}

TEST_CASE("load_csv: mid-series gap forward-fills, leading gap takes channel median") {
    auto path = write_temp_csv("time,a\n0,\n5,4\n10,\n15,8\n");
    auto d = load_csv(path, {"time", {"a"}, ""});
    CHECK(d.series.values[0].at(0, 0) == 6.0);  // median of {4,8}
    CHECK(d.series.values[0].at(2, 0) == 4.0);  // forward fill
    std::remove(path.c_str());
}

TEST_CASE("load_csv: bad cells and empty files are rejected with position") {
    auto path = write_temp_csv("time,a\n0,oops\n");
    CHECK_THROWS_WITH_AS(static_cast<void>(load_csv(path, {"time", {"a"}, ""})),
                         doctest::Contains("row 2"), std::runtime_error);
    auto empty = write_temp_csv("time,a\n");
    CHECK_THROWS_AS(static_cast<void>(load_csv(empty, {"time", {"a"}, ""})), std::runtime_error);
    std::remove(path.c_str());
    std::remove(empty.c_str());
}

TEST_CASE("standardize_split: sizes, train statistics, determinism") {
    GeneratorConfig cfg = desk_default();
    cfg.n = 100;
    auto d = generate_synthetic(cfg);
    SplitSpec spec{0.7, 0.15, 0.15, 11};
    auto s1 = standardize_split(d.series, d.labels, d.saliency, spec);
    CHECK(s1.train.series.n() == 70);
    CHECK(s1.validation.series.n() == 15);
    CHECK(s1.test.series.n() == 15);

    // standardized train channels: mean 0, std 1
    int64_t f_cnt = s1.train.series.f();
    int64_t cnt = s1.train.series.n() * s1.train.series.t();
    for (int64_t j = 0; j < f_cnt; ++j) {
        double mean = 0, var = 0;
        for (const auto& x : s1.train.series.values)
            for (int64_t t = 0; t < x.shape[0]; ++t) mean += x.at(t, j);
        mean /= static_cast<double>(cnt);
        for (const auto& x : s1.train.series.values)
            for (int64_t t = 0; t < x.shape[0]; ++t) var += (x.at(t, j) - mean) * (x.at(t, j) - mean);
        var /= static_cast<double>(cnt);
        CHECK(std::fabs(mean) < 1e-9);
        CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-9);
    }

    auto s2 = standardize_split(d.series, d.labels, d.saliency, spec);
    CHECK(s1.train.instance_ids == s2.train.instance_ids);
    CHECK(s1.test.instance_ids == s2.test.instance_ids);

    CHECK_THROWS_AS(standardize_split(d.series, d.labels, d.saliency, SplitSpec{0.99, 0.005, 0.005, 1}),
                    std::invalid_argument);
}
