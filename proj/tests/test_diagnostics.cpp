#include <cmath>

#include "doctest.h"
#include "tsattr/diagnostics.hpp"
#include "tsattr/rng.hpp"

using namespace tsattr;
using namespace tsattr::diag;

TEST_CASE("adjacent consistency distance") {
    Tensor a({3, 2}, {1, 2, 3, 4, 0, 0});
    CHECK(adjacent_consistency(a, a, 1).distance == doctest::Approx(0.0));

    Tensor b({3, 2}, {0, 0, 0, 0, 9, 9});
    Tensor c({3, 2}, {5, 5, 0, 0, 0, 0});
    AdjacentResult orth = adjacent_consistency(b, c, 2);
    CHECK(orth.distance == doctest::Approx(1.0));
    CHECK(!orth.degenerate);

    // symmetry and invariance to positive rescaling
    Tensor d({3, 2}, {2, 1, 0, 1, 0, 0});
    AdjacentResult ad = adjacent_consistency(a, d, 2);
    AdjacentResult da = adjacent_consistency(d, a, 2);
    CHECK(ad.distance == doctest::Approx(da.distance));
    Tensor d3 = d;
    d3.scale_(3.0);
    CHECK(adjacent_consistency(a, d3, 2).distance == doctest::Approx(ad.distance));

    // rows beyond the shared support are ignored
    Tensor a_tail = a;
    a_tail.at(2, 0) = 99.0;
    CHECK(adjacent_consistency(a_tail, d, 1).distance ==
          doctest::Approx(adjacent_consistency(a, d, 1).distance));

    // zero-norm restriction: degenerate, scored 1
    Tensor z = Tensor::zeros({3, 2});
    AdjacentResult deg = adjacent_consistency(z, a, 1);
    CHECK(deg.distance == 1.0);
    CHECK(deg.degenerate);

    CHECK_THROWS_AS(adjacent_consistency(a, Tensor::zeros({2, 2}), 1), std::invalid_argument);
    CHECK_THROWS_AS(adjacent_consistency(a, a, 5), std::invalid_argument);
}

TEST_CASE("target mass profile") {
    Tensor delta = Tensor::zeros({5, 3});
    delta.at(2, 1) = 7.0;
    MassProfile p = target_mass_profile(delta, 2);
    CHECK(p.recency_mass == doctest::Approx(1.0));
    CHECK(p.future_leakage == doctest::Approx(0.0));
    CHECK(!p.degenerate);

    Tensor future = Tensor::zeros({5, 3});
    future.at(3, 0) = 2.0;
    CHECK(target_mass_profile(future, 2).future_leakage == doctest::Approx(1.0));

    // partitions sum to one
    Rng rng(3);
    Tensor rand({6, 2});
    for (double& v : rand.v) v = rng.normal();
    MassProfile q = target_mass_profile(rand, 3);
    double total = q.recency_mass + q.future_leakage;
    for (double v : q.past_mass_curve) total += v;
    CHECK(std::fabs(total - 1.0) < 1e-12);
    CHECK(q.past_mass_curve.size() == 3);

    MassProfile deg = target_mass_profile(Tensor::zeros({4, 2}), 1);
    CHECK(deg.degenerate);
    CHECK_THROWS_AS(target_mass_profile(delta, 9), std::invalid_argument);
}

TEST_CASE("temporal profile") {
    // constant in time: zero variation
    Tensor flat({4, 2});
    for (int64_t t = 0; t < 4; ++t) {
        flat.at(t, 0) = 2.0;
        flat.at(t, 1) = -1.0;
    }
    TemporalProfile pf = temporal_profile(flat);
    CHECK(pf.temporal_tv == doctest::Approx(0.0));

    // all mass on one feature: zero entropy
    Tensor single = Tensor::zeros({4, 3});
    for (int64_t t = 0; t < 4; ++t) single.at(t, 1) = static_cast<double>(t);
    CHECK(temporal_profile(single).feature_entropy == doctest::Approx(0.0));

    // uniform across features: maximum entropy
    Tensor uniform({4, 3});
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t f = 0; f < 3; ++f) uniform.at(t, f) = static_cast<double>(t + 1);
    CHECK(temporal_profile(uniform).feature_entropy == doctest::Approx(1.0));

    // shift and positive-rescale invariance of the normalized variation
    Rng rng(5);
    Tensor track({8, 2});
    for (double& v : track.v) v = rng.normal();
    double tv0 = temporal_profile(track).temporal_tv;
    Tensor shifted = track;
    for (int64_t t = 0; t < 8; ++t) shifted.at(t, 0) += 10.0;
    CHECK(temporal_profile(shifted).temporal_tv == doctest::Approx(tv0));
    Tensor scaled = track;
    scaled.scale_(4.0);
    CHECK(temporal_profile(scaled).temporal_tv == doctest::Approx(tv0));

    CHECK(temporal_profile(Tensor::zeros({4, 2})).degenerate);
}

TEST_CASE("onset lead curve") {
    Tensor track = Tensor::zeros({10, 2});
    // ramp rising toward the event at step 6, strong values inside it
    for (int64_t t = 2; t < 6; ++t)
        for (int64_t f = 0; f < 2; ++f) track.at(t, f) = static_cast<double>(t);
    track.at(6, 0) = 20.0;
    track.at(7, 0) = 20.0;
    OnsetLead lead = onset_lead(track, {{6, 8}}, 4);
    REQUIRE(lead.has_events);
    REQUIRE(lead.curve.size() == 4);
    // index 0 = lead 4 (step 2) ... index 3 = lead 1 (step 5)
    CHECK(lead.curve[0] == doctest::Approx(2.0));
    CHECK(lead.curve[3] == doctest::Approx(5.0));
    CHECK(lead.curve[3] > lead.curve[0]);
    CHECK(lead.post_onset_mean == doctest::Approx(10.0));

    OnsetLead none = onset_lead(track, {}, 4);
    CHECK(!none.has_events);
    CHECK(none.curve.empty());

    OnsetLead zero = onset_lead(Tensor::zeros({10, 2}), {{6, 8}}, 4);
    for (double v : zero.curve) CHECK(v == 0.0);
}

TEST_CASE("saliency precision-recall") {
    Tensor truth = Tensor::zeros({6, 4});
    truth.at(1, 0) = 1.0;
    truth.at(2, 0) = 1.0;
    truth.at(3, 1) = 1.0;

    // attribution identical to the truth: perfect ranking
    SaliencyPr perfect = saliency_pr(truth, truth);
    CHECK(perfect.auprc == doctest::Approx(1.0));
    CHECK(perfect.aur > 0.9);

    // attribution independent of the truth hovers at prevalence (large grid,
    // since average precision is biased upward on tiny samples)
    Rng rng(9);
    Tensor big_truth = Tensor::zeros({25, 16});
    int64_t planted = 0;
    while (planted < 50) {
        int64_t i = rng.uniform_int(big_truth.numel());
        if (big_truth[i] == 0.0) {
            big_truth[i] = 1.0;
            ++planted;
        }
    }
    double acc = 0.0;
    int trials = 30;
    for (int k = 0; k < trials; ++k) {
        Tensor noise({25, 16});
        for (double& v : noise.v) v = rng.uniform();
        acc += saliency_pr(noise, big_truth).auprc;
    }
    double prevalence = 50.0 / 400.0;
    CHECK(std::fabs(acc / trials - prevalence) < 0.03);

    // invariance under a strictly monotone transform of |attr|
    Tensor attr({6, 4});
    for (double& v : attr.v) v = rng.uniform();
    SaliencyPr base = saliency_pr(attr, truth);
    Tensor cubed = attr;
    for (double& v : cubed.v) v = v * v * v;
    SaliencyPr mono = saliency_pr(cubed, truth);
    CHECK(mono.auprc == doctest::Approx(base.auprc));
    CHECK(mono.aup == doctest::Approx(base.aup));
    CHECK(mono.aur == doctest::Approx(base.aur));

    CHECK_THROWS_AS(saliency_pr(attr, Tensor::zeros({6, 4})), std::invalid_argument);
    CHECK_THROWS_AS(saliency_pr(attr, Tensor::zeros({5, 4})), std::invalid_argument);
}

TEST_CASE("report assembly") {
    Provenance prov{111, 222, 7};
    Sample s1;
    s1.method = "deeplift";
    s1.provenance = prov;
    s1.recency_mass = 0.5;
    s1.future_leakage = 0.0;
    s1.temporal_tv = 2.0;
    s1.onset_lead_curve = {0.1, 0.2};

    // single sample: the report echoes the raw values
    Report one = build_report({s1});
    REQUIRE(one.rows.size() == 1);
    CHECK(one.rows[0].recency_mass.mean == doctest::Approx(0.5));
    CHECK(one.rows[0].recency_mass.count == 1);
    CHECK(one.rows[0].saliency_auprc.count == 0);  // never computed
    CHECK(one.rows[0].onset_lead_curve == std::vector<double>{0.1, 0.2});

    Sample s2 = s1;
    s2.recency_mass = 0.7;
    s2.degenerate = true;
    Sample s3;
    s3.method = "occlusion";
    s3.provenance = prov;
    s3.saliency_auprc = 0.9;
    Report rep = build_report({s1, s2, s3});
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].method == "deeplift");  // sorted by tag
    CHECK(rep.rows[0].samples == 2);
    CHECK(rep.rows[0].degenerate_count == 1);
    CHECK(rep.rows[0].recency_mass.mean == doctest::Approx(0.6));

    // deterministic serialization
    CHECK(report_to_json(rep) == report_to_json(build_report({s1, s2, s3})));
    std::string csv = report_to_csv(rep);
    CHECK(csv.find("method,samples") == 0);
    // ranked: occlusion has the only auprc, so it leads
    CHECK(csv.find("occlusion") < csv.find("deeplift"));

    Sample bad = s1;
    bad.provenance.model_hash = 999;
    CHECK_THROWS_AS(build_report({s1, bad}), std::invalid_argument);
    CHECK_THROWS_AS(build_report({}), std::invalid_argument);
}

TEST_CASE("markdown report projection") {
    Provenance prov{1, 2, 3};
    Sample a;
    a.method = "deeplift";
    a.provenance = prov;
    a.recency_mass = 0.25;
    Sample b;
    b.method = "occlusion";
    b.provenance = prov;
    b.saliency_auprc = 0.8;
    Report rep = build_report({a, b});
    std::string md = report_to_markdown(rep);
    CHECK(md.rfind("| method |", 0) == 0);
    CHECK(md.find("0.2500") != std::string::npos);
    // absent metrics render as a dash; ranking matches the csv
    CHECK(md.find(" - ") != std::string::npos);
    CHECK(md.find("occlusion") < md.find("deeplift"));
    CHECK(md == report_to_markdown(build_report({a, b})));
}
