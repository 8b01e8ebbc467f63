#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "oracles.hpp"
#include "tsattr/grad_attr.hpp"
#include "tsattr/rng.hpp"

using namespace tsattr;
using namespace tsattr::attr;

namespace {

// per-step linear scorer: logit_t = w . x_t + b0
struct LinearModel final : Model {
    Tensor w;  // F x 1
    double b0 = 0.0;
    mutable std::map<int64_t, models::ForwardGraph> cache;

    explicit LinearModel(Tensor weights, double bias = 0.0) : w(std::move(weights)), b0(bias) {}

    int64_t features() const override { return w.shape[0]; }
    const models::ForwardGraph& graph(int64_t t) const override {
        auto it = cache.find(t);
        if (it != cache.end()) return it->second;
        models::ForwardGraph fg;
        fg.x = fg.graph.input("x", {t, features()});
        int z = fg.graph.matmul(fg.x, fg.graph.constant(w));
        fg.logit = fg.graph.add(z, fg.graph.constant(Tensor::full({t, 1}, b0)));
        fg.prob = fg.graph.sigmoid(fg.logit);
        return cache.emplace(t, std::move(fg)).first->second;
    }
    Bindings bind(const Tensor& x) const override { return {{"x", x}}; }
};

// per-step two-layer relu scorer: logit_t = relu(x_t W1) W2
struct ReluNetModel final : Model {
    Tensor w1, w2;
    mutable std::map<int64_t, models::ForwardGraph> cache;

    ReluNetModel(int64_t f, int64_t h, uint64_t seed) : w1({f, h}), w2({h, 1}) {
        Rng rng(seed);
        for (double& v : w1.v) v = rng.normal();
        for (double& v : w2.v) v = rng.normal();
    }
    int64_t features() const override { return w1.shape[0]; }
    const models::ForwardGraph& graph(int64_t t) const override {
        auto it = cache.find(t);
        if (it != cache.end()) return it->second;
        models::ForwardGraph fg;
        fg.x = fg.graph.input("x", {t, features()});
        int h = fg.graph.relu(fg.graph.matmul(fg.x, fg.graph.constant(w1)));
        fg.logit = fg.graph.matmul(h, fg.graph.constant(w2));
        fg.prob = fg.graph.sigmoid(fg.logit);
        return cache.emplace(t, std::move(fg)).first->second;
    }
    Bindings bind(const Tensor& x) const override { return {{"x", x}}; }
};

Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.v) v = rng.normal(0.0, scale);
    return t;
}

models::PredictorModel small_predictor(uint64_t seed = 11) {
    models::ModelConfig cfg;
    cfg.arch = models::Arch::Crossformer;
    cfg.features = 4;
    cfg.max_seq = 32;
    cfg.seg_len = 4;
    cfg.cross_d = 8;
    cfg.cross_heads = 2;
    cfg.init_seed = seed;
    return models::PredictorModel(cfg);
}

}  // namespace

TEST_CASE("integrated gradients matches the linear closed form") {
    const int64_t t = 6, f = 3;
    LinearModel lin(random_tensor({f, 1}, 2), 0.4);
    Tensor x = random_tensor({t, f}, 3);
    Tensor b = random_tensor({t, f}, 4);
    Tensor a = integrated_gradients(lin, x, b, {4, 0}, 16);
    for (int64_t s = 0; s < t; ++s)
        for (int64_t j = 0; j < f; ++j) {
            double want = s == 4 ? lin.w.at(j, 0) * (x.at(s, j) - b.at(s, j)) : 0.0;
            CHECK(std::fabs(a.at(s, j) - want) < 1e-10);
        }
    // zero path
    Tensor z = integrated_gradients(lin, x, x, {4, 0}, 16);
    CHECK(z.abs_sum() == 0.0);
    CHECK_THROWS_AS(integrated_gradients(lin, x, b, {4, 0}, 4), std::invalid_argument);
    CHECK_THROWS_AS(integrated_gradients(lin, x, b, {t, 0}, 16), std::invalid_argument);
}

TEST_CASE("integrated gradients satisfies completeness on a nonlinear model") {
    models::PredictorModel pm = small_predictor();
    PredictorAdapter model(pm);
    Tensor x = random_tensor({12, 4}, 7);
    // a degenerate all-zero baseline sits in the high-curvature regime of the
    // normalization layers and needs thousands of path steps; start nearby
    // instead
    Tensor b = random_tensor({12, 4}, 8, 0.5);
    Target tgt{9, 0};
    double delta = model.scores(x).at(9, 0) - model.scores(b).at(9, 0);
    double err16 = std::fabs(integrated_gradients(model, x, b, tgt, 16).sum() - delta);
    double err256 = std::fabs(integrated_gradients(model, x, b, tgt, 256).sum() - delta);
    CHECK(err256 < 1e-3);
    CHECK(err256 <= err16 + 1e-6);
}

TEST_CASE("gradient shap") {
    const int64_t t = 5, f = 3;
    LinearModel lin(random_tensor({f, 1}, 12));
    Tensor x = random_tensor({t, f}, 13);
    std::vector<Tensor> zero_pool = {Tensor::zeros({t, f})};

    Tensor a = gradient_shap(lin, x, zero_pool, {3, 0}, 512, 0.0, 9);
    for (int64_t j = 0; j < f; ++j) {
        double want = lin.w.at(j, 0) * x.at(3, j);
        CHECK(std::fabs(a.at(3, j) - want) <= 0.02 * std::max(1.0, std::fabs(want)));
    }
    // identical input and baseline, no noise
    Tensor z = gradient_shap(lin, x, {x}, {3, 0}, 32, 0.0, 9);
    CHECK(z.abs_sum() == 0.0);
    // seed determinism; a nonlinear model so the sampled points matter
    ReluNetModel net(f, 5, 3);
    Tensor r1 = gradient_shap(net, x, zero_pool, {3, 0}, 16, 0.2, 42);
    Tensor r2 = gradient_shap(net, x, zero_pool, {3, 0}, 16, 0.2, 42);
    CHECK(r1.v == r2.v);
    Tensor r3 = gradient_shap(net, x, zero_pool, {3, 0}, 16, 0.2, 43);
    CHECK(r1.v != r3.v);
    CHECK_THROWS_AS(gradient_shap(lin, x, {}, {3, 0}, 16, 0.1, 1), std::invalid_argument);
}

TEST_CASE("deeplift rescale") {
    // single relu: x=2 from baseline 0 attributes the full output
    LinearModel unit(Tensor({1, 1}, {1.0}));
    ReluNetModel relu1(1, 1, 0);
    relu1.w1.v[0] = 1.0;
    relu1.w2.v[0] = 1.0;
    Tensor x2({1, 1}, {2.0});
    Tensor a = deeplift_rescale(relu1, x2, Tensor::zeros({1, 1}), {0, 0});
    CHECK(a.v[0] == doctest::Approx(2.0).epsilon(1e-12));

    // linear closed form
    const int64_t t = 5, f = 3;
    LinearModel lin(random_tensor({f, 1}, 21), -0.3);
    Tensor x = random_tensor({t, f}, 22);
    Tensor b = random_tensor({t, f}, 23);
    Tensor al = deeplift_rescale(lin, x, b, {2, 0});
    for (int64_t s = 0; s < t; ++s)
        for (int64_t j = 0; j < f; ++j) {
            double want = s == 2 ? lin.w.at(j, 0) * (x.at(s, j) - b.at(s, j)) : 0.0;
            CHECK(std::fabs(al.at(s, j) - want) < 1e-10);
        }

    // summation-to-delta on a pure relu net
    ReluNetModel net(4, 6, 5);
    Tensor xn = random_tensor({7, 4}, 31);
    Tensor bn = random_tensor({7, 4}, 32, 0.3);
    for (int64_t tgt = 0; tgt < 7; tgt += 3) {
        Tensor an = deeplift_rescale(net, xn, bn, {tgt, 0});
        double delta = net.scores(xn).at(tgt, 0) - net.scores(bn).at(tgt, 0);
        CHECK(std::fabs(an.sum() - delta) < 1e-6);
    }
}

TEST_CASE("deeplift shap averages over the pool deterministically") {
    LinearModel lin(random_tensor({2, 1}, 41));
    Tensor x = random_tensor({4, 2}, 42);
    std::vector<Tensor> pool = {random_tensor({4, 2}, 43), random_tensor({4, 2}, 44)};
    Tensor avg = deeplift_shap(lin, x, pool, {3, 0}, 400, 7);
    Tensor d0 = deeplift_rescale(lin, x, pool[0], {3, 0});
    Tensor d1 = deeplift_rescale(lin, x, pool[1], {3, 0});
    for (int64_t i = 0; i < avg.numel(); ++i)
        CHECK(std::fabs(avg[i] - 0.5 * (d0[i] + d1[i])) < 0.1 * std::max(1.0, std::fabs(avg[i])));
    CHECK(deeplift_shap(lin, x, pool, {3, 0}, 16, 7).v ==
          deeplift_shap(lin, x, pool, {3, 0}, 16, 7).v);
}

TEST_CASE("sequential integrated gradients on a per-step linear model") {
    const int64_t t = 6, f = 2;
    LinearModel lin(random_tensor({f, 1}, 51), 0.1);
    Tensor x = random_tensor({t, f}, 52);
    Tensor b = random_tensor({t, f}, 53);
    Tensor a = sequential_integrated_gradients(lin, x, b, {3, 0}, 16);
    for (int64_t s = 0; s < t; ++s)
        for (int64_t j = 0; j < f; ++j) {
            double want = s == 3 ? lin.w.at(j, 0) * (x.at(s, j) - b.at(s, j)) : 0.0;
            CHECK(std::fabs(a.at(s, j) - want) < 1e-10);
        }
    CHECK(sequential_integrated_gradients(lin, x, x, {3, 0}, 16).abs_sum() == 0.0);
}

TEST_CASE("temporal integrated gradients assembles prefix rows") {
    const int64_t t = 5, f = 2;
    LinearModel lin(random_tensor({f, 1}, 61));
    Tensor x = random_tensor({t, f}, 62);
    Tensor b = random_tensor({t, f}, 63);
    AttributionTensor a = temporal_integrated_gradients(lin, x, b, 0, 16);
    CHECK(a.layout == Layout::SingleClass);
    REQUIRE(a.values.shape == std::vector<int64_t>{1, t, f});
    CHECK(a.target_steps.size() == static_cast<size_t>(t));
    CHECK(a.target_seconds.size() == static_cast<size_t>(t));
    for (int64_t s = 0; s < t; ++s)
        for (int64_t j = 0; j < f; ++j) {
            double want = lin.w.at(j, 0) * (x.at(s, j) - b.at(s, j));
            CHECK(std::fabs(a.values.v[static_cast<size_t>(s * f + j)] - want) < 1e-10);
        }
    CHECK(temporal_integrated_gradients(lin, x, x, 0, 16).values.abs_sum() == 0.0);
}

TEST_CASE("causal models receive exactly zero attribution after the target") {
    models::PredictorModel pm = small_predictor();
    PredictorAdapter model(pm);
    Tensor x = random_tensor({14, 4}, 71);
    Tensor b = Tensor::zeros({14, 4});
    Target tgt{6, 0};
    MethodConfig cfg;
    cfg.baseline = custom_baseline(b);
    cfg.pool = {b};
    cfg.ig_steps = 8;
    cfg.n_samples = 4;
    for (const char* m : {"integrated_gradients", "gradient_shap", "deeplift", "deeplift_shap",
                          "sequential_integrated_gradients"}) {
        CAPTURE(m);
        Tensor a = gradient_target_map(m, model, x, tgt, cfg);
        double after = 0.0, upto = 0.0;
        for (int64_t s = 0; s < 14; ++s)
            for (int64_t j = 0; j < 4; ++j) (s > tgt.t ? after : upto) += std::fabs(a.at(s, j));
        CHECK(after == 0.0);
        CHECK(upto > 0.0);
    }
}

TEST_CASE("full sweep stacks per-target maps with metadata and timing") {
    const int64_t t = 7, f = 3;
    LinearModel lin(random_tensor({f, 1}, 81));
    Tensor x = random_tensor({t, f}, 82);
    MethodConfig cfg;
    cfg.baseline = zeros_baseline(t, f);
    cfg.ig_steps = 8;
    SweepConfig sw;
    AttributionTensor all = full_sweep("integrated_gradients", lin, x, 0, cfg, sw);
    CHECK(all.layout == Layout::FullSweep);
    REQUIRE(all.values.shape == std::vector<int64_t>{t, t, f, 1});
    CHECK(all.target_steps.size() == static_cast<size_t>(t));
    CHECK(all.target_seconds.size() == static_cast<size_t>(t));
    // each slab equals the direct per-target call
    for (int64_t tp : {0L, 4L}) {
        Tensor one = integrated_gradients(lin, x, cfg.baseline.data, {tp, 0}, 8);
        for (int64_t s = 0; s < t; ++s)
            for (int64_t j = 0; j < f; ++j)
                CHECK(all.values.v[static_cast<size_t>((tp * t + s) * f + j)] == one.at(s, j));
    }

    sw.steps = {3, 5};
    AttributionTensor sub = full_sweep("integrated_gradients", lin, x, 0, cfg, sw);
    REQUIRE(sub.values.shape == std::vector<int64_t>{2, t, f, 1});
    CHECK(sub.target_steps == std::vector<int64_t>{3, 5});

    sw.steps = {9};
    CHECK_THROWS_AS(full_sweep("integrated_gradients", lin, x, 0, cfg, sw),
                    std::invalid_argument);
}

TEST_CASE("oversized sweep requests fail with a size estimate") {
    int calls = 0;
    auto cb = [&](Target) {
        ++calls;
        return Tensor::zeros({2016, 231});
    };
    try {
        full_sweep("integrated_gradients", 2016, 231, 0, cb, SweepConfig{});
        FAIL("expected rejection");
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        CHECK(msg.find(std::to_string(sweep_bytes(2016, 2016, 231))) != std::string::npos);
    }
    CHECK(calls == 0);
    CHECK(sweep_bytes(2016, 2016, 231) == 2016LL * 2016 * 231 * 8);
}

TEST_CASE("attribution archives round-trip with their manifest") {
    AttributionTensor a;
    a.method = "deeplift";
    a.layout = Layout::FullSweep;
    a.values = random_tensor({3, 4, 2, 1}, 91);
    a.instance_id = 17;
    a.target_class = 0;
    a.target_steps = {0, 2, 3};
    a.target_seconds = {0.01, 0.02, 0.03};
    std::string path = "attr_roundtrip.bin";
    save_attribution(a, path);
    AttributionTensor r = load_attribution(path);
    CHECK(r.method == a.method);
    CHECK(r.layout == a.layout);
    CHECK(r.values.shape == a.values.shape);
    CHECK(r.values.v == a.values.v);
    CHECK(r.instance_id == 17);
    CHECK(r.target_steps == a.target_steps);
    CHECK(r.target_seconds.empty());  // timing is not persisted
    std::remove(path.c_str());
    std::remove((path + ".json").c_str());
}

TEST_CASE("baseline constructors") {
    datasets::SeriesBatch batch;
    batch.values = {Tensor({2, 2}, {1, 10, 3, 20}), Tensor({2, 2}, {5, 30, 7, 40})};
    Baseline z = zeros_baseline(3, 2);
    CHECK(z.kind == Baseline::Kind::Zeros);
    CHECK(z.data.abs_sum() == 0.0);
    Baseline cm = channel_mean_baseline(batch, 3);
    REQUIRE(cm.data.shape == std::vector<int64_t>{3, 2});
    for (int64_t s = 0; s < 3; ++s) {
        CHECK(cm.data.at(s, 0) == doctest::Approx(4.0));
        CHECK(cm.data.at(s, 1) == doctest::Approx(25.0));
    }
    Baseline s1 = sampled_baseline(batch, 5);
    Baseline s2 = sampled_baseline(batch, 5);
    CHECK(s1.data.v == s2.data.v);
    auto pool = baseline_pool(batch, 6, 9);
    CHECK(pool.size() == 6);
    datasets::SeriesBatch empty;
    CHECK_THROWS_AS(channel_mean_baseline(empty, 2), std::invalid_argument);
    CHECK_THROWS_AS(sampled_baseline(empty, 1), std::invalid_argument);
}
