#include "tsattr/mask_attr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "tsattr/optim.hpp"
#include "tsattr/rng.hpp"

namespace tsattr::attr {

const char* mask_game_name(MaskGame g) {
    return g == MaskGame::Preserve ? "preserve" : "delete";
}

const char* mask_operator_name(MaskOperator k) {
    switch (k) {
        case MaskOperator::MovingAverage: return "moving_average";
        case MaskOperator::GaussianBlur: return "gaussian_blur";
        case MaskOperator::Learned: return "learned";
    }
    return "?";
}

Tensor moving_average_surrogate(const Tensor& x, int64_t window) {
    if (window < 1) throw std::invalid_argument("moving_average_surrogate: window must be >= 1");
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    Tensor mu({t_len, f_cnt});
    for (int64_t t = 0; t < t_len; ++t) {
        int64_t s0 = std::max<int64_t>(0, t - window + 1);
        double inv = 1.0 / static_cast<double>(t - s0 + 1);
        for (int64_t f = 0; f < f_cnt; ++f) {
            double sum = 0.0;
            for (int64_t s = s0; s <= t; ++s) sum += x.at(s, f);
            mu.at(t, f) = sum * inv;
        }
    }
    return mu;
}

namespace {

// causal gaussian average and its sigma-derivative, per cell
void blur_stats(const Tensor& x, const Tensor& m, double sigma_max, Tensor& mu, Tensor* dmu_dsigma) {
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    int64_t reach = static_cast<int64_t>(std::ceil(3.0 * sigma_max)) + 1;
    for (int64_t t = 0; t < t_len; ++t)
        for (int64_t f = 0; f < f_cnt; ++f) {
            double sigma = sigma_max * (1.0 - m.at(t, f));
            if (sigma < 1e-8) {
                mu.at(t, f) = x.at(t, f);
                if (dmu_dsigma) dmu_dsigma->at(t, f) = 0.0;
                continue;
            }
            int64_t s0 = std::max<int64_t>(0, t - reach);
            double sw = 0.0, sx = 0.0, dsw = 0.0, dsx = 0.0;
            for (int64_t s = s0; s <= t; ++s) {
                double d = static_cast<double>(t - s);
                double w = std::exp(-d * d / (2.0 * sigma * sigma));
                double dw = w * d * d / (sigma * sigma * sigma);
                sw += w;
                sx += w * x.at(s, f);
                dsw += dw;
                dsx += dw * x.at(s, f);
            }
            mu.at(t, f) = sx / sw;
            if (dmu_dsigma) dmu_dsigma->at(t, f) = (dsx * sw - sx * dsw) / (sw * sw);
        }
}

}  // namespace

Tensor gaussian_blur_surrogate(const Tensor& x, const Tensor& m, double sigma_max) {
    if (!x.same_shape(m))
        throw std::invalid_argument("gaussian_blur_surrogate: mask shape mismatch");
    Tensor mu(x.shape);
    blur_stats(x, m, sigma_max, mu, nullptr);
    return mu;
}

Tensor apply_perturbation(const Tensor& x, const Tensor& m, const MaskConfig& cfg,
                          const Tensor* gx) {
    if (!x.same_shape(m)) throw std::invalid_argument("apply_perturbation: mask shape mismatch");
    Tensor mu;
    switch (cfg.op) {
        case MaskOperator::MovingAverage: mu = moving_average_surrogate(x, cfg.window); break;
        case MaskOperator::GaussianBlur: mu = gaussian_blur_surrogate(x, m, cfg.sigma_max); break;
        case MaskOperator::Learned:
            if (!gx) throw std::invalid_argument("apply_perturbation: learned operator needs g(x)");
            mu = *gx;
            break;
    }
    Tensor out = x;
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = m.v[i] * x.v[i] + (1.0 - m.v[i]) * mu.v[i];
    return out;
}

namespace {

std::vector<double> eligibility(const MaskConfig& cfg, int64_t t_len) {
    std::vector<double> e(static_cast<size_t>(t_len), 1.0);
    if (cfg.eligible.empty()) return e;
    if (static_cast<int64_t>(cfg.eligible.size()) != t_len)
        throw std::invalid_argument("mask fit: eligibility vector length " +
                                    std::to_string(cfg.eligible.size()) +
                                    " does not match sequence length " + std::to_string(t_len));
    for (int64_t t = 0; t < t_len; ++t) e[static_cast<size_t>(t)] = cfg.eligible[static_cast<size_t>(t)] ? 1.0 : 0.0;
    return e;
}

// consistency loss and its gradient w.r.t. the perturbed input
struct Consistency {
    double loss;
    Tensor dxp;  // T x F
    Tensor probs;
};

Consistency consistency_grad(const Model& model, const Tensor& xp, const Tensor& p0,
                             const std::vector<double>& elig, double sign) {
    const models::ForwardGraph& fg = model.graph(xp.shape[0]);
    auto vals = evaluate(fg.graph, model.bind(xp));
    const Tensor& p = vals[static_cast<size_t>(fg.prob)];
    Tensor seed(p.shape);
    double loss = 0.0;
    for (int64_t t = 0; t < p.shape[0]; ++t)
        for (int64_t c = 0; c < p.shape[1]; ++c) {
            double d = p.at(t, c) - p0.at(t, c);
            loss += elig[static_cast<size_t>(t)] * d * d;
            seed.at(t, c) = sign * 2.0 * elig[static_cast<size_t>(t)] * d;
        }
    return {sign * loss, gradient(fg.graph, vals, fg.prob, &seed).at("x"), p};
}

// keep-ratio penalty: squared distance between the sorted mask and a step
// vector with `keep` ones at the top
double sorted_keep_penalty(const Tensor& mm, double keep_ratio, double lambda, Tensor& grad) {
    int64_t n = mm.numel();
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return mm[a] < mm[b]; });
    int64_t keep = static_cast<int64_t>(std::llround(keep_ratio * static_cast<double>(n)));
    double loss = 0.0;
    for (int64_t r = 0; r < n; ++r) {
        double target = r >= n - keep ? 1.0 : 0.0;
        double d = mm[order[static_cast<size_t>(r)]] - target;
        loss += d * d;
        grad[order[static_cast<size_t>(r)]] += lambda * 2.0 * d;
    }
    return lambda * loss;
}

double tv_penalty(const Tensor& m, double lambda, Tensor& grad) {
    int64_t t_len = m.shape[0], f_cnt = m.shape[1];
    double loss = 0.0;
    for (int64_t t = 0; t + 1 < t_len; ++t)
        for (int64_t f = 0; f < f_cnt; ++f) {
            double d = m.at(t + 1, f) - m.at(t, f);
            loss += std::fabs(d);
            double s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
            grad.at(t + 1, f) += lambda * s;
            grad.at(t, f) -= lambda * s;
        }
    return lambda * loss;
}

double entropy_penalty(const Tensor& m, double lambda, Tensor& grad) {
    double total = 0.0;
    for (double v : m.v) total += std::max(v, 1e-12);
    double ent = 0.0;
    for (double v : m.v) {
        double q = std::max(v, 1e-12) / total;
        ent -= q * std::log(q);
    }
    for (int64_t i = 0; i < m.numel(); ++i) {
        double q = std::max(m[i], 1e-12) / total;
        grad[i] += lambda * (-(std::log(q) + ent) / total);
    }
    return lambda * ent;
}

void clamp01(Tensor& m) {
    for (double& v : m.v) v = std::clamp(v, 0.0, 1.0);
}

// small causal perturbation net: per-step MLP over the running mean of
// everything up to the step. The current value is deliberately excluded --
// with it the net can learn the identity, which makes the perturbed input
// equal the original for any mask and stalls the mask gradient entirely.
struct LearnedOperator {
    Graph g;
    int out = -1;
    Bindings data;  // x and the running-mean features
    std::map<std::string, Tensor> params;

    LearnedOperator(const Tensor& x, int64_t hidden, uint64_t seed) {
        int64_t t_len = x.shape[0], f_cnt = x.shape[1];
        Tensor cmean({t_len, f_cnt});
        for (int64_t f = 0; f < f_cnt; ++f) {
            double run = 0.0;
            for (int64_t t = 0; t < t_len; ++t) {
                run += x.at(t, f);
                cmean.at(t, f) = run / static_cast<double>(t + 1);
            }
        }
        Rng rng(seed);
        auto init = [&](std::vector<int64_t> shape, double std) {
            Tensor t(std::move(shape));
            for (double& v : t.v) v = rng.normal(0.0, std);
            return t;
        };
        params["g.w1"] = init({f_cnt, hidden}, 1.0 / std::sqrt(static_cast<double>(f_cnt)));
        params["g.b1"] = Tensor::zeros({1, hidden});
        params["g.w2"] = init({hidden, f_cnt}, 0.1 / std::sqrt(static_cast<double>(hidden)));
        params["g.b2"] = Tensor::zeros({1, f_cnt});

        int cin = g.input("c", {t_len, f_cnt});
        int w1 = g.input("g.w1", {f_cnt, hidden});
        int b1 = g.input("g.b1", {1, hidden});
        int w2 = g.input("g.w2", {hidden, f_cnt});
        int b2 = g.input("g.b2", {1, f_cnt});
        int h = g.tanh_(g.add_row(g.matmul(cin, w1), b1));
        out = g.add_row(g.matmul(h, w2), b2);
        data = {{"c", cmean}};
    }

    std::pair<Tensor, Values> forward() const {
        Bindings b = data;
        for (const auto& [k, v] : params) b[k] = v;
        Values vals = evaluate(g, b);
        return {vals[static_cast<size_t>(out)], std::move(vals)};
    }

    std::map<std::string, Tensor> backward(const Values& vals, const Tensor& adjoint) const {
        auto grads = gradient(g, vals, out, &adjoint);
        std::map<std::string, Tensor> pg;
        for (auto& [k, v] : grads)
            if (params.count(k)) pg.emplace(k, std::move(v));
        return pg;
    }
};

}  // namespace

MaskState dynamask_fit(const Model& model, const Tensor& x, const MaskConfig& cfg) {
    if (cfg.op == MaskOperator::Learned)
        throw std::invalid_argument(
            "dynamask_fit: the learned operator belongs to extremal_mask_fit; pick "
            "moving_average or gaussian_blur");
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    std::vector<double> elig = eligibility(cfg, t_len);
    Tensor p0 = model.probabilities(x);
    double sign = cfg.game == MaskGame::Preserve ? 1.0 : -1.0;

    Tensor mov_mu;
    if (cfg.op == MaskOperator::MovingAverage) mov_mu = moving_average_surrogate(x, cfg.window);

    MaskState st;
    st.config = cfg;
    st.m = Tensor::full({t_len, f_cnt}, 0.5);
    std::map<std::string, Tensor> params{{"m", st.m}};
    AdamState adam;
    AdamHyper hyper;
    hyper.lr = cfg.lr;

    for (int64_t it = 0; it < cfg.iterations; ++it) {
        // step size decays linearly so the mask settles instead of dithering
        // around the total-variation subgradient
        hyper.lr = cfg.lr * std::max(0.05, 1.0 - static_cast<double>(it) /
                                               static_cast<double>(cfg.iterations));
        Tensor& m = params.at("m");
        Tensor mu = mov_mu, dmu_ds;
        if (cfg.op == MaskOperator::GaussianBlur) {
            mu = Tensor({t_len, f_cnt});
            dmu_ds = Tensor({t_len, f_cnt});
            blur_stats(x, m, cfg.sigma_max, mu, &dmu_ds);
        }
        Tensor xp = x;
        for (size_t i = 0; i < xp.v.size(); ++i)
            xp.v[i] = m.v[i] * x.v[i] + (1.0 - m.v[i]) * mu.v[i];

        Consistency c = consistency_grad(model, xp, p0, elig, sign);
        Tensor grad({t_len, f_cnt});
        for (size_t i = 0; i < grad.v.size(); ++i) {
            double dxp_dm = x.v[i] - mu.v[i];
            if (cfg.op == MaskOperator::GaussianBlur)
                dxp_dm += (1.0 - m.v[i]) * dmu_ds.v[i] * (-cfg.sigma_max);
            grad.v[i] = c.dxp.v[i] * dxp_dm;
        }

        LossTerms terms;
        terms.consistency = c.loss;
        // under the delete game the size penalty pulls 1-m toward the keep pattern
        if (cfg.lambda_size > 0) {
            if (cfg.game == MaskGame::Preserve) {
                terms.size = sorted_keep_penalty(m, cfg.keep_ratio, cfg.lambda_size, grad);
            } else {
                Tensor inv = m;
                for (double& v : inv.v) v = 1.0 - v;
                Tensor ginv = Tensor::zeros(grad.shape);
                terms.size = sorted_keep_penalty(inv, cfg.keep_ratio, cfg.lambda_size, ginv);
                for (size_t i = 0; i < grad.v.size(); ++i) grad.v[i] -= ginv.v[i];
            }
        }
        if (cfg.lambda_smooth > 0) terms.smooth = tv_penalty(m, cfg.lambda_smooth, grad);
        if (cfg.lambda_entropy > 0) terms.entropy = entropy_penalty(m, cfg.lambda_entropy, grad);
        if (!std::isfinite(terms.total()) || !grad.all_finite())
            throw std::runtime_error("dynamask_fit: non-finite loss at iteration " +
                                     std::to_string(it));
        st.history.push_back(terms);
        adam_step(params, {{"m", std::move(grad)}}, adam, hyper);
        clamp01(params.at("m"));
    }
    st.m = params.at("m");
    st.attribution = st.m;
    if (cfg.game == MaskGame::Delete)
        for (double& v : st.attribution.v) v = 1.0 - v;
    return st;
}

ExtremalResult extremal_mask_fit(const Model& model, const Tensor& x, const MaskConfig& cfg) {
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    std::vector<double> elig = eligibility(cfg, t_len);
    Tensor p0 = model.probabilities(x);
    double sign = cfg.game == MaskGame::Preserve ? 1.0 : -1.0;
    double n_cells = static_cast<double>(t_len * f_cnt);

    LearnedOperator op(x, cfg.g_hidden, cfg.seed);
    ExtremalResult res;
    res.state.config = cfg;
    std::map<std::string, Tensor> params = op.params;
    params["m"] = Tensor::full({t_len, f_cnt}, 0.5);
    AdamState adam;
    AdamHyper hyper;
    hyper.lr = cfg.lr;

    for (int64_t it = 0; it < cfg.iterations; ++it) {
        hyper.lr = cfg.lr * std::max(0.05, 1.0 - static_cast<double>(it) /
                                               static_cast<double>(cfg.iterations));
        Tensor& m = params.at("m");
        op.params = params;
        op.params.erase("m");
        auto [gx, gvals] = op.forward();
        Tensor xp = x;
        for (size_t i = 0; i < xp.v.size(); ++i)
            xp.v[i] = m.v[i] * x.v[i] + (1.0 - m.v[i]) * gx.v[i];

        Consistency c = consistency_grad(model, xp, p0, elig, sign);
        Tensor gm({t_len, f_cnt});
        Tensor adjoint({t_len, f_cnt});
        double anchor = 0.0;
        for (size_t i = 0; i < gm.v.size(); ++i) {
            gm.v[i] = c.dxp.v[i] * (x.v[i] - gx.v[i]);
            adjoint.v[i] = c.dxp.v[i] * (1.0 - m.v[i]);
            // keep the perturbation near the neutral (standardized-zero)
            // value so the net cannot smuggle the signal past the mask
            anchor += gx.v[i] * gx.v[i];
            adjoint.v[i] += cfg.lambda_anchor * 2.0 * gx.v[i] / n_cells;
        }
        std::map<std::string, Tensor> grads = op.backward(gvals, adjoint);

        LossTerms terms;
        terms.consistency = c.loss;
        terms.anchor = cfg.lambda_anchor * anchor / n_cells;
        if (cfg.lambda_size > 0) {
            // smallest preserving mask: penalize mean(m); delete game inverts
            double s = cfg.game == MaskGame::Preserve ? 1.0 : -1.0;
            double mean = m.sum() / n_cells;
            terms.size = cfg.lambda_size * (cfg.game == MaskGame::Preserve ? mean : 1.0 - mean);
            for (double& v : gm.v) v += s * cfg.lambda_size / n_cells;
        }
        if (cfg.lambda_smooth > 0) terms.smooth = tv_penalty(m, cfg.lambda_smooth, gm);
        if (cfg.lambda_entropy > 0) terms.entropy = entropy_penalty(m, cfg.lambda_entropy, gm);
        if (!std::isfinite(terms.total()) || !gm.all_finite())
            throw std::runtime_error("extremal_mask_fit: non-finite loss at iteration " +
                                     std::to_string(it));
        res.state.history.push_back(terms);
        grads.emplace("m", std::move(gm));
        adam_step(params, grads, adam, hyper);
        clamp01(params.at("m"));
    }
    res.state.m = params.at("m");
    res.state.attribution = res.state.m;
    if (cfg.game == MaskGame::Delete)
        for (double& v : res.state.attribution.v) v = 1.0 - v;
    res.operator_params = params;
    res.operator_params.erase("m");
    op.params = res.operator_params;
    res.gx = op.forward().first;
    return res;
}

std::string loss_history_csv(const std::vector<LossTerms>& history) {
    std::ostringstream out;
    out << "iteration,consistency,size,smooth,entropy,anchor,total\n";
    for (size_t i = 0; i < history.size(); ++i) {
        const LossTerms& t = history[i];
        out << i << ',' << t.consistency << ',' << t.size << ',' << t.smooth << ','
            << t.entropy << ',' << t.anchor << ',' << t.total() << "\n";
    }
    return out.str();
}

}  // namespace tsattr::attr
