#include "tsattr/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "tsattr/optim.hpp"
#include "tsattr/rng.hpp"

namespace tsattr::models {

const char* arch_name(Arch a) {
    switch (a) {
        case Arch::Transformer: return "transformer";
        case Arch::Crossformer: return "crossformer";
        case Arch::Retain: return "retain";
    }
    return "?";
}

Arch arch_from_name(const std::string& name) {
    if (name == "transformer") return Arch::Transformer;
    if (name == "crossformer") return Arch::Crossformer;
    if (name == "retain") return Arch::Retain;
    throw std::invalid_argument("unknown architecture tag: " + name);
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Tensor causal_mask(int64_t t) {
    Tensor m({t, t});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = i + 1; j < t; ++j) m.at(i, j) = kNegInf;
    return m;
}

void init_param(std::map<std::string, Tensor>& params, Rng& rng, const std::string& name,
                std::vector<int64_t> shape, double std) {
    Tensor t(std::move(shape));
    if (std > 0)
        for (double& x : t.v) x = rng.normal(0.0, std);
    params.emplace(name, std::move(t));
}

void init_linear(std::map<std::string, Tensor>& params, Rng& rng, const std::string& prefix,
                 int64_t in, int64_t out) {
    init_param(params, rng, prefix + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    init_param(params, rng, prefix + ".b", {1, out}, 0.0);
}

void init_ln(std::map<std::string, Tensor>& params, const std::string& prefix, int64_t d) {
    params.emplace(prefix + ".g", Tensor::full({1, d}, 1.0));
    params.emplace(prefix + ".b", Tensor::zeros({1, d}));
}

void init_attn_block(std::map<std::string, Tensor>& params, Rng& rng, const std::string& prefix,
                     int64_t d) {
    init_ln(params, prefix + ".ln1", d);
    init_linear(params, rng, prefix + ".q", d, d);
    init_linear(params, rng, prefix + ".k", d, d);
    init_linear(params, rng, prefix + ".v", d, d);
    init_linear(params, rng, prefix + ".o", d, d);
    init_ln(params, prefix + ".ln2", d);
    init_linear(params, rng, prefix + ".ff1", d, 2 * d);
    init_linear(params, rng, prefix + ".ff2", 2 * d, d);
}

std::map<std::string, Tensor> init_params(const ModelConfig& cfg) {
    std::map<std::string, Tensor> params;
    Rng rng(cfg.init_seed);
    switch (cfg.arch) {
        case Arch::Transformer: {
            int64_t d = cfg.d_model;
            init_linear(params, rng, "emb", cfg.features, d);
            init_param(params, rng, "pos", {cfg.max_seq, d}, 0.02);
            for (int64_t l = 0; l < cfg.layers; ++l)
                init_attn_block(params, rng, "l" + std::to_string(l), d);
            init_ln(params, "head.ln", d);
            init_linear(params, rng, "head", d, cfg.classes);
            break;
        }
        case Arch::Crossformer: {
            int64_t d = cfg.cross_d;
            int64_t s_max = (cfg.max_seq + cfg.seg_len - 1) / cfg.seg_len + 1;
            init_linear(params, rng, "emb", cfg.seg_len, d);
            init_param(params, rng, "seg_pos", {s_max, d}, 0.02);
            init_attn_block(params, rng, "time", d);
            init_attn_block(params, rng, "dim", d);
            init_linear(params, rng, "win", cfg.seg_len * cfg.features, d);
            init_linear(params, rng, "head1", 2 * d, d);
            init_ln(params, "head.ln", d);
            init_linear(params, rng, "head", d, cfg.classes);
            break;
        }
        case Arch::Retain: {
            // embedding without bias keeps contributions linear in x
            init_param(params, rng, "emb.w", {cfg.features, cfg.retain_emb},
                       1.0 / std::sqrt(static_cast<double>(cfg.features)));
            for (const char* net : {"alpha", "beta"}) {
                std::string p = net;
                init_param(params, rng, p + ".wx", {cfg.retain_emb, cfg.retain_hidden},
                           1.0 / std::sqrt(static_cast<double>(cfg.retain_emb)));
                init_param(params, rng, p + ".wh", {cfg.retain_hidden, cfg.retain_hidden},
                           1.0 / std::sqrt(static_cast<double>(cfg.retain_hidden)));
                init_param(params, rng, p + ".b", {1, cfg.retain_hidden}, 0.0);
            }
            init_param(params, rng, "alpha.out", {cfg.retain_hidden, 1},
                       1.0 / std::sqrt(static_cast<double>(cfg.retain_hidden)));
            init_param(params, rng, "beta.out", {cfg.retain_hidden, cfg.retain_emb},
                       1.0 / std::sqrt(static_cast<double>(cfg.retain_hidden)));
            init_param(params, rng, "out.w", {cfg.retain_emb, 1},
                       1.0 / std::sqrt(static_cast<double>(cfg.retain_emb)));
            init_param(params, rng, "out.b", {1, 1}, 0.0);
            break;
        }
    }
    return params;
}

// builder with lazy parameter leaves
struct Builder {
    Graph& g;
    const std::map<std::string, Tensor>& params;
    std::map<std::string, int> ids;

    int P(const std::string& name) {
        auto it = ids.find(name);
        if (it != ids.end()) return it->second;
        auto pit = params.find(name);
        if (pit == params.end()) throw std::invalid_argument("builder: unknown parameter " + name);
        int id = g.input(name, pit->second.shape);
        ids[name] = id;
        return id;
    }

    int linear(int x, const std::string& prefix) {
        return g.add_row(g.matmul(x, P(prefix + ".w")), P(prefix + ".b"));
    }
    int ln(int x, const std::string& prefix) {
        return g.layer_norm(x, P(prefix + ".g"), P(prefix + ".b"));
    }

    // pre-norm attention + feed-forward block
    int attn_block(int x, const std::string& prefix, int64_t heads, const Tensor& mask) {
        int64_t t = g.node_rows(x), d = g.node_cols(x);
        int h0 = ln(x, prefix + ".ln1");
        int q = linear(h0, prefix + ".q");
        int k = linear(h0, prefix + ".k");
        int v = linear(h0, prefix + ".v");
        int64_t dh = d / heads;
        std::vector<int> head_outs;
        for (int64_t h = 0; h < heads; ++h) {
            int qh = g.slice(q, 0, t, h * dh, (h + 1) * dh);
            int kh = g.slice(k, 0, t, h * dh, (h + 1) * dh);
            int vh = g.slice(v, 0, t, h * dh, (h + 1) * dh);
            int scores = g.scale(g.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
            int weights = g.softmax_masked(scores, mask);
            head_outs.push_back(g.matmul(weights, vh));
        }
        int attn = linear(g.concat1(head_outs), prefix + ".o");
        int res1 = g.add(x, attn);
        int h1 = ln(res1, prefix + ".ln2");
        int ff = linear(g.gelu(linear(h1, prefix + ".ff1")), prefix + ".ff2");
        return g.add(res1, ff);
    }

    // simple tanh recurrence over rows of v, returns T x H hidden states
    int rnn(int v, const std::string& prefix, int64_t hidden) {
        int64_t t = g.node_rows(v);
        int h_prev = g.constant(Tensor::zeros({1, hidden}));
        std::vector<int> hs;
        for (int64_t s = 0; s < t; ++s) {
            int xt = g.rows(v, s, s + 1);
            int pre = g.add(g.add(g.matmul(xt, P(prefix + ".wx")), g.matmul(h_prev, P(prefix + ".wh"))),
                            P(prefix + ".b"));
            h_prev = g.tanh_(pre);
            hs.push_back(h_prev);
        }
        return g.concat0(hs);
    }
};

void build_transformer(ForwardGraph& fg, const ModelConfig& cfg,
                       const std::map<std::string, Tensor>& params, int64_t t_len) {
    Graph& g = fg.graph;
    Builder b{g, params, {}};
    fg.x = g.input("x", {t_len, cfg.features});
    int h = b.linear(fg.x, "emb");
    h = g.add(h, g.rows(b.P("pos"), 0, t_len));
    Tensor mask = causal_mask(t_len);
    for (int64_t l = 0; l < cfg.layers; ++l)
        h = b.attn_block(h, "l" + std::to_string(l), cfg.heads, mask);
    fg.logit = b.linear(b.ln(h, "head.ln"), "head");
    fg.prob = g.sigmoid(fg.logit);
}

void build_crossformer(ForwardGraph& fg, const ModelConfig& cfg,
                       const std::map<std::string, Tensor>& params, int64_t t_len) {
    Graph& g = fg.graph;
    Builder b{g, params, {}};
    fg.x = g.input("x", {t_len, cfg.features});
    int64_t seg = cfg.seg_len, f_cnt = cfg.features;
    int64_t pad = (seg - t_len % seg) % seg;
    int64_t s_cnt = (t_len + pad) / seg;

    int xp = pad > 0 ? g.front_pad(fg.x, pad) : fg.x;
    int seg_pos = g.rows(b.P("seg_pos"), 0, s_cnt);
    Tensor tmask = causal_mask(s_cnt);

    // per-variate segment embedding + causal attention across segments
    std::vector<int> variate_states;
    for (int64_t f = 0; f < f_cnt; ++f) {
        int col = g.slice(xp, 0, t_len + pad, f, f + 1);
        int segs = g.reshape(col, {s_cnt, seg});
        int tok = g.add(b.linear(segs, "emb"), seg_pos);
        variate_states.push_back(b.attn_block(tok, "time", cfg.cross_heads, tmask));
    }

    // cross-dimension attention inside each segment bucket, mean-pooled
    Tensor dmask = Tensor::zeros({f_cnt, f_cnt});
    Tensor pool({1, f_cnt});
    for (int64_t f = 0; f < f_cnt; ++f) pool.at(0, f) = 1.0 / static_cast<double>(f_cnt);
    int pool_c = g.constant(pool, "pool");
    std::vector<int> buckets;
    for (int64_t s = 0; s < s_cnt; ++s) {
        std::vector<int> rows;
        for (int64_t f = 0; f < f_cnt; ++f)
            rows.push_back(g.rows(variate_states[static_cast<size_t>(f)], s, s + 1));
        int m = g.concat0(rows);
        int mixed = b.attn_block(m, "dim", cfg.cross_heads, dmask);
        buckets.push_back(g.matmul(pool_c, mixed));
    }
    int bucket_states = g.concat0(buckets);  // S x d

    // per-step gather of the last fully completed segment; steps before the
    // first boundary read zeros
    Tensor gather({t_len, s_cnt});
    for (int64_t t = 0; t < t_len; ++t) {
        int64_t s_complete = (t + pad + 1) / seg - 1;
        if (s_complete >= 0) gather.at(t, s_complete) = 1.0;
    }
    int context = g.matmul(g.constant(gather, "gather"), bucket_states);  // T x d

    // raw causal window of the most recent seg steps
    int win = b.linear(g.unfold(fg.x, seg), "win");  // T x d

    int h = g.gelu(b.linear(g.concat1({context, win}), "head1"));
    fg.logit = b.linear(b.ln(h, "head.ln"), "head");
    fg.prob = g.sigmoid(fg.logit);
}

void build_retain(ForwardGraph& fg, const ModelConfig& cfg,
                  const std::map<std::string, Tensor>& params, int64_t t_len) {
    Graph& g = fg.graph;
    Builder b{g, params, {}};
    fg.x = g.input("x", {t_len, cfg.features});
    int v = g.matmul(fg.x, b.P("emb.w"));  // T x E, bias-free

    int ha = b.rnn(v, "alpha", cfg.retain_hidden);
    int e = g.matmul(ha, b.P("alpha.out"));  // T x 1 step scores
    int ones_t = g.constant(Tensor::full({t_len, 1}, 1.0));
    int scores = g.matmul(ones_t, g.reshape(e, {1, t_len}));  // row t = e over s
    int alpha = g.softmax_masked(scores, causal_mask(t_len));  // T x T causal weights

    int hb = b.rnn(v, "beta", cfg.retain_hidden);
    int beta = g.tanh_(g.matmul(hb, b.P("beta.out")));  // T x E channel gates

    int gated = g.mul(beta, v);
    int q = g.matmul(gated, b.P("out.w"));        // T x 1 per-step evidence
    int logit0 = g.matmul(alpha, q);              // T x 1
    fg.logit = g.add_row(logit0, b.P("out.b"));
    fg.prob = g.sigmoid(fg.logit);

    // per-cell contribution terms: contrib[s,f] = x[s,f] * d(evidence_s)/dx[s,f]
    int wrow = g.reshape(b.P("out.w"), {1, cfg.retain_emb});
    int ones_col = g.constant(Tensor::full({t_len, 1}, 1.0));
    int wmat = g.matmul(ones_col, wrow);                       // T x E broadcast
    int k = g.mul(fg.x, g.matmul_nt(g.mul(beta, wmat), b.P("emb.w")));  // T x F
    fg.taps["alpha"] = alpha;
    fg.taps["contrib"] = k;
}

void build_graph(ForwardGraph& fg, const ModelConfig& cfg,
                 const std::map<std::string, Tensor>& params, int64_t t_len) {
    switch (cfg.arch) {
        case Arch::Transformer: build_transformer(fg, cfg, params, t_len); break;
        case Arch::Crossformer: build_crossformer(fg, cfg, params, t_len); break;
        case Arch::Retain: build_retain(fg, cfg, params, t_len); break;
    }
}

}  // namespace

PredictorModel::PredictorModel(ModelConfig cfg) : config(cfg), params(init_params(cfg)) {}

const ForwardGraph& PredictorModel::forward_graph(int64_t t_len) const {
    if (t_len < 1 || t_len > config.max_seq)
        throw std::invalid_argument("forward_graph: sequence length " + std::to_string(t_len) +
                                    " outside [1, max_seq=" + std::to_string(config.max_seq) + "]");
    auto it = graph_cache_.find(t_len);
    if (it != graph_cache_.end()) return it->second;
    ForwardGraph fg;
    build_graph(fg, config, params, t_len);
    return graph_cache_.emplace(t_len, std::move(fg)).first->second;
}

Bindings PredictorModel::bindings_for(const Tensor& x) const {
    if (!binding_cache_valid_) {
        binding_cache_ = Bindings(params.begin(), params.end());
        binding_cache_valid_ = true;
    }
    Bindings b = binding_cache_;
    b["x"] = x;
    return b;
}

Tensor PredictorModel::forward(const Tensor& x) const {
    if (x.rank() != 2 || x.shape[1] != config.features)
        throw std::invalid_argument("forward: input must be T x " + std::to_string(config.features) +
                                    ", got " + shape_str(x.shape));
    const ForwardGraph& fg = forward_graph(x.shape[0]);
    auto vals = evaluate(fg.graph, bindings_for(x));
    return vals[static_cast<size_t>(fg.prob)];
}

int64_t PredictorModel::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

uint64_t PredictorModel::param_hash() const {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* data, size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& [name, t] : params) {
        mix(name.data(), name.size());
        mix(t.v.data(), t.v.size() * sizeof(double));
    }
    return h;
}

void PredictorModel::invalidate_cache() {
    graph_cache_.clear();
    binding_cache_valid_ = false;
}

RetainAttribution retain_forward_and_attribute(const PredictorModel& model, const Tensor& x) {
    if (model.config.arch != Arch::Retain)
        throw std::invalid_argument("retain_forward_and_attribute: model architecture tag is " +
                                    std::string(arch_name(model.config.arch)) + ", not retain");
    const ForwardGraph& fg = model.forward_graph(x.shape[0]);
    auto vals = evaluate(fg.graph, model.bindings_for(x));
    RetainAttribution out;
    out.probs = vals[static_cast<size_t>(fg.prob)];
    out.alpha = vals[static_cast<size_t>(fg.taps.at("alpha"))];
    out.contrib = vals[static_cast<size_t>(fg.taps.at("contrib"))];
    out.output_bias = model.params.at("out.b").v[0];
    int64_t t_len = x.shape[0], f_cnt = x.shape[1];
    // track form: contributions toward the final step's logit
    out.attributions = Tensor({t_len, f_cnt});
    for (int64_t s = 0; s < t_len; ++s)
        for (int64_t f = 0; f < f_cnt; ++f)
            out.attributions.at(s, f) =
                std::fabs(out.alpha.at(t_len - 1, s) * out.contrib.at(s, f));
    return out;
}

namespace {

struct TrainGraph {
    Graph graph;
    int loss = -1;  // unnormalized weighted BCE sum
};

TrainGraph build_train_graph(const ModelConfig& cfg, const std::map<std::string, Tensor>& params,
                             int64_t t_len) {
    TrainGraph tg;
    ForwardGraph fg;
    build_graph(fg, cfg, params, t_len);
    tg.graph = std::move(fg.graph);
    Graph& g = tg.graph;
    int y = g.input("y", {t_len, 1});
    int w = g.input("w", {t_len, 1});
    // stable BCE from logits: softplus(z) - y*z, weighted per step
    int z = fg.logit;
    int bce = g.sub(g.softplus(z), g.mul(y, z));
    tg.loss = g.sum_all(g.mul(w, bce));
    return tg;
}

}  // namespace

TrainResult train(PredictorModel& model, const datasets::Dataset& train_set,
                  const datasets::Dataset& val_set, const TrainConfig& cfg) {
    int64_t n = train_set.series.n(), t_len = train_set.series.t();
    if (n < 1) throw std::invalid_argument("train: empty training set");
    int64_t pos = 0;
    for (size_t i = 0; i < train_set.labels.labels.size(); ++i)
        for (size_t t = 0; t < train_set.labels.labels[i].size(); ++t)
            pos += train_set.labels.labels[i][t] && train_set.labels.eligible[i][t];
    if (pos == 0) throw std::invalid_argument("train: no eligible positive steps in training set");

    TrainGraph tg = build_train_graph(model.config, model.params, t_len);

    // per-instance label/weight tensors
    std::vector<Tensor> ys(static_cast<size_t>(n)), ws(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        Tensor y({t_len, 1}), w({t_len, 1});
        for (int64_t t = 0; t < t_len; ++t) {
            bool elig = train_set.labels.eligible[static_cast<size_t>(i)][static_cast<size_t>(t)];
            bool lab = train_set.labels.labels[static_cast<size_t>(i)][static_cast<size_t>(t)];
            y.at(t, 0) = lab ? 1.0 : 0.0;
            w.at(t, 0) = !elig ? 0.0 : lab ? cfg.pos_weight : 1.0;
        }
        ys[static_cast<size_t>(i)] = std::move(y);
        ws[static_cast<size_t>(i)] = std::move(w);
    }

    Rng rng(cfg.seed);
    AdamState adam;
    AdamHyper hyper;
    hyper.lr = cfg.lr;

    TrainResult result;
    std::map<std::string, Tensor> best_params = model.params;
    int64_t since_best = 0;

    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0, epoch_weight = 0.0;
        for (int64_t start = 0; start < n; start += cfg.batch) {
            int64_t stop = std::min(n, start + cfg.batch);
            std::map<std::string, Tensor> acc;
            double batch_weight = 0.0;
            for (int64_t k = start; k < stop; ++k) {
                int64_t i = order[static_cast<size_t>(k)];
                Bindings b(model.params.begin(), model.params.end());
                b["x"] = train_set.series.values[static_cast<size_t>(i)];
                b["y"] = ys[static_cast<size_t>(i)];
                b["w"] = ws[static_cast<size_t>(i)];
                auto vals = evaluate(tg.graph, b);
                auto grads = gradient(tg.graph, vals, tg.loss);
                double wsum = ws[static_cast<size_t>(i)].sum();
                batch_weight += wsum;
                epoch_weight += wsum;
                epoch_loss += vals[static_cast<size_t>(tg.loss)].v[0];
                for (auto& [name, grad] : grads) {
                    if (!model.params.count(name)) continue;
                    auto it = acc.find(name);
                    if (it == acc.end()) acc.emplace(name, std::move(grad));
                    else it->second.add_(grad);
                }
            }
            if (batch_weight <= 0) continue;
            for (auto& [name, grad] : acc) grad.scale_(1.0 / batch_weight);
            adam_step(model.params, acc, adam, hyper);
        }
        model.invalidate_cache();

        EpochStats es;
        es.train_loss = epoch_weight > 0 ? epoch_loss / epoch_weight : 0.0;
        std::vector<Tensor> val_probs;
        for (const Tensor& x : val_set.series.values) val_probs.push_back(model.forward(x));
        MetricsBundle vm = evaluate_metrics(val_probs, val_set.labels);
        es.val_auroc = vm.auroc;
        es.val_auprc = vm.auprc;
        result.history.push_back(es);

        if (es.val_auprc > result.best_val_auprc || result.best_epoch < 0) {
            result.best_val_auprc = es.val_auprc;
            result.best_epoch = epoch;
            best_params = model.params;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.params = best_params;
    model.invalidate_cache();
    return result;
}

}  // namespace tsattr::models
