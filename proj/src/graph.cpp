#include "tsattr/graph.hpp"

#include <cmath>
#include <limits>

namespace tsattr {

namespace {
constexpr double kLnEps = 1e-5;  // layer-norm epsilon
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_f(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_df(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}
double sigmoid_f(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
double softplus_f(double x) {
    if (x > 30) return x;
    if (x < -30) return std::exp(x);
    return std::log1p(std::exp(x));
}
}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::AddRow: return "add_row";
        case Op::MatMul: return "matmul";
        case Op::MatMulNT: return "matmul_nt";
        case Op::Slice: return "slice";
        case Op::Concat0: return "concat0";
        case Op::Concat1: return "concat1";
        case Op::Reshape: return "reshape";
        case Op::FrontPad: return "front_pad";
        case Op::Unfold: return "unfold";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sigmoid: return "sigmoid";
        case Op::Tanh: return "tanh";
        case Op::Relu: return "relu";
        case Op::Gelu: return "gelu";
        case Op::Softplus: return "softplus";
        case Op::SoftmaxMasked: return "softmax_masked";
        case Op::LayerNorm: return "layer_norm";
        case Op::SumAll: return "sum_all";
    }
    return "?";
}

Tensor mm(const Tensor& a, const Tensor& b) {
    int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const double* ar = &a.v[static_cast<size_t>(i * k)];
        double* or_ = &out.v[static_cast<size_t>(i * n)];
        for (int64_t p = 0; p < k; ++p) {
            double av = ar[p];
            if (av == 0.0) continue;
            const double* br = &b.v[static_cast<size_t>(p * n)];
            for (int64_t j = 0; j < n; ++j) or_[j] += av * br[j];
        }
    }
    return out;
}

Tensor mm_nt(const Tensor& a, const Tensor& b) {
    int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const double* ar = &a.v[static_cast<size_t>(i * k)];
        for (int64_t j = 0; j < n; ++j) {
            const double* br = &b.v[static_cast<size_t>(j * k)];
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += ar[p] * br[p];
            out.at(i, j) = s;
        }
    }
    return out;
}

Tensor mm_tn(const Tensor& a, const Tensor& b) {
    int64_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    for (int64_t p = 0; p < k; ++p) {
        const double* ar = &a.v[static_cast<size_t>(p * m)];
        const double* br = &b.v[static_cast<size_t>(p * n)];
        for (int64_t i = 0; i < m; ++i) {
            double av = ar[i];
            if (av == 0.0) continue;
            double* or_ = &out.v[static_cast<size_t>(i * n)];
            for (int64_t j = 0; j < n; ++j) or_[j] += av * br[j];
        }
    }
    return out;
}

int Graph::push(Node n) {
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
}

void Graph::check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes.size()))
        throw std::invalid_argument("graph: bad node id " + std::to_string(id));
}

static std::vector<int64_t> as2d(std::vector<int64_t> s) {
    if (s.size() == 1) return {s[0], 1};
    if (s.size() != 2) throw std::invalid_argument("graph: nodes must be rank-2, got " + shape_str(s));
    return s;
}

int Graph::input(const std::string& name, std::vector<int64_t> shape) {
    if (input_ids.count(name)) throw std::invalid_argument("graph: duplicate input " + name);
    Node n{Op::Input, name, {}, as2d(std::move(shape))};
    int id = push(std::move(n));
    input_ids[name] = id;
    return id;
}

int Graph::constant(Tensor t, const std::string& name) {
    Node n{Op::Const, name, {}, as2d(t.shape)};
    n.attr = std::move(t);
    n.attr.shape = n.shape;
    return push(std::move(n));
}

#define CHECK2(cond, msg)                                                            \
    do {                                                                             \
        if (!(cond)) throw std::invalid_argument(std::string("graph: ") + (msg));    \
    } while (0)

int Graph::add(int a, int b) {
    check_id(a); check_id(b);
    CHECK2(shape(a) == shape(b), "add: shape mismatch " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    return push({Op::Add, "", {a, b}, shape(a)});
}

int Graph::sub(int a, int b) {
    check_id(a); check_id(b);
    CHECK2(shape(a) == shape(b), "sub: shape mismatch");
    return push({Op::Sub, "", {a, b}, shape(a)});
}

int Graph::mul(int a, int b) {
    check_id(a); check_id(b);
    CHECK2(shape(a) == shape(b), "mul: shape mismatch " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    return push({Op::Mul, "", {a, b}, shape(a)});
}

int Graph::scale(int a, double c) {
    check_id(a);
    Node n{Op::Scale, "", {a}, shape(a)};
    n.scalar = c;
    return push(std::move(n));
}

int Graph::add_row(int a, int row) {
    check_id(a); check_id(row);
    CHECK2(node_rows(row) == 1 && node_cols(row) == node_cols(a), "add_row: need 1 x C row");
    return push({Op::AddRow, "", {a, row}, shape(a)});
}

int Graph::matmul(int a, int b) {
    check_id(a); check_id(b);
    CHECK2(node_cols(a) == node_rows(b),
           "matmul: inner extents differ, " + shape_str(shape(a)) + " * " + shape_str(shape(b)));
    return push({Op::MatMul, "", {a, b}, {node_rows(a), node_cols(b)}});
}

int Graph::matmul_nt(int a, int b) {
    check_id(a); check_id(b);
    CHECK2(node_cols(a) == node_cols(b), "matmul_nt: inner extents differ");
    return push({Op::MatMulNT, "", {a, b}, {node_rows(a), node_rows(b)}});
}

int Graph::slice(int a, int64_t r0, int64_t r1, int64_t c0, int64_t c1) {
    check_id(a);
    CHECK2(0 <= r0 && r0 < r1 && r1 <= node_rows(a) && 0 <= c0 && c0 < c1 && c1 <= node_cols(a),
           "slice: block out of range");
    Node n{Op::Slice, "", {a}, {r1 - r0, c1 - c0}};
    n.r0 = r0; n.r1 = r1; n.c0 = c0; n.c1 = c1;
    return push(std::move(n));
}

int Graph::rows(int a, int64_t r0, int64_t r1) { return slice(a, r0, r1, 0, node_cols(a)); }

int Graph::concat0(const std::vector<int>& xs) {
    CHECK2(!xs.empty(), "concat0: empty");
    int64_t r = 0, c = node_cols(xs[0]);
    for (int x : xs) {
        check_id(x);
        CHECK2(node_cols(x) == c, "concat0: column mismatch");
        r += node_rows(x);
    }
    return push({Op::Concat0, "", xs, {r, c}});
}

int Graph::concat1(const std::vector<int>& xs) {
    CHECK2(!xs.empty(), "concat1: empty");
    int64_t r = node_rows(xs[0]), c = 0;
    for (int x : xs) {
        check_id(x);
        CHECK2(node_rows(x) == r, "concat1: row mismatch");
        c += node_cols(x);
    }
    return push({Op::Concat1, "", xs, {r, c}});
}

int Graph::reshape(int a, std::vector<int64_t> s) {
    check_id(a);
    auto s2 = as2d(std::move(s));
    CHECK2(s2[0] * s2[1] == node_rows(a) * node_cols(a), "reshape: element count mismatch");
    return push({Op::Reshape, "", {a}, s2});
}

int Graph::front_pad(int a, int64_t p) {
    check_id(a);
    CHECK2(p >= 0, "front_pad: negative pad");
    Node n{Op::FrontPad, "", {a}, {node_rows(a) + p, node_cols(a)}};
    n.width = p;
    return push(std::move(n));
}

int Graph::unfold(int a, int64_t w) {
    check_id(a);
    CHECK2(w >= 1, "unfold: window must be >= 1");
    Node n{Op::Unfold, "", {a}, {node_rows(a), w * node_cols(a)}};
    n.width = w;
    return push(std::move(n));
}

int Graph::exp_(int a) { check_id(a); return push({Op::Exp, "", {a}, shape(a)}); }
int Graph::log_(int a) { check_id(a); return push({Op::Log, "", {a}, shape(a)}); }
int Graph::sigmoid(int a) { check_id(a); return push({Op::Sigmoid, "", {a}, shape(a)}); }
int Graph::tanh_(int a) { check_id(a); return push({Op::Tanh, "", {a}, shape(a)}); }
int Graph::relu(int a) { check_id(a); return push({Op::Relu, "", {a}, shape(a)}); }
int Graph::gelu(int a) { check_id(a); return push({Op::Gelu, "", {a}, shape(a)}); }
int Graph::softplus(int a) { check_id(a); return push({Op::Softplus, "", {a}, shape(a)}); }

int Graph::softmax_masked(int a, Tensor mask) {
    check_id(a);
    auto ms = as2d(mask.shape);
    CHECK2(ms == shape(a), "softmax_masked: mask shape mismatch");
    Node n{Op::SoftmaxMasked, "", {a}, shape(a)};
    n.attr = std::move(mask);
    n.attr.shape = ms;
    return push(std::move(n));
}

int Graph::layer_norm(int x, int gain, int bias) {
    check_id(x); check_id(gain); check_id(bias);
    CHECK2(node_rows(gain) == 1 && node_cols(gain) == node_cols(x), "layer_norm: gain must be 1 x C");
    CHECK2(node_rows(bias) == 1 && node_cols(bias) == node_cols(x), "layer_norm: bias must be 1 x C");
    return push({Op::LayerNorm, "", {x, gain, bias}, shape(x)});
}

int Graph::sum_all(int a) { check_id(a); return push({Op::SumAll, "", {a}, {1, 1}}); }

#undef CHECK2

namespace {

std::string node_desc(const Graph& g, int id) {
    const Node& n = g.nodes[static_cast<size_t>(id)];
    std::string d = std::string(op_name(n.op)) + "#" + std::to_string(id);
    if (!n.name.empty()) d += "(" + n.name + ")";
    return d;
}

void forward_one(const Graph& g, int id, const Bindings& bindings, Values& vals) {
    const Node& n = g.nodes[static_cast<size_t>(id)];
    auto in = [&](int k) -> const Tensor& { return vals[static_cast<size_t>(n.in[static_cast<size_t>(k)])]; };
    Tensor out;
    switch (n.op) {
        case Op::Input: {
            auto it = bindings.find(n.name);
            if (it == bindings.end())
                throw GraphError(id, "evaluate: unbound leaf " + node_desc(g, id));
            out = it->second;
            if (as2d(out.shape) != n.shape)
                throw GraphError(id, "evaluate: leaf " + n.name + " bound with shape " +
                                         shape_str(out.shape) + ", declared " + shape_str(n.shape));
            out.shape = n.shape;
            break;
        }
        case Op::Const: out = n.attr; break;
        case Op::Add: {
            out = in(0);
            out.add_(in(1));
            break;
        }
        case Op::Sub: {
            out = in(0);
            for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= in(1).v[i];
            break;
        }
        case Op::Mul: {
            out = in(0);
            for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= in(1).v[i];
            break;
        }
        case Op::Scale: {
            out = in(0);
            out.scale_(n.scalar);
            break;
        }
        case Op::AddRow: {
            out = in(0);
            int64_t r = n.shape[0], c = n.shape[1];
            const Tensor& row = in(1);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) out.at(i, j) += row.v[static_cast<size_t>(j)];
            break;
        }
        case Op::MatMul: out = mm(in(0), in(1)); break;
        case Op::MatMulNT: out = mm_nt(in(0), in(1)); break;
        case Op::Slice: {
            out = Tensor({n.shape[0], n.shape[1]});
            const Tensor& x = in(0);
            for (int64_t i = n.r0; i < n.r1; ++i)
                for (int64_t j = n.c0; j < n.c1; ++j) out.at(i - n.r0, j - n.c0) = x.at(i, j);
            break;
        }
        case Op::Concat0: {
            out = Tensor(n.shape);
            int64_t r = 0;
            for (size_t k = 0; k < n.in.size(); ++k) {
                const Tensor& x = in(static_cast<int>(k));
                std::copy(x.v.begin(), x.v.end(), out.v.begin() + r * n.shape[1]);
                r += x.shape[0];
            }
            break;
        }
        case Op::Concat1: {
            out = Tensor(n.shape);
            int64_t c = 0;
            for (size_t k = 0; k < n.in.size(); ++k) {
                const Tensor& x = in(static_cast<int>(k));
                for (int64_t i = 0; i < x.shape[0]; ++i)
                    for (int64_t j = 0; j < x.shape[1]; ++j) out.at(i, c + j) = x.at(i, j);
                c += x.shape[1];
            }
            break;
        }
        case Op::Reshape: {
            out = in(0);
            out.shape = n.shape;
            break;
        }
        case Op::FrontPad: {
            out = Tensor(n.shape);
            const Tensor& x = in(0);
            int64_t c = n.shape[1];
            for (int64_t i = 0; i < n.width; ++i)
                for (int64_t j = 0; j < c; ++j) out.at(i, j) = x.at(0, j);
            for (int64_t i = 0; i < x.shape[0]; ++i)
                for (int64_t j = 0; j < c; ++j) out.at(n.width + i, j) = x.at(i, j);
            break;
        }
        case Op::Unfold: {
            const Tensor& x = in(0);
            int64_t t_len = x.shape[0], f = x.shape[1], w = n.width;
            out = Tensor(n.shape);
            for (int64_t t = 0; t < t_len; ++t)
                for (int64_t k = 0; k < w; ++k) {
                    int64_t src = std::max<int64_t>(0, t - w + 1 + k);
                    for (int64_t j = 0; j < f; ++j) out.at(t, k * f + j) = x.at(src, j);
                }
            break;
        }
        case Op::Exp: {
            out = in(0);
            for (double& x : out.v) x = std::exp(x);
            break;
        }
        case Op::Log: {
            out = in(0);
            for (double& x : out.v) x = std::log(x);
            break;
        }
        case Op::Sigmoid: {
            out = in(0);
            for (double& x : out.v) x = sigmoid_f(x);
            break;
        }
        case Op::Tanh: {
            out = in(0);
            for (double& x : out.v) x = std::tanh(x);
            break;
        }
        case Op::Relu: {
            out = in(0);
            for (double& x : out.v) x = x > 0 ? x : 0.0;
            break;
        }
        case Op::Gelu: {
            out = in(0);
            for (double& x : out.v) x = gelu_f(x);
            break;
        }
        case Op::Softplus: {
            out = in(0);
            for (double& x : out.v) x = softplus_f(x);
            break;
        }
        case Op::SoftmaxMasked: {
            const Tensor& x = in(0);
            const Tensor& mask = n.attr;
            int64_t r = x.shape[0], c = x.shape[1];
            out = Tensor(n.shape);
            for (int64_t i = 0; i < r; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < c; ++j) {
                    double m = mask.at(i, j);
                    if (m == -std::numeric_limits<double>::infinity()) continue;
                    mx = std::max(mx, x.at(i, j) + m);
                }
                if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row -> zeros
                double z = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    double m = mask.at(i, j);
                    if (m == -std::numeric_limits<double>::infinity()) continue;
                    double e = std::exp(x.at(i, j) + m - mx);
                    out.at(i, j) = e;
                    z += e;
                }
                for (int64_t j = 0; j < c; ++j) out.at(i, j) /= z;
            }
            break;
        }
        case Op::LayerNorm: {
            const Tensor& x = in(0);
            const Tensor& gain = in(1);
            const Tensor& bias = in(2);
            int64_t r = x.shape[0], c = x.shape[1];
            out = Tensor(n.shape);
            for (int64_t i = 0; i < r; ++i) {
                double mu = 0.0;
                for (int64_t j = 0; j < c; ++j) mu += x.at(i, j);
                mu /= static_cast<double>(c);
                double var = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    double d = x.at(i, j) - mu;
                    var += d * d;
                }
                var /= static_cast<double>(c);
                double inv = 1.0 / std::sqrt(var + kLnEps);
                for (int64_t j = 0; j < c; ++j)
                    out.at(i, j) = gain.v[static_cast<size_t>(j)] * (x.at(i, j) - mu) * inv +
                                   bias.v[static_cast<size_t>(j)];
            }
            break;
        }
        case Op::SumAll: out = Tensor::scalar(in(0).sum()); break;
    }
    if (!out.all_finite())
        throw GraphError(id, "evaluate: non-finite value produced by " + node_desc(g, id));
    vals[static_cast<size_t>(id)] = std::move(out);
}

enum class BackMode { Gradient, DeepLift };

// shared reverse sweep; in DeepLift mode `vb` holds baseline forward values
std::map<std::string, Tensor> backward(const Graph& g, const Values& vx, const Values* vb,
                                       int out, const Tensor* seed, BackMode mode) {
    if (out < 0 || out >= static_cast<int>(g.nodes.size()))
        throw std::invalid_argument("gradient: bad output node");
    const Node& on = g.nodes[static_cast<size_t>(out)];
    if (!seed && (on.shape[0] != 1 || on.shape[1] != 1))
        throw std::invalid_argument(
            "gradient: selected output " + node_desc(g, out) + " has shape " + shape_str(on.shape) +
            "; it must be scalar or a projection seed must be supplied");
    if (seed && as2d(seed->shape) != on.shape)
        throw std::invalid_argument("gradient: seed shape mismatch");

    std::vector<Tensor> adj(g.nodes.size());
    std::vector<bool> active(g.nodes.size(), false);
    adj[static_cast<size_t>(out)] = seed ? *seed : Tensor::scalar(1.0);
    adj[static_cast<size_t>(out)].shape = on.shape;
    active[static_cast<size_t>(out)] = true;

    auto accum = [&](int id, Tensor grad) {
        if (!active[static_cast<size_t>(id)]) {
            active[static_cast<size_t>(id)] = true;
            adj[static_cast<size_t>(id)] = std::move(grad);
        } else {
            adj[static_cast<size_t>(id)].add_(grad);
        }
    };

    for (int id = out; id >= 0; --id) {
        if (!active[static_cast<size_t>(id)]) continue;
        const Node& n = g.nodes[static_cast<size_t>(id)];
        const Tensor& go = adj[static_cast<size_t>(id)];
        auto xin = [&](int k) -> const Tensor& { return vx[static_cast<size_t>(n.in[static_cast<size_t>(k)])]; };
        auto bin = [&](int k) -> const Tensor& { return (*vb)[static_cast<size_t>(n.in[static_cast<size_t>(k)])]; };

        // elementwise chain with DeepLift rescale fallback
        auto elementwise = [&](auto deriv, auto fwd) {
            const Tensor& x = xin(0);
            Tensor gi = go;
            if (mode == BackMode::DeepLift) {
                const Tensor& xb = bin(0);
                for (size_t i = 0; i < gi.v.size(); ++i) {
                    double din = x.v[i] - xb.v[i];
                    double scale = std::fabs(din) < 1e-7 ? deriv(x.v[i])
                                                        : (fwd(x.v[i]) - fwd(xb.v[i])) / din;
                    gi.v[i] *= scale;
                }
            } else {
                for (size_t i = 0; i < gi.v.size(); ++i) gi.v[i] *= deriv(x.v[i]);
            }
            accum(n.in[0], std::move(gi));
        };

        switch (n.op) {
            case Op::Input:
            case Op::Const: break;
            case Op::Add:
                accum(n.in[0], go);
                accum(n.in[1], go);
                break;
            case Op::Sub: {
                accum(n.in[0], go);
                Tensor gneg = go;
                gneg.scale_(-1.0);
                accum(n.in[1], std::move(gneg));
                break;
            }
            case Op::Mul: {
                // gradient-at-input rule in both modes
                Tensor ga = go, gb = go;
                const Tensor& a = xin(0);
                const Tensor& b = xin(1);
                for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] *= b.v[i];
                for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] *= a.v[i];
                accum(n.in[0], std::move(ga));
                accum(n.in[1], std::move(gb));
                break;
            }
            case Op::Scale: {
                Tensor gi = go;
                gi.scale_(n.scalar);
                accum(n.in[0], std::move(gi));
                break;
            }
            case Op::AddRow: {
                accum(n.in[0], go);
                Tensor gr({1, n.shape[1]});
                for (int64_t i = 0; i < n.shape[0]; ++i)
                    for (int64_t j = 0; j < n.shape[1]; ++j)
                        gr.v[static_cast<size_t>(j)] += go.at(i, j);
                accum(n.in[1], std::move(gr));
                break;
            }
            case Op::MatMul:
                accum(n.in[0], mm_nt(go, xin(1)));
                accum(n.in[1], mm_tn(xin(0), go));
                break;
            case Op::MatMulNT:
                accum(n.in[0], mm(go, xin(1)));
                accum(n.in[1], mm_tn(go, xin(0)));
                break;
            case Op::Slice: {
                Tensor gi(g.shape(n.in[0]));
                for (int64_t i = n.r0; i < n.r1; ++i)
                    for (int64_t j = n.c0; j < n.c1; ++j) gi.at(i, j) = go.at(i - n.r0, j - n.c0);
                accum(n.in[0], std::move(gi));
                break;
            }
            case Op::Concat0: {
                int64_t r = 0;
                for (size_t k = 0; k < n.in.size(); ++k) {
                    const auto& ishape = g.shape(n.in[k]);
                    Tensor gi(ishape);
                    std::copy(go.v.begin() + r * n.shape[1],
                              go.v.begin() + (r + ishape[0]) * n.shape[1], gi.v.begin());
                    r += ishape[0];
                    accum(n.in[k], std::move(gi));
                }
                break;
            }
            case Op::Concat1: {
                int64_t c = 0;
                for (size_t k = 0; k < n.in.size(); ++k) {
                    const auto& ishape = g.shape(n.in[k]);
                    Tensor gi(ishape);
                    for (int64_t i = 0; i < ishape[0]; ++i)
                        for (int64_t j = 0; j < ishape[1]; ++j) gi.at(i, j) = go.at(i, c + j);
                    c += ishape[1];
                    accum(n.in[k], std::move(gi));
                }
                break;
            }
            case Op::Reshape: {
                Tensor gi = go;
                gi.shape = g.shape(n.in[0]);
                accum(n.in[0], std::move(gi));
                break;
            }
            case Op::FrontPad: {
                Tensor gi(g.shape(n.in[0]));
                int64_t c = n.shape[1];
                for (int64_t i = 0; i < n.width; ++i)
                    for (int64_t j = 0; j < c; ++j) gi.at(0, j) += go.at(i, j);
                for (int64_t i = 0; i < gi.shape[0]; ++i)
                    for (int64_t j = 0; j < c; ++j) gi.at(i, j) += go.at(n.width + i, j);
                accum(n.in[0], std::move(gi));
                break;
            }
            case Op::Unfold: {
                Tensor gi(g.shape(n.in[0]));
                int64_t t_len = gi.shape[0], f = gi.shape[1], w = n.width;
                for (int64_t t = 0; t < t_len; ++t)
                    for (int64_t k = 0; k < w; ++k) {
                        int64_t src = std::max<int64_t>(0, t - w + 1 + k);
                        for (int64_t j = 0; j < f; ++j) gi.at(src, j) += go.at(t, k * f + j);
                    }
                accum(n.in[0], std::move(gi));
                break;
            }
            case Op::Exp:
                elementwise([](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
                break;
            case Op::Log:
                elementwise([](double x) { return 1.0 / x; }, [](double x) { return std::log(x); });
                break;
            case Op::Sigmoid:
                elementwise([](double x) { double s = sigmoid_f(x); return s * (1 - s); }, sigmoid_f);
                break;
            case Op::Tanh:
                elementwise([](double x) { double t = std::tanh(x); return 1 - t * t; },
                            [](double x) { return std::tanh(x); });
                break;
            case Op::Relu:
                elementwise([](double x) { return x > 0 ? 1.0 : 0.0; },
                            [](double x) { return x > 0 ? x : 0.0; });
                break;
            case Op::Gelu: elementwise(gelu_df, gelu_f); break;
            case Op::Softplus: elementwise(sigmoid_f, softplus_f); break;
            case Op::SoftmaxMasked: {
                // Jacobian at the input in both modes (linear-approximation rule)
                const Tensor& y = vx[static_cast<size_t>(id)];
                int64_t r = n.shape[0], c = n.shape[1];
                Tensor gi({r, c});
                for (int64_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < c; ++j) dot += go.at(i, j) * y.at(i, j);
                    for (int64_t j = 0; j < c; ++j) gi.at(i, j) = y.at(i, j) * (go.at(i, j) - dot);
                }
                accum(n.in[0], std::move(gi));
                break;
            }
            case Op::LayerNorm: {
                const Tensor& x = xin(0);
                const Tensor& gain = xin(1);
                int64_t r = n.shape[0], c = n.shape[1];
                Tensor gx({r, c}), gg({1, c}), gb({1, c});
                for (int64_t i = 0; i < r; ++i) {
                    double mu = 0.0;
                    for (int64_t j = 0; j < c; ++j) mu += x.at(i, j);
                    mu /= static_cast<double>(c);
                    double var = 0.0;
                    for (int64_t j = 0; j < c; ++j) {
                        double d = x.at(i, j) - mu;
                        var += d * d;
                    }
                    var /= static_cast<double>(c);
                    double inv = 1.0 / std::sqrt(var + kLnEps);
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (int64_t j = 0; j < c; ++j) {
                        double xh = (x.at(i, j) - mu) * inv;
                        double h = gain.v[static_cast<size_t>(j)] * go.at(i, j);
                        mean_h += h;
                        mean_hx += h * xh;
                        gg.v[static_cast<size_t>(j)] += go.at(i, j) * xh;
                        gb.v[static_cast<size_t>(j)] += go.at(i, j);
                    }
                    mean_h /= static_cast<double>(c);
                    mean_hx /= static_cast<double>(c);
                    for (int64_t j = 0; j < c; ++j) {
                        double xh = (x.at(i, j) - mu) * inv;
                        double h = gain.v[static_cast<size_t>(j)] * go.at(i, j);
                        gx.at(i, j) = inv * (h - mean_h - xh * mean_hx);
                    }
                }
                accum(n.in[0], std::move(gx));
                accum(n.in[1], std::move(gg));
                accum(n.in[2], std::move(gb));
                break;
            }
            case Op::SumAll: {
                Tensor gi = Tensor::full(g.shape(n.in[0]), go.v[0]);
                accum(n.in[0], std::move(gi));
                break;
            }
        }
    }

    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : g.input_ids) {
        if (active[static_cast<size_t>(id)])
            grads[name] = adj[static_cast<size_t>(id)];
        else
            grads[name] = Tensor(g.shape(id));
    }
    return grads;
}

}  // namespace

Values evaluate(const Graph& g, const Bindings& bindings) {
    Values vals(g.nodes.size());
    for (int id = 0; id < static_cast<int>(g.nodes.size()); ++id) forward_one(g, id, bindings, vals);
    return vals;
}

std::map<std::string, Tensor> gradient(const Graph& g, const Values& values, int out,
                                       const Tensor* seed) {
    return backward(g, values, nullptr, out, seed, BackMode::Gradient);
}

std::map<std::string, Tensor> deeplift_multipliers(const Graph& g, const Values& vx,
                                                   const Values& vb, int out, const Tensor* seed) {
    return backward(g, vx, &vb, out, seed, BackMode::DeepLift);
}

}  // namespace tsattr
