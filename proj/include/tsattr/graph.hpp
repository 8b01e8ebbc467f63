#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsattr/tensor.hpp"

namespace tsattr {

// Primitive set for the compute graph. Everything is rank-2 (rows x cols);
// higher-rank data travels reshaped.
enum class Op {
    Input,
    Const,
    Add,
    Sub,
    Mul,       // elementwise, same shape
    Scale,     // multiply by compile-time scalar
    AddRow,    // (R x C) + (1 x C) broadcast
    MatMul,    // A (m x k) * B (k x n)
    MatMulNT,  // A (m x k) * B^T, B (n x k)
    Slice,     // rectangular block
    Concat0,   // stack rows
    Concat1,   // stack cols
    Reshape,
    FrontPad,  // prepend p copies of row 0
    Unfold,    // T x F -> T x (W*F) causal window, replicate-front
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Softplus,
    SoftmaxMasked,  // row softmax after adding a fixed mask (-inf allowed)
    LayerNorm,      // per-row, learned gain/bias, eps 1e-5
    SumAll,
};

const char* op_name(Op op);

struct Node {
    Op op;
    std::string name;  // leaf name, or empty
    std::vector<int> in;
    std::vector<int64_t> shape;
    double scalar = 0.0;                 // Scale
    int64_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // Slice
    int64_t width = 0;                   // FrontPad rows / Unfold window
    Tensor attr;                         // Const payload / SoftmaxMasked mask
};

struct GraphError : std::runtime_error {
    int node_id;
    GraphError(int id, const std::string& msg) : std::runtime_error(msg), node_id(id) {}
};

class Graph {
  public:
    std::vector<Node> nodes;
    std::map<std::string, int> input_ids;  // leaf name -> node id

    int input(const std::string& name, std::vector<int64_t> shape);
    int constant(Tensor t, const std::string& name = "");

    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, double c);
    int add_row(int a, int row);
    int matmul(int a, int b);
    int matmul_nt(int a, int b);
    int slice(int a, int64_t r0, int64_t r1, int64_t c0, int64_t c1);
    int rows(int a, int64_t r0, int64_t r1);
    int concat0(const std::vector<int>& xs);
    int concat1(const std::vector<int>& xs);
    int reshape(int a, std::vector<int64_t> s);
    int front_pad(int a, int64_t p);
    int unfold(int a, int64_t w);
    int exp_(int a);
    int log_(int a);
    int sigmoid(int a);
    int tanh_(int a);
    int relu(int a);
    int gelu(int a);
    int softplus(int a);
    int softmax_masked(int a, Tensor mask);
    int layer_norm(int x, int gain, int bias);
    int sum_all(int a);

    const std::vector<int64_t>& shape(int id) const { return nodes[static_cast<size_t>(id)].shape; }
    int64_t node_rows(int id) const { return shape(id)[0]; }
    int64_t node_cols(int id) const { return shape(id)[1]; }

  private:
    int push(Node n);
    void check_id(int id) const;
};

// leaf name -> tensor; every Input must be bound
using Bindings = std::map<std::string, Tensor>;
// forward value per node, indexed by node id
using Values = std::vector<Tensor>;

// Pure forward pass; rejects shape mismatches and non-finite intermediates,
// naming the offending node.
Values evaluate(const Graph& g, const Bindings& bindings);

// Reverse-mode derivatives of the selected output w.r.t. every Input leaf.
// `out` must be scalar (1x1) unless a projection seed of the output's shape
// is supplied; then the differentiated scalar is <seed, output>.
std::map<std::string, Tensor> gradient(const Graph& g, const Values& values, int out,
                                       const Tensor* seed = nullptr);

// DeepLift multipliers under the rescale rule. `vx`/`vb` are forward values
// for the input and the baseline. Elementwise nonlinearities use
// delta-out/delta-in (gradient fallback below 1e-7); linear primitives use
// their linear rule; Mul/softmax/layer-norm use the gradient-at-input
// linear approximation.
std::map<std::string, Tensor> deeplift_multipliers(const Graph& g, const Values& vx,
                                                   const Values& vb, int out,
                                                   const Tensor* seed = nullptr);

// dense helpers shared by graph internals and model code
Tensor mm(const Tensor& a, const Tensor& b);     // A*B
Tensor mm_nt(const Tensor& a, const Tensor& b);  // A*B^T
Tensor mm_tn(const Tensor& a, const Tensor& b);  // A^T*B

}  // namespace tsattr
