// sslmtpp/graph.hpp: reverse-mode autodiff on a define-by-run tape.
//
// A Graph is rebuilt for every forward pass. Nodes are appended in
// evaluation order, which is already a topological order, so the backward
// pass is a single reverse sweep that visits each node exactly once.
// Gradients accumulate additively on fan-out; leaves created from a
// Parameter flush their gradient into the parameter's persistent buffer.

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "sslmtpp/tensor.hpp"

namespace sslmtpp::ad {

// Persistent trainable tensor. grad always has the same shape as value and
// is owned by the optimizer across steps.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor val)
        : name(std::move(n)), value(std::move(val)), grad(Tensor::zeros(value.shape)) {}

    long numel() const { return value.numel(); }
    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }
};

enum class Op {
    leaf,
    add,
    sub,
    mul,
    matmul,
    tanh_fn,
    sigmoid_fn,
    log_fn,
    abs_fn,
    softmax_fn,
    concat,
    slice,
    sum_all,
    mean_all,
};

const char* op_name(Op op);

class Graph;

// Handle to a node in one specific graph. Cheap to copy.
struct Value {
    Graph* g = nullptr;
    int id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Tensor& tensor() const;
    const Shape& shape() const { return tensor().shape; }
    double scalar() const;
};

struct Node {
    Op op = Op::leaf;
    std::vector<int> in;
    Tensor val;
    Tensor grad;  // allocated lazily during backward
    bool needs_grad = false;
    Parameter* param = nullptr;  // backlink for parameter leaves
    int a0 = 0, a1 = 0;          // slice attributes
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf from a parameter; one node per parameter per graph, so weight
    // sharing across time steps accumulates into a single leaf.
    Value param(Parameter& p);

    // Leaf from plain data. Not differentiated through.
    Value constant(Tensor t);
    Value constant(double x) { return constant(Tensor::scalar(x)); }

    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value matmul(Value a, Value b);
    Value tanh(Value a);
    Value sigmoid(Value a);
    Value log(Value a);
    Value abs(Value a);
    Value softmax(Value a);               // along the trailing dimension
    Value concat(Value a, Value b);       // along the trailing dimension
    Value slice(Value a, int start, int len);  // trailing dimension range
    Value sum(Value a);                   // all elements -> scalar
    Value mean(Value a);                  // all elements -> scalar

    // Populates gradients of everything loss depends on and flushes
    // parameter-leaf gradients into Parameter::grad (additively).
    void backward(Value loss);

    const Tensor& value(Value v) const;
    const Tensor& grad(Value v) const;
    size_t size() const { return nodes_.size(); }

private:
    friend struct Value;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_nodes_;

    Value push(Node n);
    const Node& node(Value v) const;
    void check_mine(Value v, const char* what) const;
};

// Throws if any element is non-finite; used at data and loss boundaries.
void check_finite(const Tensor& t, const std::string& context);

}  // namespace sslmtpp::ad
