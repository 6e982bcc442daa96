// Reverse-mode autodiff engine. Elementwise kernels are plain loops;
// matmul forward/backward go through Eigen maps over the row-major buffers.

#include "sslmtpp/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace sslmtpp {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

long Tensor::numel_of(const Shape& s) {
    long n = 1;
    for (int d : s) {
        if (d <= 0) throw Error("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

bool all_finite(const Tensor& t) {
    for (double x : t.v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace sslmtpp

namespace sslmtpp::ad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

[[noreturn]] void shape_error(Op op, const Shape& a, const Shape& b) {
    throw Error(std::string("shape mismatch in ") + op_name(op) + ": " + shape_str(a) +
                " vs " + shape_str(b));
}

// Elementwise binary ops allow the right operand to broadcast across
// leading batch dimensions: equal shapes, a trailing-suffix shape, or a
// scalar. Returns the modulus for rhs flat indexing (0 = no broadcast).
long broadcast_mod(Op op, const Shape& a, const Shape& b, long b_numel) {
    if (a == b) return 0;
    if (b_numel == 1) return 1;
    if (b.size() < a.size() &&
        std::equal(b.begin(), b.end(), a.end() - static_cast<long>(b.size())))
        return b_numel;
    shape_error(op, a, b);
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::matmul: return "matmul";
        case Op::tanh_fn: return "tanh";
        case Op::sigmoid_fn: return "sigmoid";
        case Op::log_fn: return "log";
        case Op::abs_fn: return "abs";
        case Op::softmax_fn: return "softmax";
        case Op::concat: return "concat";
        case Op::slice: return "slice";
        case Op::sum_all: return "sum";
        case Op::mean_all: return "mean";
    }
    return "?";
}

void check_finite(const Tensor& t, const std::string& context) {
    if (!all_finite(t)) throw Error("non-finite value in " + context);
}

const Tensor& Value::tensor() const {
    if (!valid()) throw Error("use of detached tensor handle");
    return g->value(*this);
}

double Value::scalar() const {
    const Tensor& t = tensor();
    if (t.numel() != 1) throw Error("scalar() on tensor of shape " + shape_str(t.shape));
    return t.v[0];
}

Value Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

const Node& Graph::node(Value v) const { return nodes_[v.id]; }

void Graph::check_mine(Value v, const char* what) const {
    if (v.g != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw Error(std::string("detached tensor passed to ") + what);
}

const Tensor& Graph::value(Value v) const {
    check_mine(v, "value");
    return nodes_[v.id].val;
}

const Tensor& Graph::grad(Value v) const {
    check_mine(v, "grad");
    const Node& n = nodes_[v.id];
    if (n.grad.v.empty()) throw Error("gradient not populated; run backward first");
    return n.grad;
}

Value Graph::param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Value{this, it->second};
    check_finite(p.value, "parameter " + p.name);
    Node n;
    n.op = Op::leaf;
    n.val = p.value;
    n.needs_grad = true;
    n.param = &p;
    Value v = push(std::move(n));
    param_nodes_[&p] = v.id;
    return v;
}

Value Graph::constant(Tensor t) {
    check_finite(t, "constant input");
    Node n;
    n.op = Op::leaf;
    n.val = std::move(t);
    return push(std::move(n));
}

Value Graph::add(Value a, Value b) {
    check_mine(a, "add");
    check_mine(b, "add");
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    long mod = broadcast_mod(Op::add, ta.shape, tb.shape, tb.numel());
    Node n;
    n.op = Op::add;
    n.in = {a.id, b.id};
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = Tensor::zeros(ta.shape);
    const long m = ta.numel();
    for (long i = 0; i < m; ++i)
        n.val.v[i] = ta.v[i] + (mod ? tb.v[i % mod] : tb.v[i]);
    return push(std::move(n));
}

Value Graph::sub(Value a, Value b) {
    check_mine(a, "sub");
    check_mine(b, "sub");
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    long mod = broadcast_mod(Op::sub, ta.shape, tb.shape, tb.numel());
    Node n;
    n.op = Op::sub;
    n.in = {a.id, b.id};
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = Tensor::zeros(ta.shape);
    const long m = ta.numel();
    for (long i = 0; i < m; ++i)
        n.val.v[i] = ta.v[i] - (mod ? tb.v[i % mod] : tb.v[i]);
    return push(std::move(n));
}

Value Graph::mul(Value a, Value b) {
    check_mine(a, "mul");
    check_mine(b, "mul");
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    long mod = broadcast_mod(Op::mul, ta.shape, tb.shape, tb.numel());
    Node n;
    n.op = Op::mul;
    n.in = {a.id, b.id};
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = Tensor::zeros(ta.shape);
    const long m = ta.numel();
    for (long i = 0; i < m; ++i)
        n.val.v[i] = ta.v[i] * (mod ? tb.v[i % mod] : tb.v[i]);
    return push(std::move(n));
}

Value Graph::matmul(Value a, Value b) {
    check_mine(a, "matmul");
    check_mine(b, "matmul");
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
        shape_error(Op::matmul, ta.shape, tb.shape);
    const int m = ta.shape[0], k = ta.shape[1], p = tb.shape[1];
    Node n;
    n.op = Op::matmul;
    n.in = {a.id, b.id};
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = Tensor::zeros({m, p});
    CMapM A(ta.v.data(), m, k);
    CMapM B(tb.v.data(), k, p);
    MapM C(n.val.v.data(), m, p);
    C.noalias() = A * B;
    return push(std::move(n));
}

Value Graph::tanh(Value a) {
    check_mine(a, "tanh");
    Node n;
    n.op = Op::tanh_fn;
    n.in = {a.id};
    n.needs_grad = node(a).needs_grad;
    n.val = node(a).val;
    for (double& x : n.val.v) x = std::tanh(x);
    return push(std::move(n));
}

Value Graph::sigmoid(Value a) {
    check_mine(a, "sigmoid");
    Node n;
    n.op = Op::sigmoid_fn;
    n.in = {a.id};
    n.needs_grad = node(a).needs_grad;
    n.val = node(a).val;
    for (double& x : n.val.v) x = stable_sigmoid(x);
    return push(std::move(n));
}

Value Graph::log(Value a) {
    check_mine(a, "log");
    Node n;
    n.op = Op::log_fn;
    n.in = {a.id};
    n.needs_grad = node(a).needs_grad;
    n.val = node(a).val;
    for (double& x : n.val.v) x = std::log(x);
    return push(std::move(n));
}

Value Graph::abs(Value a) {
    check_mine(a, "abs");
    Node n;
    n.op = Op::abs_fn;
    n.in = {a.id};
    n.needs_grad = node(a).needs_grad;
    n.val = node(a).val;
    for (double& x : n.val.v) x = std::fabs(x);
    return push(std::move(n));
}

Value Graph::softmax(Value a) {
    check_mine(a, "softmax");
    const Tensor& ta = node(a).val;
    Node n;
    n.op = Op::softmax_fn;
    n.in = {a.id};
    n.needs_grad = node(a).needs_grad;
    n.val = ta;
    const int len = ta.row_len();
    const long rows = ta.row_count();
    for (long r = 0; r < rows; ++r) {
        double* row = n.val.v.data() + r * len;
        double mx = row[0];
        for (int j = 1; j < len; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < len; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (int j = 0; j < len; ++j) row[j] /= z;
    }
    return push(std::move(n));
}

Value Graph::concat(Value a, Value b) {
    check_mine(a, "concat");
    check_mine(b, "concat");
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    if (ta.rank() != tb.rank() || ta.rank() < 1 ||
        !std::equal(ta.shape.begin(), ta.shape.end() - 1, tb.shape.begin()))
        shape_error(Op::concat, ta.shape, tb.shape);
    Shape out = ta.shape;
    out.back() += tb.shape.back();
    Node n;
    n.op = Op::concat;
    n.in = {a.id, b.id};
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = Tensor::zeros(out);
    const int la = ta.row_len(), lb = tb.row_len();
    const long rows = ta.row_count();
    for (long r = 0; r < rows; ++r) {
        std::copy_n(ta.v.data() + r * la, la, n.val.v.data() + r * (la + lb));
        std::copy_n(tb.v.data() + r * lb, lb, n.val.v.data() + r * (la + lb) + la);
    }
    return push(std::move(n));
}

Value Graph::slice(Value a, int start, int len) {
    check_mine(a, "slice");
    const Tensor& ta = node(a).val;
    if (ta.rank() < 1 || start < 0 || len <= 0 || start + len > ta.shape.back())
        throw Error("slice range [" + std::to_string(start) + ", " +
                    std::to_string(start + len) + ") out of bounds for shape " +
                    shape_str(ta.shape));
    Shape out = ta.shape;
    out.back() = len;
    Node n;
    n.op = Op::slice;
    n.in = {a.id};
    n.needs_grad = node(a).needs_grad;
    n.a0 = start;
    n.a1 = len;
    n.val = Tensor::zeros(out);
    const int la = ta.row_len();
    const long rows = ta.row_count();
    for (long r = 0; r < rows; ++r)
        std::copy_n(ta.v.data() + r * la + start, len, n.val.v.data() + r * len);
    return push(std::move(n));
}

Value Graph::sum(Value a) {
    check_mine(a, "sum");
    const Tensor& ta = node(a).val;
    Node n;
    n.op = Op::sum_all;
    n.in = {a.id};
    n.needs_grad = node(a).needs_grad;
    double acc = 0.0;
    for (double x : ta.v) acc += x;
    n.val = Tensor::scalar(acc);
    return push(std::move(n));
}

Value Graph::mean(Value a) {
    check_mine(a, "mean");
    const Tensor& ta = node(a).val;
    Node n;
    n.op = Op::mean_all;
    n.in = {a.id};
    n.needs_grad = node(a).needs_grad;
    double acc = 0.0;
    for (double x : ta.v) acc += x;
    n.val = Tensor::scalar(acc / static_cast<double>(ta.numel()));
    return push(std::move(n));
}

void Graph::backward(Value loss) {
    check_mine(loss, "backward");
    Node& top = nodes_[loss.id];
    if (top.val.numel() != 1)
        throw Error("backward requires a scalar loss, got shape " + shape_str(top.val.shape));
    check_finite(top.val, "loss");
    if (!top.needs_grad) return;  // nothing trainable upstream

    auto ensure_grad = [](Node& n) {
        if (n.grad.v.empty()) n.grad = Tensor::zeros(n.val.shape);
    };
    ensure_grad(top);
    top.grad.v[0] += 1.0;

    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.needs_grad || n.grad.v.empty()) continue;
        const std::vector<double>& g = n.grad.v;
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::add:
            case Op::sub: {
                Node& a = nodes_[n.in[0]];
                Node& b = nodes_[n.in[1]];
                const double sb = n.op == Op::sub ? -1.0 : 1.0;
                if (a.needs_grad) {
                    ensure_grad(a);
                    for (size_t i = 0; i < g.size(); ++i) a.grad.v[i] += g[i];
                }
                if (b.needs_grad) {
                    ensure_grad(b);
                    const long mod = broadcast_mod(n.op, a.val.shape, b.val.shape, b.val.numel());
                    for (size_t i = 0; i < g.size(); ++i)
                        b.grad.v[mod ? i % mod : i] += sb * g[i];
                }
                break;
            }
            case Op::mul: {
                Node& a = nodes_[n.in[0]];
                Node& b = nodes_[n.in[1]];
                const long mod = broadcast_mod(Op::mul, a.val.shape, b.val.shape, b.val.numel());
                if (a.needs_grad) {
                    ensure_grad(a);
                    for (size_t i = 0; i < g.size(); ++i)
                        a.grad.v[i] += g[i] * (mod ? b.val.v[i % mod] : b.val.v[i]);
                }
                if (b.needs_grad) {
                    ensure_grad(b);
                    for (size_t i = 0; i < g.size(); ++i)
                        b.grad.v[mod ? i % mod : i] += g[i] * a.val.v[i];
                }
                break;
            }
            case Op::matmul: {
                Node& a = nodes_[n.in[0]];
                Node& b = nodes_[n.in[1]];
                const int m = a.val.shape[0], k = a.val.shape[1], p = b.val.shape[1];
                CMapM G(g.data(), m, p);
                if (a.needs_grad) {
                    ensure_grad(a);
                    CMapM B(b.val.v.data(), k, p);
                    MapM dA(a.grad.v.data(), m, k);
                    dA.noalias() += G * B.transpose();
                }
                if (b.needs_grad) {
                    ensure_grad(b);
                    CMapM A(a.val.v.data(), m, k);
                    MapM dB(b.grad.v.data(), k, p);
                    dB.noalias() += A.transpose() * G;
                }
                break;
            }
            case Op::tanh_fn: {
                Node& a = nodes_[n.in[0]];
                if (!a.needs_grad) break;
                ensure_grad(a);
                for (size_t i = 0; i < g.size(); ++i)
                    a.grad.v[i] += g[i] * (1.0 - n.val.v[i] * n.val.v[i]);
                break;
            }
            case Op::sigmoid_fn: {
                Node& a = nodes_[n.in[0]];
                if (!a.needs_grad) break;
                ensure_grad(a);
                for (size_t i = 0; i < g.size(); ++i)
                    a.grad.v[i] += g[i] * n.val.v[i] * (1.0 - n.val.v[i]);
                break;
            }
            case Op::log_fn: {
                Node& a = nodes_[n.in[0]];
                if (!a.needs_grad) break;
                ensure_grad(a);
                for (size_t i = 0; i < g.size(); ++i) a.grad.v[i] += g[i] / a.val.v[i];
                break;
            }
            case Op::abs_fn: {
                Node& a = nodes_[n.in[0]];
                if (!a.needs_grad) break;
                ensure_grad(a);
                for (size_t i = 0; i < g.size(); ++i) {
                    double s = a.val.v[i] > 0.0 ? 1.0 : (a.val.v[i] < 0.0 ? -1.0 : 0.0);
                    a.grad.v[i] += g[i] * s;
                }
                break;
            }
            case Op::softmax_fn: {
                Node& a = nodes_[n.in[0]];
                if (!a.needs_grad) break;
                ensure_grad(a);
                const int len = n.val.row_len();
                const long rows = n.val.row_count();
                for (long r = 0; r < rows; ++r) {
                    const double* p = n.val.v.data() + r * len;
                    const double* gr = g.data() + r * len;
                    double dot = 0.0;
                    for (int j = 0; j < len; ++j) dot += p[j] * gr[j];
                    double* da = a.grad.v.data() + r * len;
                    for (int j = 0; j < len; ++j) da[j] += p[j] * (gr[j] - dot);
                }
                break;
            }
            case Op::concat: {
                Node& a = nodes_[n.in[0]];
                Node& b = nodes_[n.in[1]];
                const int la = a.val.row_len(), lb = b.val.row_len();
                const long rows = a.val.row_count();
                if (a.needs_grad) {
                    ensure_grad(a);
                    for (long r = 0; r < rows; ++r)
                        for (int j = 0; j < la; ++j)
                            a.grad.v[r * la + j] += g[r * (la + lb) + j];
                }
                if (b.needs_grad) {
                    ensure_grad(b);
                    for (long r = 0; r < rows; ++r)
                        for (int j = 0; j < lb; ++j)
                            b.grad.v[r * lb + j] += g[r * (la + lb) + la + j];
                }
                break;
            }
            case Op::slice: {
                Node& a = nodes_[n.in[0]];
                if (!a.needs_grad) break;
                ensure_grad(a);
                const int la = a.val.row_len();
                const long rows = a.val.row_count();
                for (long r = 0; r < rows; ++r)
                    for (int j = 0; j < n.a1; ++j)
                        a.grad.v[r * la + n.a0 + j] += g[r * n.a1 + j];
                break;
            }
            case Op::sum_all: {
                Node& a = nodes_[n.in[0]];
                if (!a.needs_grad) break;
                ensure_grad(a);
                for (double& x : a.grad.v) x += g[0];
                break;
            }
            case Op::mean_all: {
                Node& a = nodes_[n.in[0]];
                if (!a.needs_grad) break;
                ensure_grad(a);
                const double s = g[0] / static_cast<double>(a.val.numel());
                for (double& x : a.grad.v) x += s;
                break;
            }
        }
    }

    for (auto& [p, id] : param_nodes_) {
        Node& n = nodes_[id];
        if (n.grad.v.empty()) continue;
        Parameter* prm = n.param;
        for (long i = 0; i < prm->numel(); ++i) prm->grad.v[i] += n.grad.v[i];
    }
}

}  // namespace sslmtpp::ad
