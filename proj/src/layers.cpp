#include "sslmtpp/layers.hpp"

#include <cmath>

namespace sslmtpp {

Tensor uniform_init(Shape shape, int fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& x : t.v) x = rng.uniform(-bound, bound);
    return t;
}

DenseLayer DenseLayer::create(const std::string& name, int in_dim, int out_dim,
                              Activation act, uint64_t seed) {
    Rng rng(seed);
    DenseLayer l;
    l.weight = ad::Parameter(name + ".weight", uniform_init({in_dim, out_dim}, in_dim, rng));
    l.bias = ad::Parameter(name + ".bias", Tensor::zeros({out_dim}));
    l.act = act;
    return l;
}

ad::Value DenseLayer::forward(ad::Graph& g, ad::Value x) const {
    // Parameters are logically immutable during forward/backward; the
    // graph only wants a non-const handle to attach gradient flushing.
    auto& self = const_cast<DenseLayer&>(*this);
    ad::Value z = g.add(g.matmul(x, g.param(self.weight)), g.param(self.bias));
    switch (act) {
        case Activation::none: return z;
        case Activation::tanh: return g.tanh(z);
        case Activation::sigmoid: return g.sigmoid(z);
        case Activation::softmax: return g.softmax(z);
    }
    return z;
}

void DenseLayer::collect(std::vector<ad::Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

RecurrentCell RecurrentCell::create(const std::string& name, CellKind kind, int input_dim,
                                    int hidden_dim, uint64_t seed) {
    Rng rng(seed);
    RecurrentCell c;
    c.kind = kind;
    c.input_dim = input_dim;
    c.hidden_dim = hidden_dim;
    const int mult = kind == CellKind::gated_lstm ? 4 : 1;
    const int fan_in = input_dim + hidden_dim;
    c.weight = ad::Parameter(name + ".weight",
                             uniform_init({fan_in, hidden_dim * mult}, fan_in, rng));
    Tensor b = Tensor::zeros({hidden_dim * mult});
    if (kind == CellKind::gated_lstm) {
        // Forget-gate bias starts at 1 so early training keeps memory.
        for (int j = 0; j < hidden_dim; ++j) b.v[hidden_dim + j] = 1.0;
    }
    c.bias = ad::Parameter(name + ".bias", std::move(b));
    return c;
}

RecurrentCell::State RecurrentCell::initial_state(ad::Graph& g, int batch) const {
    State s;
    s.h = g.constant(Tensor::zeros({batch, hidden_dim}));
    if (kind == CellKind::gated_lstm) s.c = g.constant(Tensor::zeros({batch, hidden_dim}));
    return s;
}

RecurrentCell::State RecurrentCell::step(ad::Graph& g, ad::Value input,
                                         const State& prev) const {
    const Shape& in_shape = input.shape();
    if (in_shape.size() != 2 || in_shape[1] != input_dim)
        throw Error("recurrent cell expected input [B x " + std::to_string(input_dim) +
                    "], got " + shape_str(in_shape));
    if (prev.h.shape() != Shape{in_shape[0], hidden_dim})
        throw Error("recurrent cell state shape " + shape_str(prev.h.shape()) +
                    " does not match [B x " + std::to_string(hidden_dim) + "]");
    auto& self = const_cast<RecurrentCell&>(*this);
    ad::Value z = g.concat(input, prev.h);
    ad::Value pre = g.add(g.matmul(z, g.param(self.weight)), g.param(self.bias));
    State next;
    if (kind == CellKind::plain) {
        next.h = g.tanh(pre);
        return next;
    }
    const int H = hidden_dim;
    ad::Value gi = g.sigmoid(g.slice(pre, 0, H));
    ad::Value gf = g.sigmoid(g.slice(pre, H, H));
    ad::Value gc = g.tanh(g.slice(pre, 2 * H, H));
    ad::Value go = g.sigmoid(g.slice(pre, 3 * H, H));
    next.c = g.add(g.mul(gf, prev.c), g.mul(gi, gc));
    next.h = g.mul(go, g.tanh(next.c));
    return next;
}

void RecurrentCell::collect(std::vector<ad::Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

EmbeddingTable EmbeddingTable::create(const std::string& name, int num_classes, int dim,
                                      uint64_t seed) {
    Rng rng(seed);
    EmbeddingTable e;
    e.num_classes = num_classes;
    e.dim = dim;
    e.weight = ad::Parameter(name + ".weight", uniform_init({num_classes, dim}, dim, rng));
    return e;
}

ad::Value EmbeddingTable::lookup(ad::Graph& g, const std::vector<int>& ids) const {
    const int B = static_cast<int>(ids.size());
    Tensor onehot = Tensor::zeros({B, num_classes});
    for (int i = 0; i < B; ++i) {
        if (ids[i] >= num_classes)
            throw Error("embedding index " + std::to_string(ids[i]) + " out of range [0, " +
                        std::to_string(num_classes) + ")");
        if (ids[i] >= 0) onehot.v[static_cast<long>(i) * num_classes + ids[i]] = 1.0;
    }
    auto& self = const_cast<EmbeddingTable&>(*this);
    return g.matmul(g.constant(std::move(onehot)), g.param(self.weight));
}

void EmbeddingTable::collect(std::vector<ad::Parameter*>& out) { out.push_back(&weight); }

ad::Value dropout_apply(ad::Graph& g, ad::Value x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ValidationError("dropout rate must be in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    const Tensor& t = x.tensor();
    Tensor mask = Tensor::zeros(t.shape);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& m : mask.v) m = rng.uniform() < rate ? 0.0 : keep_scale;
    return g.mul(x, g.constant(std::move(mask)));
}

UnrollResult stack_unroll(ad::Graph& g, const std::vector<RecurrentCell>& cells,
                          const std::vector<ad::Value>& steps) {
    if (steps.empty()) throw Error("stack_unroll: empty sequence");
    if (cells.empty()) throw Error("stack_unroll: no cells");
    for (size_t k = 1; k < cells.size(); ++k)
        if (cells[k].input_dim != cells[k - 1].hidden_dim)
            throw Error("stack_unroll: cell " + std::to_string(k) + " input dim " +
                        std::to_string(cells[k].input_dim) + " != previous hidden dim " +
                        std::to_string(cells[k - 1].hidden_dim));
    const int batch = steps[0].shape()[0];
    UnrollResult res;
    res.hidden.resize(cells.size());
    const std::vector<ad::Value>* layer_in = &steps;
    for (size_t k = 0; k < cells.size(); ++k) {
        RecurrentCell::State st = cells[k].initial_state(g, batch);
        res.hidden[k].reserve(steps.size());
        for (const ad::Value& x : *layer_in) {
            st = cells[k].step(g, x, st);
            res.hidden[k].push_back(st.h);
        }
        layer_in = &res.hidden[k];
    }
    return res;
}

}  // namespace sslmtpp
