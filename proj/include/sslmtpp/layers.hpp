// sslmtpp/layers.hpp: parameterized layers composed by the model: dense,
// marker embedding, plain/gated recurrent cells, dropout, stacked unroll.

#pragma once

#include <string>
#include <vector>

#include "sslmtpp/graph.hpp"
#include "sslmtpp/rng.hpp"

namespace sslmtpp {

enum class Activation { none, tanh, sigmoid, softmax };

struct DenseLayer {
    ad::Parameter weight;  // [in x out]
    ad::Parameter bias;    // [out]
    Activation act = Activation::none;

    static DenseLayer create(const std::string& name, int in_dim, int out_dim,
                             Activation act, uint64_t seed);

    int in_dim() const { return weight.value.shape[0]; }
    int out_dim() const { return weight.value.shape[1]; }

    // x: [B x in] -> [B x out]
    ad::Value forward(ad::Graph& g, ad::Value x) const;
    void collect(std::vector<ad::Parameter*>& out);
};

enum class CellKind { plain, gated_lstm };

// Single recurrent cell over a combined [input, hidden] weight matrix, so
// the parameter count is exactly (in+hidden+1)*hidden for plain cells and
// 4x that for gated LSTM cells. Gate block order: input, forget, cell, out.
struct RecurrentCell {
    CellKind kind = CellKind::plain;
    int input_dim = 0;
    int hidden_dim = 0;
    ad::Parameter weight;  // [(in+hidden) x hidden*mult]
    ad::Parameter bias;    // [hidden*mult]

    static RecurrentCell create(const std::string& name, CellKind kind, int input_dim,
                                int hidden_dim, uint64_t seed);

    struct State {
        ad::Value h;
        ad::Value c;  // gated_lstm only
    };

    State initial_state(ad::Graph& g, int batch) const;
    // input: [B x input_dim] -> output hidden is the new state's h.
    State step(ad::Graph& g, ad::Value input, const State& prev) const;

    long param_count() const { return weight.numel() + bias.numel(); }
    void collect(std::vector<ad::Parameter*>& out);
};

struct EmbeddingTable {
    int num_classes = 0;
    int dim = 0;
    ad::Parameter weight;  // [M x dim]

    static EmbeddingTable create(const std::string& name, int num_classes, int dim,
                                 uint64_t seed);

    // One row per id; ids < 0 (padding) produce a zero row and receive no
    // gradient. Realized as a one-hot matmul against the table.
    ad::Value lookup(ad::Graph& g, const std::vector<int>& ids) const;
    void collect(std::vector<ad::Parameter*>& out);
};

// Inverted dropout: zero with probability rate, scale survivors by
// 1/(1-rate). Identity when not training or rate == 0. The rng stream is
// advanced once per element whenever training with rate > 0.
ad::Value dropout_apply(ad::Graph& g, ad::Value x, double rate, bool training, Rng& rng);

// Stacked unroll: layer k consumes layer k-1's full output sequence.
// steps: per-step inputs [B x input_dim]; states start at zero.
struct UnrollResult {
    // hidden[layer][t], each [B x hidden_dim(layer)]
    std::vector<std::vector<ad::Value>> hidden;
    const std::vector<ad::Value>& top() const { return hidden.back(); }
};

UnrollResult stack_unroll(ad::Graph& g, const std::vector<RecurrentCell>& cells,
                          const std::vector<ad::Value>& steps);

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init used by every layer.
Tensor uniform_init(Shape shape, int fan_in, Rng& rng);

}  // namespace sslmtpp
