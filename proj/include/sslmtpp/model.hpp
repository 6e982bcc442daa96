// sslmtpp/model.hpp: the semi-supervised marked-TPP network.
//
// Two branches over the same event timing:
//   * supervised: stacked gated-LSTM over [gap feature, marker embedding]
//     per event, producing a marker/time interdependence embedding;
//   * unsupervised: plain-RNN encoder over gap features only, trained by a
//     decoder that reconstructs the gap sequence.
// The encoder's per-step state, scaled by lambda, is added to the
// supervised embedding; two dense heads predict the next event's marker
// distribution and gap. lambda == 0 short-circuits the fusion so the
// supervised path is structurally identical to a model built without the
// autoencoder.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sslmtpp/data.hpp"
#include "sslmtpp/graph.hpp"
#include "sslmtpp/layers.hpp"
#include "sslmtpp/rng.hpp"

namespace sslmtpp {

struct ModelConfig {
    int num_classes = 3;
    int marker_embed_dim = 16;
    int sup_hidden = 64;
    int sup_layers = 5;
    int enc_hidden = 32;  // inner encoder/decoder width; the top layer
                          // outputs sup_hidden so the fusion shapes match
    int enc_layers = 2;
    int head_hidden = 32;
    double dropout = 0.1;
    bool autoencoder = true;      // false: no encoder/decoder parameters exist
    bool teacher_forcing = true;  // decoder consumes true previous gaps

    bool operator==(const ModelConfig&) const = default;
    void validate() const;
};

struct SslMtppModel {
    ModelConfig cfg;
    double lambda = 0.1;  // weight of the encoder embedding in the fusion
    GapStats stats;       // training-set gap standardization

    EmbeddingTable marker_embed;
    std::vector<RecurrentCell> sup_stack;  // gated LSTM cells
    std::vector<RecurrentCell> encoder;    // plain cells
    std::vector<RecurrentCell> decoder;    // plain cells, mirrors encoder dims
    DenseLayer decoder_out;                // [sup_hidden -> 1]
    DenseLayer marker_head_in, marker_head_out;  // tanh, softmax over M
    DenseLayer time_head_in, time_head_out;      // tanh, linear scalar

    // Each component's weights are drawn from a stream derived from
    // (seed, component name), so the supervised branch is initialized
    // identically whether or not the autoencoder exists.
    static SslMtppModel create(const ModelConfig& cfg, double lambda, const GapStats& stats,
                               uint64_t seed);

    // Registration order is fixed and documented by the implementation;
    // checkpoints and the optimizer both rely on it.
    std::vector<ad::Parameter*> params();
    std::vector<const ad::Parameter*> params() const;
    long param_count() const;
};

// Encoder pass over a batch's gap features.
struct EncoderOut {
    std::vector<ad::Value> steps;            // top-layer state per step [B x H]
    std::vector<ad::Value> layer_summary;    // per layer, state at each
                                             // sequence's last real step
};

EncoderOut encode_sequence(ad::Graph& g, const SslMtppModel& m, const Batch& batch);

// Supervised per-step embedding (gated-LSTM stack over [gap, marker
// embedding]); requires every real position to carry a marker. Dropout is
// applied to the top layer's steps when training.
std::vector<ad::Value> supervised_embedding(ad::Graph& g, const SslMtppModel& m,
                                            const Batch& batch, bool training,
                                            Rng* dropout_rng);

// f + lambda * e, elementwise. lambda == 0 returns f unchanged.
ad::Value fuse(ad::Graph& g, ad::Value f, ad::Value e, double lambda);

struct StepPrediction {
    ad::Value marker_probs;  // [B x M] rows on the simplex
    ad::Value next_gap;      // [B x 1] standardized units
};

StepPrediction predict_step(ad::Graph& g, const SslMtppModel& m, ad::Value fused);

// Full forward pass: supervised embedding, optional fusion, both heads.
struct ModelForward {
    std::vector<ad::Value> fused;
    std::vector<ad::Value> marker_probs;
    std::vector<ad::Value> next_gap;
};

ModelForward model_forward(ad::Graph& g, const SslMtppModel& m, const Batch& batch,
                           bool training, Rng* dropout_rng);

// Sum of squared reconstruction errors over real positions plus the count,
// so callers can average over unions of batches.
struct ReconSum {
    ad::Value sum_sq;
    long count = 0;
    std::vector<ad::Value> outputs;  // decoder output per step [B x 1]
};

ReconSum reconstruction_sum(ad::Graph& g, const SslMtppModel& m, const Batch& batch);

// Masked mean over real positions; errors when the batch has none.
ad::Value reconstruction_loss(ad::Graph& g, const SslMtppModel& m, const Batch& batch);

// Next-event losses over a fully labeled batch: masked mean cross-entropy
// over marker targets and masked mean absolute error over gap targets.
// The embedding at step j predicts event j+1; last events yield no target.
struct SupervisedLosses {
    ad::Value marker;
    ad::Value time;
    long targets = 0;
};

SupervisedLosses supervised_losses(ad::Graph& g, const SslMtppModel& m, const Batch& batch,
                                   bool training, Rng* dropout_rng);

// L = L_Time + L_Marker + L_Recon, the unweighted sum. The reconstruction
// term averages over the union of both batches' real positions; a null
// unlabeled batch means reconstruction uses the labeled times only. When
// include_recon is false (baseline mode) the term is absent entirely.
struct CompositeLoss {
    ad::Value total;
    ad::Value marker;
    ad::Value time;
    std::optional<ad::Value> recon;
};

CompositeLoss composite_loss(ad::Graph& g, const SslMtppModel& m, const Batch& labeled,
                             const Batch* unlabeled, bool include_recon, bool training,
                             Rng* dropout_rng);

}  // namespace sslmtpp
