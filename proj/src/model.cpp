#include "sslmtpp/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace sslmtpp {

namespace {

// Floor inside the cross-entropy log; keeps log(p) finite if a softmax
// output underflows to zero.
constexpr double kLogEps = 1e-12;

// [B x 1] column of the standardized gap features at step t.
ad::Value dt_column(ad::Graph& g, const Batch& b, int t) {
    Tensor col = Tensor::zeros({b.batch, 1});
    for (int i = 0; i < b.batch; ++i) col.v[i] = b.dt[b.idx(i, t)];
    return g.constant(std::move(col));
}

ad::Value mask_column(ad::Graph& g, const Batch& b, int t) {
    Tensor col = Tensor::zeros({b.batch, 1});
    for (int i = 0; i < b.batch; ++i) col.v[i] = b.mask[b.idx(i, t)] ? 1.0 : 0.0;
    return g.constant(std::move(col));
}

// Last real step index per row (length - 1).
std::vector<int> last_real_step(const Batch& b) {
    std::vector<int> last(b.batch, -1);
    for (int i = 0; i < b.batch; ++i)
        for (int t = 0; t < b.max_len; ++t)
            if (b.mask[b.idx(i, t)]) last[i] = t;
    return last;
}

std::vector<int> encoder_layer_dims(const ModelConfig& cfg) {
    // Inner layers use the bottleneck width; the top layer must match the
    // supervised embedding for the fusion sum.
    std::vector<int> dims;
    for (int k = 0; k + 1 < cfg.enc_layers; ++k) dims.push_back(cfg.enc_hidden);
    dims.push_back(cfg.sup_hidden);
    return dims;
}

}  // namespace

void ModelConfig::validate() const {
    if (num_classes < 1) throw ValidationError("model: num_classes must be >= 1");
    if (marker_embed_dim < 1) throw ValidationError("model: marker_embed_dim must be >= 1");
    if (sup_hidden < 1 || enc_hidden < 1 || head_hidden < 1)
        throw ValidationError("model: hidden sizes must be >= 1");
    if (sup_layers < 1 || enc_layers < 1)
        throw ValidationError("model: layer counts must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0)
        throw ValidationError("model: dropout must be in [0, 1)");
}

SslMtppModel SslMtppModel::create(const ModelConfig& cfg, double lambda,
                                  const GapStats& stats, uint64_t seed) {
    cfg.validate();
    if (lambda < 0.0) throw ValidationError("model: lambda must be >= 0");
    SslMtppModel m;
    m.cfg = cfg;
    m.lambda = lambda;
    m.stats = stats;

    m.marker_embed = EmbeddingTable::create("marker_embed", cfg.num_classes,
                                            cfg.marker_embed_dim,
                                            mix_seed(seed, "marker_embed"));

    const int sup_in = 1 + cfg.marker_embed_dim;
    for (int k = 0; k < cfg.sup_layers; ++k) {
        std::string name = "sup_lstm_" + std::to_string(k);
        m.sup_stack.push_back(RecurrentCell::create(name, CellKind::gated_lstm,
                                                    k == 0 ? sup_in : cfg.sup_hidden,
                                                    cfg.sup_hidden, mix_seed(seed, name)));
    }

    if (cfg.autoencoder) {
        std::vector<int> dims = encoder_layer_dims(cfg);
        int in = 1;
        for (int k = 0; k < cfg.enc_layers; ++k) {
            std::string name = "encoder_" + std::to_string(k);
            m.encoder.push_back(RecurrentCell::create(name, CellKind::plain, in, dims[k],
                                                      mix_seed(seed, name)));
            in = dims[k];
        }
        in = 1;
        for (int k = 0; k < cfg.enc_layers; ++k) {
            std::string name = "decoder_" + std::to_string(k);
            m.decoder.push_back(RecurrentCell::create(name, CellKind::plain, in, dims[k],
                                                      mix_seed(seed, name)));
            in = dims[k];
        }
        m.decoder_out = DenseLayer::create("decoder_out", cfg.sup_hidden, 1,
                                           Activation::none, mix_seed(seed, "decoder_out"));
    }

    m.marker_head_in = DenseLayer::create("marker_head_in", cfg.sup_hidden, cfg.head_hidden,
                                          Activation::tanh, mix_seed(seed, "marker_head_in"));
    m.marker_head_out =
        DenseLayer::create("marker_head_out", cfg.head_hidden, cfg.num_classes,
                           Activation::softmax, mix_seed(seed, "marker_head_out"));
    m.time_head_in = DenseLayer::create("time_head_in", cfg.sup_hidden, cfg.head_hidden,
                                        Activation::tanh, mix_seed(seed, "time_head_in"));
    m.time_head_out = DenseLayer::create("time_head_out", cfg.head_hidden, 1,
                                         Activation::none, mix_seed(seed, "time_head_out"));
    return m;
}

std::vector<ad::Parameter*> SslMtppModel::params() {
    std::vector<ad::Parameter*> out;
    marker_embed.collect(out);
    for (auto& c : sup_stack) c.collect(out);
    for (auto& c : encoder) c.collect(out);
    for (auto& c : decoder) c.collect(out);
    if (cfg.autoencoder) decoder_out.collect(out);
    marker_head_in.collect(out);
    marker_head_out.collect(out);
    time_head_in.collect(out);
    time_head_out.collect(out);
    return out;
}

std::vector<const ad::Parameter*> SslMtppModel::params() const {
    auto mut = const_cast<SslMtppModel*>(this)->params();
    return {mut.begin(), mut.end()};
}

long SslMtppModel::param_count() const {
    long n = 0;
    for (const ad::Parameter* p : params()) n += p->numel();
    return n;
}

EncoderOut encode_sequence(ad::Graph& g, const SslMtppModel& m, const Batch& batch) {
    if (!m.cfg.autoencoder) throw Error("model was built without the autoencoder");
    if (batch.max_len == 0) throw Error("encode_sequence: empty batch");
    std::vector<ad::Value> steps;
    steps.reserve(batch.max_len);
    for (int t = 0; t < batch.max_len; ++t) steps.push_back(dt_column(g, batch, t));
    UnrollResult un = stack_unroll(g, m.encoder, steps);

    EncoderOut out;
    out.steps = un.top();

    // State at each sequence's last real step, selected with one-hot row
    // tiles so padded steps never leak into the summary.
    std::vector<int> last = last_real_step(batch);
    std::map<int, std::vector<int>> rows_by_step;
    for (int i = 0; i < batch.batch; ++i)
        if (last[i] >= 0) rows_by_step[last[i]].push_back(i);

    for (size_t layer = 0; layer < m.encoder.size(); ++layer) {
        const int H = m.encoder[layer].hidden_dim;
        ad::Value summary;
        for (const auto& [t, rows] : rows_by_step) {
            Tensor tile = Tensor::zeros({batch.batch, H});
            for (int r : rows)
                for (int j = 0; j < H; ++j) tile.v[static_cast<long>(r) * H + j] = 1.0;
            ad::Value term = g.mul(un.hidden[layer][t], g.constant(std::move(tile)));
            summary = summary.valid() ? g.add(summary, term) : term;
        }
        if (!summary.valid()) summary = g.constant(Tensor::zeros({batch.batch, H}));
        out.layer_summary.push_back(summary);
    }
    return out;
}

std::vector<ad::Value> supervised_embedding(ad::Graph& g, const SslMtppModel& m,
                                            const Batch& batch, bool training,
                                            Rng* dropout_rng) {
    if (batch.max_len == 0) throw Error("supervised_embedding: empty batch");
    for (int i = 0; i < batch.batch; ++i)
        for (int t = 0; t < batch.max_len; ++t)
            if (batch.mask[batch.idx(i, t)] && batch.marker[batch.idx(i, t)] < 0)
                throw Error("supervised path requires markers: sequence '" + batch.ids[i] +
                            "' lacks one at step " + std::to_string(t));

    std::vector<ad::Value> steps;
    steps.reserve(batch.max_len);
    for (int t = 0; t < batch.max_len; ++t) {
        std::vector<int> ids(batch.batch);
        for (int i = 0; i < batch.batch; ++i) ids[i] = batch.marker[batch.idx(i, t)];
        ad::Value emb = m.marker_embed.lookup(g, ids);
        steps.push_back(g.concat(dt_column(g, batch, t), emb));
    }
    UnrollResult un = stack_unroll(g, m.sup_stack, steps);

    std::vector<ad::Value> out = un.top();
    if (training && m.cfg.dropout > 0.0) {
        if (!dropout_rng) throw Error("training forward pass needs a dropout rng");
        for (auto& v : out) v = dropout_apply(g, v, m.cfg.dropout, true, *dropout_rng);
    }
    return out;
}

ad::Value fuse(ad::Graph& g, ad::Value f, ad::Value e, double lambda) {
    if (lambda == 0.0) return f;
    if (f.shape() != e.shape())
        throw Error("fuse: embedding shapes differ, " + shape_str(f.shape()) + " vs " +
                    shape_str(e.shape()));
    return g.add(f, g.mul(e, g.constant(lambda)));
}

StepPrediction predict_step(ad::Graph& g, const SslMtppModel& m, ad::Value fused) {
    StepPrediction p;
    p.marker_probs = m.marker_head_out.forward(g, m.marker_head_in.forward(g, fused));
    p.next_gap = m.time_head_out.forward(g, m.time_head_in.forward(g, fused));
    return p;
}

ModelForward model_forward(ad::Graph& g, const SslMtppModel& m, const Batch& batch,
                           bool training, Rng* dropout_rng) {
    ModelForward out;
    out.fused = supervised_embedding(g, m, batch, training, dropout_rng);
    if (m.lambda != 0.0 && m.cfg.autoencoder) {
        EncoderOut enc = encode_sequence(g, m, batch);
        for (int t = 0; t < batch.max_len; ++t)
            out.fused[t] = fuse(g, out.fused[t], enc.steps[t], m.lambda);
    }
    for (const ad::Value& f : out.fused) {
        StepPrediction p = predict_step(g, m, f);
        out.marker_probs.push_back(p.marker_probs);
        out.next_gap.push_back(p.next_gap);
    }
    return out;
}

ReconSum reconstruction_sum(ad::Graph& g, const SslMtppModel& m, const Batch& batch) {
    if (!m.cfg.autoencoder) throw Error("model was built without the autoencoder");
    EncoderOut enc = encode_sequence(g, m, batch);

    ReconSum rs;
    for (uint8_t v : batch.mask) rs.count += v;

    // Decoder states start from the encoder's per-layer summaries; input is
    // the true previous gap (teacher forcing) or the previous prediction.
    std::vector<RecurrentCell::State> states(m.decoder.size());
    for (size_t k = 0; k < m.decoder.size(); ++k) states[k].h = enc.layer_summary[k];

    ad::Value prev_out;
    for (int t = 0; t < batch.max_len; ++t) {
        ad::Value input;
        if (t == 0)
            input = g.constant(Tensor::zeros({batch.batch, 1}));
        else if (m.cfg.teacher_forcing)
            input = dt_column(g, batch, t - 1);
        else
            input = prev_out;
        ad::Value h = input;
        for (size_t k = 0; k < m.decoder.size(); ++k) {
            states[k] = m.decoder[k].step(g, h, states[k]);
            h = states[k].h;
        }
        ad::Value rec = m.decoder_out.forward(g, h);
        prev_out = rec;
        rs.outputs.push_back(rec);
        ad::Value diff = g.sub(dt_column(g, batch, t), rec);
        ad::Value sq = g.mul(g.mul(diff, diff), mask_column(g, batch, t));
        ad::Value step_sum = g.sum(sq);
        rs.sum_sq = rs.sum_sq.valid() ? g.add(rs.sum_sq, step_sum) : step_sum;
    }
    return rs;
}

ad::Value reconstruction_loss(ad::Graph& g, const SslMtppModel& m, const Batch& batch) {
    ReconSum rs = reconstruction_sum(g, m, batch);
    if (rs.count == 0) throw Error("reconstruction loss over an empty mask");
    return g.mul(rs.sum_sq, g.constant(1.0 / static_cast<double>(rs.count)));
}

SupervisedLosses supervised_losses(ad::Graph& g, const SslMtppModel& m, const Batch& batch,
                                   bool training, Rng* dropout_rng) {
    ModelForward fwd = model_forward(g, m, batch, training, dropout_rng);

    long targets = 0;
    ad::Value ce_sum;
    ad::Value mae_sum;
    for (int t = 0; t + 1 < batch.max_len; ++t) {
        Tensor onehot = Tensor::zeros({batch.batch, m.cfg.num_classes});
        Tensor gap_target = Tensor::zeros({batch.batch, 1});
        Tensor valid = Tensor::zeros({batch.batch, 1});
        int n_valid = 0;
        for (int i = 0; i < batch.batch; ++i) {
            long k = batch.idx(i, t + 1);
            if (!batch.mask[k]) continue;
            int cls = batch.marker[k];
            if (cls < 0)
                throw Error("supervised loss target lacks a marker: sequence '" +
                            batch.ids[i] + "' step " + std::to_string(t + 1));
            onehot.v[static_cast<long>(i) * m.cfg.num_classes + cls] = 1.0;
            gap_target.v[i] = batch.dt[k];
            valid.v[i] = 1.0;
            ++n_valid;
        }
        if (n_valid == 0) continue;
        targets += n_valid;

        ad::Value logp = g.log(g.add(fwd.marker_probs[t], g.constant(kLogEps)));
        ad::Value ce = g.sum(g.mul(g.constant(std::move(onehot)), logp));
        ce_sum = ce_sum.valid() ? g.add(ce_sum, ce) : ce;

        ad::Value err = g.abs(g.sub(fwd.next_gap[t], g.constant(std::move(gap_target))));
        ad::Value mae = g.sum(g.mul(err, g.constant(std::move(valid))));
        mae_sum = mae_sum.valid() ? g.add(mae_sum, mae) : mae;
    }
    if (targets == 0) throw Error("supervised loss has no valid (event, next-event) targets");

    SupervisedLosses out;
    out.targets = targets;
    out.marker = g.mul(ce_sum, g.constant(-1.0 / static_cast<double>(targets)));
    out.time = g.mul(mae_sum, g.constant(1.0 / static_cast<double>(targets)));
    return out;
}

CompositeLoss composite_loss(ad::Graph& g, const SslMtppModel& m, const Batch& labeled,
                             const Batch* unlabeled, bool include_recon, bool training,
                             Rng* dropout_rng) {
    SupervisedLosses sup = supervised_losses(g, m, labeled, training, dropout_rng);
    CompositeLoss out;
    out.marker = sup.marker;
    out.time = sup.time;
    out.total = g.add(sup.time, sup.marker);
    if (include_recon) {
        ReconSum rl = reconstruction_sum(g, m, labeled);
        ad::Value total_sum = rl.sum_sq;
        long count = rl.count;
        if (unlabeled != nullptr) {
            ReconSum ru = reconstruction_sum(g, m, *unlabeled);
            total_sum = g.add(total_sum, ru.sum_sq);
            count += ru.count;
        }
        if (count == 0) throw Error("reconstruction loss over an empty mask");
        out.recon = g.mul(total_sum, g.constant(1.0 / static_cast<double>(count)));
        out.total = g.add(out.total, *out.recon);
    }
    return out;
}

}  // namespace sslmtpp
