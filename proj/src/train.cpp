#include "sslmtpp/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>

#include <json.hpp>

namespace sslmtpp {

using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
    if (learning_rate <= 0.0) throw ValidationError("train: learning rate must be > 0");
    if (batch_size < 1) throw ValidationError("train: batch size must be >= 1");
    if (lambda < 0.0) throw ValidationError("train: lambda must be >= 0");
    if (unlabeled_mix < 0) throw ValidationError("train: unlabeled mix must be >= 0");
    if (grad_clip <= 0.0) throw ValidationError("train: gradient clip must be > 0");
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw ValidationError("config file '" + path + "' is not a JSON object");
    TrainConfig c;
    for (const auto& [key, val] : j.items()) {
        if (key == "epochs") c.epochs = val.get<int>();
        else if (key == "learning_rate") c.learning_rate = val.get<double>();
        else if (key == "batch_size") c.batch_size = val.get<int>();
        else if (key == "lambda") c.lambda = val.get<double>();
        else if (key == "seed") c.seed = val.get<uint64_t>();
        else if (key == "unlabeled_mix") c.unlabeled_mix = val.get<int>();
        else if (key == "grad_clip") c.grad_clip = val.get<double>();
        else if (key == "baseline_mode") c.baseline_mode = val.get<bool>();
        else throw ValidationError("config file '" + path + "': unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

AdamOptimizer::AdamOptimizer(std::vector<ad::Parameter*> params, double beta1, double beta2,
                             double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (ad::Parameter* p : params_) {
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(p->numel(), 0.0);
    }
}

void AdamOptimizer::zero_grad() {
    for (ad::Parameter* p : params_) p->zero_grad();
}

double AdamOptimizer::clip_global_norm(double max_norm) {
    double sq = 0.0;
    for (ad::Parameter* p : params_)
        for (double gi : p->grad.v) sq += gi * gi;
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        double scale = max_norm / norm;
        for (ad::Parameter* p : params_)
            for (double& gi : p->grad.v) gi *= scale;
    }
    return norm;
}

void AdamOptimizer::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
        ad::Parameter* p = params_[k];
        if (p->grad.v.size() != p->value.v.size())
            throw Error("missing gradient for parameter '" + p->name + "'");
        for (size_t i = 0; i < p->value.v.size(); ++i) {
            double g = p->grad.v[i];
            m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
            v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
            double mhat = m_[k][i] / bc1;
            double vhat = v_[k][i] / bc2;
            p->value.v[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

namespace {

// Reshuffling cyclic view over the unlabeled sequences. Draws nothing from
// any other stream, so baseline runs (which never touch it) see identical
// randomness everywhere else.
class UnlabeledStream {
public:
    UnlabeledStream(const std::vector<MarkedSequence>& seqs, int batch_size,
                    const GapStats& stats, uint64_t seed)
        : seqs_(seqs), batch_size_(batch_size), stats_(stats), seed_(seed) {}

    bool empty() const { return seqs_.empty(); }

    const Batch& next() {
        if (pos_ >= batches_.size()) {
            batches_ = make_batches(seqs_, batch_size_, stats_,
                                    mix_seed(seed_, "shuffle/unlabeled/" + std::to_string(cycle_)));
            ++cycle_;
            pos_ = 0;
        }
        return batches_[pos_++];
    }

private:
    const std::vector<MarkedSequence>& seqs_;
    int batch_size_;
    GapStats stats_;
    uint64_t seed_;
    std::vector<Batch> batches_;
    size_t pos_ = 0;
    long cycle_ = 0;
};

}  // namespace

TrainResult train_model(const SplitView& view, const ModelConfig& mcfg,
                        const TrainConfig& tcfg) {
    tcfg.validate();
    if (view.labeled.empty()) throw Error("train: labeled set is empty");

    std::vector<const MarkedSequence*> train_seqs;
    for (const auto& s : view.labeled) train_seqs.push_back(&s);
    for (const auto& s : view.unlabeled) train_seqs.push_back(&s);
    GapStats stats = compute_gap_stats(train_seqs);

    SslMtppModel model = SslMtppModel::create(mcfg, tcfg.effective_lambda(), stats,
                                              mix_seed(tcfg.seed, "init"));
    AdamOptimizer opt(model.params());
    Rng dropout_rng(mix_seed(tcfg.seed, "dropout"));
    UnlabeledStream unlabeled(view.unlabeled, tcfg.batch_size, stats,
                              mix_seed(tcfg.seed, "unlabeled"));
    const bool use_recon = !tcfg.baseline_mode && mcfg.autoencoder;

    TrainResult res{std::move(model), {}};
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::vector<Batch> labeled = make_batches(
            view.labeled, tcfg.batch_size, stats,
            mix_seed(tcfg.seed, "shuffle/labeled/" + std::to_string(epoch)));

        EpochLoss acc;
        long sup_steps = 0, recon_steps = 0;
        for (size_t bi = 0; bi < labeled.size(); ++bi) {
            // Divergence guard: anything non-finite inside a step aborts
            // with the epoch/batch position attached.
            auto guarded = [&](const char* stage, const std::function<void()>& body) {
                try {
                    body();
                } catch (const Error& e) {
                    throw Error(std::string(e.what()) + " (epoch " +
                                std::to_string(epoch + 1) + ", " + stage + " batch " +
                                std::to_string(bi + 1) + ")");
                }
            };
            guarded("labeled", [&] {
                ad::Graph g;
                CompositeLoss loss = composite_loss(g, res.model, labeled[bi], nullptr,
                                                    use_recon, /*training=*/true, &dropout_rng);
                double total = loss.total.scalar();
                if (!std::isfinite(total)) throw Error("non-finite loss");
                opt.zero_grad();
                g.backward(loss.total);
                opt.clip_global_norm(tcfg.grad_clip);
                opt.step(tcfg.learning_rate);
                acc.marker += loss.marker.scalar();
                acc.time += loss.time.scalar();
                if (loss.recon) {
                    acc.recon += loss.recon->scalar();
                    ++recon_steps;
                }
                ++sup_steps;
            });
            if (use_recon && !unlabeled.empty()) {
                guarded("unlabeled", [&] {
                    for (int k = 0; k < tcfg.unlabeled_mix; ++k) {
                        ad::Graph g;
                        ad::Value loss = reconstruction_loss(g, res.model, unlabeled.next());
                        double val = loss.scalar();
                        if (!std::isfinite(val)) throw Error("non-finite reconstruction loss");
                        opt.zero_grad();
                        g.backward(loss);
                        opt.clip_global_norm(tcfg.grad_clip);
                        opt.step(tcfg.learning_rate);
                        acc.recon += val;
                        ++recon_steps;
                    }
                });
            }
        }
        EpochLoss e;
        e.marker = acc.marker / static_cast<double>(sup_steps);
        e.time = acc.time / static_cast<double>(sup_steps);
        e.recon = recon_steps > 0 ? acc.recon / static_cast<double>(recon_steps) : 0.0;
        e.total = e.marker + e.time + e.recon;
        res.history.push_back(e);
    }
    return res;
}

namespace {

std::string format_double(double x) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, ptr);
}

json model_config_to_json(const ModelConfig& c, double lambda, const GapStats& st) {
    json j;
    j["num_classes"] = c.num_classes;
    j["marker_embed_dim"] = c.marker_embed_dim;
    j["sup_hidden"] = c.sup_hidden;
    j["sup_layers"] = c.sup_layers;
    j["enc_hidden"] = c.enc_hidden;
    j["enc_layers"] = c.enc_layers;
    j["head_hidden"] = c.head_hidden;
    j["dropout"] = c.dropout;
    j["autoencoder"] = c.autoencoder;
    j["teacher_forcing"] = c.teacher_forcing;
    j["lambda"] = lambda;
    j["gap_mean"] = st.mean;
    j["gap_stddev"] = st.stddev;
    return j;
}

ModelConfig model_config_from_json(const json& j, double* lambda, GapStats* st) {
    ModelConfig c;
    c.num_classes = j.at("num_classes").get<int>();
    c.marker_embed_dim = j.at("marker_embed_dim").get<int>();
    c.sup_hidden = j.at("sup_hidden").get<int>();
    c.sup_layers = j.at("sup_layers").get<int>();
    c.enc_hidden = j.at("enc_hidden").get<int>();
    c.enc_layers = j.at("enc_layers").get<int>();
    c.head_hidden = j.at("head_hidden").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.autoencoder = j.at("autoencoder").get<bool>();
    c.teacher_forcing = j.at("teacher_forcing").get<bool>();
    *lambda = j.at("lambda").get<double>();
    st->mean = j.at("gap_mean").get<double>();
    st->stddev = j.at("gap_stddev").get<double>();
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    json j;
    j["epochs"] = c.epochs;
    j["learning_rate"] = c.learning_rate;
    j["batch_size"] = c.batch_size;
    j["lambda"] = c.lambda;
    j["seed"] = c.seed;
    j["unlabeled_mix"] = c.unlabeled_mix;
    j["grad_clip"] = c.grad_clip;
    j["baseline_mode"] = c.baseline_mode;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lambda = j.at("lambda").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.unlabeled_mix = j.at("unlabeled_mix").get<int>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.baseline_mode = j.at("baseline_mode").get<bool>();
    return c;
}

}  // namespace

void write_history_csv(const std::vector<EpochLoss>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write history file '" + path + "'");
    out << "epoch,l_marker,l_time,l_recon,l_total\n";
    for (size_t i = 0; i < history.size(); ++i)
        out << (i + 1) << "," << format_double(history[i].marker) << ","
            << format_double(history[i].time) << "," << format_double(history[i].recon) << ","
            << format_double(history[i].total) << "\n";
}

void save_checkpoint(const SslMtppModel& model, const TrainConfig& tcfg, const RunMeta& run,
                     const std::string& path) {
    json j;
    j["format"] = "sslmtpp-checkpoint-v1";
    j["model"] = model_config_to_json(model.cfg, model.lambda, model.stats);
    j["train"] = train_config_to_json(tcfg);
    j["run"] = {{"protocol", run.protocol}, {"mode", run.mode}, {"seed", run.seed}};
    json tensors = json::array();
    for (const ad::Parameter* p : model.params()) {
        json t;
        t["name"] = p->name;
        t["shape"] = p->value.shape;
        t["values"] = p->value.v;
        tensors.push_back(std::move(t));
    }
    j["tensors"] = std::move(tensors);
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint '" + path + "'");
    out << j.dump() << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || j.value("format", "") != "sslmtpp-checkpoint-v1")
        throw Error("'" + path + "' is not a valid checkpoint");

    Checkpoint ck;
    double lambda = 0.0;
    GapStats stats;
    ModelConfig mcfg = model_config_from_json(j.at("model"), &lambda, &stats);
    ck.train = train_config_from_json(j.at("train"));
    ck.run.protocol = j.at("run").at("protocol").get<std::string>();
    ck.run.mode = j.at("run").at("mode").get<std::string>();
    ck.run.seed = j.at("run").at("seed").get<uint64_t>();

    ck.model = SslMtppModel::create(mcfg, lambda, stats, /*seed=*/0);
    std::vector<ad::Parameter*> params = ck.model.params();
    const json& tensors = j.at("tensors");
    if (tensors.size() != params.size())
        throw Error("checkpoint '" + path + "' holds " + std::to_string(tensors.size()) +
                    " tensors, model needs " + std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const json& t = tensors[i];
        if (t.at("name").get<std::string>() != params[i]->name)
            throw Error("checkpoint tensor '" + t.at("name").get<std::string>() +
                        "' does not match parameter '" + params[i]->name + "'");
        Shape shape = t.at("shape").get<Shape>();
        if (shape != params[i]->value.shape)
            throw Error("checkpoint tensor '" + params[i]->name + "' shape " +
                        shape_str(shape) + " does not match " +
                        shape_str(params[i]->value.shape));
        params[i]->value.v = t.at("values").get<std::vector<double>>();
        if (params[i]->value.v.size() != static_cast<size_t>(Tensor::numel_of(shape)))
            throw Error("checkpoint tensor '" + params[i]->name + "' has wrong value count");
        ad::check_finite(params[i]->value, "checkpoint tensor " + params[i]->name);
    }
    return ck;
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
    Checkpoint ck = load_checkpoint(path);
    if (!(ck.model.cfg == expected))
        throw Error("checkpoint '" + path + "' config does not match the expected model config");
    return ck;
}

}  // namespace sslmtpp
