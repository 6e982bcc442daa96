// sslmtpp/train.hpp: optimization loop for the semi-supervised schedule,
// adaptive-moment optimizer, checkpoint round-trip and loss history.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sslmtpp/data.hpp"
#include "sslmtpp/model.hpp"

namespace sslmtpp {

struct TrainConfig {
    int epochs = 100;
    double learning_rate = 0.01;
    int batch_size = 1024;
    double lambda = 0.1;
    uint64_t seed = 1;
    int unlabeled_mix = 1;    // unlabeled reconstruction batches per labeled batch
    double grad_clip = 5.0;   // global norm threshold
    bool baseline_mode = false;  // forces lambda = 0 and disables reconstruction

    void validate() const;
    double effective_lambda() const { return baseline_mode ? 0.0 : lambda; }
};

// Flat key-value config file (one JSON object). Unknown keys are rejected.
TrainConfig load_train_config(const std::string& path);

// Adam with bias correction. Moment buffers are keyed by parameter
// identity; stepping a parameter the optimizer has never seen is an error.
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<ad::Parameter*> params, double beta1 = 0.9,
                           double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    // Scales all gradients so the global norm is at most max_norm.
    // Returns the pre-clip norm.
    double clip_global_norm(double max_norm);
    void step(double lr);
    long steps_taken() const { return t_; }

private:
    std::vector<ad::Parameter*> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

struct EpochLoss {
    double marker = 0.0;
    double time = 0.0;
    double recon = 0.0;
    double total = 0.0;
};

struct TrainResult {
    SslMtppModel model;
    std::vector<EpochLoss> history;
};

// Per epoch: one pass over the labeled batches; after each labeled batch
// (composite loss, reconstruction over the labeled times), `unlabeled_mix`
// unlabeled batches take reconstruction-only steps. The unlabeled stream
// reshuffles and cycles as needed. Fully deterministic per (config, seed).
TrainResult train_model(const SplitView& view, const ModelConfig& mcfg,
                        const TrainConfig& tcfg);

void write_history_csv(const std::vector<EpochLoss>& history, const std::string& path);

// Run metadata carried inside checkpoints so evaluation can group rows.
struct RunMeta {
    std::string protocol;
    std::string mode;  // "ssl" | "baseline"
    uint64_t seed = 0;
};

struct Checkpoint {
    SslMtppModel model;
    TrainConfig train;
    RunMeta run;
};

void save_checkpoint(const SslMtppModel& model, const TrainConfig& tcfg, const RunMeta& run,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// Errors when the stored model config differs from `expected`.
Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace sslmtpp
