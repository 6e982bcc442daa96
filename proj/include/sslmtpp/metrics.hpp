// sslmtpp/metrics.hpp: marker-classification metrics (average precision,
// macro/micro F1, per-class breakdown) and model evaluation over a test set.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sslmtpp/model.hpp"

namespace sslmtpp {

struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<long> counts;  // row = true class, col = predicted class

    static ConfusionMatrix zeros(int m) {
        ConfusionMatrix cm;
        cm.num_classes = m;
        cm.counts.assign(static_cast<size_t>(m) * m, 0);
        return cm;
    }

    long& at(int truth, int pred) { return counts[static_cast<size_t>(truth) * num_classes + pred]; }
    long at(int truth, int pred) const {
        return counts[static_cast<size_t>(truth) * num_classes + pred];
    }
    void add(int truth, int pred) { ++at(truth, pred); }
    void merge(const ConfusionMatrix& other);
    long total() const;
};

struct ClassMetrics {
    double precision = 0.0;  // fractions in [0, 1]
    double recall = 0.0;
    double f1 = 0.0;
    long support = 0;    // true events of this class
    long predicted = 0;  // events predicted as this class
    bool precision_defined = true;
    bool recall_defined = true;
};

std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm);

// Unweighted mean of per-class argmax precision, in percent. Classes with
// no predictions contribute zero.
double average_precision(const ConfusionMatrix& cm);

// (macro, micro) F1 in percent. Micro-F1 is computed as pooled accuracy,
// which it equals identically for single-label multi-class data.
std::pair<double, double> macro_micro_f1(const ConfusionMatrix& cm);

// Score-based variant: per-class area under the precision-recall curve of
// the class probability, macro-averaged, in percent. Reported alongside the
// argmax variant because the two readings of "average precision" differ.
double average_precision_score(const std::vector<int>& truths,
                               const std::vector<std::vector<double>>& probs);

struct EvalReport {
    double avg_precision = 0.0;        // argmax-macro variant, percent
    double avg_precision_score = 0.0;  // PR-AUC variant, percent
    double macro_f1 = 0.0;
    double micro_f1 = 0.0;
    std::vector<ClassMetrics> per_class;
    double time_mae_std = 0.0;  // standardized units
    double time_mae_raw = 0.0;  // raw gap units
    long events = 0;
    ConfusionMatrix cm;

    std::string to_json() const;
};

// Next-event prediction over every test event j >= 1. Test sequences must
// carry ground-truth markers; the model is read-only.
EvalReport evaluate_model(const SslMtppModel& model,
                          const std::vector<MarkedSequence>& test, int batch_size = 256);

}  // namespace sslmtpp
