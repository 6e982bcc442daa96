#include "sslmtpp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace sslmtpp {

using nlohmann::json;

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.num_classes != num_classes) throw Error("confusion matrix class count mismatch");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

long ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), 0L);
}

std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm) {
    std::vector<ClassMetrics> out(cm.num_classes);
    for (int c = 0; c < cm.num_classes; ++c) {
        long tp = cm.at(c, c);
        long support = 0, predicted = 0;
        for (int j = 0; j < cm.num_classes; ++j) {
            support += cm.at(c, j);
            predicted += cm.at(j, c);
        }
        ClassMetrics& e = out[c];
        e.support = support;
        e.predicted = predicted;
        e.precision_defined = predicted > 0;
        e.recall_defined = support > 0;
        e.precision = predicted > 0 ? static_cast<double>(tp) / predicted : 0.0;
        e.recall = support > 0 ? static_cast<double>(tp) / support : 0.0;
        double pr = e.precision + e.recall;
        e.f1 = pr > 0.0 ? 2.0 * e.precision * e.recall / pr : 0.0;
    }
    return out;
}

double average_precision(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw Error("average precision of an empty confusion matrix");
    std::vector<ClassMetrics> pc = per_class_metrics(cm);
    double sum = 0.0;
    for (const ClassMetrics& c : pc) sum += c.precision;
    return 100.0 * sum / static_cast<double>(cm.num_classes);
}

std::pair<double, double> macro_micro_f1(const ConfusionMatrix& cm) {
    long total = cm.total();
    if (total == 0) throw Error("F1 of an empty confusion matrix");
    std::vector<ClassMetrics> pc = per_class_metrics(cm);
    double macro = 0.0;
    for (const ClassMetrics& c : pc) macro += c.f1;
    macro = 100.0 * macro / static_cast<double>(cm.num_classes);
    long diag = 0;
    for (int c = 0; c < cm.num_classes; ++c) diag += cm.at(c, c);
    double micro = 100.0 * static_cast<double>(diag) / static_cast<double>(total);
    return {macro, micro};
}

double average_precision_score(const std::vector<int>& truths,
                               const std::vector<std::vector<double>>& probs) {
    if (truths.empty() || truths.size() != probs.size())
        throw Error("average_precision_score: empty or mismatched inputs");
    const int m = static_cast<int>(probs[0].size());
    double sum = 0.0;
    std::vector<size_t> order(truths.size());
    for (int c = 0; c < m; ++c) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return probs[a][c] > probs[b][c];
        });
        long positives = std::count(truths.begin(), truths.end(), c);
        if (positives == 0) continue;  // contributes zero
        long tp = 0;
        double ap = 0.0;
        for (size_t rank = 0; rank < order.size(); ++rank) {
            if (truths[order[rank]] != c) continue;
            ++tp;
            ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
        }
        sum += ap / static_cast<double>(positives);
    }
    return 100.0 * sum / static_cast<double>(m);
}

std::string EvalReport::to_json() const {
    json j;
    j["avg_precision"] = avg_precision;
    j["avg_precision_score"] = avg_precision_score;
    j["macro_f1"] = macro_f1;
    j["micro_f1"] = micro_f1;
    j["time_mae_std"] = time_mae_std;
    j["time_mae_raw"] = time_mae_raw;
    j["events"] = events;
    json pcj = json::array();
    for (size_t c = 0; c < per_class.size(); ++c) {
        json e;
        e["class"] = c;
        e["precision"] = per_class[c].precision;
        e["recall"] = per_class[c].recall;
        e["f1"] = per_class[c].f1;
        e["support"] = per_class[c].support;
        e["predicted"] = per_class[c].predicted;
        e["precision_defined"] = per_class[c].precision_defined;
        pcj.push_back(e);
    }
    j["per_class"] = pcj;
    json rows = json::array();
    for (int t = 0; t < cm.num_classes; ++t) {
        json row = json::array();
        for (int p = 0; p < cm.num_classes; ++p) row.push_back(cm.at(t, p));
        rows.push_back(row);
    }
    j["confusion"] = rows;
    return j.dump(2);
}

EvalReport evaluate_model(const SslMtppModel& model,
                          const std::vector<MarkedSequence>& test, int batch_size) {
    if (test.empty()) throw Error("evaluate: empty test set");
    for (const MarkedSequence& s : test)
        if (!s.labeled())
            throw Error("evaluate: test sequence '" + s.id + "' lacks ground-truth markers");

    EvalReport rep;
    rep.cm = ConfusionMatrix::zeros(model.cfg.num_classes);
    std::vector<int> truths;
    std::vector<std::vector<double>> probs;
    double mae_std = 0.0, mae_raw = 0.0;

    for (const Batch& b : make_batches(test, batch_size, model.stats, /*shuffle_seed=*/0)) {
        ad::Graph g;
        ModelForward fwd = model_forward(g, model, b, /*training=*/false, nullptr);
        for (int t = 0; t + 1 < b.max_len; ++t) {
            const Tensor& p = fwd.marker_probs[t].tensor();
            const Tensor& gap = fwd.next_gap[t].tensor();
            for (int i = 0; i < b.batch; ++i) {
                long k = b.idx(i, t + 1);
                if (!b.mask[k]) continue;
                const double* row = p.v.data() + static_cast<long>(i) * model.cfg.num_classes;
                int arg = 0;
                for (int c = 1; c < model.cfg.num_classes; ++c)
                    if (row[c] > row[arg]) arg = c;
                int truth = b.marker[k];
                rep.cm.add(truth, arg);
                truths.push_back(truth);
                probs.emplace_back(row, row + model.cfg.num_classes);
                double pred_std = gap.v[i];
                mae_std += std::fabs(pred_std - b.dt[k]);
                mae_raw += std::fabs(destandardize_gap(pred_std, model.stats) - b.raw_gap[k]);
                ++rep.events;
            }
        }
    }
    if (rep.events == 0) throw Error("evaluate: no (event, next-event) targets in test set");

    rep.per_class = per_class_metrics(rep.cm);
    rep.avg_precision = average_precision(rep.cm);
    rep.avg_precision_score = average_precision_score(truths, probs);
    auto [macro, micro] = macro_micro_f1(rep.cm);
    rep.macro_f1 = macro;
    rep.micro_f1 = micro;
    rep.time_mae_std = mae_std / static_cast<double>(rep.events);
    rep.time_mae_raw = mae_raw / static_cast<double>(rep.events);
    return rep;
}

}  // namespace sslmtpp
