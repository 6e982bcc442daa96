// sslmtpp/data.hpp: event-sequence data model: marked sequences, pool
// ingestion in the newline-delimited JSON record format, self-exciting
// synthetic generation, labeled/unlabeled/test protocol splitting and
// padded/masked batching.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sslmtpp/tensor.hpp"

namespace sslmtpp {

struct MarkedSequence {
    std::string id;
    std::vector<double> times;  // strictly increasing, length >= 2
    std::vector<int> markers;   // empty when unlabeled, else same length as times

    bool labeled() const { return !markers.empty(); }
    size_t events() const { return times.size(); }
};

void validate_sequence(const MarkedSequence& s, int num_classes);

struct SequencePool {
    std::vector<MarkedSequence> sequences;
    int num_classes = 0;

    long total_events() const;
    const MarkedSequence& by_id(const std::string& id) const;
    void build_index();

private:
    std::unordered_map<std::string, size_t> index_;
};

// Record format: one JSON object per line,
//   {"id": string, "times": [float...], "markers": [int...] | null}
// Round-trips bit-exactly. num_classes_hint pins the marker range (0 =
// infer as max marker + 1; the Retweet layout uses 3).
SequencePool load_pool(const std::string& path, int num_classes_hint = 0);
void save_pool(const SequencePool& pool, const std::string& path);

struct GeneratorConfig {
    int sequences = 1000;
    int classes = 3;
    std::vector<double> priors{0.506, 0.45, 0.044};
    double base_intensity = 1.0;  // mu
    double excitation = 0.6;      // alpha, branching ratio, in [0, 1)
    double decay = 1.0;           // beta > 0
    // Strength of the marker-timing dependence: with probability coupling
    // the marker is the prior-CDF bucket of the event's compensator
    // quantile, otherwise an independent prior draw. Marginal class shares
    // equal the priors for every coupling value.
    double coupling = 0.8;
    double mean_length = 209.0;   // lognormal sequence length, min 2
    double length_sigma = 0.35;

    void validate() const;
};

SequencePool generate_synthetic(const GeneratorConfig& cfg, uint64_t seed);

struct ProtocolSplit {
    std::string name;
    long labeled_budget = 0;
    std::vector<std::string> labeled;
    std::vector<std::string> unlabeled;
    std::vector<std::string> test;
    uint64_t seed = 0;
};

// One fixed test split (held out first), then per budget a nested labeled
// prefix of the shuffled training sequences; the remainder is unlabeled.
// Budgets are matched to within one sequence (sequences are atomic).
std::vector<ProtocolSplit> make_protocol_splits(const SequencePool& pool,
                                                const std::vector<long>& budgets,
                                                long test_events, uint64_t seed);

ProtocolSplit load_split(const std::string& path);
void save_split(const ProtocolSplit& split, const std::string& path);

// Materialized view of one split against a pool. Unlabeled sequences have
// their markers stripped; nothing downstream can read them.
struct SplitView {
    std::vector<MarkedSequence> labeled;
    std::vector<MarkedSequence> unlabeled;  // markers removed
    std::vector<MarkedSequence> test;       // ground truth kept for evaluation
    int num_classes = 0;
};

SplitView resolve_split(const SequencePool& pool, const ProtocolSplit& split);

// log1p-gap standardization statistics; computed on training data only.
struct GapStats {
    double mean = 0.0;
    double stddev = 1.0;
};

GapStats compute_gap_stats(const std::vector<const MarkedSequence*>& seqs);

// Feature transform applied to every inter-event gap.
inline double standardize_gap(double gap, const GapStats& st) {
    return (std::log1p(gap) - st.mean) / st.stddev;
}
inline double destandardize_gap(double x, const GapStats& st) {
    return std::expm1(x * st.stddev + st.mean);
}

struct Batch {
    int batch = 0;    // B
    int max_len = 0;  // T
    std::vector<double> dt;        // [B*T] standardized log1p gaps, 0 on padding
    std::vector<double> raw_gap;   // [B*T] raw gaps, 0 on padding
    std::vector<int> marker;       // [B*T], -1 where absent or padded
    std::vector<uint8_t> mask;     // [B*T], 1 exactly on real events
    std::vector<uint8_t> labeled;  // [B]
    std::vector<std::string> ids;

    long idx(int b, int t) const { return static_cast<long>(b) * max_len + t; }
    bool fully_labeled() const;
};

Batch make_batch(const std::vector<const MarkedSequence*>& seqs, const GapStats& stats);

// Epoch-shuffled padded batches. A zero seed means "no shuffle" (used for
// evaluation). Empty input yields an empty vector.
std::vector<Batch> make_batches(const std::vector<MarkedSequence>& seqs, int batch_size,
                                const GapStats& stats, uint64_t shuffle_seed);

}  // namespace sslmtpp
