#include "sslmtpp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "sslmtpp/rng.hpp"

namespace sslmtpp {

using nlohmann::json;

void validate_sequence(const MarkedSequence& s, int num_classes) {
    if (s.times.size() < 2)
        throw Error("sequence '" + s.id + "' has fewer than 2 events");
    for (size_t i = 0; i < s.times.size(); ++i) {
        if (!std::isfinite(s.times[i]))
            throw Error("sequence '" + s.id + "' has a non-finite time");
        if (i > 0 && s.times[i] <= s.times[i - 1])
            throw Error("sequence '" + s.id + "' times not strictly increasing at index " +
                        std::to_string(i));
    }
    if (!s.markers.empty()) {
        if (s.markers.size() != s.times.size())
            throw Error("sequence '" + s.id + "' marker count " +
                        std::to_string(s.markers.size()) + " != event count " +
                        std::to_string(s.times.size()));
        for (int m : s.markers)
            if (m < 0 || (num_classes > 0 && m >= num_classes))
                throw Error("sequence '" + s.id + "' marker " + std::to_string(m) +
                            " out of range [0, " + std::to_string(num_classes) + ")");
    }
}

long SequencePool::total_events() const {
    long n = 0;
    for (const auto& s : sequences) n += static_cast<long>(s.events());
    return n;
}

void SequencePool::build_index() {
    index_.clear();
    for (size_t i = 0; i < sequences.size(); ++i) {
        auto [it, inserted] = index_.emplace(sequences[i].id, i);
        if (!inserted) throw Error("duplicate sequence id '" + sequences[i].id + "'");
    }
}

const MarkedSequence& SequencePool::by_id(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error("unknown sequence id '" + id + "'");
    return sequences[it->second];
}

SequencePool load_pool(const std::string& path, int num_classes_hint) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open pool file '" + path + "'");
    SequencePool pool;
    std::string line;
    long lineno = 0;
    int max_marker = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object() || !rec.contains("id") ||
            !rec.contains("times") || !rec.contains("markers"))
            throw Error("parse error in '" + path + "' at line " + std::to_string(lineno));
        MarkedSequence s;
        try {
            s.id = rec.at("id").get<std::string>();
            s.times = rec.at("times").get<std::vector<double>>();
            if (!rec.at("markers").is_null())
                s.markers = rec.at("markers").get<std::vector<int>>();
        } catch (const json::exception& e) {
            throw Error("parse error in '" + path + "' at line " + std::to_string(lineno) +
                        ": " + e.what());
        }
        try {
            validate_sequence(s, num_classes_hint);
        } catch (const Error& e) {
            throw Error("record " + std::to_string(lineno) + " in '" + path +
                        "': " + e.what());
        }
        for (int m : s.markers) max_marker = std::max(max_marker, m);
        pool.sequences.push_back(std::move(s));
    }
    pool.num_classes = num_classes_hint > 0 ? num_classes_hint : max_marker + 1;
    pool.build_index();
    return pool;
}

namespace {

json sequence_to_json(const MarkedSequence& s) {
    json rec;
    rec["id"] = s.id;
    rec["times"] = s.times;
    if (s.markers.empty())
        rec["markers"] = nullptr;
    else
        rec["markers"] = s.markers;
    return rec;
}

}  // namespace

void save_pool(const SequencePool& pool, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write pool file '" + path + "'");
    for (const auto& s : pool.sequences) out << sequence_to_json(s).dump() << "\n";
}

void GeneratorConfig::validate() const {
    if (sequences < 1) throw ValidationError("generator: sequences must be >= 1");
    if (classes < 1) throw ValidationError("generator: classes must be >= 1");
    if (static_cast<int>(priors.size()) != classes)
        throw ValidationError("generator: " + std::to_string(priors.size()) +
                              " priors given for " + std::to_string(classes) + " classes");
    double sum = 0.0;
    for (double p : priors) {
        if (p < 0.0) throw ValidationError("generator: negative class prior");
        sum += p;
    }
    if (std::fabs(sum - 1.0) > 1e-9)
        throw ValidationError("generator: class priors sum to " + std::to_string(sum) +
                              ", expected 1");
    if (base_intensity <= 0.0) throw ValidationError("generator: base intensity must be > 0");
    if (excitation < 0.0 || excitation >= 1.0)
        throw ValidationError("generator: excitation must be in [0, 1), got " +
                              std::to_string(excitation) + " (process would be explosive)");
    if (decay <= 0.0) throw ValidationError("generator: decay must be > 0");
    if (coupling < 0.0 || coupling > 1.0)
        throw ValidationError("generator: coupling must be in [0, 1]");
    if (mean_length < 2.0) throw ValidationError("generator: mean length must be >= 2");
    if (length_sigma < 0.0) throw ValidationError("generator: length sigma must be >= 0");
}

namespace {

// Event times for one sequence from a self-exciting process with
// exponential kernel
//   intensity(t) = mu + alpha*beta * sum_i exp(-beta*(t - t_i))
// via Ogata thinning. The excitation sum A(t) is maintained recursively.
std::vector<double> simulate_times(const GeneratorConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    size_t target_len = 2;
    if (cfg.length_sigma == 0.0) {
        target_len = std::max<size_t>(2, static_cast<size_t>(std::llround(cfg.mean_length)));
    } else {
        // lognormal with the requested mean: E = exp(m + s^2/2)
        double m = std::log(cfg.mean_length) - 0.5 * cfg.length_sigma * cfg.length_sigma;
        double draw = std::exp(m + cfg.length_sigma * rng.normal());
        target_len = std::max<size_t>(2, static_cast<size_t>(std::llround(draw)));
    }

    std::vector<double> times;
    times.reserve(target_len);
    const double mu = cfg.base_intensity;
    const double ab = cfg.excitation * cfg.decay;
    double t = 0.0;
    double excite = 0.0;  // A(t): decayed count of past events

    while (times.size() < target_len) {
        double bound = mu + ab * excite;
        double w = rng.exponential(bound);
        excite *= std::exp(-cfg.decay * w);
        t += w;
        double rate = mu + ab * excite;
        if (rng.uniform() * bound > rate) continue;  // thinned
        times.push_back(t);
        excite += 1.0;
    }
    return times;
}

}  // namespace

SequencePool generate_synthetic(const GeneratorConfig& cfg, uint64_t seed) {
    cfg.validate();
    SequencePool pool;
    pool.num_classes = cfg.classes;
    pool.sequences.reserve(cfg.sequences);
    for (int i = 0; i < cfg.sequences; ++i) {
        MarkedSequence s;
        s.id = "seq-" + std::to_string(i);
        s.times = simulate_times(cfg, mix_seed(seed, "sequence/" + std::to_string(i)));
        pool.sequences.push_back(std::move(s));
    }

    // Markers couple to the most recent completed inter-event gap through
    // its empirical quantile over the whole pool: rank the gaps once,
    // bucket the rank through the prior CDF. Ranks are uniform by
    // construction, so marginal class shares equal the priors for every
    // coupling strength; and because the referenced gap is already observed
    // when the next event is predicted, markers are learnable from timing
    // by construction. When the previous marker is odd the quantile is
    // reflected (q -> 1-q), which keeps the shares exact but ties the rule
    // to the marker history as well, so neither branch alone suffices.
    struct GapRef {
        double gap;
        int seq;
        int event;
    };
    std::vector<GapRef> gaps;
    for (size_t i = 0; i < pool.sequences.size(); ++i) {
        const auto& times = pool.sequences[i].times;
        for (size_t j = 0; j < times.size(); ++j) {
            double prev = j == 0 ? 0.0 : times[j - 1];
            gaps.push_back({times[j] - prev, static_cast<int>(i), static_cast<int>(j)});
        }
    }
    std::sort(gaps.begin(), gaps.end(), [](const GapRef& a, const GapRef& b) {
        if (a.gap != b.gap) return a.gap < b.gap;
        if (a.seq != b.seq) return a.seq < b.seq;
        return a.event < b.event;
    });

    std::vector<double> cdf(cfg.priors.size());
    std::partial_sum(cfg.priors.begin(), cfg.priors.end(), cdf.begin());
    for (auto& s : pool.sequences) s.markers.assign(s.times.size(), -1);

    const double n = static_cast<double>(gaps.size());
    std::vector<Rng> marker_rngs;
    marker_rngs.reserve(pool.sequences.size());
    for (size_t i = 0; i < pool.sequences.size(); ++i)
        marker_rngs.emplace_back(mix_seed(seed, "markers/" + std::to_string(i)));

    // Assign in (seq, event) order so the per-sequence rng draws do not
    // depend on the global rank order.
    std::vector<double> quantile(gaps.size());
    std::vector<size_t> offset(pool.sequences.size() + 1, 0);
    for (size_t i = 0; i < pool.sequences.size(); ++i)
        offset[i + 1] = offset[i] + pool.sequences[i].times.size();
    for (size_t rank = 0; rank < gaps.size(); ++rank)
        quantile[offset[gaps[rank].seq] + gaps[rank].event] =
            (static_cast<double>(rank) + 0.5) / n;

    for (size_t i = 0; i < pool.sequences.size(); ++i) {
        MarkedSequence& s = pool.sequences[i];
        Rng& rng = marker_rngs[i];
        int prev = 0;
        for (size_t j = 0; j < s.times.size(); ++j) {
            // Event j's marker reads the last gap completed before its own
            // arrival interval; the first event falls back to its own.
            size_t ref = j == 0 ? 0 : j - 1;
            double q = quantile[offset[i] + ref];
            if (prev % 2 == 1) q = 1.0 - q;
            if (rng.uniform() < cfg.coupling) {
                s.markers[j] = static_cast<int>(
                    std::upper_bound(cdf.begin(), cdf.end() - 1, q) - cdf.begin());
            } else {
                s.markers[j] = rng.discrete(cfg.priors);
            }
            prev = s.markers[j];
        }
    }

    pool.build_index();
    return pool;
}

namespace {

// Greedy prefix of `order` whose event total reaches `budget`; the overshoot
// is bounded by the length of the last sequence taken.
size_t take_until(const SequencePool& pool, const std::vector<size_t>& order, long budget,
                  size_t start, long* taken_events) {
    long cum = 0;
    size_t i = start;
    while (i < order.size() && cum < budget) {
        cum += static_cast<long>(pool.sequences[order[i]].events());
        ++i;
    }
    if (cum < budget) throw Error("insufficient pool: wanted " + std::to_string(budget) +
                                  " events, found " + std::to_string(cum));
    *taken_events = cum;
    return i;
}

}  // namespace

std::vector<ProtocolSplit> make_protocol_splits(const SequencePool& pool,
                                                const std::vector<long>& budgets,
                                                long test_events, uint64_t seed) {
    if (budgets.empty()) throw ValidationError("no labeled budgets given");
    for (long b : budgets)
        if (b <= 0) throw ValidationError("labeled budgets must be positive");
    long max_budget = *std::max_element(budgets.begin(), budgets.end());
    if (pool.total_events() < max_budget + test_events)
        throw Error("insufficient pool: " + std::to_string(pool.total_events()) +
                    " events < max budget " + std::to_string(max_budget) + " + test " +
                    std::to_string(test_events));

    std::vector<size_t> order(pool.sequences.size());
    std::iota(order.begin(), order.end(), 0);
    Rng test_rng(mix_seed(seed, "split/test"));
    test_rng.shuffle(order);

    long got = 0;
    size_t test_end = 0;
    if (test_events > 0) test_end = take_until(pool, order, test_events, 0, &got);
    std::vector<std::string> test_ids;
    for (size_t i = 0; i < test_end; ++i) test_ids.push_back(pool.sequences[order[i]].id);
    std::sort(test_ids.begin(), test_ids.end());

    // Training sequences get one shared shuffle so labeled prefixes nest
    // across protocols.
    std::vector<size_t> train(order.begin() + test_end, order.end());
    Rng label_rng(mix_seed(seed, "split/labeled"));
    label_rng.shuffle(train);

    std::vector<long> sorted_budgets = budgets;
    std::sort(sorted_budgets.begin(), sorted_budgets.end());

    std::vector<ProtocolSplit> splits;
    for (size_t p = 0; p < sorted_budgets.size(); ++p) {
        ProtocolSplit sp;
        sp.name = "P-" + std::to_string(p + 1);
        sp.labeled_budget = sorted_budgets[p];
        sp.seed = seed;
        sp.test = test_ids;
        long labeled_events = 0;
        size_t cut = take_until(pool, train, sorted_budgets[p], 0, &labeled_events);
        for (size_t i = 0; i < cut; ++i) sp.labeled.push_back(pool.sequences[train[i]].id);
        for (size_t i = cut; i < train.size(); ++i)
            sp.unlabeled.push_back(pool.sequences[train[i]].id);
        std::sort(sp.labeled.begin(), sp.labeled.end());
        std::sort(sp.unlabeled.begin(), sp.unlabeled.end());
        splits.push_back(std::move(sp));
    }
    return splits;
}

ProtocolSplit load_split(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open split manifest '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw Error("malformed split manifest '" + path + "'");
    ProtocolSplit sp;
    try {
        sp.name = j.at("protocol").get<std::string>();
        sp.labeled = j.at("labeled").get<std::vector<std::string>>();
        sp.unlabeled = j.at("unlabeled").get<std::vector<std::string>>();
        sp.test = j.at("test").get<std::vector<std::string>>();
        sp.seed = j.at("seed").get<uint64_t>();
        sp.labeled_budget = j.value("labeled_budget", 0L);
    } catch (const json::exception& e) {
        throw Error("malformed split manifest '" + path + "': " + e.what());
    }
    return sp;
}

void save_split(const ProtocolSplit& split, const std::string& path) {
    json j;
    j["protocol"] = split.name;
    j["labeled_budget"] = split.labeled_budget;
    j["labeled"] = split.labeled;
    j["unlabeled"] = split.unlabeled;
    j["test"] = split.test;
    j["seed"] = split.seed;
    std::ofstream out(path);
    if (!out) throw Error("cannot write split manifest '" + path + "'");
    out << j.dump(2) << "\n";
}

SplitView resolve_split(const SequencePool& pool, const ProtocolSplit& split) {
    SplitView view;
    view.num_classes = pool.num_classes;
    for (const auto& id : split.labeled) {
        const MarkedSequence& s = pool.by_id(id);
        if (!s.labeled()) throw Error("labeled split references unlabeled sequence '" + id + "'");
        view.labeled.push_back(s);
    }
    for (const auto& id : split.unlabeled) {
        MarkedSequence s = pool.by_id(id);
        s.markers.clear();  // hidden ground truth never reaches training
        view.unlabeled.push_back(std::move(s));
    }
    for (const auto& id : split.test) view.test.push_back(pool.by_id(id));
    return view;
}

GapStats compute_gap_stats(const std::vector<const MarkedSequence*>& seqs) {
    double sum = 0.0, sum_sq = 0.0;
    long n = 0;
    for (const MarkedSequence* s : seqs) {
        for (size_t i = 0; i < s->times.size(); ++i) {
            double gap = i == 0 ? 0.0 : s->times[i] - s->times[i - 1];
            double x = std::log1p(gap);
            sum += x;
            sum_sq += x * x;
            ++n;
        }
    }
    if (n == 0) throw Error("cannot compute gap statistics of an empty training set");
    GapStats st;
    st.mean = sum / static_cast<double>(n);
    double var = sum_sq / static_cast<double>(n) - st.mean * st.mean;
    st.stddev = var > 1e-12 ? std::sqrt(var) : 1.0;
    return st;
}

bool Batch::fully_labeled() const {
    for (uint8_t f : labeled)
        if (!f) return false;
    return true;
}

Batch make_batch(const std::vector<const MarkedSequence*>& seqs, const GapStats& stats) {
    Batch b;
    b.batch = static_cast<int>(seqs.size());
    for (const MarkedSequence* s : seqs)
        b.max_len = std::max(b.max_len, static_cast<int>(s->events()));
    const long total = static_cast<long>(b.batch) * b.max_len;
    b.dt.assign(total, 0.0);
    b.raw_gap.assign(total, 0.0);
    b.marker.assign(total, -1);
    b.mask.assign(total, 0);
    b.labeled.assign(b.batch, 0);
    for (int i = 0; i < b.batch; ++i) {
        const MarkedSequence& s = *seqs[i];
        b.ids.push_back(s.id);
        b.labeled[i] = s.labeled() ? 1 : 0;
        for (size_t t = 0; t < s.events(); ++t) {
            long k = b.idx(i, static_cast<int>(t));
            double gap = t == 0 ? 0.0 : s.times[t] - s.times[t - 1];
            b.raw_gap[k] = gap;
            b.dt[k] = standardize_gap(gap, stats);
            b.mask[k] = 1;
            if (s.labeled()) b.marker[k] = s.markers[t];
        }
    }
    return b;
}

std::vector<Batch> make_batches(const std::vector<MarkedSequence>& seqs, int batch_size,
                                const GapStats& stats, uint64_t shuffle_seed) {
    if (batch_size < 1) throw ValidationError("batch size must be >= 1");
    std::vector<size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_seed != 0) {
        Rng rng(shuffle_seed);
        rng.shuffle(order);
    }
    std::vector<Batch> out;
    for (size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<const MarkedSequence*> chunk;
        for (size_t i = start; i < std::min(order.size(), start + batch_size); ++i)
            chunk.push_back(&seqs[order[i]]);
        out.push_back(make_batch(chunk, stats));
    }
    return out;
}

}  // namespace sslmtpp
