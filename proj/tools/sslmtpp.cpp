// sslmtpp command-line harness: synthetic pool generation, protocol
// splitting, SSL/baseline training, evaluation and the lambda ablation.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "sslmtpp/data.hpp"
#include "sslmtpp/metrics.hpp"
#include "sslmtpp/train.hpp"

using namespace sslmtpp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double x) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, ptr);
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path))
        throw ValidationError(what + " '" + path + "' does not exist");
}

fs::path ensure_out_dir(const std::string& out) {
    fs::path dir(out);
    fs::create_directories(dir);
    return dir;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    double pos = q * static_cast<double>(v.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, v.size() - 1);
    double w = pos - static_cast<double>(lo);
    return (1.0 - w) * v[lo] + w * v[hi];
}

// Run independent tasks over a small worker pool; results land in
// pre-assigned slots so the reduce is deterministic regardless of timing.
void run_parallel(int jobs, const std::vector<std::function<void()>>& tasks) {
    if (jobs <= 1 || tasks.size() <= 1) {
        for (const auto& t : tasks) t();
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(tasks.size());
    int n = std::min<int>(jobs, static_cast<int>(tasks.size()));
    for (int w = 0; w < n; ++w)
        workers.emplace_back([&] {
            while (true) {
                size_t i = next.fetch_add(1);
                if (i >= tasks.size()) break;
                try {
                    tasks[i]();
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& w : workers) w.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct GenerateArgs {
    GeneratorConfig cfg;
    uint64_t seed = 1;
    std::string out = "out";
};

int cmd_generate(const GenerateArgs& a) {
    a.cfg.validate();
    fs::path dir = ensure_out_dir(a.out);
    SequencePool pool = generate_synthetic(a.cfg, a.seed);
    fs::path file = dir / "pool.ndjson";
    save_pool(pool, file.string());

    std::vector<long> counts(a.cfg.classes, 0);
    long events = pool.total_events();
    for (const auto& s : pool.sequences)
        for (int m : s.markers) ++counts[m];
    std::cout << "pool: " << file.string() << "\n"
              << "sequences: " << pool.sequences.size() << "\n"
              << "events: " << events << "\n"
              << "mean length: " << std::fixed << std::setprecision(1)
              << static_cast<double>(events) / static_cast<double>(pool.sequences.size())
              << "\n";
    std::cout << "class shares:";
    for (int c = 0; c < a.cfg.classes; ++c)
        std::cout << " " << std::setprecision(3)
                  << 100.0 * static_cast<double>(counts[c]) / static_cast<double>(events)
                  << "%";
    std::cout << "\n";
    return 0;
}

struct SplitArgs {
    std::string pool;
    std::vector<long> budgets{10000, 20000, 30000, 50000, 140000, 700000};
    long test_events = 60000;
    uint64_t seed = 1;
    int classes = 0;
    std::string out = "out";
};

int cmd_split(const SplitArgs& a) {
    require_file(a.pool, "pool file");
    fs::path dir = ensure_out_dir(a.out);
    SequencePool pool = load_pool(a.pool, a.classes);
    std::vector<ProtocolSplit> splits =
        make_protocol_splits(pool, a.budgets, a.test_events, a.seed);

    auto events_of = [&](const std::vector<std::string>& ids) {
        long n = 0;
        for (const auto& id : ids) n += static_cast<long>(pool.by_id(id).events());
        return n;
    };
    std::cout << "protocol,labeled_events,unlabeled_events,test_events\n";
    for (const ProtocolSplit& sp : splits) {
        fs::path file = dir / (sp.name + ".json");
        save_split(sp, file.string());
        long lab = events_of(sp.labeled);
        long unlab = events_of(sp.unlabeled);
        if (unlab == 0)
            std::cerr << "warning: protocol " << sp.name << " has an empty unlabeled set\n";
        std::cout << sp.name << "," << lab << "," << unlab << "," << events_of(sp.test)
                  << "\n";
    }
    return 0;
}

struct ModelFlags {
    int classes = 0;  // 0: infer from pool
    int embed_dim = 16;
    int sup_hidden = 64;
    int sup_layers = 5;
    int enc_hidden = 32;
    int enc_layers = 2;
    int head_hidden = 32;
    double dropout = 0.1;

    ModelConfig to_config(int pool_classes) const {
        ModelConfig m;
        m.num_classes = classes > 0 ? classes : pool_classes;
        if (m.num_classes < 1)
            throw ValidationError("cannot infer class count; pass --classes");
        m.marker_embed_dim = embed_dim;
        m.sup_hidden = sup_hidden;
        m.sup_layers = sup_layers;
        m.enc_hidden = enc_hidden;
        m.enc_layers = enc_layers;
        m.head_hidden = head_hidden;
        m.dropout = dropout;
        return m;
    }
};

struct TrainArgs {
    std::string pool;
    std::string split;
    std::string mode = "ssl";
    std::string config_file;
    std::vector<uint64_t> seeds{1};
    std::string out = "out";
    int jobs = 1;
    ModelFlags model;
    TrainConfig base;  // flag-resolved training config (seed filled per run)
};

void write_run_manifest(const TrainArgs& a, const ModelConfig& mcfg, const fs::path& dir) {
    json j;
    j["pool"] = a.pool;
    j["split"] = a.split;
    j["mode"] = a.mode;
    j["seeds"] = a.seeds;
    j["model"] = {{"num_classes", mcfg.num_classes},
                  {"marker_embed_dim", mcfg.marker_embed_dim},
                  {"sup_hidden", mcfg.sup_hidden},
                  {"sup_layers", mcfg.sup_layers},
                  {"enc_hidden", mcfg.enc_hidden},
                  {"enc_layers", mcfg.enc_layers},
                  {"head_hidden", mcfg.head_hidden},
                  {"dropout", mcfg.dropout}};
    j["train"] = {{"epochs", a.base.epochs},
                  {"learning_rate", a.base.learning_rate},
                  {"batch_size", a.base.batch_size},
                  {"lambda", a.base.lambda},
                  {"unlabeled_mix", a.base.unlabeled_mix},
                  {"grad_clip", a.base.grad_clip},
                  {"baseline_mode", a.base.baseline_mode}};
    std::ofstream out(dir / "manifest.json");
    out << j.dump(2) << "\n";
}

int cmd_train(const TrainArgs& a) {
    require_file(a.pool, "pool file");
    require_file(a.split, "split manifest");
    if (a.mode != "ssl" && a.mode != "baseline")
        throw ValidationError("--mode must be 'ssl' or 'baseline'");
    if (a.seeds.empty()) throw ValidationError("--seeds must name at least one seed");
    fs::path dir = ensure_out_dir(a.out);

    SequencePool pool = load_pool(a.pool, a.model.classes);
    ProtocolSplit split = load_split(a.split);
    SplitView view = resolve_split(pool, split);
    ModelConfig mcfg = a.model.to_config(pool.num_classes);
    write_run_manifest(a, mcfg, dir);

    std::vector<std::function<void()>> tasks;
    for (uint64_t seed : a.seeds)
        tasks.push_back([&, seed] {
            TrainConfig tcfg = a.base;
            tcfg.seed = seed;
            tcfg.baseline_mode = a.mode == "baseline";
            tcfg.validate();
            TrainResult res = train_model(view, mcfg, tcfg);
            RunMeta meta{split.name, a.mode, seed};
            save_checkpoint(res.model, tcfg, meta,
                            (dir / ("checkpoint_seed" + std::to_string(seed) + ".json")).string());
            write_history_csv(res.history,
                              (dir / ("history_seed" + std::to_string(seed) + ".csv")).string());
        });
    run_parallel(a.jobs, tasks);
    for (uint64_t seed : a.seeds)
        std::cout << "trained seed " << seed << " -> "
                  << (dir / ("checkpoint_seed" + std::to_string(seed) + ".json")).string()
                  << "\n";
    return 0;
}

struct EvaluateArgs {
    std::string pool;
    std::string split;
    std::vector<std::string> checkpoints;
    int batch_size = 256;
    int classes = 0;
    std::string out = "out";
};

int cmd_evaluate(const EvaluateArgs& a) {
    require_file(a.pool, "pool file");
    require_file(a.split, "split manifest");
    if (a.checkpoints.empty()) throw ValidationError("no checkpoints given");
    for (const auto& c : a.checkpoints) require_file(c, "checkpoint");
    fs::path dir = ensure_out_dir(a.out);

    SequencePool pool = load_pool(a.pool, a.classes);
    ProtocolSplit split = load_split(a.split);
    SplitView view = resolve_split(pool, split);
    if (view.test.empty()) throw ValidationError("split manifest has an empty test set");

    struct Row {
        RunMeta run;
        EvalReport rep;
    };
    std::vector<Row> rows;
    for (const auto& path : a.checkpoints) {
        Checkpoint ck = load_checkpoint(path);
        rows.push_back({ck.run, evaluate_model(ck.model, view.test, a.batch_size)});
    }

    std::ofstream csv(dir / "report.csv");
    csv << "protocol,model,seed,avg_precision,avg_precision_score,macro_f1,micro_f1,"
           "time_mae_std,time_mae_raw,events\n";
    json jall = json::array();
    for (const Row& r : rows) {
        csv << r.run.protocol << "," << r.run.mode << "," << r.run.seed << ","
            << fmt(r.rep.avg_precision) << "," << fmt(r.rep.avg_precision_score) << ","
            << fmt(r.rep.macro_f1) << "," << fmt(r.rep.micro_f1) << ","
            << fmt(r.rep.time_mae_std) << "," << fmt(r.rep.time_mae_raw) << ","
            << r.rep.events << "\n";
        json e = json::parse(r.rep.to_json());
        e["protocol"] = r.run.protocol;
        e["model"] = r.run.mode;
        e["seed"] = r.run.seed;
        jall.push_back(e);
    }
    std::ofstream(dir / "report.json") << jall.dump(2) << "\n";

    // Table-2 style printout; multi-seed groups show median and IQR.
    std::map<std::pair<std::string, std::string>, std::vector<const Row*>> groups;
    for (const Row& r : rows) groups[{r.run.protocol, r.run.mode}].push_back(&r);
    std::cout << std::left << std::setw(10) << "protocol" << std::setw(12) << "model"
              << std::right << std::setw(16) << "avg_prec(%)" << std::setw(16)
              << "macro_f1(%)" << std::setw(16) << "micro_f1(%)" << "\n";
    for (const auto& [key, grp] : groups) {
        auto stat = [&](auto take) {
            std::vector<double> v;
            for (const Row* r : grp) v.push_back(take(r->rep));
            double med = median(v);
            double iqr = quantile(v, 0.75) - quantile(v, 0.25);
            std::ostringstream os;
            os << std::fixed << std::setprecision(2) << med;
            if (v.size() > 1) os << " (" << std::setprecision(2) << iqr << ")";
            return os.str();
        };
        std::cout << std::left << std::setw(10) << key.first << std::setw(12) << key.second
                  << std::right << std::setw(16)
                  << stat([](const EvalReport& r) { return r.avg_precision; })
                  << std::setw(16) << stat([](const EvalReport& r) { return r.macro_f1; })
                  << std::setw(16) << stat([](const EvalReport& r) { return r.micro_f1; })
                  << "\n";
    }
    return 0;
}

struct AblateArgs {
    std::string pool;
    std::string split;
    std::vector<double> lambdas{0.001, 0.01, 0.1, 1.0, 10.0};
    std::vector<uint64_t> seeds{1};
    int jobs = 1;
    int batch_size_eval = 256;
    ModelFlags model;
    TrainConfig base;
    std::string out = "out";
};

int cmd_ablate(const AblateArgs& a) {
    require_file(a.pool, "pool file");
    require_file(a.split, "split manifest");
    if (a.lambdas.empty()) throw ValidationError("--lambdas must name at least one value");
    if (a.seeds.empty()) throw ValidationError("--seeds must name at least one seed");
    for (double l : a.lambdas)
        if (l < 0.0) throw ValidationError("lambda values must be >= 0");
    fs::path dir = ensure_out_dir(a.out);

    SequencePool pool = load_pool(a.pool, a.model.classes);
    ProtocolSplit split = load_split(a.split);
    SplitView view = resolve_split(pool, split);
    if (view.test.empty()) throw ValidationError("split manifest has an empty test set");
    ModelConfig mcfg = a.model.to_config(pool.num_classes);

    std::vector<double> lambdas = a.lambdas;
    std::sort(lambdas.begin(), lambdas.end());

    struct Cell {
        double lambda;
        uint64_t seed;
        double avg_precision;
    };
    std::vector<Cell> cells(lambdas.size() * a.seeds.size());
    std::vector<std::function<void()>> tasks;
    for (size_t li = 0; li < lambdas.size(); ++li)
        for (size_t si = 0; si < a.seeds.size(); ++si)
            tasks.push_back([&, li, si] {
                TrainConfig tcfg = a.base;
                tcfg.lambda = lambdas[li];
                tcfg.seed = a.seeds[si];
                tcfg.validate();
                TrainResult res = train_model(view, mcfg, tcfg);
                EvalReport rep = evaluate_model(res.model, view.test, a.batch_size_eval);
                cells[li * a.seeds.size() + si] = {lambdas[li], a.seeds[si],
                                                   rep.avg_precision};
            });
    run_parallel(a.jobs, tasks);

    std::ofstream csv(dir / "ablation.csv");
    csv << "lambda,seed,avg_precision\n";
    for (const Cell& c : cells)
        csv << fmt(c.lambda) << "," << c.seed << "," << fmt(c.avg_precision) << "\n";

    std::cout << "lambda,median_avg_precision\n";
    for (size_t li = 0; li < lambdas.size(); ++li) {
        std::vector<double> v;
        for (size_t si = 0; si < a.seeds.size(); ++si)
            v.push_back(cells[li * a.seeds.size() + si].avg_precision);
        std::cout << fmt(lambdas[li]) << "," << fmt(median(v)) << "\n";
    }
    return 0;
}

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
    cmd->add_option("--classes", m.classes, "marker class count (0: infer from pool)");
    cmd->add_option("--embed-dim", m.embed_dim, "marker embedding dimension");
    cmd->add_option("--sup-hidden", m.sup_hidden, "supervised LSTM hidden size");
    cmd->add_option("--sup-layers", m.sup_layers, "supervised LSTM depth");
    cmd->add_option("--enc-hidden", m.enc_hidden, "encoder/decoder inner hidden size");
    cmd->add_option("--enc-layers", m.enc_layers, "encoder/decoder depth");
    cmd->add_option("--head-hidden", m.head_hidden, "prediction head hidden size");
    cmd->add_option("--dropout", m.dropout, "dropout after the supervised stack");
}

// Training flags with config-file support; flags win over the file.
void add_train_flags(CLI::App* cmd, TrainArgs* targs, AblateArgs* aargs) {
    TrainConfig& base = targs ? targs->base : aargs->base;
    auto* epochs = cmd->add_option("--epochs", base.epochs, "training epochs");
    auto* lr = cmd->add_option("--lr", base.learning_rate, "learning rate");
    auto* bs = cmd->add_option("--batch-size", base.batch_size, "sequences per batch");
    auto* lam = cmd->add_option("--lambda", base.lambda, "fusion weight");
    auto* mix = cmd->add_option("--unlabeled-mix", base.unlabeled_mix,
                                "unlabeled batches per labeled batch");
    auto* clip = cmd->add_option("--grad-clip", base.grad_clip, "global gradient norm cap");
    std::string* config_file = targs ? &targs->config_file : nullptr;
    if (config_file) {
        cmd->add_option("--config", *config_file, "flat JSON training config file");
        cmd->callback([=, &base] {
            if (config_file->empty()) return;
            require_file(*config_file, "config file");
            TrainConfig from_file = load_train_config(*config_file);
            // flags win over file values
            if (!epochs->count()) base.epochs = from_file.epochs;
            if (!lr->count()) base.learning_rate = from_file.learning_rate;
            if (!bs->count()) base.batch_size = from_file.batch_size;
            if (!lam->count()) base.lambda = from_file.lambda;
            if (!mix->count()) base.unlabeled_mix = from_file.unlabeled_mix;
            if (!clip->count()) base.grad_clip = from_file.grad_clip;
        });
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semi-supervised marked temporal point process toolkit"};
    app.require_subcommand(1);

    GenerateArgs gen;
    CLI::App* cgen = app.add_subcommand("generate", "generate a synthetic sequence pool");
    cgen->add_option("--sequences", gen.cfg.sequences, "number of sequences");
    cgen->add_option("--classes", gen.cfg.classes, "marker class count");
    cgen->add_option("--priors", gen.cfg.priors, "class prior probabilities")
        ->delimiter(',');
    cgen->add_option("--base-intensity", gen.cfg.base_intensity, "background event rate");
    cgen->add_option("--excitation", gen.cfg.excitation, "self-excitation strength in [0,1)");
    cgen->add_option("--decay", gen.cfg.decay, "excitation decay rate");
    cgen->add_option("--coupling", gen.cfg.coupling, "marker-timing coupling in [0,1]");
    cgen->add_option("--mean-length", gen.cfg.mean_length, "mean events per sequence");
    cgen->add_option("--length-sigma", gen.cfg.length_sigma, "lognormal length spread");
    cgen->add_option("--seed", gen.seed, "generator seed");
    cgen->add_option("--out", gen.out, "output directory");

    SplitArgs spl;
    CLI::App* csplit = app.add_subcommand("split", "emit protocol split manifests");
    csplit->add_option("--pool", spl.pool, "pool file")->required();
    csplit->add_option("--budgets", spl.budgets, "labeled event budgets")->delimiter(',');
    csplit->add_option("--test-events", spl.test_events, "held-out test event budget");
    csplit->add_option("--classes", spl.classes, "marker class count (0: infer)");
    csplit->add_option("--seed", spl.seed, "split seed");
    csplit->add_option("--out", spl.out, "output directory");

    TrainArgs tr;
    CLI::App* ctrain = app.add_subcommand("train", "train SSL or baseline models");
    ctrain->add_option("--pool", tr.pool, "pool file")->required();
    ctrain->add_option("--split", tr.split, "split manifest")->required();
    ctrain->add_option("--mode", tr.mode, "ssl | baseline");
    ctrain->add_option("--seed", tr.seeds, "training seed")->delimiter(',');
    ctrain->add_option("--seeds", tr.seeds, "training seeds")->delimiter(',');
    ctrain->add_option("--jobs", tr.jobs, "parallel workers for multi-seed runs");
    ctrain->add_option("--out", tr.out, "output directory");
    add_model_flags(ctrain, tr.model);
    add_train_flags(ctrain, &tr, nullptr);

    EvaluateArgs ev;
    CLI::App* ceval = app.add_subcommand("evaluate", "evaluate checkpoints on a test split");
    ceval->add_option("--pool", ev.pool, "pool file")->required();
    ceval->add_option("--split", ev.split, "split manifest with the test ids")->required();
    ceval->add_option("--checkpoints", ev.checkpoints, "checkpoint files")
        ->required()
        ->delimiter(',');
    ceval->add_option("--batch-size", ev.batch_size, "evaluation batch size");
    ceval->add_option("--classes", ev.classes, "marker class count (0: infer)");
    ceval->add_option("--out", ev.out, "output directory");

    AblateArgs ab;
    CLI::App* cablate = app.add_subcommand("ablate", "sweep the fusion weight lambda");
    cablate->add_option("--pool", ab.pool, "pool file")->required();
    cablate->add_option("--split", ab.split, "split manifest")->required();
    cablate->add_option("--lambdas", ab.lambdas, "lambda grid")->delimiter(',');
    cablate->add_option("--seeds", ab.seeds, "training seeds")->delimiter(',');
    cablate->add_option("--jobs", ab.jobs, "parallel workers");
    cablate->add_option("--out", ab.out, "output directory");
    add_model_flags(cablate, ab.model);
    add_train_flags(cablate, nullptr, &ab);

    try {
        app.parse(argc, argv);
        if (cgen->parsed()) return cmd_generate(gen);
        if (csplit->parsed()) return cmd_split(spl);
        if (ctrain->parsed()) return cmd_train(tr);
        if (ceval->parsed()) return cmd_evaluate(ev);
        if (cablate->parsed()) return cmd_ablate(ab);
        return 2;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
