#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sslmtpp/metrics.hpp"
#include "sslmtpp/train.hpp"

using namespace sslmtpp;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "sslmtpp-test";
    fs::create_directories(dir);
    return (dir / name).string();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

ModelConfig small_model() {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.marker_embed_dim = 4;
    cfg.sup_hidden = 8;
    cfg.sup_layers = 2;
    cfg.enc_hidden = 4;
    cfg.enc_layers = 2;
    cfg.head_hidden = 6;
    cfg.dropout = 0.1;
    return cfg;
}

SplitView small_split(int sequences, double labeled_fraction, uint64_t seed) {
    GeneratorConfig gcfg;
    gcfg.sequences = sequences;
    gcfg.mean_length = 12;
    gcfg.length_sigma = 0.2;
    SequencePool pool = generate_synthetic(gcfg, seed);
    long budget = std::max(1L, static_cast<long>(pool.total_events() * labeled_fraction));
    auto splits = make_protocol_splits(pool, {budget}, 0, seed + 1);
    return resolve_split(pool, splits[0]);
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("adam leaves parameters alone under zero gradients") {
    ad::Parameter w("w", Tensor({2}, {1.5, -0.5}));
    AdamOptimizer opt({&w});
    opt.zero_grad();
    opt.step(0.1);
    CHECK(w.value.v == std::vector<double>{1.5, -0.5});
}

TEST_CASE("adam first step has bias-corrected magnitude close to lr") {
    ad::Parameter w("w", Tensor({1}, {1.0}));
    AdamOptimizer opt({&w});
    w.grad.v[0] = 1.0;
    opt.step(0.1);
    CHECK(std::fabs(w.value.v[0] - 0.9) < 1e-6);
}

TEST_CASE("adam descends a convex bowl") {
    ad::Parameter w("w", Tensor({1}, {1.0}));
    AdamOptimizer opt({&w});
    double prev = std::fabs(w.value.v[0]);
    for (int i = 0; i < 10; ++i) {
        w.zero_grad();
        w.grad.v[0] = 2.0 * w.value.v[0];  // d(w^2)/dw
        opt.step(0.05);
        double cur = std::fabs(w.value.v[0]);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("adam refuses a parameter with a missing gradient buffer") {
    ad::Parameter w("oddball", Tensor({2}, {1.0, 2.0}));
    AdamOptimizer opt({&w});
    w.grad.v.clear();
    w.grad.v.push_back(0.0);  // wrong size now
    CHECK_THROWS_WITH_AS(opt.step(0.1), doctest::Contains("oddball"), Error);
}

TEST_CASE("gradient clipping caps the global norm") {
    ad::Parameter a("a", Tensor({2}, {0.0, 0.0}));
    ad::Parameter b("b", Tensor({1}, {0.0}));
    AdamOptimizer opt({&a, &b});
    a.grad.v = {30.0, 40.0};
    b.grad.v = {120.0};
    double pre = opt.clip_global_norm(5.0);
    CHECK(pre == doctest::Approx(130.0).epsilon(1e-12));
    double post = 0.0;
    for (double g : a.grad.v) post += g * g;
    for (double g : b.grad.v) post += g * g;
    CHECK(std::sqrt(post) <= 5.0 + 1e-9);
}

TEST_CASE("training is deterministic per seed") {
    SplitView view = small_split(24, 0.5, 31);
    TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.batch_size = 8;
    tcfg.seed = 5;
    TrainResult r1 = train_model(view, small_model(), tcfg);
    TrainResult r2 = train_model(view, small_model(), tcfg);
    auto p1 = r1.model.params(), p2 = r2.model.params();
    for (size_t i = 0; i < p1.size(); ++i) CHECK(bitwise_equal(p1[i]->value.v, p2[i]->value.v));
    REQUIRE(r1.history.size() == r2.history.size());
    for (size_t e = 0; e < r1.history.size(); ++e)
        CHECK(r1.history[e].total == r2.history[e].total);
}

TEST_CASE("loss history has one finite row per epoch, total = sum of parts") {
    SplitView view = small_split(24, 0.5, 32);
    TrainConfig tcfg;
    tcfg.epochs = 3;
    tcfg.batch_size = 8;
    tcfg.seed = 6;
    TrainResult r = train_model(view, small_model(), tcfg);
    REQUIRE(r.history.size() == 3);
    for (const EpochLoss& e : r.history) {
        CHECK(std::isfinite(e.total));
        CHECK(e.marker >= 0.0);
        CHECK(e.time >= 0.0);
        CHECK(e.recon >= 0.0);
        CHECK(e.total == e.marker + e.time + e.recon);
    }
}

TEST_CASE("baseline mode trains only the supervised objective") {
    SplitView view = small_split(24, 0.5, 33);
    ModelConfig mcfg = small_model();
    TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.batch_size = 8;
    tcfg.seed = 7;
    tcfg.baseline_mode = true;
    TrainResult r = train_model(view, mcfg, tcfg);

    for (const EpochLoss& e : r.history) {
        CHECK(e.recon == 0.0);
        CHECK(e.total == e.marker + e.time);
    }

    // Encoder and decoder weights never move from their initialization.
    std::vector<const MarkedSequence*> train_seqs;
    for (const auto& s : view.labeled) train_seqs.push_back(&s);
    for (const auto& s : view.unlabeled) train_seqs.push_back(&s);
    GapStats stats = compute_gap_stats(train_seqs);
    SslMtppModel fresh =
        SslMtppModel::create(mcfg, 0.0, stats, mix_seed(tcfg.seed, "init"));
    for (size_t k = 0; k < fresh.encoder.size(); ++k) {
        CHECK(bitwise_equal(r.model.encoder[k].weight.value.v,
                            fresh.encoder[k].weight.value.v));
        CHECK(bitwise_equal(r.model.decoder[k].weight.value.v,
                            fresh.decoder[k].weight.value.v));
    }
    // ... while the supervised stack did move.
    CHECK_FALSE(bitwise_equal(r.model.sup_stack[0].weight.value.v,
                              fresh.sup_stack[0].weight.value.v));
}

TEST_CASE("empty labeled set is rejected") {
    SplitView view;
    view.num_classes = 3;
    TrainConfig tcfg;
    CHECK_THROWS_WITH_AS(train_model(view, small_model(), tcfg),
                         doctest::Contains("labeled set is empty"), Error);
}

TEST_CASE("divergence guard reports epoch and batch") {
    SplitView view = small_split(16, 1.0, 34);
    TrainConfig tcfg;
    tcfg.epochs = 4;
    tcfg.batch_size = 8;
    tcfg.seed = 8;
    tcfg.learning_rate = 1e308;  // guaranteed blow-up
    tcfg.grad_clip = 1e28;
    CHECK_THROWS_WITH_AS(train_model(view, small_model(), tcfg),
                         doctest::Contains("epoch"), Error);
}

TEST_CASE("checkpoint round-trip is byte-identical and prediction-exact") {
    SplitView view = small_split(20, 0.6, 35);
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 8;
    tcfg.seed = 9;
    TrainResult r = train_model(view, small_model(), tcfg);

    RunMeta meta{"P-1", "ssl", tcfg.seed};
    std::string p1 = temp_path("ckpt1.json"), p2 = temp_path("ckpt2.json");
    save_checkpoint(r.model, tcfg, meta, p1);
    Checkpoint back = load_checkpoint(p1);
    save_checkpoint(back.model, back.train, back.run, p2);
    CHECK(read_file(p1) == read_file(p2));

    CHECK(back.run.protocol == "P-1");
    CHECK(back.run.mode == "ssl");
    CHECK(back.train.seed == tcfg.seed);

    // identical predictions before and after the round trip
    EvalReport before = evaluate_model(r.model, view.test.empty() ? view.labeled : view.test);
    EvalReport after = evaluate_model(back.model, view.test.empty() ? view.labeled : view.test);
    CHECK(before.to_json() == after.to_json());
}

TEST_CASE("checkpoint into a mismatched config is rejected") {
    SplitView view = small_split(20, 0.6, 36);
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 8;
    TrainResult r = train_model(view, small_model(), tcfg);
    std::string path = temp_path("ckpt3.json");
    save_checkpoint(r.model, tcfg, {"P-1", "ssl", 1}, path);

    ModelConfig other = small_model();
    other.sup_hidden = 16;
    CHECK_THROWS_WITH_AS(load_checkpoint(path, other), doctest::Contains("config"), Error);
    CHECK(load_checkpoint(path, small_model()).model.cfg == small_model());

    std::string junk = temp_path("junk.json");
    std::ofstream(junk) << "{\"format\": \"nope\"}\n";
    CHECK_THROWS_WITH_AS(load_checkpoint(junk), doctest::Contains("not a valid checkpoint"),
                         Error);
}

TEST_CASE("history csv has the documented shape") {
    std::vector<EpochLoss> hist;
    hist.push_back({0.5, 0.25, 0.125, 0.875});
    hist.push_back({0.4, 0.2, 0.1, 0.7});
    std::string path = temp_path("hist.csv");
    write_history_csv(hist, path);
    std::string text = read_file(path);
    CHECK(text == "epoch,l_marker,l_time,l_recon,l_total\n1,0.5,0.25,0.125,0.875\n2,0.4,0.2,0.1,0.7\n");
}

TEST_CASE("flat config file round-trip with unknown-key rejection") {
    std::string path = temp_path("config.json");
    std::ofstream(path) << R"({"epochs": 7, "learning_rate": 0.005, "batch_size": 16,
        "lambda": 0.2, "seed": 42, "unlabeled_mix": 2, "grad_clip": 3.5,
        "baseline_mode": true})";
    TrainConfig c = load_train_config(path);
    CHECK(c.epochs == 7);
    CHECK(c.learning_rate == 0.005);
    CHECK(c.batch_size == 16);
    CHECK(c.lambda == 0.2);
    CHECK(c.seed == 42);
    CHECK(c.unlabeled_mix == 2);
    CHECK(c.grad_clip == 3.5);
    CHECK(c.baseline_mode);

    std::string bad = temp_path("config_bad.json");
    std::ofstream(bad) << R"({"epoch": 7})";
    CHECK_THROWS_WITH_AS(load_train_config(bad), doctest::Contains("unknown key"),
                         ValidationError);
}

TEST_CASE("unlabeled mix ratio controls reconstruction step count") {
    SplitView view = small_split(24, 0.3, 37);
    REQUIRE_FALSE(view.unlabeled.empty());
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 4;
    tcfg.seed = 10;
    tcfg.unlabeled_mix = 0;  // reconstruction only from the labeled side
    TrainResult r = train_model(view, small_model(), tcfg);
    CHECK(r.history[0].recon > 0.0);
}
