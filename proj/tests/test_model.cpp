#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "sslmtpp/model.hpp"

using namespace sslmtpp;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.marker_embed_dim = 4;
    cfg.sup_hidden = 6;
    cfg.sup_layers = 2;
    cfg.enc_hidden = 4;
    cfg.enc_layers = 2;
    cfg.head_hidden = 5;
    cfg.dropout = 0.0;
    return cfg;
}

Batch two_sequence_batch() {
    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, 1.0, 2.5, 3.0}, {0, 1, 2, 1}});
    seqs.push_back({"b", {0.0, 0.7}, {2, 0}});
    GapStats st{0.3, 0.9};
    return make_batch({&seqs[0], &seqs[1]}, st);
}

void zero_params(SslMtppModel& m) {
    for (ad::Parameter* p : m.params()) std::fill(p->value.v.begin(), p->value.v.end(), 0.0);
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("zero-weight encoder produces all-zero embeddings") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 1);
    zero_params(m);
    ad::Graph g;
    EncoderOut enc = encode_sequence(g, m, two_sequence_batch());
    for (const auto& step : enc.steps)
        for (double x : step.tensor().v) CHECK(x == 0.0);
    for (const auto& s : enc.layer_summary)
        for (double x : s.tensor().v) CHECK(x == 0.0);
}

TEST_CASE("permuting the batch permutes encoder outputs identically") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0.1, 1.2}, 2);
    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, 1.0, 2.5}, {0, 1, 2}});
    seqs.push_back({"b", {0.0, 0.7, 4.0}, {2, 0, 1}});
    GapStats st{0.0, 1.0};
    Batch fwd = make_batch({&seqs[0], &seqs[1]}, st);
    Batch rev = make_batch({&seqs[1], &seqs[0]}, st);

    ad::Graph g1, g2;
    EncoderOut e1 = encode_sequence(g1, m, fwd);
    EncoderOut e2 = encode_sequence(g2, m, rev);
    const int H = m.cfg.sup_hidden;
    for (size_t t = 0; t < e1.steps.size(); ++t) {
        const Tensor& a = e1.steps[t].tensor();
        const Tensor& b = e2.steps[t].tensor();
        for (int j = 0; j < H; ++j) {
            CHECK(a.v[j] == b.v[H + j]);
            CHECK(a.v[H + j] == b.v[j]);
        }
    }
}

TEST_CASE("encoder gradients pass the finite-difference check") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 3);
    Batch batch = two_sequence_batch();
    std::vector<ad::Parameter*> params;
    for (auto& c : m.encoder) c.collect(params);

    auto build = [&](ad::Graph& g) {
        EncoderOut enc = encode_sequence(g, m, batch);
        ad::Value acc;
        for (const auto& s : enc.layer_summary) {
            ad::Value term = g.sum(g.mul(s, s));
            acc = acc.valid() ? g.add(acc, term) : term;
        }
        return acc;
    };
    double err = test::gradcheck(
        params,
        [&] {
            ad::Graph g;
            return build(g).scalar();
        },
        [&] {
            for (auto* p : params) p->zero_grad();
            ad::Graph g;
            g.backward(build(g));
        });
    CHECK(err < test::kGradTol);
}

TEST_CASE("reconstruction loss is zero when the decoder reproduces its input") {
    // Zero-weight decoder emits exactly its bias; make every standardized
    // gap equal that bias so reconstruction is perfect.
    ModelConfig cfg = tiny_config();
    SslMtppModel m = SslMtppModel::create(cfg, 0.1, {0.0, 1.0}, 4);
    zero_params(m);
    const double c = 2.0;
    const double feature = std::log1p(c);  // stats are identity here
    m.decoder_out.bias.value.v[0] = feature;

    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, c, 2 * c, 3 * c}, {0, 0, 0, 0}});
    Batch batch = make_batch({&seqs[0]}, m.stats);
    // first event's gap feature is log1p(0) = 0, not `feature`; patch it so
    // every real position matches the decoder's constant output
    batch.dt[batch.idx(0, 0)] = feature;

    ad::Graph g;
    CHECK(reconstruction_loss(g, m, batch).scalar() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("unit squared error: zero targets, unit outputs") {
    ModelConfig cfg = tiny_config();
    SslMtppModel m = SslMtppModel::create(cfg, 0.1, {0.0, 1.0}, 5);
    zero_params(m);
    m.decoder_out.bias.value.v[0] = 1.0;  // decoder constant 1, targets 0

    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, 1.0, 2.0}, {0, 0, 0}});
    Batch batch = make_batch({&seqs[0]}, m.stats);
    for (int t = 0; t < batch.max_len; ++t) batch.dt[batch.idx(0, t)] = 0.0;

    ad::Graph g;
    CHECK(reconstruction_loss(g, m, batch).scalar() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("reconstruction loss equals the hand-computed masked mean") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0.2, 1.1}, 6);
    Batch batch = two_sequence_batch();

    ad::Graph g;
    ReconSum rs = reconstruction_sum(g, m, batch);
    double loss = reconstruction_loss(g, m, batch).scalar();

    double hand = 0.0;
    long count = 0;
    for (int t = 0; t < batch.max_len; ++t) {
        const Tensor& out = rs.outputs[t].tensor();
        for (int i = 0; i < batch.batch; ++i) {
            if (!batch.mask[batch.idx(i, t)]) continue;
            double d = batch.dt[batch.idx(i, t)] - out.v[i];
            hand += d * d;
            ++count;
        }
    }
    hand /= static_cast<double>(count);
    CHECK(count == 6);
    CHECK(loss == doctest::Approx(hand).epsilon(1e-12));
}

TEST_CASE("reconstruction ignores markers entirely") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0.2, 1.1}, 7);
    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, 1.0, 2.5}, {0, 1, 2}});
    MarkedSequence relabeled = seqs[0];
    relabeled.markers = {2, 0, 1};
    MarkedSequence stripped = seqs[0];
    stripped.markers.clear();

    auto loss_of = [&](const MarkedSequence& s) {
        Batch b = make_batch({&s}, m.stats);
        ad::Graph g;
        return reconstruction_loss(g, m, b).scalar();
    };
    double l0 = loss_of(seqs[0]);
    CHECK(l0 == loss_of(relabeled));
    CHECK(l0 == loss_of(stripped));
}

TEST_CASE("supervised embedding: single-step batch equals a manual cell chain") {
    ModelConfig cfg = tiny_config();
    SslMtppModel m = SslMtppModel::create(cfg, 0.1, {0, 1}, 8);
    Batch batch;
    batch.batch = 1;
    batch.max_len = 1;
    batch.dt = {0.4};
    batch.raw_gap = {0.4};
    batch.marker = {2};
    batch.mask = {1};
    batch.labeled = {1};
    batch.ids = {"x"};

    ad::Graph g;
    std::vector<ad::Value> emb = supervised_embedding(g, m, batch, false, nullptr);
    REQUIRE(emb.size() == 1);

    ad::Value x = g.concat(g.constant(Tensor({1, 1}, {0.4})), m.marker_embed.lookup(g, {2}));
    ad::Value h = x;
    for (const auto& cell : m.sup_stack) {
        auto st = cell.step(g, h, cell.initial_state(g, 1));
        h = st.h;
    }
    CHECK(bitwise_equal(emb[0].tensor().v, h.tensor().v));
}

TEST_CASE("identical sequences in a batch produce identical embeddings") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 9);
    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, 1.0, 3.0}, {0, 2, 1}});
    seqs.push_back({"b", {0.0, 1.0, 3.0}, {0, 2, 1}});
    Batch batch = make_batch({&seqs[0], &seqs[1]}, m.stats);
    ad::Graph g;
    std::vector<ad::Value> emb = supervised_embedding(g, m, batch, false, nullptr);
    const int H = m.cfg.sup_hidden;
    for (const auto& step : emb) {
        const Tensor& t = step.tensor();
        for (int j = 0; j < H; ++j) CHECK(t.v[j] == t.v[H + j]);
    }
}

TEST_CASE("supervised path rejects real positions without markers") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 10);
    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, 1.0}, {}});  // unlabeled
    Batch batch = make_batch({&seqs[0]}, m.stats);
    ad::Graph g;
    CHECK_THROWS_WITH_AS(supervised_embedding(g, m, batch, false, nullptr),
                         doctest::Contains("requires markers"), Error);
}

TEST_CASE("supervised gradients w.r.t. marker embedding match finite differences") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 11);
    Batch batch = two_sequence_batch();
    std::vector<ad::Parameter*> params{&m.marker_embed.weight};

    auto build = [&](ad::Graph& g) {
        std::vector<ad::Value> emb = supervised_embedding(g, m, batch, false, nullptr);
        ad::Value acc;
        for (const auto& e : emb) {
            ad::Value term = g.sum(g.mul(e, e));
            acc = acc.valid() ? g.add(acc, term) : term;
        }
        return acc;
    };
    double err = test::gradcheck(
        params,
        [&] {
            ad::Graph g;
            return build(g).scalar();
        },
        [&] {
            for (auto* p : params) p->zero_grad();
            ad::Graph g;
            g.backward(build(g));
        });
    CHECK(err < test::kGradTol);
}

TEST_CASE("fusion arithmetic and shape checks") {
    ad::Graph g;
    ad::Value f = g.constant(Tensor({1, 2}, {1, 2}));
    ad::Value e = g.constant(Tensor({1, 2}, {10, 20}));
    CHECK(fuse(g, f, e, 0.1).tensor().v == std::vector<double>{2, 4});
    // lambda = 0 returns f itself, not a copy
    ad::Value same = fuse(g, f, e, 0.0);
    CHECK(same.id == f.id);
    ad::Value bad = g.constant(Tensor({1, 3}, {1, 2, 3}));
    CHECK_THROWS_WITH_AS(fuse(g, f, bad, 0.5), doctest::Contains("fuse"), Error);
}

TEST_CASE("zero-weight heads give uniform markers and zero gap") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 12);
    zero_params(m);
    ad::Graph g;
    StepPrediction p = predict_step(g, m, g.constant(Tensor::zeros({2, 6})));
    for (double x : p.marker_probs.tensor().v)
        CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-12));
    for (double x : p.next_gap.tensor().v) CHECK(x == 0.0);
}

TEST_CASE("marker probabilities always lie on the simplex") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 13);
    Rng rng(55);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor fused = Tensor::zeros({3, 6});
        for (double& x : fused.v) x = rng.uniform(-3.0, 3.0);
        ad::Graph g;
        StepPrediction p = predict_step(g, m, g.constant(fused));
        const Tensor& probs = p.marker_probs.tensor();
        for (int r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (int c = 0; c < 3; ++c) {
                double v = probs.v[r * 3 + c];
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::fabs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("argmax is invariant to a constant logit shift") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 14);
    Tensor fused = Tensor::zeros({1, 6});
    for (int j = 0; j < 6; ++j) fused.v[j] = 0.3 * j - 1.0;

    auto argmax_of = [&](double shift) {
        SslMtppModel shifted = SslMtppModel::create(tiny_config(), 0.1, {0, 1}, 14);
        for (double& b : shifted.marker_head_out.bias.value.v) b += shift;
        ad::Graph g;
        StepPrediction p = predict_step(g, shifted, g.constant(fused));
        const auto& v = p.marker_probs.tensor().v;
        return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    };
    CHECK(argmax_of(0.0) == argmax_of(7.5));
}

TEST_CASE("near-one-hot correct predictions give near-zero marker loss") {
    ModelConfig cfg = tiny_config();
    SslMtppModel m = SslMtppModel::create(cfg, 0.0, {0.0, 1.0}, 15);
    zero_params(m);
    m.marker_head_out.bias.value.v[0] = 80.0;  // class 0 prob ~ 1 exactly

    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, 1.0, 2.0, 3.0}, {0, 0, 0, 0}});
    Batch batch = make_batch({&seqs[0]}, m.stats);
    ad::Graph g;
    SupervisedLosses losses = supervised_losses(g, m, batch, false, nullptr);
    CHECK(std::fabs(losses.marker.scalar()) < 1e-9);
}

TEST_CASE("uniform prediction over three classes costs ln 3") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.0, {0.0, 1.0}, 16);
    zero_params(m);
    Batch batch = two_sequence_batch();
    ad::Graph g;
    SupervisedLosses losses = supervised_losses(g, m, batch, false, nullptr);
    CHECK(losses.marker.scalar() == doctest::Approx(std::log(3.0)).epsilon(1e-9));
}

TEST_CASE("exact gap predictions give zero time loss") {
    ModelConfig cfg = tiny_config();
    SslMtppModel m = SslMtppModel::create(cfg, 0.0, {0.0, 1.0}, 17);
    zero_params(m);
    const double c = 1.7;
    m.time_head_out.bias.value.v[0] = std::log1p(c);

    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, c, 2 * c, 3 * c}, {0, 1, 2, 0}});
    Batch batch = make_batch({&seqs[0]}, m.stats);
    ad::Graph g;
    SupervisedLosses losses = supervised_losses(g, m, batch, false, nullptr);
    CHECK(losses.time.scalar() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("composite loss is exactly the sum of its parts") {
    SslMtppModel m = SslMtppModel::create(tiny_config(), 0.1, {0.2, 1.3}, 18);
    Batch labeled = two_sequence_batch();
    std::vector<MarkedSequence> useqs;
    useqs.push_back({"u", {0.0, 0.5, 1.8}, {}});
    Batch unlabeled = make_batch({&useqs[0]}, m.stats);

    ad::Graph g;
    CompositeLoss loss = composite_loss(g, m, labeled, &unlabeled, true, false, nullptr);
    REQUIRE(loss.recon.has_value());
    double parts = loss.time.scalar() + loss.marker.scalar() + loss.recon->scalar();
    CHECK(loss.total.scalar() == parts);

    // reconstruction averages over the union of both batches
    ad::Graph g2;
    ReconSum rl = reconstruction_sum(g2, m, labeled);
    ReconSum ru = reconstruction_sum(g2, m, unlabeled);
    double expect = (rl.sum_sq.scalar() + ru.sum_sq.scalar()) /
                    static_cast<double>(rl.count + ru.count);
    CHECK(loss.recon->scalar() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("baseline construction: lambda 0 and no-autoencoder model coincide bitwise") {
    ModelConfig with_ae = tiny_config();
    ModelConfig without_ae = tiny_config();
    without_ae.autoencoder = false;
    const uint64_t seed = 20;
    SslMtppModel a = SslMtppModel::create(with_ae, 0.0, {0.1, 1.2}, seed);
    SslMtppModel b = SslMtppModel::create(without_ae, 0.0, {0.1, 1.2}, seed);

    // Supervised-side parameters are initialized identically.
    CHECK(bitwise_equal(a.marker_embed.weight.value.v, b.marker_embed.weight.value.v));
    for (int k = 0; k < with_ae.sup_layers; ++k)
        CHECK(bitwise_equal(a.sup_stack[k].weight.value.v, b.sup_stack[k].weight.value.v));
    CHECK(bitwise_equal(a.marker_head_out.weight.value.v, b.marker_head_out.weight.value.v));
    CHECK(bitwise_equal(a.time_head_out.weight.value.v, b.time_head_out.weight.value.v));

    Batch batch = two_sequence_batch();
    ad::Graph ga, gb;
    ModelForward fa = model_forward(ga, a, batch, false, nullptr);
    ModelForward fb = model_forward(gb, b, batch, false, nullptr);
    for (size_t t = 0; t < fa.marker_probs.size(); ++t) {
        CHECK(bitwise_equal(fa.marker_probs[t].tensor().v, fb.marker_probs[t].tensor().v));
        CHECK(bitwise_equal(fa.next_gap[t].tensor().v, fb.next_gap[t].tensor().v));
    }

    // Gradients of the supervised objective agree bitwise too.
    CompositeLoss la = composite_loss(ga, a, batch, nullptr, false, false, nullptr);
    CompositeLoss lb = composite_loss(gb, b, batch, nullptr, false, false, nullptr);
    ga.backward(la.total);
    gb.backward(lb.total);
    CHECK(la.total.scalar() == lb.total.scalar());
    CHECK(bitwise_equal(a.sup_stack[0].weight.grad.v, b.sup_stack[0].weight.grad.v));
    CHECK(bitwise_equal(a.marker_embed.weight.grad.v, b.marker_embed.weight.grad.v));

    // Encoder/decoder parameters of the lambda-0 model receive no gradient.
    for (auto& c : a.encoder)
        for (double gr : c.weight.grad.v) CHECK(gr == 0.0);
    for (auto& c : a.decoder)
        for (double gr : c.weight.grad.v) CHECK(gr == 0.0);
}

TEST_CASE("padded positions contribute zero gradient") {
    ModelConfig cfg = tiny_config();
    const uint64_t seed = 21;
    GapStats st{0.15, 1.05};

    std::vector<MarkedSequence> seqs;
    seqs.push_back({"a", {0.0, 1.0, 2.5, 3.1}, {0, 1, 2, 1}});  // 3 targets
    seqs.push_back({"b", {0.0, 0.7}, {2, 0}});                  // 1 target

    // Route 1: padded two-sequence batch.
    SslMtppModel m1 = SslMtppModel::create(cfg, 0.1, st, seed);
    Batch padded = make_batch({&seqs[0], &seqs[1]}, st);
    ad::Graph g1;
    CompositeLoss l1 = composite_loss(g1, m1, padded, nullptr, true, false, nullptr);
    g1.backward(l1.total);

    // Route 2: the two sequences processed separately (no padding anywhere)
    // and recombined with the same target/position weights.
    SslMtppModel m2 = SslMtppModel::create(cfg, 0.1, st, seed);
    Batch ba = make_batch({&seqs[0]}, st);
    Batch bb = make_batch({&seqs[1]}, st);
    ad::Graph g2;
    SupervisedLosses sa = supervised_losses(g2, m2, ba, false, nullptr);
    SupervisedLosses sb = supervised_losses(g2, m2, bb, false, nullptr);
    ReconSum ra = reconstruction_sum(g2, m2, ba);
    ReconSum rb = reconstruction_sum(g2, m2, bb);
    const double nt = 4.0, np = 6.0;  // targets and real positions overall
    ad::Value sup =
        g2.add(g2.add(g2.mul(g2.add(sa.marker, sa.time), g2.constant(3.0 / nt)),
                      g2.mul(g2.add(sb.marker, sb.time), g2.constant(1.0 / nt))),
               g2.mul(g2.add(ra.sum_sq, rb.sum_sq), g2.constant(1.0 / np)));
    g2.backward(sup);

    CHECK(l1.total.scalar() == doctest::Approx(sup.scalar()).epsilon(1e-12));
    auto p1 = m1.params(), p2 = m2.params();
    for (size_t k = 0; k < p1.size(); ++k)
        for (size_t i = 0; i < p1[k]->grad.v.size(); ++i)
            CHECK(p1[k]->grad.v[i] == doctest::Approx(p2[k]->grad.v[i]).epsilon(1e-10));
}

TEST_CASE("composite gradient through both branches passes finite differences") {
    ModelConfig cfg = tiny_config();
    SslMtppModel m = SslMtppModel::create(cfg, 0.1, {0.2, 1.1}, 22);
    Batch batch = two_sequence_batch();
    std::vector<ad::Parameter*> params = m.params();

    auto loss_value = [&] {
        ad::Graph g;
        return composite_loss(g, m, batch, nullptr, true, false, nullptr).total.scalar();
    };
    double err = test::gradcheck(params, loss_value, [&] {
        for (auto* p : params) p->zero_grad();
        ad::Graph g;
        g.backward(composite_loss(g, m, batch, nullptr, true, false, nullptr).total);
    });
    CHECK(err < test::kGradTol);
}
