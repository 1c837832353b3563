#include <cmath>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "tribe/ensembler.hpp"

using namespace tribe;
using tribe::testing::desk_net;
using tribe::testing::desk_synth;
using tribe::testing::desk_train;
using tribe::testing::TempDir;

namespace {

EnsembleConfig base_config(Index models, std::uint64_t seed = 0) {
    EnsembleConfig c;
    c.num_models = models;
    c.seed = seed;
    c.base_net = desk_net();
    c.base_train = desk_train(10);
    return c;
}

}  // namespace

TEST_CASE("fit_weights: softmax over members per parcel") {
    MatrixD s(2, 3);
    s << 0.3, 0.1, 0.5,  //
        0.0, 0.1, 0.2;
    const EnsembleWeights w = fit_weights(s, 0.3);
    const double e = std::exp(1.0);
    CHECK(w.weights(0, 0) == doctest::Approx(e / (1 + e)).epsilon(1e-12));
    CHECK(w.weights(0, 1) == doctest::Approx(0.5));
    CHECK(w.weights(0, 2) == doctest::Approx(e / (1 + e)).epsilon(1e-12));
    CHECK(w.member_ids == std::vector<std::string>{"member-000", "member-001"});

    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 0.3);
    MatrixD r(8, 50);
    for (Index i = 0; i < r.size(); ++i) r.data()[i] = n(rng);
    const EnsembleWeights a = fit_weights(r, 0.3);
    const EnsembleWeights b = fit_weights((r.array() + 7.0).matrix(), 0.3);
    CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.weights.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK((a.weights.array() >= 0).all());

    // low temperature concentrates on the best member
    const EnsembleWeights cold = fit_weights(r, 1e-4);
    for (Index p = 0; p < r.cols(); ++p) {
        Index best = 0;
        r.col(p).maxCoeff(&best);
        CHECK(cold.weights(best, p) == doctest::Approx(1.0));
    }

    MatrixD bad = r;
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(fit_weights(bad, 0.3), std::invalid_argument);
    CHECK_THROWS_AS(fit_weights(r, 0.0), std::invalid_argument);
}

TEST_CASE("sample_grid: member 0 is the base config; draws are reproducible and uniform") {
    const auto one = sample_grid(base_config(1));
    REQUIRE(one.size() == 1);
    CHECK(one[0].draw == GridDraw{});
    CHECK(one[0].train.loss == LossKind::mse);
    CHECK(one[0].train.modality_dropout_p == 0.2);
    CHECK(one[0].train.seed == 10);
    CHECK(one[0].net.layer_groups.anchors == std::vector<double>{0.5, 0.75, 1.0});
    CHECK(one[0].net.modality_aggregation == Aggregation::concatenate);
    CHECK(one[0].net.use_subject_embedding);

    const auto a = sample_grid(base_config(8, 3)), b = sample_grid(base_config(8, 3));
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].draw == b[i].draw);
        CHECK(a[i].train.seed == 10 + i);
        CHECK(a[i].id == b[i].id);
        CHECK(a[i].net.hidden_size % a[i].net.num_heads == 0);
        if (a[i].net.modality_aggregation == Aggregation::average) CHECK(a[i].net.hidden_size == a[i].net.proj_dim);
    }

    const Index n = 10001;
    const auto many = sample_grid(base_config(n, 5));
    const auto sizes = EnsembleGrid{}.axis_sizes();
    for (std::size_t axis = 0; axis < sizes.size(); ++axis) {
        std::vector<double> counts(static_cast<std::size_t>(sizes[axis]), 0.0);
        for (Index i = 1; i < n; ++i) counts[static_cast<std::size_t>(many[std::size_t(i)].draw.index[axis])] += 1;
        const double k = double(sizes[axis]);
        const double expected = double(n - 1) / k;
        const double sd = std::sqrt(double(n - 1) * (1.0 / k) * (1.0 - 1.0 / k));
        for (double c : counts) CHECK(std::abs(c - expected) < 3.5 * sd);
    }
}

TEST_CASE("blend_predictions: linear in member predictions, one-hot and single-member cases") {
    std::mt19937_64 rng(8);
    std::normal_distribution<float> n;
    auto rand = [&]() {
        MatrixF m(10, 4);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
        return m;
    };
    const std::vector<std::vector<MatrixF>> preds{{rand(), rand()}, {rand(), rand()}, {rand(), rand()}};
    MatrixD w(3, 4);
    w << 1, 0, 0.2, 0.5,  //
        0, 1, 0.3, 0.25,  //
        0, 0, 0.5, 0.25;
    const auto out = blend_predictions(preds, w);
    REQUIRE(out.size() == 2);
    for (std::size_t s = 0; s < 2; ++s) {
        CHECK(out[s].col(0) == preds[0][s].col(0));
        CHECK(out[s].col(1) == preds[1][s].col(1));
        const MatrixF manual = 0.2f * preds[0][s].col(2) + 0.3f * preds[1][s].col(2) + 0.5f * preds[2][s].col(2);
        CHECK((out[s].col(2) - manual).cwiseAbs().maxCoeff() < 1e-5f);
    }
    const auto single = blend_predictions({preds[1]}, MatrixD::Ones(1, 4));
    CHECK(single[0] == preds[1][0]);

    // linearity: blending a + b equals blend(a) + blend(b)
    std::vector<std::vector<MatrixF>> sum = preds;
    for (auto& m : sum)
        for (auto& x : m) x *= 2.0f;
    const auto doubled = blend_predictions(sum, w);
    CHECK((doubled[0] - 2.0f * out[0]).cwiseAbs().maxCoeff() < 1e-5f);
    CHECK_THROWS_AS(blend_predictions(preds, MatrixD::Ones(2, 4)), std::invalid_argument);
}

TEST_CASE("ensemble: trained members, weights round trip, fit split is refused") {
    TempDir dir("ens");
    SynthConfig sc = desk_synth(21);
    sc.num_videos = 5;
    sc.num_test_videos = 1;
    sc.session_trs = 120;
    const SynthResult data = generate(sc, dir / "data");
    EnsembleConfig cfg = base_config(2);
    cfg.base_train.epochs = 2;
    cfg.base_train.swa_start_epoch = 2;
    cfg.grid.layer_anchors = {{0.5, 0.75, 1.0}, {0.5, 1.0}};
    const EnsembleRegistry reg = train_members(cfg, data.manifest, dir / "ens", 2);
    REQUIRE(reg.members.size() == 2);
    CHECK(fs::exists(checkpoint_sidecar(dir.path() / "ens" / reg.members[1].checkpoint)));
    const auto members = EnsembleRegistry::load(dir / "ens" / "registry.json").load_members();
    REQUIRE(members.size() == 2);

    const MatrixD val = member_scores(members, data.manifest, Split::val);
    const EnsembleWeights w = fit_weights(val, cfg.temperature);
    save_weights(w, dir / "weights.f32");
    const EnsembleWeights back = load_weights(dir / "weights.f32", w.member_ids, "val");
    CHECK((back.weights - w.weights).cwiseAbs().maxCoeff() < 1e-6);

    CHECK_THROWS_AS(predict_ensemble(members, w, data.manifest, Split::val), std::invalid_argument);
    const EnsemblePrediction test = predict_ensemble(members, w, data.manifest, Split::test);
    CHECK(test.table.scores.allFinite());

    // resuming trains nothing new and keeps the checkpoints
    const auto before = fs::last_write_time(checkpoint_blob(dir.path() / "ens" / reg.members[0].checkpoint));
    train_members(cfg, data.manifest, dir / "ens", 1);
    CHECK(fs::last_write_time(checkpoint_blob(dir.path() / "ens" / reg.members[0].checkpoint)) == before);

    // one member with weight 1 reproduces that member's predictions exactly
    const EnsembleWeights only = fit_weights(val.topRows(1), 0.3);
    const EnsemblePrediction solo = predict_ensemble(std::span<const TribeNet<float>>(members.data(), 1), only,
                                                     data.manifest, Split::test);
    const ScoreTable direct = score_model(members[0], data.manifest, Split::test, ModalityMask::none());
    CHECK((solo.table.scores - direct.scores).cwiseAbs().maxCoeff() < 1e-12);
}
