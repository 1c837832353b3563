#include <array>
#include <cmath>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "tribe/trainer.hpp"

using namespace tribe;
using tribe::testing::desk_net;
using tribe::testing::desk_synth;
using tribe::testing::desk_train;
using tribe::testing::TempDir;

namespace {

// Independent schedule reference written from the formula, not the implementation.
double reference_lr(Index step, Index total, double peak, double frac) {
    const double warm = std::max(1.0, std::nearbyint(frac * double(total)));
    if (double(step) < warm) return peak * double(step) / warm;
    const double progress = (double(step) - warm) / (double(total - 1) - warm);
    return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename Scalar>
double loss_of(const std::vector<Matrix<Scalar>>& pred, const std::vector<Matrix<Scalar>>& target, LossKind k) {
    return compute_loss<Scalar>(pred, target, k).value;
}

SynthConfig small_synth(std::uint64_t seed) {
    SynthConfig c = desk_synth(seed);
    c.num_videos = 4;
    c.session_trs = 120;
    return c;
}

TrainConfig short_train(std::uint64_t seed) {
    TrainConfig t = desk_train(seed);
    t.epochs = 4;
    t.swa_start_epoch = 2;
    t.modality_dropout_p = 0.2;
    return t;
}

}  // namespace

TEST_CASE("modality mask distribution matches the enumeration of all 8 outcomes") {
    // P(masked) = p - P(all three drawn masked) / 3 after uniform re-enabling
    const double p = 0.2;
    const double oracle = p - p * p * p / 3.0;
    CHECK(oracle == doctest::Approx(0.2 - 0.008 / 3.0));
    std::mt19937_64 rng(42);
    const int n = 200000;
    std::array<int, kNumModalities> masked{};
    int none_visible = 0;
    for (int i = 0; i < n; ++i) {
        const ModalityMask m = sample_modality_mask(p, rng);
        if (!m.valid()) ++none_visible;
        for (int k = 0; k < kNumModalities; ++k) masked[k] += m.masked[k];
    }
    CHECK(none_visible == 0);
    const double sd = std::sqrt(oracle * (1 - oracle) / n);
    for (int k = 0; k < kNumModalities; ++k) CHECK(std::abs(double(masked[k]) / n - oracle) < 4 * sd);
}

TEST_CASE("modality masks: p = 0 never masks, p near 1 keeps exactly one, withheld stays masked") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 1000; ++i) CHECK(sample_modality_mask(0.0, rng) == ModalityMask::none());
    for (int i = 0; i < 1000; ++i) {
        const ModalityMask m = sample_modality_mask(0.99, rng);
        CHECK(m.valid());
    }
    const ModalityMask withheld = ModalityMask::keep_only("audio+video");
    for (int i = 0; i < 1000; ++i) {
        const ModalityMask m = sample_modality_mask(0.5, rng, withheld);
        CHECK(m[Modality::text]);
        CHECK(m.valid());
    }
}

TEST_CASE("losses: worked examples") {
    const std::vector<MatrixD> pred{(MatrixD(2, 1) << 1, 3).finished()};
    const std::vector<MatrixD> target{(MatrixD(2, 1) << 0, 0).finished()};
    CHECK(loss_of(pred, target, LossKind::mse) == doctest::Approx(5.0));
    CHECK(loss_of(pred, target, LossKind::smooth_l1) == doctest::Approx((0.5 + 2.5) / 2.0));
    CHECK(loss_of(pred, target, LossKind::huber) == doctest::Approx(1.5));

    const std::vector<MatrixD> a{(MatrixD(3, 1) << 1, 2, 3).finished()};
    const std::vector<MatrixD> b{(MatrixD(3, 1) << 2, 4, 6).finished()};
    const std::vector<MatrixD> c{(MatrixD(3, 1) << 3, 2, 1).finished()};
    CHECK(loss_of(a, b, LossKind::pearson) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(loss_of(a, c, LossKind::pearson) == doctest::Approx(2.0));
    CHECK_THROWS_AS(compute_loss<double>(a, std::vector<MatrixD>{MatrixD::Zero(2, 1)}, LossKind::mse),
                    std::invalid_argument);
}

TEST_CASE("loss gradients match finite differences") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 1.5);
    for (LossKind k : {LossKind::mse, LossKind::pearson, LossKind::smooth_l1, LossKind::huber}) {
        std::vector<MatrixD> pred(3, MatrixD(5, 4)), target(3, MatrixD(5, 4));
        for (int b = 0; b < 3; ++b)
            for (Index i = 0; i < 20; ++i) {
                pred[b].data()[i] = n(rng);
                target[b].data()[i] = n(rng);
            }
        const auto res = compute_loss<double>(pred, target, k);
        const double h = 1e-6;
        for (int b = 0; b < 3; ++b)
            for (Index i = 0; i < 20; ++i) {
                auto up = pred, down = pred;
                up[b].data()[i] += h;
                down[b].data()[i] -= h;
                const double fd = (loss_of(up, target, k) - loss_of(down, target, k)) / (2 * h);
                CHECK(res.grad[b].data()[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
            }
    }
}

TEST_CASE("lr schedule: warmup from zero, cosine to zero, matches an independent reference") {
    TrainConfig cfg;
    cfg.lr_peak = 1e-4;
    cfg.warmup_fraction = 0.1;
    for (Index total : {10, 37, 100, 1001}) {
        const Index warm = warmup_steps(total, cfg);
        CHECK(lr_at(0, total, cfg) == 0.0);
        CHECK(lr_at(warm, total, cfg) == doctest::Approx(cfg.lr_peak));
        CHECK(lr_at(total - 1, total, cfg) < 0.01 * cfg.lr_peak);
        for (Index s = 0; s < total; ++s)
            CHECK(lr_at(s, total, cfg) == doctest::Approx(reference_lr(s, total, cfg.lr_peak, 0.1)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(lr_at(10, 10, cfg), std::invalid_argument);
}

TEST_CASE("AdamW matches a hand-written reference") {
    const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.05;
    VectorD p(3);
    p << 0.5, -1.0, 2.0;
    VectorD ref = p;
    AdamW opt(3, b1, b2, eps, wd);
    VectorD m = VectorD::Zero(3), v = VectorD::Zero(3);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n;
    for (int t = 1; t <= 25; ++t) {
        VectorD g(3);
        for (int i = 0; i < 3; ++i) g(i) = n(rng);
        opt.step(p, g, lr);
        for (int i = 0; i < 3; ++i) {
            ref(i) *= 1.0 - lr * wd;
            m(i) = b1 * m(i) + (1 - b1) * g(i);
            v(i) = b2 * v(i) + (1 - b2) * g(i) * g(i);
            const double mh = m(i) / (1 - std::pow(b1, t)), vh = v(i) / (1 - std::pow(b2, t));
            ref(i) -= lr * mh / (std::sqrt(vh) + eps);
        }
        CHECK((p - ref).cwiseAbs().maxCoeff() <= 1e-12);
    }
    CHECK(opt.steps() == 25);
}

TEST_CASE("SWA: shipped weights are the mean of per-epoch snapshots from swa_start on") {
    TempDir dir("swa");
    const SynthResult data = generate(small_synth(3), dir.path());
    const TrainConfig cfg = short_train(1);
    std::vector<VectorD> snapshots;
    TrainHooks hooks;
    hooks.on_epoch_end = [&](Index epoch, const TribeNet<float>& net) {
        if (epoch >= cfg.swa_start_epoch) snapshots.push_back(net.params().cast<double>());
    };
    const TrainResult r = train(data.manifest, desk_net(), cfg, &hooks);
    REQUIRE(r.swa_net.has_value());
    REQUIRE(snapshots.size() == 3);
    const VectorD mean = (snapshots[0] + snapshots[1] + snapshots[2]) / 3.0;
    CHECK((r.swa_net->params().cast<double>() - mean).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(r.log.size() == 4);
    CHECK(!r.log[0].swa_active);
    CHECK(r.log[1].swa_active);

    TrainConfig last = cfg;
    last.swa_start_epoch = last.epochs;
    const TrainResult r2 = train(data.manifest, desk_net(), last);
    REQUIRE(r2.swa_net.has_value());
    CHECK(r2.swa_net->params() == r2.final_net.params());
}

TEST_CASE("training is deterministic given the seed") {
    TempDir dir("det");
    const SynthResult data = generate(small_synth(4), dir.path());
    const TrainResult a = train(data.manifest, desk_net(), short_train(7));
    const TrainResult b = train(data.manifest, desk_net(), short_train(7));
    const TrainResult c = train(data.manifest, desk_net(), short_train(8));
    CHECK(a.shipped().params() == b.shipped().params());
    CHECK(a.shipped().params() != c.shipped().params());
    for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].val_pearson == b.log[i].val_pearson);
}

TEST_CASE("desk-scale training recovers a noiseless linear teacher") {
    TempDir dir("fit");
    const SynthResult data = generate(desk_synth(), dir.path());
    const TrainResult r = train(data.manifest, desk_net(), desk_train(0));
    REQUIRE(r.log.size() == 20);
    CHECK(r.log[4].val_pearson > r.log[0].val_pearson);
    CHECK(r.log.back().val_pearson > 0.7);
    CHECK(std::isfinite(r.best_val));
}

TEST_CASE("training configuration errors") {
    TempDir dir("errs");
    SynthConfig sc = small_synth(5);
    const SynthResult data = generate(sc, dir.path());
    DatasetManifest no_val = data.manifest;
    for (auto& s : no_val.sessions)
        if (s.split == Split::val) s.split = Split::train;
    CHECK_THROWS_WITH_AS(train(no_val, desk_net(), short_train(0)), doctest::Contains("empty val split"),
                         std::runtime_error);

    TrainConfig bad = short_train(0);
    bad.swa_start_epoch = bad.epochs + 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = short_train(0);
    bad.modality_dropout_p = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
