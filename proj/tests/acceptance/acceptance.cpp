// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "support.hpp"
#include "tribe/ablation.hpp"
#include "tribe/ensembler.hpp"
#include "tribe/evaluator.hpp"

using namespace tribe;
using namespace tribe::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << std::fixed << v;
    return s.str();
}

std::vector<char> file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome gradient_check() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    Index checked = 0;
    for (Aggregation agg : {Aggregation::concatenate, Aggregation::average}) {
        NetConfig c = tiny_net(2, 5);
        c.modality_aggregation = agg;
        if (agg == Aggregation::average) c.hidden_size = c.proj_dim;
        TribeNet<double> net(c);
        std::mt19937_64 rng(17);
        std::normal_distribution<double> n(0.0, 0.3);
        for (Index i = 0; i < net.num_params(); ++i) net.params()(i) = n(rng);
        for (const auto& e : net.registry())
            if (e.name.find("gain") != std::string::npos) net.params().segment(e.offset, e.size()).array() += 1.0;
        const auto x = random_inputs<double>(c, rng);
        MatrixD w(c.window.trs_per_window, c.num_parcels);
        for (Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
        for (const ModalityMask& mask : {ModalityMask::none(), ModalityMask::keep_only("audio")}) {
            ForwardCache<double> cache;
            net.forward(x, 0, mask, &cache);
            VectorD grad = VectorD::Zero(net.num_params());
            net.backward(cache, w, grad);
            auto loss = [&] { return (net.forward(x, 0, mask).array() * w.array()).sum(); };
            const double h = 1e-3;  // fourth-order central stencil
            for (Index i = 0; i < net.num_params(); ++i) {
                const double orig = net.params()(i);
                auto at = [&](double delta) {
                    net.params()(i) = orig + delta;
                    const double v = loss();
                    net.params()(i) = orig;
                    return v;
                };
                const double fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
                worst = std::max(worst, std::abs(grad(i) - fd) / std::max({std::abs(grad(i)), std::abs(fd), 1e-6}));
                ++checked;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-4 && secs < 60.0, std::to_string(checked) + " parameters, max rel error " +
                                              std::to_string(worst) + ", " + fmt(secs, 1) + " s"};
}

Outcome oracle_equivalences() {
    std::vector<std::string> failures;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    };

    // pearson against the closed form and a direct two-pass formula
    const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
    expect(std::abs(pearson(x, y) - 0.8) <= 1e-10, "pearson 0.8");
    {
        std::mt19937_64 rng(1);
        std::normal_distribution<double> n;
        std::vector<double> a(57), b(57);
        for (int i = 0; i < 57; ++i) {
            a[i] = n(rng);
            b[i] = a[i] + n(rng);
        }
        double ma = 0, mb = 0;
        for (int i = 0; i < 57; ++i) ma += a[i] / 57, mb += b[i] / 57;
        double sab = 0, saa = 0, sbb = 0;
        for (int i = 0; i < 57; ++i) {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma) * (a[i] - ma);
            sbb += (b[i] - mb) * (b[i] - mb);
        }
        expect(std::abs(pearson(a, b) - sab / std::sqrt(saa * sbb)) <= 1e-10, "pearson brute force");
    }

    // adaptive_avg_pool against explicit overlapping-bin means
    {
        MatrixD r(298, 3);
        for (Index i = 0; i < r.size(); ++i) r.data()[i] = std::sin(0.37 * double(i));
        const MatrixD p = adaptive_avg_pool(r, 100);
        double err = 0;
        for (Index i = 0; i < 100; ++i) {
            VectorD acc = VectorD::Zero(3);
            Index count = 0;
            for (Index t = 0; t < 298; ++t)
                if (t * 100 < (i + 1) * 298 && (t + 1) * 100 > i * 298) {
                    acc += r.row(t).transpose();
                    ++count;
                }
            err = std::max(err, (p.row(i).transpose() - acc / double(count)).cwiseAbs().maxCoeff());
        }
        MatrixD four(4, 1);
        four << 1, 2, 3, 4;
        const MatrixD p4 = adaptive_avg_pool(four, 2);
        expect(err <= 1e-10 && p4(0, 0) == 1.5 && p4(1, 0) == 3.5, "adaptive_avg_pool");
    }

    // lr_at against the written-out schedule
    {
        TrainConfig cfg;
        cfg.lr_peak = 3e-4;
        const Index total = 513;
        const double warm = std::max(1.0, std::nearbyint(0.1 * total));
        double err = 0;
        for (Index s = 0; s < total; ++s) {
            const double ref = double(s) < warm ? cfg.lr_peak * double(s) / warm
                                                : cfg.lr_peak * 0.5 *
                                                      (1 + std::cos(M_PI * (double(s) - warm) / (double(total - 1) - warm)));
            err = std::max(err, std::abs(lr_at(s, total, cfg) - ref));
        }
        expect(err <= 1e-10 && lr_at(0, total, cfg) == 0.0, "lr_at");
    }

    // fit_weights: softmax (0.3, 0) at temperature 0.3
    {
        MatrixD s(2, 1);
        s << 0.3, 0.0;
        const MatrixD w = fit_weights(s, 0.3).weights;
        const double e = std::exp(1.0);
        expect(std::abs(w(0, 0) - e / (1 + e)) <= 1e-10 && std::abs(w(1, 0) - 1 / (1 + e)) <= 1e-10 &&
                   std::abs(w(0, 0) - 0.7311) < 5e-5 && std::abs(w(1, 0) - 0.2689) < 5e-5,
               "fit_weights");
    }

    // noise ceiling: rho_self = 1/3 -> rho_max = sqrt(1/2); two-repeat ceiling equals per-column pearson
    {
        expect(std::abs(rho_max_from_self(1.0 / 3.0) - std::sqrt(0.5)) <= 1e-10 &&
                   std::abs(rho_max_from_self(1.0 / 3.0) - 0.70711) < 5e-6,
               "rho_max");
        BoldSeries a, b;
        a.data = MatrixF::Random(80, 5);
        b.data = a.data + MatrixF::Random(80, 5);
        const NoiseCeiling c = noise_ceiling(a, b);
        double err = 0;
        for (Index p = 0; p < 5; ++p) {
            const double r = pearson(a.data.col(p), b.data.col(p));
            err = std::max(err, std::abs(c.rho_self(p) - r));
            err = std::max(err, std::abs(c.rho_max(p) - std::sqrt(2.0 * r / (1.0 + r))));
        }
        expect(err <= 1e-10, "noise_ceiling");
    }

    if (failures.empty()) return {true, "pearson, adaptive_avg_pool, lr_at, fit_weights, noise_ceiling"};
    std::string d = "mismatch:";
    for (const auto& f : failures) d += " " + f;
    return {false, d};
}

Outcome teacher_recovery() {
    const auto t0 = std::chrono::steady_clock::now();
    TempDir dir("acc_teacher");
    const SynthResult data = generate(desk_synth(), dir.path());
    const TrainResult r = train(data.manifest, desk_net(), desk_train(0));
    const ScoreTable raw = score_model(r.shipped(), data.manifest, Split::val, ModalityMask::none());
    const ScoreTable norm = normalized_scores(raw, noise_ceiling(data.manifest));
    const double secs = seconds_since(t0);
    return {norm.mean_score >= 0.9 && secs < 600.0,
            "normalized val pearson " + fmt(norm.mean_score) + " (>= 0.9), " + fmt(secs, 1) + " s"};
}

Outcome noise_ceiling_calibration() {
    TempDir dir("acc_ceiling");
    SynthConfig c = desk_synth(31);
    c.num_parcels = 240;
    c.num_videos = 3;
    c.num_val_videos = 2;
    c.session_trs = 400;
    c.signal_std = 1.0;
    c.noise_std = 1.0;
    const NoiseCeiling ceil = noise_ceiling(generate(c, dir.path()).manifest);
    const double mean = ceil.rho_self.mean();
    return {mean >= 0.45 && mean <= 0.55 && ceil.rho_self.size() >= 200,
            "mean rho_self " + fmt(mean) + " over " + std::to_string(ceil.rho_self.size()) + " parcels"};
}

AblationConfig desk_ablation() {
    AblationConfig cfg;
    cfg.net = desk_net();
    cfg.train = desk_train();
    cfg.seeds = {0, 1, 2};
    return cfg;
}

Outcome multimodal_ordering(const DatasetManifest& interaction) {
    const AblationReport rep = run_ablation(AblationSuite::modality_subsets, interaction, desk_ablation());
    double tri = 0, bi = -1, uni = -1;
    std::string best_bi, best_uni;
    for (const auto& name : rep.conditions) {
        const double m = rep.condition_mean(name);
        const auto visible = ModalityMask::keep_only(name).num_unmasked();
        if (visible == 3) tri = m;
        if (visible == 2 && m > bi) bi = m, best_bi = name;
        if (visible == 1 && m > uni) uni = m, best_uni = name;
    }
    return {tri - bi >= 0.01 && bi - uni >= 0.01, "trimodal " + fmt(tri) + " > " + best_bi + " " + fmt(bi) + " > " +
                                                      best_uni + " " + fmt(uni) + " (gaps >= 0.01, 3 seeds)"};
}

Outcome architecture_ablation(const DatasetManifest& interaction) {
    const AblationReport nt = run_ablation(AblationSuite::no_transformer, interaction, desk_ablation());
    const AblationReport ss = run_ablation(AblationSuite::single_subject, interaction, desk_ablation());
    const double full = nt.condition_mean("full"), flat = nt.condition_mean("no_transformer");
    const double multi = ss.condition_mean("multi_subject"), single = ss.condition_mean("single_subject");
    return {full - flat >= 0.02 && multi >= single - 0.005,
            "full " + fmt(full) + " vs no_transformer " + fmt(flat) + " (gap >= 0.02); multi_subject " + fmt(multi) +
                " vs single_subject " + fmt(single) + " (>= single - 0.005)"};
}

Outcome data_scaling() {
    TempDir dir("acc_scaling");
    SynthConfig c = interaction_synth(200);
    c.num_videos = 17;
    c.num_val_videos = 1;
    const SynthResult data = generate(c, dir.path());
    AblationConfig cfg = desk_ablation();
    cfg.scaling_videos = {2, 4, 8, 16};
    const AblationReport rep = run_ablation(AblationSuite::sessions_scaling, data.manifest, cfg);
    std::vector<double> means;
    std::string detail;
    for (Index n : cfg.scaling_videos) {
        means.push_back(rep.condition_mean("videos=" + std::to_string(n)));
        detail += (detail.empty() ? "" : ", ") + std::to_string(n) + ": " + fmt(means.back());
    }
    int inversions = 0;
    double worst = 0;
    for (std::size_t i = 1; i < means.size(); ++i)
        if (means[i] < means[i - 1]) {
            ++inversions;
            worst = std::max(worst, means[i - 1] - means[i]);
        }
    return {inversions == 0 || (inversions == 1 && worst <= 0.005),
            "training videos " + detail + " (" + std::to_string(inversions) + " inversions)"};
}

Outcome ensembling() {
    TempDir dir("acc_ens");
    SynthConfig c = interaction_synth(300);
    c.num_videos = 9;
    c.num_val_videos = 1;
    c.num_test_videos = 1;
    const SynthResult data = generate(c, dir / "data");

    EnsembleConfig ec;
    ec.num_models = 8;
    ec.temperature = 0.3;
    ec.seed = 1;
    ec.base_net = desk_net();
    ec.base_train = desk_train(0);
    // four feature layers: every anchor set must leave each group non-empty
    ec.grid.layer_anchors = {{0.5, 0.75, 1.0}, {0.0, 0.5, 1.0}, {0.5, 1.0}, {0.25, 0.5, 0.75, 1.0}};
    const EnsembleRegistry reg = train_members(ec, data.manifest, dir / "ens", 1);
    const auto members = reg.load_members();

    const MatrixD val = member_scores(members, data.manifest, Split::val);
    const EnsembleWeights w = fit_weights(val, ec.temperature);
    const double colsum_err = (w.weights.colwise().sum().array() - 1.0).abs().maxCoeff();

    const EnsemblePrediction ens = predict_ensemble(members, w, data.manifest, Split::test);
    double best = -1;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < members.size(); ++i) {
        const double s = score_model(members[i], data.manifest, Split::test, ModalityMask::none()).mean_score;
        if (s > best) best = s, best_i = i;
    }
    return {ens.table.mean_score >= best - 0.005 && colsum_err <= 1e-6,
            "ensemble " + fmt(ens.table.mean_score) + " vs best member " + reg.members[best_i].id + " " + fmt(best) +
                " on held-out test videos (weights fit on val); max |colsum - 1| " + std::to_string(colsum_err)};
}

Outcome probing() {
    TempDir dir("acc_probe");
    const SynthResult data = generate(desk_synth(400), dir.path());
    TrainConfig tc = desk_train(0);
    tc.modality_dropout_p = 0.3;
    const TrainResult r = train(data.manifest, desk_net(), tc);
    const ProbeResult p = probe_modalities(r.shipped(), data.manifest, Split::val);
    Index wired = 0, hits = 0;
    for (std::size_t i = 0; i < data.teacher.parcel_drivers.size(); ++i) {
        const auto& d = data.teacher.parcel_drivers[i];
        if (d.is_pair()) continue;
        ++wired;
        hits += p.argmax[i] == d.modalities.front();
    }
    const double frac = double(hits) / double(wired);
    return {frac >= 0.9, std::to_string(hits) + "/" + std::to_string(wired) + " single-modality parcels (" +
                             fmt(100 * frac, 1) + "%, >= 90%)"};
}

Outcome determinism() {
    TempDir dir("acc_det");
    SynthConfig c = desk_synth(500);
    c.num_videos = 4;
    const SynthResult data = generate(c, dir / "data");
    TrainConfig tc = desk_train(42);
    tc.epochs = 6;
    tc.swa_start_epoch = 4;
    tc.modality_dropout_p = 0.2;
    save_checkpoint(train(data.manifest, desk_net(), tc).shipped(), dir / "a");
    save_checkpoint(train(data.manifest, desk_net(), tc).shipped(), dir / "b");
    const bool blob = file_bytes(checkpoint_blob(dir / "a")) == file_bytes(checkpoint_blob(dir / "b"));
    const bool side = file_bytes(checkpoint_sidecar(dir / "a")) == file_bytes(checkpoint_sidecar(dir / "b"));
    return {blob && side, std::string("weights ") + (blob ? "identical" : "differ") + ", sidecar " +
                              (side ? "identical" : "differs")};
}

}  // namespace

int main() {
    int failed = 0;
    auto run = [&](const std::string& name, const std::function<Outcome()>& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
        failed += o.pass ? 0 : 1;
    };

    run("gradient_correctness", gradient_check);
    run("oracle_equivalences", oracle_equivalences);
    run("teacher_recovery", teacher_recovery);
    run("noise_ceiling_calibration", noise_ceiling_calibration);

    TempDir dir("acc_interaction");
    std::optional<SynthResult> interaction;
    try {
        interaction = generate(interaction_synth(100), dir.path());
    } catch (const std::exception& e) {
        std::cout << "FAIL interaction_dataset: " << e.what() << std::endl;
        ++failed;
    }
    if (interaction) {
        run("multimodal_ordering", [&] { return multimodal_ordering(interaction->manifest); });
        run("architecture_ablation", [&] { return architecture_ablation(interaction->manifest); });
    }
    run("data_scaling", data_scaling);
    run("ensembling", ensembling);
    run("probing", probing);
    run("determinism", determinism);

    std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : std::string("acceptance: all criteria passed"))
              << std::endl;
    return failed ? 1 : 0;
}
