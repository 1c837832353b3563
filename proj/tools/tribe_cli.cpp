// tribe: command-line front end for the encoding pipeline.
//
//   tribe gen-synth --config synth.json --out runs/s1
//   tribe train --data runs/s1/manifest.json --config train.json --out runs/t1
//   tribe eval --data runs/s1/manifest.json --out runs/t1 --split val --mask text
//   tribe report runs/t1

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "tribe/ablation.hpp"
#include "tribe/config_json.hpp"
#include "tribe/ensembler.hpp"
#include "tribe/evaluator.hpp"
#include "tribe/synthgen.hpp"
#include "tribe/trainer.hpp"

namespace fs = std::filesystem;
using namespace tribe;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::string data;
    std::string checkpoint;
    std::string mask = "none";
    std::string split = "val";
    std::optional<std::uint64_t> seed;
    Index jobs = 1;
    bool force = false;
    std::string report_dir;
};

// Files produced under a run directory, merged across invocations.
class RunManifest {
public:
    RunManifest(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
        fs::create_directories(dir_);
    }
    void add(const fs::path& p) { files_.insert(fs::relative(p, dir_).generic_string()); }
    void commit() const {
        const fs::path path = dir_ / "run_manifest.json";
        json j = fs::exists(path) ? read_json_file(path) : json::object();
        std::set<std::string> all(files_.begin(), files_.end());
        if (j.contains("files"))
            for (const auto& f : j["files"]) all.insert(f.get<std::string>());
        j["files"] = all;
        auto& cmds = j["commands"];
        if (!cmds.is_array()) cmds = json::array();
        cmds.push_back(command_);
        write_json_file(path, j);
    }
    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    std::string command_;
    std::set<std::string> files_;
};

Index thread_cap(Index requested) {
    if (const char* env = std::getenv("TRIBE_NUM_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap > 0) return std::min<Index>(requested, cap);
    }
    return requested;
}

json load_config(const Options& o) { return o.config.empty() ? json::object() : read_json_file(o.config); }

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw std::invalid_argument(std::string("missing required flag ") + flag);
}

fs::path default_checkpoint(const Options& o) {
    return o.checkpoint.empty() ? fs::path(o.out) / "model" : fs::path(o.checkpoint);
}

std::optional<NoiseCeiling> try_ceiling(const DatasetManifest& m) {
    for (const auto& s : m.sessions)
        if (s.repeat_of) return noise_ceiling(m);
    return std::nullopt;
}

void write_scores(RunManifest& run, const std::string& stem, const ScoreTable& table,
                  const std::optional<NoiseCeiling>& ceiling) {
    const fs::path csv = run.dir() / (stem + ".csv");
    std::ofstream out(csv);
    write_score_csv(out, table, ceiling ? &*ceiling : nullptr);
    run.add(csv);
    const fs::path summary = run.dir() / (stem + ".summary.json");
    std::ofstream(summary) << score_summary_json(table, ceiling ? &*ceiling : nullptr) << '\n';
    run.add(summary);
    std::cout << stem << ": mean rho " << table.mean_score << " (" << table.nan_count << " NaN)\n";
}

void cmd_gen_synth(const Options& o) {
    require(o.out, "--out");
    SynthConfig c = load_config(o).get<SynthConfig>();
    if (o.seed) c.seed = *o.seed;
    RunManifest run(o.out, "gen-synth");
    const SynthResult r = generate(c, o.out);
    for (const auto& s : r.manifest.sessions) {
        for (const auto& [mod, rel] : s.feature_paths) {
            run.add(r.manifest.resolve(rel));
            run.add(sidecar_path(r.manifest.resolve(rel)));
        }
        run.add(r.manifest.resolve(*s.bold_path));
        run.add(sidecar_path(r.manifest.resolve(*s.bold_path)));
    }
    run.add(r.manifest_path);
    run.add(fs::path(o.out) / "teacher.json");
    write_json_file(fs::path(o.out) / "synth_config.json", c);
    run.add(fs::path(o.out) / "synth_config.json");
    run.commit();
    std::cout << "wrote " << r.manifest.sessions.size() << " sessions to " << r.manifest_path.string() << '\n';
}

void cmd_train(const Options& o) {
    require(o.data, "--data");
    require(o.out, "--out");
    const json cfg = load_config(o);
    reject_unknown_keys(cfg, {"net", "train"}, "train config");
    NetConfig net = cfg.value("net", json::object()).get<NetConfig>();
    TrainConfig tc = cfg.value("train", json::object()).get<TrainConfig>();
    if (o.seed) tc.seed = *o.seed;
    tc.withheld = ModalityMask::keep_only(o.mask);
    const fs::path stem = default_checkpoint(o);
    if (!o.force && fs::exists(checkpoint_sidecar(stem)) && fs::exists(checkpoint_blob(stem))) {
        std::cout << "checkpoint " << stem.string() << " already present; pass --force to retrain\n";
        return;
    }
    const DatasetManifest manifest = load_manifest(o.data);
    RunManifest run(o.out, "train");
    write_json_file(run.dir() / "config.json", {{"net", net}, {"train", tc}, {"data", o.data}});
    run.add(run.dir() / "config.json");

    const fs::path log_path = run.dir() / "train_log.jsonl";
    const TrainResult r = train(manifest, net, tc);
    {
        std::ofstream log(log_path);
        for (const auto& e : r.log) e.write_jsonl(log);
    }
    run.add(log_path);
    save_checkpoint(r.shipped(), stem);
    run.add(checkpoint_sidecar(stem));
    run.add(checkpoint_blob(stem));
    if (r.swa_net) {
        // the last-epoch weights, kept next to the averaged ones
        const fs::path final_stem = stem.string() + "_final";
        save_checkpoint(r.final_net, final_stem);
        run.add(checkpoint_sidecar(final_stem));
        run.add(checkpoint_blob(final_stem));
    }
    run.commit();
    std::cout << "trained " << r.log.size() << " epochs, best val " << r.best_val << (r.swa_net ? " (swa)" : "")
              << "\n";
}

void cmd_eval(const Options& o) {
    require(o.data, "--data");
    require(o.out, "--out");
    const DatasetManifest manifest = load_manifest(o.data);
    const Split split = parse_split(o.split);
    const ModalityMask mask = ModalityMask::keep_only(o.mask);
    ScoreTable t = score_model(default_checkpoint(o), manifest, split, mask);
    t.run_id = fs::path(o.out).filename().string();
    RunManifest run(o.out, "eval");
    write_scores(run, "scores_" + o.split + "_" + mask.describe(), t, try_ceiling(manifest));
    run.commit();
}

void cmd_probe(const Options& o) {
    require(o.data, "--data");
    require(o.out, "--out");
    const DatasetManifest manifest = load_manifest(o.data);
    const ProbeResult p = probe_modalities(load_checkpoint(default_checkpoint(o)), manifest, parse_split(o.split));
    RunManifest run(o.out, "probe");
    const fs::path csv = run.dir() / ("probe_" + o.split + ".csv");
    std::ofstream out(csv);
    write_probe_csv(out, p);
    run.add(csv);
    run.commit();
}

void cmd_ensemble_fit(const Options& o) {
    require(o.data, "--data");
    require(o.out, "--out");
    EnsembleConfig c = load_config(o).get<EnsembleConfig>();
    if (o.seed) c.seed = *o.seed;
    const DatasetManifest manifest = load_manifest(o.data);
    RunManifest run(o.out, "ensemble-fit");
    write_json_file(run.dir() / "ensemble_config.json", c);
    run.add(run.dir() / "ensemble_config.json");
    const EnsembleRegistry reg = train_members(c, manifest, o.out, thread_cap(o.jobs));
    const auto members = reg.load_members();
    const MatrixD scores = member_scores(members, manifest, Split::val);
    EnsembleWeights w = fit_weights(scores, c.temperature);
    w.fit_split = "val";
    save_weights(w, run.dir() / "weights.f32");
    run.add(run.dir() / "weights.f32");
    run.add(run.dir() / "registry.json");
    for (const auto& e : reg.members) {
        run.add(run.dir() / e.score_file);
        run.add(checkpoint_sidecar(run.dir() / e.checkpoint));
        run.add(checkpoint_blob(run.dir() / e.checkpoint));
    }
    run.commit();
    for (Index i = 0; i < scores.rows(); ++i)
        std::cout << reg.members[static_cast<std::size_t>(i)].id << ": val mean " << scores.row(i).mean() << '\n';
}

void cmd_ensemble_predict(const Options& o) {
    require(o.data, "--data");
    require(o.out, "--out");
    const EnsembleRegistry reg = EnsembleRegistry::load(fs::path(o.out) / "registry.json");
    std::vector<std::string> ids;
    for (const auto& e : reg.members) ids.push_back(e.id);
    const EnsembleWeights w = load_weights(fs::path(o.out) / "weights.f32", ids, "val");
    const DatasetManifest manifest = load_manifest(o.data);
    const auto members = reg.load_members();
    const EnsemblePrediction p = predict_ensemble(members, w, manifest, parse_split(o.split));
    RunManifest run(o.out, "ensemble-predict");
    write_scores(run, "scores_ensemble_" + o.split, p.table, try_ceiling(manifest));
    run.commit();
}

void cmd_ablate(const Options& o) {
    require(o.data, "--data");
    require(o.out, "--out");
    const json cfg = load_config(o);
    reject_unknown_keys(cfg, {"suite", "net", "train", "seeds", "scaling_videos", "eval_split"}, "ablate config");
    AblationConfig c;
    c.net = cfg.value("net", json::object()).get<NetConfig>();
    c.train = cfg.value("train", json::object()).get<TrainConfig>();
    if (cfg.contains("seeds")) cfg.at("seeds").get_to(c.seeds);
    if (cfg.contains("scaling_videos")) cfg.at("scaling_videos").get_to(c.scaling_videos);
    if (cfg.contains("eval_split")) c.eval_split = parse_split(cfg.at("eval_split").get<std::string>());
    if (o.seed) c.seeds = {*o.seed};
    const AblationSuite suite = parse_suite(cfg.value("suite", std::string("modality_subsets")));
    const DatasetManifest manifest = load_manifest(o.data);
    const AblationReport report = run_ablation(suite, manifest, c);
    RunManifest run(o.out, "ablate");
    const fs::path csv = run.dir() / ("ablation_" + std::string(suite_name(suite)) + ".csv");
    std::ofstream out(csv);
    report.write_csv(out);
    run.add(csv);
    json means = json::object();
    for (const auto& cond : report.conditions) {
        means[cond] = report.condition_mean(cond);
        std::cout << cond << ": " << report.condition_mean(cond) << '\n';
    }
    const fs::path summary = run.dir() / ("ablation_" + std::string(suite_name(suite)) + ".summary.json");
    write_json_file(summary, {{"suite", suite_name(suite)}, {"condition_means", means}});
    run.add(summary);
    run.commit();
}

// Reads a score CSV into per-parcel means of rho and rho_norm.
void read_score_csv(const fs::path& path, std::vector<double>& rho, std::vector<double>& rho_norm) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    if (line != "parcel_id,subject_id,rho,rho_max,rho_norm") throw std::runtime_error(path.string() + ": not a score CSV");
    std::map<long, std::array<double, 4>> acc;  // sum rho, n rho, sum norm, n norm
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string field[5];
        for (auto& f : field) std::getline(ss, f, ',');
        auto& a = acc[std::stol(field[0])];
        const double r = std::strtod(field[2].c_str(), nullptr), n = std::strtod(field[4].c_str(), nullptr);
        if (std::isfinite(r)) a[0] += r, a[1] += 1;
        if (std::isfinite(n)) a[2] += n, a[3] += 1;
    }
    for (const auto& [p, a] : acc) {
        if (a[1] > 0) rho.push_back(a[0] / a[1]);
        if (a[3] > 0) rho_norm.push_back(a[2] / a[3]);
    }
}

json describe(std::vector<double> v) {
    if (v.empty()) return {{"count", 0}};
    std::sort(v.begin(), v.end());
    auto q = [&](double f) {
        const double pos = f * double(v.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const auto hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
    };
    double mean = 0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    return {{"count", v.size()}, {"mean", mean}, {"median", q(0.5)}, {"q25", q(0.25)}, {"q75", q(0.75)},
            {"iqr", q(0.75) - q(0.25)}};
}

void write_histogram(const fs::path& path, const std::vector<double>& v, double lo, double hi, int bins) {
    std::vector<Index> counts(static_cast<std::size_t>(bins), 0);
    for (double x : v) {
        const int b = std::clamp(static_cast<int>(std::floor((x - lo) / (hi - lo) * bins)), 0, bins - 1);
        ++counts[static_cast<std::size_t>(b)];
    }
    std::ofstream out(path);
    out << "bin_lo,bin_hi,count\n";
    for (int b = 0; b < bins; ++b)
        out << lo + (hi - lo) * b / bins << ',' << lo + (hi - lo) * (b + 1) / bins << ','
            << counts[static_cast<std::size_t>(b)] << '\n';
}

void cmd_report(const Options& o) {
    const fs::path dir = o.report_dir.empty() ? fs::path(o.out) : fs::path(o.report_dir);
    if (dir.empty() || !fs::is_directory(dir)) throw std::invalid_argument("report: run directory required");
    RunManifest run(dir, "report");
    json summary = json::object();
    std::vector<fs::path> csvs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".csv" && e.path().filename().string().rfind("scores_", 0) == 0) csvs.push_back(e.path());
    std::sort(csvs.begin(), csvs.end());
    if (csvs.empty()) throw std::runtime_error("report: no scores_*.csv under " + dir.string());
    fs::create_directories(dir / "report");
    for (const auto& csv : csvs) {
        std::vector<double> rho, norm;
        read_score_csv(csv, rho, norm);
        const std::string stem = csv.stem().string();
        summary[stem] = {{"rho", describe(rho)}, {"rho_norm", describe(norm)}};
        const fs::path h1 = dir / "report" / (stem + ".rho_hist.csv");
        write_histogram(h1, rho, -1.0, 1.0, 40);
        run.add(h1);
        if (!norm.empty()) {
            const fs::path h2 = dir / "report" / (stem + ".rho_norm_hist.csv");
            write_histogram(h2, norm, -1.0, 2.0, 60);
            run.add(h2);
        }
    }
    const fs::path out = dir / "report" / "summary.json";
    write_json_file(out, summary);
    run.add(out);
    run.commit();
    std::cout << summary.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tribe: multimodal brain-encoding pipeline"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub, bool needs_data) {
        sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
        sub->add_option("--out", o.out, "run directory");
        sub->add_option("--seed", o.seed, "override the config seed");
        sub->add_option("--mask", o.mask, "visible modalities: text|audio|video|none or a+b")
            ->check([](const std::string& s) {
                try {
                    ModalityMask::keep_only(s);
                    return std::string();
                } catch (const std::exception& e) {
                    return std::string(e.what());
                }
            });
        sub->add_option("--jobs", o.jobs, "parallel jobs")->check(CLI::PositiveNumber);
        sub->add_option("--split", o.split, "train|val|test")->check(CLI::IsMember({"train", "val", "test"}));
        if (needs_data) sub->add_option("--data", o.data, "dataset manifest.json")->check(CLI::ExistingFile);
        sub->add_option("--checkpoint", o.checkpoint, "checkpoint stem (default <out>/model)");
    };
    std::vector<std::pair<CLI::App*, void (*)(const Options&)>> commands;
    auto add = [&](const char* name, const char* help, bool needs_data, void (*fn)(const Options&)) {
        CLI::App* sub = app.add_subcommand(name, help);
        common(sub, needs_data);
        commands.emplace_back(sub, fn);
        return sub;
    };
    add("gen-synth", "generate a synthetic teacher dataset", false, cmd_gen_synth);
    add("train", "train one encoder", true, cmd_train)->add_flag("--force", o.force, "retrain over an existing checkpoint");
    add("eval", "score a checkpoint on a split", true, cmd_eval);
    add("ensemble-fit", "train ensemble members and fit softmax weights on val", true, cmd_ensemble_fit);
    add("ensemble-predict", "blend ensemble members on a held-out split", true, cmd_ensemble_predict);
    add("probe", "solo-modality probing map", true, cmd_probe);
    add("ablate", "run an ablation suite", true, cmd_ablate);
    add("report", "summarize score CSVs of a run directory", false, cmd_report)
        ->add_option("run_dir", o.report_dir, "run directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        for (const auto& [sub, fn] : commands)
            if (sub->parsed()) fn(o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
