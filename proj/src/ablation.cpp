#include "tribe/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <stdexcept>

namespace tribe {

std::string_view suite_name(AblationSuite s) {
    switch (s) {
        case AblationSuite::modality_subsets: return "modality_subsets";
        case AblationSuite::single_subject: return "single_subject";
        case AblationSuite::no_transformer: return "no_transformer";
        case AblationSuite::sessions_scaling: return "sessions_scaling";
    }
    return "?";
}

AblationSuite parse_suite(std::string_view name) {
    for (auto s : {AblationSuite::modality_subsets, AblationSuite::single_subject, AblationSuite::no_transformer,
                   AblationSuite::sessions_scaling})
        if (suite_name(s) == name) return s;
    throw std::invalid_argument("unknown ablation suite '" + std::string(name) + "'");
}

double AblationReport::condition_mean(const std::string& condition) const {
    std::map<std::uint64_t, std::pair<double, Index>> per_seed;
    for (const auto& r : rows)
        if (r.condition == condition && std::isfinite(r.score)) {
            per_seed[r.seed].first += r.score;
            ++per_seed[r.seed].second;
        }
    if (per_seed.empty()) throw std::invalid_argument("ablation: no scores for condition '" + condition + "'");
    double total = 0;
    for (const auto& [seed, acc] : per_seed) total += acc.first / double(acc.second);
    return total / double(per_seed.size());
}

void AblationReport::write_csv(std::ostream& out) const {
    out << "condition,seed,subject_id,score\n";
    out << std::setprecision(9);
    for (const auto& r : rows) out << r.condition << ',' << r.seed << ',' << r.subject_id << ',' << r.score << '\n';
}

std::vector<ModalityMask> modality_subsets() {
    std::vector<ModalityMask> out;
    for (int bits = 7; bits >= 1; --bits) {
        ModalityMask m;
        for (int i = 0; i < kNumModalities; ++i) m.masked[static_cast<std::size_t>(i)] = !(bits & (1 << i));
        out.push_back(m);
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const ModalityMask& a, const ModalityMask& b) { return a.num_unmasked() > b.num_unmasked(); });
    return out;
}

std::string subset_name(const ModalityMask& withheld) {
    return withheld.num_unmasked() == kNumModalities ? "text+audio+video" : withheld.describe();
}

DatasetManifest limit_training_videos(const DatasetManifest& manifest, Index count) {
    std::set<std::string> videos;
    for (const auto& s : manifest.sessions)
        if (s.split == Split::train) videos.insert(s.video_id);
    if (count < 1 || count > static_cast<Index>(videos.size()))
        throw std::invalid_argument("limit_training_videos: asked for " + std::to_string(count) + " of " +
                                    std::to_string(videos.size()) + " training videos");
    std::set<std::string> keep(videos.begin(), std::next(videos.begin(), static_cast<std::ptrdiff_t>(count)));
    DatasetManifest out = manifest;
    out.sessions.clear();
    for (const auto& s : manifest.sessions)
        if (s.split != Split::train || keep.count(s.video_id)) out.sessions.push_back(s);
    return out;
}

namespace {

void add_rows(AblationReport& report, const std::string& condition, std::uint64_t seed, const ScoreTable& t) {
    for (std::size_t s = 0; s < t.subject_ids.size(); ++s) {
        const double v = t.per_subject_mean(static_cast<Index>(s));
        if (std::isnan(v)) continue;  // subject absent from the evaluation split
        report.rows.push_back({condition, seed, t.subject_ids[s], v});
    }
    if (std::find(report.conditions.begin(), report.conditions.end(), condition) == report.conditions.end())
        report.conditions.push_back(condition);
}

ScoreTable train_and_score(const DatasetManifest& manifest, const NetConfig& net, TrainConfig cfg, std::uint64_t seed,
                           Split split) {
    cfg.seed = seed;
    const TrainResult r = train(manifest, net, cfg);
    return score_model(r.shipped(), manifest, split, cfg.withheld);
}

}  // namespace

AblationReport run_ablation(AblationSuite suite, const DatasetManifest& manifest, const AblationConfig& config) {
    if (config.seeds.empty()) throw std::invalid_argument("ablation: no seeds");
    AblationReport report;
    report.suite = suite;
    for (std::uint64_t seed : config.seeds) {
        switch (suite) {
            case AblationSuite::modality_subsets:
                for (const ModalityMask& keep : modality_subsets()) {
                    TrainConfig t = config.train;
                    t.withheld = keep;
                    add_rows(report, subset_name(keep), seed,
                             train_and_score(manifest, config.net, t, seed, config.eval_split));
                }
                break;
            case AblationSuite::single_subject:
                add_rows(report, "multi_subject", seed,
                         train_and_score(manifest, config.net, config.train, seed, config.eval_split));
                for (const auto& subject : manifest.subjects) {
                    const DatasetManifest one = restrict_subjects(manifest, {subject});
                    add_rows(report, "single_subject", seed,
                             train_and_score(one, config.net, config.train, seed, config.eval_split));
                }
                break;
            case AblationSuite::no_transformer: {
                add_rows(report, "full", seed,
                         train_and_score(manifest, config.net, config.train, seed, config.eval_split));
                NetConfig flat = config.net;
                flat.num_layers = 0;
                add_rows(report, "no_transformer", seed,
                         train_and_score(manifest, flat, config.train, seed, config.eval_split));
                break;
            }
            case AblationSuite::sessions_scaling:
                for (Index n : config.scaling_videos) {
                    const DatasetManifest limited = limit_training_videos(manifest, n);
                    add_rows(report, "videos=" + std::to_string(n), seed,
                             train_and_score(limited, config.net, config.train, seed, config.eval_split));
                }
                break;
        }
    }
    return report;
}

}  // namespace tribe
