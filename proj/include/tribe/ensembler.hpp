#pragma once

// Model populations over a hyperparameter grid, blended per parcel with softmax weights.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tribe/evaluator.hpp"
#include "tribe/trainer.hpp"

namespace tribe {

// Each axis lists its base value first.
struct EnsembleGrid {
    std::vector<LossKind> losses{LossKind::mse, LossKind::pearson, LossKind::smooth_l1, LossKind::huber};
    std::vector<double> modality_dropout{0.2, 0.0, 0.4};
    std::vector<std::vector<double>> layer_anchors{
        {0.5, 0.75, 1.0}, {0.0, 0.5, 1.0}, {0.5, 1.0}, {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}};
    std::vector<LayerMode> layer_modes{LayerMode::group_by_intervals, LayerMode::single_layers};
    std::vector<Aggregation> layer_aggregations{Aggregation::concatenate, Aggregation::average};
    std::vector<Aggregation> modality_aggregations{Aggregation::concatenate, Aggregation::average};
    std::vector<bool> subject_embedding{true, false};

    static constexpr int kNumAxes = 7;
    std::array<Index, kNumAxes> axis_sizes() const;
    void validate() const;
};

struct EnsembleConfig {
    Index num_models = 8;
    double temperature = 0.3;
    std::uint64_t seed = 0;
    EnsembleGrid grid;
    NetConfig base_net;
    TrainConfig base_train;

    void validate() const;
};

// One grid draw: an index into every axis.
struct GridDraw {
    std::array<Index, EnsembleGrid::kNumAxes> index{};

    bool operator==(const GridDraw&) const = default;
};

struct EnsembleMember {
    std::string id;
    GridDraw draw;
    NetConfig net;
    TrainConfig train;
};

// Member 0 is the base configuration (all axes at index 0, base seed); the rest are
// independent uniform draws with distinct seeds. Deterministic given config.seed.
std::vector<EnsembleMember> sample_grid(const EnsembleConfig& config);
NetConfig apply_draw(const EnsembleGrid& grid, const GridDraw& draw, NetConfig net);
TrainConfig apply_draw(const EnsembleGrid& grid, const GridDraw& draw, TrainConfig train);
nlohmann::json describe_draw(const EnsembleGrid& grid, const GridDraw& draw);

struct EnsembleWeights {
    MatrixD weights;  // [M, P], columns sum to 1
    std::vector<std::string> member_ids;
    std::string fit_split = "val";
};

// weights[:, p] = softmax(val_scores[:, p] / temperature)
EnsembleWeights fit_weights(const MatrixD& val_scores, double temperature);

// [M, P] parcel scores (mean over subjects) of each member on `split`.
MatrixD member_scores(std::span<const TribeNet<float>> members, const DatasetManifest& manifest, Split split);

struct EnsemblePrediction {
    std::vector<MatrixF> predictions;  // one [T, P] block per session of the split
    std::vector<SessionData> sessions;
    ScoreTable table;
};

// Per-parcel weighted sum of member predictions. Throws when `split` is the split the weights were fit on.
EnsemblePrediction predict_ensemble(std::span<const TribeNet<float>> members, const EnsembleWeights& weights,
                                    const DatasetManifest& manifest, Split split);
// Blends precomputed member predictions: member_predictions[i][s] is member i on session s.
std::vector<MatrixF> blend_predictions(const std::vector<std::vector<MatrixF>>& member_predictions,
                                       const MatrixD& weights);

void save_weights(const EnsembleWeights& w, const std::filesystem::path& path);
EnsembleWeights load_weights(const std::filesystem::path& path, std::vector<std::string> member_ids,
                             std::string fit_split);

// Trains every member not already present under out_dir (resumable) using up to `jobs`
// threads, writes member checkpoints, per-parcel validation scores and registry.json.
struct EnsembleRegistry {
    struct Entry {
        std::string id;
        std::filesystem::path checkpoint;  // stem, relative to the registry directory
        std::filesystem::path score_file;
        nlohmann::json draw;
        std::uint64_t seed = 0;
    };
    std::vector<Entry> members;
    double temperature = 0.3;
    std::filesystem::path root;

    void save(const std::filesystem::path& path) const;
    static EnsembleRegistry load(const std::filesystem::path& path);
    std::vector<TribeNet<float>> load_members() const;
};

EnsembleRegistry train_members(const EnsembleConfig& config, const DatasetManifest& manifest,
                               const std::filesystem::path& out_dir, Index jobs = 1);

void to_json(nlohmann::json& j, const EnsembleConfig& c);
void from_json(const nlohmann::json& j, EnsembleConfig& c);

}  // namespace tribe
