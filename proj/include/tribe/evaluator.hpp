#pragma once

// Scoring: per-parcel Pearson, noise ceiling, normalized scores and modality probing.

#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tribe/datastore.hpp"
#include "tribe/tribenet.hpp"

namespace tribe {

// Product-moment correlation. NaN when either argument has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

template <typename DerivedX, typename DerivedY>
double pearson(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedY>& y) {
    const VectorD a = x.template cast<double>().reshaped();
    const VectorD b = y.template cast<double>().reshaped();
    return pearson(std::span<const double>(a.data(), a.size()), std::span<const double>(b.data(), b.size()));
}

// Column-wise correlation of two [T, P] matrices.
VectorD pearson_columns(const MatrixD& pred, const MatrixD& target);

struct ScoreTable {
    MatrixD scores;  // [num_subjects, P], NaN for zero-variance parcels or subjects absent from the split
    std::vector<std::string> subject_ids;
    double mean_score = 0.0;
    VectorD per_subject_mean;
    Index nan_count = 0;
    std::string run_id;
    std::string split;
    std::string mask = "none";

    // Mean over subjects per parcel, ignoring NaN.
    VectorD parcel_means() const;
    void finalize();  // recompute means and NaN count from `scores`
};

struct NoiseCeiling {
    VectorD rho_self;
    VectorD rho_max;  // NaN where flagged
    std::vector<bool> flagged;
    Index num_pairs = 0;

    Index num_flagged() const;
};

double rho_max_from_self(double rho_self);

NoiseCeiling noise_ceiling(const BoldSeries& repeat_a, const BoldSeries& repeat_b);
// Averages rho_self over every unordered pair of recordings of the same (subject, video).
NoiseCeiling noise_ceiling(const DatasetManifest& manifest);
NoiseCeiling ceiling_from_rho_self(VectorD rho_self, Index num_pairs);

ScoreTable normalized_scores(const ScoreTable& table, const NoiseCeiling& ceiling);

// Predictions for a whole session, tiling it with jitter 0.
template <typename Scalar>
MatrixF predict_session(const TribeNet<Scalar>& net, const SessionData& session, const ModalityMask& mask);

// Correlates concatenated per-subject predictions against targets.
ScoreTable score_predictions(std::span<const MatrixF> predictions, std::span<const SessionData> sessions,
                             const std::vector<std::string>& subject_ids);

template <typename Scalar>
ScoreTable score_sessions(const TribeNet<Scalar>& net, std::span<const SessionData> sessions,
                          const std::vector<std::string>& subject_ids, const ModalityMask& mask);

ScoreTable score_model(const TribeNet<float>& net, const DatasetManifest& manifest, Split split,
                       const ModalityMask& mask);
ScoreTable score_model(const std::filesystem::path& checkpoint, const DatasetManifest& manifest, Split split,
                       const ModalityMask& mask);

struct ProbeResult {
    std::array<ScoreTable, kNumModalities> solo;
    MatrixD parcel_scores;  // [P, 3] mean over subjects of the solo scores
    std::vector<Modality> argmax;
    MatrixD rgb;  // [P, 3], per-parcel minimum subtracted, clamped to [0, 1]
};

// Per-parcel label and color from solo scores laid out as [P, 3] (text, audio, video).
void probe_colors(const MatrixD& parcel_scores, std::vector<Modality>& argmax, MatrixD& rgb);

ProbeResult probe_modalities(const TribeNet<float>& net, const DatasetManifest& manifest, Split split);

// CSV: parcel_id,subject_id,rho,rho_max,rho_norm
void write_score_csv(std::ostream& out, const ScoreTable& table, const NoiseCeiling* ceiling = nullptr);
// Summary JSON object (mean, median, IQR of raw and, when available, normalized scores).
std::string score_summary_json(const ScoreTable& table, const NoiseCeiling* ceiling = nullptr);
// CSV: parcel_id,text,audio,video,argmax,r,g,b
void write_probe_csv(std::ostream& out, const ProbeResult& probe);

}  // namespace tribe
