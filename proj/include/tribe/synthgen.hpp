#pragma once

// Synthetic datasets with a known stimulus -> BOLD teacher.
//
// Per video and modality, K latent channels of Gaussian-smoothed noise are drawn
// on the feature grid. Feature layer l is a causal exponential moving average of
// the latents (time constant layer_taus_s[l]) mixed into D dimensions, so deeper
// layers carry longer history. Each parcel has a driver: a single modality
// (linear readout of its latents) or a modality pair (product of two readouts).
// The drive is convolved with a double-gamma HRF, sampled at the TR times,
// scaled to variance signal_std^2, and white noise of noise_std is added.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tribe/datastore.hpp"

namespace tribe {

struct HrfParams {
    double peak_shape = 6.0;        // gamma shape of the response (peak near 5 s)
    double undershoot_shape = 16.0; // gamma shape of the undershoot (near 15 s)
    double undershoot_ratio = 1.0 / 6.0;
    double length_s = 32.0;

    bool operator==(const HrfParams&) const = default;
};

// Discrete HRF at spacing dt, normalized to unit absolute sum.
std::vector<double> double_gamma_hrf(const HrfParams& p, double dt);

struct SynthConfig {
    Index num_subjects = 2;
    Index num_videos = 8;        // total distinct videos, including held-out ones
    Index num_val_videos = 1;
    Index num_test_videos = 0;
    Index session_trs = 240;
    Index num_parcels = 60;
    double tr_seconds = 1.49;
    double frequency_hz = 2.0;
    Index latent_dim = 4;        // K per modality
    Index feature_dim = 8;       // D per modality
    std::vector<double> layer_taus_s{0.0, 2.0, 4.0, 8.0};
    double smoothness_s = 4.0;
    // Parcel p is driven by drivers[p % drivers.size()]: "text", "audio", "video" or "a+b" pairs.
    std::vector<std::string> drivers{"text", "audio", "video"};
    // Weight of the product term for pair drivers; the remainder is the sum of the two linear readouts.
    double interaction_strength = 1.0;
    double subject_deviation = 0.3;
    double signal_std = 1.0;
    double noise_std = 0.0;
    // Time constant of the text latent history seen by the teacher; 0 = instantaneous.
    double context_memory_s = 0.0;
    // Emit a second recording with independent noise for every held-out session.
    bool repeat_heldout = true;
    HrfParams hrf;
    std::uint64_t seed = 0;

    Index num_layers() const { return static_cast<Index>(layer_taus_s.size()); }
    Index feature_steps() const;
    void validate() const;
    bool operator==(const SynthConfig&) const = default;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

// Parsed driver of one parcel: one modality, or a pair.
struct ParcelDriver {
    std::vector<Modality> modalities;

    bool is_pair() const { return modalities.size() == 2; }
    std::string describe() const;
};
ParcelDriver parse_driver(std::string_view spec);

// Hidden ground truth, written as teacher.json (tests only).
struct TeacherRecord {
    SynthConfig config;
    std::vector<ParcelDriver> parcel_drivers;  // [P]
    std::vector<MatrixD> readouts;             // per subject [P, 2K]: first and second readout rows
    VectorD noise_std;                         // [P]

    nlohmann::json to_json() const;
};

struct SynthResult {
    DatasetManifest manifest;
    TeacherRecord teacher;
    std::filesystem::path manifest_path;
};

// Writes tensors, manifest.json and teacher.json under out_dir.
SynthResult generate(const SynthConfig& config, const std::filesystem::path& out_dir);

}  // namespace tribe
