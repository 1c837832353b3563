#pragma once

// Temporal and layer-dimension alignment onto the fixed-frequency feature grid.

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tribe/types.hpp"

namespace tribe {

struct TimedWordEmbedding {
    std::string word;
    double onset_s = 0.0;
    double duration_s = 0.0;
    MatrixF embedding;  // [L_m, D_text]
};

// Counters written as JSON lines by the CLI.
struct AlignmentDiagnostics {
    Index dropped_words = 0;
    Index padded_windows = 0;
    Index padded_steps = 0;
    Index empty_resample_blocks = 0;

    void write_jsonl(std::ostream& out, const std::string& context) const;
};

// Sums word embeddings into half-open bins [b/f, (b+1)/f).
// Words falling entirely outside [0, num_steps / f) are dropped and counted.
// Returns [num_steps, L * D] (row-major [num_steps, L, D]); embedding_size = L * D.
MatrixF bin_words(const std::vector<TimedWordEmbedding>& words, double frequency_hz, Index num_steps,
                  Index embedding_size, AlignmentDiagnostics* diag = nullptr);

// Block-mean resampling of [T_src, L*D] rows from src_hz to dst_hz.
MatrixF resample_audio(const MatrixF& series, double src_hz, double dst_hz, AlignmentDiagnostics* diag = nullptr);

enum class LayerMode { group_by_intervals, single_layers };
enum class Aggregation { concatenate, average };

struct LayerGroupSpec {
    std::vector<double> anchors{0.5, 0.75, 1.0};
    LayerMode mode = LayerMode::group_by_intervals;
    Aggregation aggregation = Aggregation::concatenate;

    void validate() const;
    bool operator==(const LayerGroupSpec&) const = default;
};

// Zero-based layer index lists, one per group.
std::vector<std::vector<Index>> layer_groups(Index num_layers, const LayerGroupSpec& spec);
Index grouped_width(Index num_layers, Index dim, const LayerGroupSpec& spec);

// series: [T, L_m * D_m]. Returns [T, L * D_m] (concatenate) or [T, D_m] (average).
MatrixF group_layers(const MatrixF& series, Index num_layers, Index dim, const LayerGroupSpec& spec);

struct WindowConfig {
    Index trs_per_window = 100;
    double tr_seconds = 1.49;
    double frequency_hz = 2.0;
    double jitter_s = 10.0;

    double duration_s() const { return double(trs_per_window) * tr_seconds; }
    Index feature_steps() const { return round_index(duration_s() * frequency_hz); }
    Index feature_start(Index start_tr, double jitter) const {
        return round_index((double(start_tr) * tr_seconds + jitter) * frequency_hz);
    }
    bool operator==(const WindowConfig&) const = default;
};

struct AlignedWindow {
    std::array<MatrixF, kNumModalities> inputs;  // each [feature_steps, width_m]
    std::optional<MatrixF> targets;              // [N, P]
    Index subject_index = 0;
    std::string session_id;
    Index start_tr = 0;
    Index feature_start = 0;
    // true where the feature step fell outside the session and was zero-filled
    std::vector<bool> padding;

    Index padded_steps() const;
};

// Per-session features after layer grouping, plus z-scored targets when available.
struct SessionData {
    std::string session_id;
    Index subject_index = 0;
    Index num_trs = 0;
    std::array<MatrixF, kNumModalities> features;  // [T_feat, width_m]
    std::optional<MatrixF> bold;                   // [num_trs, P]
};

AlignedWindow extract_window(const SessionData& session, const WindowConfig& config, Index start_tr, double jitter_s,
                             AlignmentDiagnostics* diag = nullptr);

// Window starts that tile a session with stride N; a final window aligned to the
// session end is appended when N does not divide num_trs.
std::vector<Index> tiling_starts(Index num_trs, Index trs_per_window);

}  // namespace tribe
