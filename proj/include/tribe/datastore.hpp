#pragma once

// On-disk dataset: JSON manifest, raw f32 tensors with JSON sidecars,
// feature/BOLD loading, per-session z-scoring and video-level splits.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tribe/types.hpp"

namespace tribe {

namespace fs = std::filesystem;

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModalityMeta {
    Modality modality = Modality::text;
    Index dim = 0;
    Index num_layers = 0;
    double frequency_hz = 2.0;
};

struct BoldMeta {
    Index num_parcels = 1000;
    double tr_seconds = 1.49;
};

enum class Split { train, val, test };
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct SessionRecord {
    std::string session_id;
    std::string subject_id;
    std::string video_id;
    Split split = Split::train;
    std::map<Modality, fs::path> feature_paths;  // relative to the manifest directory
    std::optional<fs::path> bold_path;
    Index num_trs = 0;
    Index num_feature_steps = 0;
    // Set when this recording is a repeated viewing of another session's video.
    std::optional<std::string> repeat_of;
};

struct DatasetManifest {
    std::vector<ModalityMeta> modalities;  // ordered text, audio, video
    BoldMeta bold;
    std::vector<SessionRecord> sessions;
    std::vector<std::string> subjects;
    fs::path root;  // directory the relative paths resolve against

    const ModalityMeta& modality(Modality m) const;
    double frequency_hz() const;
    Index subject_index(const std::string& subject_id) const;
    std::vector<const SessionRecord*> sessions_in(Split split) const;
    fs::path resolve(const fs::path& relative) const { return root / relative; }
};

// [T, L, D] embeddings stored row-major as a T x (L*D) matrix.
struct EmbeddingSeries {
    MatrixF data;
    ModalityMeta meta;
    std::string session_id;

    Index steps() const { return data.rows(); }
};

// [T_tr, P] parcel responses.
struct BoldSeries {
    MatrixF data;
    BoldMeta meta;
    std::string session_id;
    std::string subject_id;
};

// ---- raw tensor files --------------------------------------------------

struct TensorMeta {
    std::vector<Index> shape;
    std::optional<double> frequency_hz;

    Index num_elements() const;
};

fs::path sidecar_path(const fs::path& tensor_path);
void write_tensor(const fs::path& path, const TensorMeta& meta, std::span<const float> values);
TensorMeta read_tensor_meta(const fs::path& path);
std::vector<float> read_tensor(const fs::path& path, TensorMeta* meta_out = nullptr);

void write_embedding(const fs::path& path, const EmbeddingSeries& series);
EmbeddingSeries read_embedding(const fs::path& path, const ModalityMeta& meta, const std::string& session_id);
void write_bold(const fs::path& path, const BoldSeries& series);
BoldSeries read_bold(const fs::path& path, const BoldMeta& meta, const std::string& session_id,
                     const std::string& subject_id);

// ---- manifest ----------------------------------------------------------

DatasetManifest load_manifest(const fs::path& path);
void save_manifest(const DatasetManifest& manifest, const fs::path& path);
// Throws DataError naming the offending session on any invariant violation.
// With check_files, every referenced tensor must exist and match its declared shape.
void validate_manifest(const DatasetManifest& manifest, bool check_files = true);

// Loads a session's features / BOLD. BOLD is z-scored per parcel on load.
EmbeddingSeries load_features(const DatasetManifest& manifest, const SessionRecord& session, Modality m);
BoldSeries load_bold(const DatasetManifest& manifest, const SessionRecord& session,
                     std::vector<Index>* constant_parcels = nullptr);

// Population z-score per parcel column. Constant columns become zeros and are
// reported through `constant_parcels`.
BoldSeries zscore_session(const BoldSeries& bold, std::vector<Index>* constant_parcels = nullptr);
MatrixF zscore_columns(const MatrixF& data, std::vector<Index>* constant_columns = nullptr);

// Reassigns train/val at video granularity; sessions already in `test` are left alone.
DatasetManifest make_split(const DatasetManifest& manifest, double holdout_fraction, std::uint64_t seed);

// Keeps only the listed subjects (in the given order) and their sessions.
DatasetManifest restrict_subjects(const DatasetManifest& manifest, const std::vector<std::string>& subjects);

}  // namespace tribe
