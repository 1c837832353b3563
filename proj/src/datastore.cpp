#include "tribe/datastore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian f32");

namespace tribe {

using nlohmann::json;

std::string_view split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw DataError("unknown split '" + std::string(name) + "'");
}

const ModalityMeta& DatasetManifest::modality(Modality m) const {
    for (const auto& meta : modalities)
        if (meta.modality == m) return meta;
    throw DataError("manifest has no modality '" + std::string(modality_name(m)) + "'");
}

double DatasetManifest::frequency_hz() const {
    if (modalities.empty()) throw DataError("manifest declares no modalities");
    return modalities.front().frequency_hz;
}

Index DatasetManifest::subject_index(const std::string& subject_id) const {
    auto it = std::find(subjects.begin(), subjects.end(), subject_id);
    if (it == subjects.end()) throw DataError("unknown subject '" + subject_id + "'");
    return static_cast<Index>(it - subjects.begin());
}

std::vector<const SessionRecord*> DatasetManifest::sessions_in(Split split) const {
    std::vector<const SessionRecord*> out;
    for (const auto& s : sessions)
        if (s.split == split) out.push_back(&s);
    return out;
}

// ---- raw tensor files --------------------------------------------------

Index TensorMeta::num_elements() const {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

fs::path sidecar_path(const fs::path& tensor_path) {
    fs::path p = tensor_path;
    p.replace_extension(".meta.json");
    return p;
}

void write_tensor(const fs::path& path, const TensorMeta& meta, std::span<const float> values) {
    if (static_cast<Index>(values.size()) != meta.num_elements())
        throw DataError("tensor " + path.string() + ": value count does not match shape");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write " + path.string());
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(float)));
    }
    json side = {{"shape", meta.shape}, {"dtype", "f32"}, {"order", "row-major"}};
    if (meta.frequency_hz) side["frequency_hz"] = *meta.frequency_hz;
    std::ofstream(sidecar_path(path)) << side.dump(2) << '\n';
}

TensorMeta read_tensor_meta(const fs::path& path) {
    const auto side = sidecar_path(path);
    std::ifstream in(side);
    if (!in) throw DataError("missing sidecar " + side.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("bad sidecar " + side.string() + ": " + e.what());
    }
    if (j.value("dtype", "") != "f32") throw DataError(side.string() + ": dtype must be f32");
    if (j.value("order", "row-major") != "row-major") throw DataError(side.string() + ": order must be row-major");
    TensorMeta meta;
    meta.shape = j.at("shape").get<std::vector<Index>>();
    if (j.contains("frequency_hz")) meta.frequency_hz = j["frequency_hz"].get<double>();
    return meta;
}

std::vector<float> read_tensor(const fs::path& path, TensorMeta* meta_out) {
    TensorMeta meta = read_tensor_meta(path);
    if (!fs::exists(path)) throw DataError("missing tensor file " + path.string());
    const auto bytes = fs::file_size(path);
    const auto expected = static_cast<std::uintmax_t>(meta.num_elements()) * sizeof(float);
    if (bytes != expected) {
        std::ostringstream msg;
        msg << "shape mismatch for " << path.string() << ": " << bytes << " bytes, expected " << expected;
        throw DataError(msg.str());
    }
    std::vector<float> values(static_cast<std::size_t>(meta.num_elements()));
    std::ifstream in(path, std::ios::binary);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw DataError("short read on " + path.string());
    if (meta_out) *meta_out = std::move(meta);
    return values;
}

void write_embedding(const fs::path& path, const EmbeddingSeries& s) {
    TensorMeta meta{{s.data.rows(), s.meta.num_layers, s.meta.dim}, s.meta.frequency_hz};
    write_tensor(path, meta, {s.data.data(), static_cast<std::size_t>(s.data.size())});
}

EmbeddingSeries read_embedding(const fs::path& path, const ModalityMeta& meta, const std::string& session_id) {
    TensorMeta tm;
    auto values = read_tensor(path, &tm);
    if (tm.shape.size() != 3 || tm.shape[1] != meta.num_layers || tm.shape[2] != meta.dim)
        throw DataError("session " + session_id + ": feature file " + path.string() +
                        " does not match declared [T, num_layers, dim]");
    EmbeddingSeries s;
    s.meta = meta;
    s.session_id = session_id;
    s.data = Eigen::Map<const MatrixF>(values.data(), tm.shape[0], tm.shape[1] * tm.shape[2]);
    if (!s.data.allFinite()) throw DataError("session " + session_id + ": non-finite feature values in " + path.string());
    return s;
}

void write_bold(const fs::path& path, const BoldSeries& s) {
    TensorMeta meta{{s.data.rows(), s.data.cols()}, std::nullopt};
    write_tensor(path, meta, {s.data.data(), static_cast<std::size_t>(s.data.size())});
}

BoldSeries read_bold(const fs::path& path, const BoldMeta& meta, const std::string& session_id,
                     const std::string& subject_id) {
    TensorMeta tm;
    auto values = read_tensor(path, &tm);
    if (tm.shape.size() != 2 || tm.shape[1] != meta.num_parcels)
        throw DataError("session " + session_id + ": bold file " + path.string() + " does not match [T, num_parcels]");
    BoldSeries s;
    s.meta = meta;
    s.session_id = session_id;
    s.subject_id = subject_id;
    s.data = Eigen::Map<const MatrixF>(values.data(), tm.shape[0], tm.shape[1]);
    if (!s.data.allFinite()) throw DataError("session " + session_id + ": non-finite BOLD values");
    return s;
}

// ---- manifest ----------------------------------------------------------

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("missing manifest " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("cannot parse manifest " + path.string() + ": " + e.what());
    }

    DatasetManifest m;
    m.root = path.has_parent_path() ? path.parent_path() : fs::path(".");
    try {
        for (const auto& jm : j.at("modalities")) {
            ModalityMeta meta;
            meta.modality = parse_modality(jm.at("name").get<std::string>());
            meta.dim = jm.at("dim").get<Index>();
            meta.num_layers = jm.at("num_layers").get<Index>();
            meta.frequency_hz = jm.at("frequency_hz").get<double>();
            m.modalities.push_back(meta);
        }
        std::sort(m.modalities.begin(), m.modalities.end(),
                  [](const auto& a, const auto& b) { return a.modality < b.modality; });
        const auto& jb = j.at("bold");
        m.bold.num_parcels = jb.value("num_parcels", Index{1000});
        m.bold.tr_seconds = jb.value("tr_seconds", 1.49);
        m.subjects = j.at("subjects").get<std::vector<std::string>>();
        for (const auto& js : j.at("sessions")) {
            SessionRecord s;
            s.session_id = js.at("session_id").get<std::string>();
            s.subject_id = js.at("subject_id").get<std::string>();
            s.video_id = js.at("video_id").get<std::string>();
            s.split = parse_split(js.at("split").get<std::string>());
            for (const auto& [name, rel] : js.at("features").items())
                s.feature_paths[parse_modality(name)] = rel.get<std::string>();
            if (js.contains("bold") && !js["bold"].is_null()) s.bold_path = js["bold"].get<std::string>();
            s.num_trs = js.at("num_trs").get<Index>();
            s.num_feature_steps = js.at("num_feature_steps").get<Index>();
            if (js.contains("repeat_of") && !js["repeat_of"].is_null())
                s.repeat_of = js["repeat_of"].get<std::string>();
            m.sessions.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw DataError("malformed manifest " + path.string() + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw DataError("malformed manifest " + path.string() + ": " + e.what());
    }
    validate_manifest(m, true);
    return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
    json j;
    j["modalities"] = json::array();
    for (const auto& meta : m.modalities)
        j["modalities"].push_back({{"name", modality_name(meta.modality)},
                                   {"dim", meta.dim},
                                   {"num_layers", meta.num_layers},
                                   {"frequency_hz", meta.frequency_hz}});
    j["bold"] = {{"num_parcels", m.bold.num_parcels}, {"tr_seconds", m.bold.tr_seconds}};
    j["subjects"] = m.subjects;
    j["sessions"] = json::array();
    for (const auto& s : m.sessions) {
        json js = {{"session_id", s.session_id},
                   {"subject_id", s.subject_id},
                   {"video_id", s.video_id},
                   {"split", split_name(s.split)},
                   {"num_trs", s.num_trs},
                   {"num_feature_steps", s.num_feature_steps}};
        js["features"] = json::object();
        for (const auto& [mod, rel] : s.feature_paths) js["features"][std::string(modality_name(mod))] = rel.generic_string();
        js["bold"] = s.bold_path ? json(s.bold_path->generic_string()) : json(nullptr);
        if (s.repeat_of) js["repeat_of"] = *s.repeat_of;
        j["sessions"].push_back(std::move(js));
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream(path) << j.dump(2) << '\n';
}

void validate_manifest(const DatasetManifest& m, bool check_files) {
    if (m.modalities.empty()) throw DataError("manifest declares no modalities");
    std::set<Modality> seen_mods;
    for (const auto& meta : m.modalities) {
        if (meta.dim <= 0 || meta.num_layers <= 0)
            throw DataError("modality " + std::string(modality_name(meta.modality)) + ": dim and num_layers must be > 0");
        if (!(meta.frequency_hz > 0)) throw DataError("modality frequency must be positive");
        if (meta.frequency_hz != m.modalities.front().frequency_hz)
            throw DataError("modalities disagree on frequency_hz");
        if (!seen_mods.insert(meta.modality).second) throw DataError("duplicate modality entry");
    }
    if (m.bold.num_parcels <= 0 || !(m.bold.tr_seconds > 0)) throw DataError("bold: num_parcels and tr_seconds must be > 0");

    std::set<std::string> subjects(m.subjects.begin(), m.subjects.end());
    if (subjects.size() != m.subjects.size()) throw DataError("duplicate subject ids");

    const double f = m.frequency_hz();
    std::set<std::string> ids;
    std::map<std::string, std::pair<Split, std::string>> video_split;  // video -> (split, first session)
    for (const auto& s : m.sessions) {
        if (!ids.insert(s.session_id).second) throw DataError("duplicate session id: " + s.session_id);
        if (!subjects.count(s.subject_id))
            throw DataError("session " + s.session_id + ": unknown subject '" + s.subject_id + "'");
        auto [it, fresh] = video_split.try_emplace(s.video_id, s.split, s.session_id);
        if (!fresh && it->second.first != s.split)
            throw DataError("split leakage: session " + s.session_id + " puts video '" + s.video_id + "' in " +
                            std::string(split_name(s.split)) + " but session " + it->second.second + " has it in " +
                            std::string(split_name(it->second.first)));
        const auto min_steps = static_cast<Index>(std::ceil(double(s.num_trs) * m.bold.tr_seconds * f - 1e-9)) - 1;
        if (s.num_feature_steps < min_steps)
            throw DataError("session " + s.session_id + ": num_feature_steps " + std::to_string(s.num_feature_steps) +
                            " < required " + std::to_string(min_steps));
        for (const auto& meta : m.modalities)
            if (!s.feature_paths.count(meta.modality))
                throw DataError("session " + s.session_id + ": missing " + std::string(modality_name(meta.modality)) +
                                " features");
        if (!check_files) continue;
        for (const auto& [mod, rel] : s.feature_paths) {
            const auto p = m.resolve(rel);
            if (!fs::exists(p)) throw DataError("session " + s.session_id + ": missing file " + p.string());
            TensorMeta tm;
            try {
                tm = read_tensor_meta(p);
            } catch (const DataError& e) {
                throw DataError("session " + s.session_id + ": " + e.what());
            }
            const auto& meta = m.modality(mod);
            const std::vector<Index> want{s.num_feature_steps, meta.num_layers, meta.dim};
            if (tm.shape != want)
                throw DataError("session " + s.session_id + ": shape mismatch for " + p.string());
            if (fs::file_size(p) != static_cast<std::uintmax_t>(tm.num_elements()) * sizeof(float))
                throw DataError("session " + s.session_id + ": shape mismatch, byte size of " + p.string());
        }
        if (s.bold_path) {
            const auto p = m.resolve(*s.bold_path);
            if (!fs::exists(p)) throw DataError("session " + s.session_id + ": missing file " + p.string());
            TensorMeta tm = read_tensor_meta(p);
            if (tm.shape != std::vector<Index>{s.num_trs, m.bold.num_parcels})
                throw DataError("session " + s.session_id + ": shape mismatch for " + p.string());
            if (fs::file_size(p) != static_cast<std::uintmax_t>(tm.num_elements()) * sizeof(float))
                throw DataError("session " + s.session_id + ": shape mismatch, byte size of " + p.string());
        }
    }
    for (const auto& s : m.sessions)
        if (s.repeat_of && !ids.count(*s.repeat_of))
            throw DataError("session " + s.session_id + ": repeat_of refers to unknown session " + *s.repeat_of);
}

EmbeddingSeries load_features(const DatasetManifest& m, const SessionRecord& s, Modality mod) {
    auto it = s.feature_paths.find(mod);
    if (it == s.feature_paths.end())
        throw DataError("session " + s.session_id + ": no " + std::string(modality_name(mod)) + " features");
    auto series = read_embedding(m.resolve(it->second), m.modality(mod), s.session_id);
    if (series.steps() != s.num_feature_steps)
        throw DataError("session " + s.session_id + ": feature steps differ from num_feature_steps");
    return series;
}

BoldSeries load_bold(const DatasetManifest& m, const SessionRecord& s, std::vector<Index>* constant_parcels) {
    if (!s.bold_path) throw DataError("session " + s.session_id + ": no bold targets");
    auto bold = read_bold(m.resolve(*s.bold_path), m.bold, s.session_id, s.subject_id);
    if (bold.data.rows() != s.num_trs) throw DataError("session " + s.session_id + ": TR count differs from num_trs");
    return zscore_session(bold, constant_parcels);
}

MatrixF zscore_columns(const MatrixF& data, std::vector<Index>* constant_columns) {
    MatrixF out(data.rows(), data.cols());
    const double n = static_cast<double>(data.rows());
    for (Index c = 0; c < data.cols(); ++c) {
        const VectorD col = data.col(c).cast<double>();
        const double mean = col.mean();
        const double var = (col.array() - mean).square().sum() / n;
        const double sd = std::sqrt(var);
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
            out.col(c).setZero();
            if (constant_columns) constant_columns->push_back(c);
            continue;
        }
        out.col(c) = ((col.array() - mean) / sd).cast<float>().matrix();
    }
    return out;
}

BoldSeries zscore_session(const BoldSeries& bold, std::vector<Index>* constant_parcels) {
    if (bold.data.rows() < 2) throw DataError("session " + bold.session_id + ": z-scoring needs at least 2 TRs");
    BoldSeries out = bold;
    out.data = zscore_columns(bold.data, constant_parcels);
    return out;
}

DatasetManifest make_split(const DatasetManifest& manifest, double holdout_fraction, std::uint64_t seed) {
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw DataError("holdout_fraction must be in (0, 1)");
    std::vector<std::string> videos;
    std::map<std::string, Index> sessions_per_video;
    Index pool = 0;
    for (const auto& s : manifest.sessions) {
        if (s.split == Split::test) continue;
        if (sessions_per_video[s.video_id]++ == 0) videos.push_back(s.video_id);
        ++pool;
    }
    if (videos.size() < 2) throw DataError("make_split needs at least 2 distinct videos");
    std::sort(videos.begin(), videos.end());
    std::mt19937_64 rng(seed);
    std::shuffle(videos.begin(), videos.end(), rng);

    std::set<std::string> held;
    Index held_sessions = 0;
    for (const auto& v : videos) {
        if (double(held_sessions) >= holdout_fraction * double(pool) - 1e-9) break;
        if (held.size() + 1 == videos.size()) break;  // always keep one training video
        held.insert(v);
        held_sessions += sessions_per_video[v];
    }
    DatasetManifest out = manifest;
    for (auto& s : out.sessions)
        if (s.split != Split::test) s.split = held.count(s.video_id) ? Split::val : Split::train;
    return out;
}

DatasetManifest restrict_subjects(const DatasetManifest& manifest, const std::vector<std::string>& subjects) {
    DatasetManifest out = manifest;
    out.subjects = subjects;
    std::set<std::string> keep(subjects.begin(), subjects.end());
    out.sessions.clear();
    for (const auto& s : manifest.sessions)
        if (keep.count(s.subject_id)) out.sessions.push_back(s);
    return out;
}

}  // namespace tribe
