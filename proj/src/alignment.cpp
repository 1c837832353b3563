#include "tribe/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tribe {

void AlignmentDiagnostics::write_jsonl(std::ostream& out, const std::string& context) const {
    nlohmann::json j = {{"context", context},
                        {"dropped_words", dropped_words},
                        {"padded_windows", padded_windows},
                        {"padded_steps", padded_steps},
                        {"empty_resample_blocks", empty_resample_blocks}};
    out << j.dump() << '\n';
}

MatrixF bin_words(const std::vector<TimedWordEmbedding>& words, double frequency_hz, Index num_steps,
                  Index embedding_size, AlignmentDiagnostics* diag) {
    if (num_steps < 1) throw std::invalid_argument("bin_words: num_steps must be >= 1");
    if (!(frequency_hz > 0)) throw std::invalid_argument("bin_words: frequency must be positive");
    MatrixF out = MatrixF::Zero(num_steps, embedding_size);
    for (const auto& w : words) {
        if (!std::isfinite(w.onset_s) || !w.embedding.allFinite())
            throw std::invalid_argument("bin_words: word '" + w.word + "' has non-finite onset or embedding");
        if (w.embedding.size() != embedding_size)
            throw std::invalid_argument("bin_words: word '" + w.word + "' embedding size differs from " +
                                        std::to_string(embedding_size));
        const double duration = w.duration_s > 0 ? w.duration_s : 1e-3;
        const double start = w.onset_s;
        const double end = w.onset_s + duration;
        // bin b covers [b/f, (b+1)/f); intersection with [start, end) is non-empty
        // iff start < (b+1)/f and end > b/f.
        const Index first = std::max<Index>(0, static_cast<Index>(std::floor(start * frequency_hz)));
        const Index last = std::min<Index>(num_steps - 1, static_cast<Index>(std::ceil(end * frequency_hz)) - 1);
        bool hit = false;
        const Eigen::Map<const RowVector<float>> emb(w.embedding.data(), embedding_size);
        for (Index b = first; b <= last; ++b) {
            if (!(start < double(b + 1) / frequency_hz && end > double(b) / frequency_hz)) continue;
            out.row(b) += emb;
            hit = true;
        }
        if (!hit && diag) ++diag->dropped_words;
    }
    return out;
}

MatrixF resample_audio(const MatrixF& series, double src_hz, double dst_hz, AlignmentDiagnostics* diag) {
    if (!(src_hz > 0 && dst_hz > 0)) throw std::invalid_argument("resample_audio: rates must be positive");
    if (src_hz < dst_hz) throw std::invalid_argument("resample_audio: src_hz must be >= dst_hz");
    if (src_hz == dst_hz) return series;
    const Index t_src = series.rows();
    const auto t_dst = static_cast<Index>(std::floor(double(t_src) * dst_hz / src_hz + 1e-9));
    MatrixD sums = MatrixD::Zero(t_dst, series.cols());
    std::vector<Index> counts(static_cast<std::size_t>(t_dst), 0);
    for (Index i = 0; i < t_src; ++i) {
        // output step holding the center (i + 0.5) / src_hz of source step i
        const auto j = static_cast<Index>(std::floor((2.0 * double(i) + 1.0) * dst_hz / (2.0 * src_hz)));
        if (j >= t_dst) break;
        sums.row(j) += series.row(i).cast<double>();
        ++counts[static_cast<std::size_t>(j)];
    }
    MatrixF out(t_dst, series.cols());
    for (Index j = 0; j < t_dst; ++j) {
        const Index c = counts[static_cast<std::size_t>(j)];
        if (c > 0) {
            out.row(j) = (sums.row(j) / double(c)).cast<float>();
            continue;
        }
        const double center = (double(j) + 0.5) / dst_hz;
        const auto nearest = std::clamp<Index>(static_cast<Index>(std::floor(center * src_hz)), 0, t_src - 1);
        out.row(j) = series.row(nearest);
        if (diag) ++diag->empty_resample_blocks;
    }
    return out;
}

void LayerGroupSpec::validate() const {
    if (anchors.empty()) throw std::invalid_argument("layer groups: anchors must be non-empty");
    for (std::size_t k = 0; k < anchors.size(); ++k) {
        if (anchors[k] < 0.0 || anchors[k] > 1.0) throw std::invalid_argument("layer groups: anchors must lie in [0, 1]");
        if (k > 0 && !(anchors[k] > anchors[k - 1]))
            throw std::invalid_argument("layer groups: anchors must be strictly ascending");
    }
    if (mode == LayerMode::group_by_intervals && anchors.back() != 1.0)
        throw std::invalid_argument("layer groups: last anchor must be 1 when grouping by intervals");
}

namespace {

std::string anchors_text(const std::vector<double>& anchors) {
    std::ostringstream s;
    s << '[';
    for (std::size_t k = 0; k < anchors.size(); ++k) s << (k ? ", " : "") << anchors[k];
    s << ']';
    return s.str();
}

}  // namespace

std::vector<std::vector<Index>> layer_groups(Index num_layers, const LayerGroupSpec& spec) {
    spec.validate();
    if (num_layers < 1) throw std::invalid_argument("layer groups: num_layers must be >= 1");
    std::vector<std::vector<Index>> groups;
    if (spec.mode == LayerMode::single_layers) {
        for (double a : spec.anchors) groups.push_back({round_index(a * double(num_layers - 1))});
        return groups;
    }
    // 1-based layer indices in (lo, hi]; an anchor of 0 is the first layer on its own.
    Index lo = 0;
    for (double a : spec.anchors) {
        Index hi = a == 0.0 ? 1 : round_index(a * double(num_layers));
        if (hi <= lo)
            throw std::invalid_argument("layer groups: empty group for anchors " + anchors_text(spec.anchors) +
                                        " over " + std::to_string(num_layers) + " layers");
        std::vector<Index> g;
        for (Index l = lo + 1; l <= hi; ++l) g.push_back(l - 1);
        groups.push_back(std::move(g));
        lo = hi;
    }
    return groups;
}

Index grouped_width(Index num_layers, Index dim, const LayerGroupSpec& spec) {
    const auto n = static_cast<Index>(layer_groups(num_layers, spec).size());
    return spec.aggregation == Aggregation::concatenate ? n * dim : dim;
}

MatrixF group_layers(const MatrixF& series, Index num_layers, Index dim, const LayerGroupSpec& spec) {
    if (series.cols() != num_layers * dim) throw std::invalid_argument("group_layers: series width != L * D");
    const auto groups = layer_groups(num_layers, spec);
    const auto n = static_cast<Index>(groups.size());
    MatrixF out = MatrixF::Zero(series.rows(), spec.aggregation == Aggregation::concatenate ? n * dim : dim);
    for (Index g = 0; g < n; ++g) {
        MatrixF mean = MatrixF::Zero(series.rows(), dim);
        for (Index l : groups[g]) mean += series.middleCols(l * dim, dim);
        mean /= float(groups[g].size());
        if (spec.aggregation == Aggregation::concatenate)
            out.middleCols(g * dim, dim) = mean;
        else
            out += mean / float(n);
    }
    return out;
}

Index AlignedWindow::padded_steps() const { return std::count(padding.begin(), padding.end(), true); }

AlignedWindow extract_window(const SessionData& session, const WindowConfig& config, Index start_tr, double jitter_s,
                             AlignmentDiagnostics* diag) {
    const Index n = config.trs_per_window;
    if (n > session.num_trs)
        throw std::invalid_argument("extract_window: window of " + std::to_string(n) + " TRs is longer than session " +
                                    session.session_id);
    if (start_tr < 0 || start_tr + n > session.num_trs)
        throw std::invalid_argument("extract_window: start_tr " + std::to_string(start_tr) +
                                    " + N exceeds session " + session.session_id);
    if (std::abs(jitter_s) > config.jitter_s + 1e-12)
        throw std::invalid_argument("extract_window: jitter exceeds configured bound");

    AlignedWindow w;
    w.subject_index = session.subject_index;
    w.session_id = session.session_id;
    w.start_tr = start_tr;
    const Index steps = config.feature_steps();
    w.feature_start = config.feature_start(start_tr, jitter_s);
    w.padding.assign(static_cast<std::size_t>(steps), false);
    for (int m = 0; m < kNumModalities; ++m) {
        const MatrixF& src = session.features[m];
        MatrixF& dst = w.inputs[m];
        dst = MatrixF::Zero(steps, src.cols());
        for (Index t = 0; t < steps; ++t) {
            const Index s = w.feature_start + t;
            if (s >= 0 && s < src.rows())
                dst.row(t) = src.row(s);
            else
                w.padding[static_cast<std::size_t>(t)] = true;
        }
    }
    if (session.bold) w.targets = session.bold->middleRows(start_tr, n);
    if (diag) {
        const Index padded = w.padded_steps();
        if (padded > 0) {
            ++diag->padded_windows;
            diag->padded_steps += padded;
        }
    }
    return w;
}

std::vector<Index> tiling_starts(Index num_trs, Index trs_per_window) {
    std::vector<Index> starts;
    if (trs_per_window <= 0 || num_trs < trs_per_window) return starts;
    for (Index s = 0; s + trs_per_window <= num_trs; s += trs_per_window) starts.push_back(s);
    if (num_trs % trs_per_window != 0) starts.push_back(num_trs - trs_per_window);
    return starts;
}

}  // namespace tribe
