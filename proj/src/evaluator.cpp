#include "tribe/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "tribe/trainer.hpp"

namespace tribe {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
    if (x.size() < 2) throw std::invalid_argument("pearson: need at least 2 samples");
    const double n = double(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double a = x[i] - mx, b = y[i] - my;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) return kNaN;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

VectorD pearson_columns(const MatrixD& pred, const MatrixD& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw std::invalid_argument("pearson_columns: shape mismatch");
    VectorD out(pred.cols());
    for (Index p = 0; p < pred.cols(); ++p) {
        const VectorD a = pred.col(p), b = target.col(p);
        out(p) = pearson(std::span<const double>(a.data(), a.size()), std::span<const double>(b.data(), b.size()));
    }
    return out;
}

VectorD ScoreTable::parcel_means() const {
    VectorD out(scores.cols());
    for (Index p = 0; p < scores.cols(); ++p) {
        double sum = 0;
        Index n = 0;
        for (Index s = 0; s < scores.rows(); ++s)
            if (std::isfinite(scores(s, p))) {
                sum += scores(s, p);
                ++n;
            }
        out(p) = n ? sum / double(n) : kNaN;
    }
    return out;
}

void ScoreTable::finalize() {
    per_subject_mean = VectorD::Constant(scores.rows(), kNaN);
    double total = 0;
    Index count = 0;
    nan_count = 0;
    for (Index s = 0; s < scores.rows(); ++s) {
        double sum = 0;
        Index n = 0;
        for (Index p = 0; p < scores.cols(); ++p) {
            const double v = scores(s, p);
            if (std::isfinite(v)) {
                sum += v;
                ++n;
            } else {
                ++nan_count;
            }
        }
        if (n) per_subject_mean(s) = sum / double(n);
        total += sum;
        count += n;
    }
    mean_score = count ? total / double(count) : kNaN;
}

Index NoiseCeiling::num_flagged() const { return std::count(flagged.begin(), flagged.end(), true); }

double rho_max_from_self(double rho_self) {
    if (!(rho_self > 0.0)) return kNaN;
    return std::sqrt(2.0 / (1.0 + 1.0 / rho_self));
}

NoiseCeiling ceiling_from_rho_self(VectorD rho_self, Index num_pairs) {
    NoiseCeiling c;
    c.rho_self = std::move(rho_self);
    c.num_pairs = num_pairs;
    c.rho_max.resize(c.rho_self.size());
    c.flagged.assign(static_cast<std::size_t>(c.rho_self.size()), false);
    for (Index p = 0; p < c.rho_self.size(); ++p) {
        c.rho_max(p) = rho_max_from_self(c.rho_self(p));
        c.flagged[static_cast<std::size_t>(p)] = !std::isfinite(c.rho_max(p));
    }
    return c;
}

NoiseCeiling noise_ceiling(const BoldSeries& a, const BoldSeries& b) {
    if (a.data.rows() != b.data.rows() || a.data.cols() != b.data.cols())
        throw std::invalid_argument("noise_ceiling: repeats differ in length or parcel count");
    return ceiling_from_rho_self(pearson_columns(a.data.cast<double>(), b.data.cast<double>()), 1);
}

NoiseCeiling noise_ceiling(const DatasetManifest& manifest) {
    // group recordings by (subject, video): a session and every repeat of it
    std::map<std::pair<std::string, std::string>, std::vector<const SessionRecord*>> groups;
    for (const auto& s : manifest.sessions)
        if (s.bold_path) groups[{s.subject_id, s.video_id}].push_back(&s);
    const Index parcels = manifest.bold.num_parcels;
    VectorD sum = VectorD::Zero(parcels);
    std::vector<Index> counts(static_cast<std::size_t>(parcels), 0);
    Index pairs = 0;
    for (const auto& [key, recs] : groups) {
        bool has_repeat = false;
        for (const auto* r : recs) has_repeat = has_repeat || r->repeat_of.has_value();
        if (recs.size() < 2 || !has_repeat) continue;
        std::vector<BoldSeries> bolds;
        for (const auto* r : recs) bolds.push_back(load_bold(manifest, *r));
        for (std::size_t i = 0; i < bolds.size(); ++i)
            for (std::size_t j = i + 1; j < bolds.size(); ++j) {
                const VectorD r = pearson_columns(bolds[i].data.cast<double>(), bolds[j].data.cast<double>());
                for (Index p = 0; p < parcels; ++p)
                    if (std::isfinite(r(p))) {
                        sum(p) += r(p);
                        ++counts[static_cast<std::size_t>(p)];
                    }
                ++pairs;
            }
    }
    if (pairs == 0) throw std::runtime_error("noise_ceiling: manifest has no repeated recordings");
    VectorD rho_self(parcels);
    for (Index p = 0; p < parcels; ++p) {
        const Index n = counts[static_cast<std::size_t>(p)];
        rho_self(p) = n ? sum(p) / double(n) : kNaN;
    }
    return ceiling_from_rho_self(std::move(rho_self), pairs);
}

ScoreTable normalized_scores(const ScoreTable& table, const NoiseCeiling& ceiling) {
    if (ceiling.rho_max.size() != table.scores.cols())
        throw std::invalid_argument("normalized_scores: ceiling and table disagree on parcel count");
    ScoreTable out = table;
    for (Index p = 0; p < table.scores.cols(); ++p)
        for (Index s = 0; s < table.scores.rows(); ++s)
            out.scores(s, p) = ceiling.flagged[static_cast<std::size_t>(p)] ? kNaN : table.scores(s, p) / ceiling.rho_max(p);
    out.finalize();
    return out;
}

template <typename Scalar>
MatrixF predict_session(const TribeNet<Scalar>& net, const SessionData& session, const ModalityMask& mask) {
    const WindowConfig& wc = net.config().window;
    const Index n = wc.trs_per_window;
    MatrixF out = MatrixF::Zero(session.num_trs, net.config().num_parcels);
    Index covered = 0;
    for (Index start : tiling_starts(session.num_trs, n)) {
        const AlignedWindow w = extract_window(session, wc, start, 0.0);
        const MatrixF pred = net.forward(w, mask).template cast<float>();
        const Index skip = covered - start;  // rows already written by an earlier window
        out.middleRows(covered, n - skip) = pred.bottomRows(n - skip);
        covered = start + n;
    }
    if (covered != session.num_trs)
        throw std::invalid_argument("predict_session: session " + session.session_id + " is shorter than one window");
    return out;
}

template MatrixF predict_session<float>(const TribeNet<float>&, const SessionData&, const ModalityMask&);
template MatrixF predict_session<double>(const TribeNet<double>&, const SessionData&, const ModalityMask&);

ScoreTable score_predictions(std::span<const MatrixF> predictions, std::span<const SessionData> sessions,
                             const std::vector<std::string>& subject_ids) {
    if (predictions.size() != sessions.size()) throw std::invalid_argument("score_predictions: count mismatch");
    const auto num_subjects = static_cast<Index>(subject_ids.size());
    Index parcels = 0;
    std::vector<Index> rows(static_cast<std::size_t>(num_subjects), 0);
    for (std::size_t i = 0; i < sessions.size(); ++i) {
        if (!sessions[i].bold) throw std::invalid_argument("score_predictions: session " + sessions[i].session_id +
                                                           " has no bold targets");
        if (predictions[i].rows() != sessions[i].bold->rows() || predictions[i].cols() != sessions[i].bold->cols())
            throw std::invalid_argument("score_predictions: prediction shape differs from targets");
        parcels = predictions[i].cols();
        rows[static_cast<std::size_t>(sessions[i].subject_index)] += predictions[i].rows();
    }
    ScoreTable table;
    table.subject_ids = subject_ids;
    table.scores = MatrixD::Constant(num_subjects, parcels, kNaN);
    for (Index s = 0; s < num_subjects; ++s) {
        const Index total = rows[static_cast<std::size_t>(s)];
        if (total < 2) continue;
        MatrixD pred(total, parcels), target(total, parcels);
        Index at = 0;
        for (std::size_t i = 0; i < sessions.size(); ++i) {
            if (sessions[i].subject_index != s) continue;
            const Index n = predictions[i].rows();
            pred.middleRows(at, n) = predictions[i].cast<double>();
            target.middleRows(at, n) = sessions[i].bold->cast<double>();
            at += n;
        }
        table.scores.row(s) = pearson_columns(pred, target).transpose();
    }
    table.finalize();
    return table;
}

template <typename Scalar>
ScoreTable score_sessions(const TribeNet<Scalar>& net, std::span<const SessionData> sessions,
                          const std::vector<std::string>& subject_ids, const ModalityMask& mask) {
    std::vector<MatrixF> preds;
    preds.reserve(sessions.size());
    for (const auto& s : sessions) preds.push_back(predict_session(net, s, mask));
    ScoreTable t = score_predictions(preds, sessions, subject_ids);
    t.mask = mask.describe();
    return t;
}

template ScoreTable score_sessions<float>(const TribeNet<float>&, std::span<const SessionData>,
                                          const std::vector<std::string>&, const ModalityMask&);
template ScoreTable score_sessions<double>(const TribeNet<double>&, std::span<const SessionData>,
                                           const std::vector<std::string>&, const ModalityMask&);

ScoreTable score_model(const TribeNet<float>& net, const DatasetManifest& manifest, Split split,
                       const ModalityMask& mask) {
    const auto sessions = load_sessions(manifest, split, net.config().layer_groups);
    if (sessions.empty()) throw std::invalid_argument("score_model: split '" + std::string(split_name(split)) + "' is empty");
    if (net.config().num_subjects != static_cast<Index>(manifest.subjects.size()))
        throw std::invalid_argument("score_model: checkpoint was trained for a different number of subjects");
    ScoreTable t = score_sessions(net, sessions, manifest.subjects, mask);
    t.split = split_name(split);
    return t;
}

ScoreTable score_model(const std::filesystem::path& checkpoint, const DatasetManifest& manifest, Split split,
                       const ModalityMask& mask) {
    return score_model(load_checkpoint(checkpoint), manifest, split, mask);
}

void probe_colors(const MatrixD& parcel_scores, std::vector<Modality>& argmax, MatrixD& rgb) {
    const Index parcels = parcel_scores.rows();
    argmax.assign(static_cast<std::size_t>(parcels), Modality::text);
    rgb = MatrixD::Zero(parcels, kNumModalities);
    for (Index p = 0; p < parcels; ++p) {
        Index best = 0;
        for (Index m = 1; m < kNumModalities; ++m)
            if (parcel_scores(p, m) > parcel_scores(p, best)) best = m;
        argmax[static_cast<std::size_t>(p)] = kModalities[static_cast<std::size_t>(best)];
        const double lo = parcel_scores.row(p).minCoeff();
        for (Index m = 0; m < kNumModalities; ++m) rgb(p, m) = std::clamp(parcel_scores(p, m) - lo, 0.0, 1.0);
    }
}

ProbeResult probe_modalities(const TribeNet<float>& net, const DatasetManifest& manifest, Split split) {
    const auto sessions = load_sessions(manifest, split, net.config().layer_groups);
    if (sessions.empty()) throw std::invalid_argument("probe_modalities: empty split");
    ProbeResult r;
    r.parcel_scores.resize(net.config().num_parcels, kNumModalities);
    for (Modality m : kModalities) {
        auto& t = r.solo[static_cast<std::size_t>(m)];
        t = score_sessions(net, sessions, manifest.subjects, ModalityMask::solo(m));
        t.split = split_name(split);
        VectorD means = t.parcel_means();
        // a parcel the solo model cannot move at all scores 0, so argmax stays defined
        for (Index p = 0; p < means.size(); ++p)
            if (!std::isfinite(means(p))) means(p) = 0.0;
        r.parcel_scores.col(static_cast<Index>(m)) = means;
    }
    probe_colors(r.parcel_scores, r.argmax, r.rgb);
    return r;
}

namespace {

std::string num(double v) {
    if (!std::isfinite(v)) return "nan";
    std::ostringstream s;
    s << std::setprecision(9) << v;
    return s.str();
}

double quantile(std::vector<double> v, double q) {
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

nlohmann::json describe(const std::vector<double>& v) {
    auto jnum = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
    double mean = kNaN;
    if (!v.empty()) {
        mean = 0;
        for (double x : v) mean += x;
        mean /= double(v.size());
    }
    return {{"count", v.size()},
            {"mean", jnum(mean)},
            {"median", jnum(quantile(v, 0.5))},
            {"q25", jnum(quantile(v, 0.25))},
            {"q75", jnum(quantile(v, 0.75))},
            {"iqr", jnum(quantile(v, 0.75) - quantile(v, 0.25))}};
}

}  // namespace

void write_score_csv(std::ostream& out, const ScoreTable& table, const NoiseCeiling* ceiling) {
    out << "parcel_id,subject_id,rho,rho_max,rho_norm\n";
    for (Index s = 0; s < table.scores.rows(); ++s)
        for (Index p = 0; p < table.scores.cols(); ++p) {
            const double rho = table.scores(s, p);
            const double rmax = ceiling ? ceiling->rho_max(p) : kNaN;
            const double norm = ceiling && !ceiling->flagged[static_cast<std::size_t>(p)] ? rho / rmax : kNaN;
            out << p << ',' << table.subject_ids[static_cast<std::size_t>(s)] << ',' << num(rho) << ',' << num(rmax)
                << ',' << num(norm) << '\n';
        }
}

std::string score_summary_json(const ScoreTable& table, const NoiseCeiling* ceiling) {
    nlohmann::json j;
    j["run_id"] = table.run_id;
    j["split"] = table.split;
    j["mask"] = table.mask;
    j["nan_count"] = table.nan_count;
    std::vector<double> raw;
    const VectorD means = table.parcel_means();
    for (Index p = 0; p < means.size(); ++p)
        if (std::isfinite(means(p))) raw.push_back(means(p));
    j["rho"] = describe(raw);
    j["mean_score"] = std::isfinite(table.mean_score) ? nlohmann::json(table.mean_score) : nlohmann::json(nullptr);
    j["per_subject_mean"] = nlohmann::json::array();
    for (Index s = 0; s < table.per_subject_mean.size(); ++s)
        j["per_subject_mean"].push_back(std::isfinite(table.per_subject_mean(s)) ? nlohmann::json(table.per_subject_mean(s))
                                                                               : nlohmann::json(nullptr));
    if (ceiling) {
        const ScoreTable norm = normalized_scores(table, *ceiling);
        std::vector<double> nv;
        const VectorD nm = norm.parcel_means();
        for (Index p = 0; p < nm.size(); ++p)
            if (std::isfinite(nm(p))) nv.push_back(nm(p));
        j["rho_norm"] = describe(nv);
        j["excluded_parcels"] = ceiling->num_flagged();
    }
    return j.dump(2);
}

void write_probe_csv(std::ostream& out, const ProbeResult& probe) {
    out << "parcel_id,text,audio,video,argmax,r,g,b\n";
    for (Index p = 0; p < probe.parcel_scores.rows(); ++p) {
        out << p;
        for (Index m = 0; m < kNumModalities; ++m) out << ',' << num(probe.parcel_scores(p, m));
        out << ',' << modality_name(probe.argmax[static_cast<std::size_t>(p)]);
        for (Index m = 0; m < kNumModalities; ++m) out << ',' << num(probe.rgb(p, m));
        out << '\n';
    }
}

}  // namespace tribe
