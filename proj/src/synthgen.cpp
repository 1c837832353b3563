#include "tribe/synthgen.hpp"

#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

#include "tribe/config_json.hpp"

namespace tribe {

std::vector<double> double_gamma_hrf(const HrfParams& p, double dt) {
    if (!(dt > 0) || !(p.length_s > dt)) throw std::invalid_argument("hrf: need 0 < dt < length_s");
    const auto n = static_cast<std::size_t>(std::ceil(p.length_s / dt - 1e-9));
    auto gamma_pdf = [](double t, double shape) {
        if (t <= 0) return 0.0;
        return std::exp((shape - 1.0) * std::log(t) - t - std::lgamma(shape));
    };
    std::vector<double> h(n);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = double(i) * dt;
        h[i] = gamma_pdf(t, p.peak_shape) - p.undershoot_ratio * gamma_pdf(t, p.undershoot_shape);
        total += std::abs(h[i]);
    }
    for (double& v : h) v /= total;
    return h;
}

Index SynthConfig::feature_steps() const {
    return static_cast<Index>(std::ceil(double(session_trs) * tr_seconds * frequency_hz - 1e-9)) + 1;
}

void SynthConfig::validate() const {
    if (num_subjects <= 0 || num_videos <= 0 || session_trs < 2 || num_parcels <= 0)
        throw std::invalid_argument("synth: subjects, videos, parcels must be > 0 and session_trs >= 2");
    if (num_val_videos < 0 || num_test_videos < 0 || num_val_videos + num_test_videos >= num_videos)
        throw std::invalid_argument("synth: held-out videos must leave at least one training video");
    if (latent_dim <= 0 || feature_dim <= 0 || layer_taus_s.empty())
        throw std::invalid_argument("synth: latent_dim, feature_dim and layer_taus_s must be non-empty");
    if (!(tr_seconds > 0) || !(frequency_hz > 0) || !(smoothness_s > 0))
        throw std::invalid_argument("synth: tr_seconds, frequency_hz and smoothness_s must be > 0");
    if (!(signal_std > 0) || noise_std < 0) throw std::invalid_argument("synth: signal_std must be > 0, noise_std >= 0");
    if (interaction_strength < 0 || interaction_strength > 1)
        throw std::invalid_argument("synth: interaction_strength must be in [0, 1]");
    if (drivers.empty()) throw std::invalid_argument("synth: drivers must be non-empty");
    for (const auto& d : drivers) parse_driver(d);
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"num_subjects", c.num_subjects},
         {"num_videos", c.num_videos},
         {"num_val_videos", c.num_val_videos},
         {"num_test_videos", c.num_test_videos},
         {"session_trs", c.session_trs},
         {"num_parcels", c.num_parcels},
         {"tr_seconds", c.tr_seconds},
         {"frequency_hz", c.frequency_hz},
         {"latent_dim", c.latent_dim},
         {"feature_dim", c.feature_dim},
         {"layer_taus_s", c.layer_taus_s},
         {"smoothness_s", c.smoothness_s},
         {"drivers", c.drivers},
         {"interaction_strength", c.interaction_strength},
         {"subject_deviation", c.subject_deviation},
         {"signal_std", c.signal_std},
         {"noise_std", c.noise_std},
         {"context_memory_s", c.context_memory_s},
         {"repeat_heldout", c.repeat_heldout},
         {"hrf",
          {{"peak_shape", c.hrf.peak_shape},
           {"undershoot_shape", c.hrf.undershoot_shape},
           {"undershoot_ratio", c.hrf.undershoot_ratio},
           {"length_s", c.hrf.length_s}}},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    reject_unknown_keys(j,
                        {"num_subjects", "num_videos", "num_val_videos", "num_test_videos", "session_trs",
                         "num_parcels", "tr_seconds", "frequency_hz", "latent_dim", "feature_dim", "layer_taus_s",
                         "smoothness_s", "drivers", "interaction_strength", "subject_deviation", "signal_std",
                         "noise_std", "context_memory_s", "repeat_heldout", "hrf", "seed"},
                        "synth");
    auto opt = [&](const char* key, auto& out) {
        if (j.contains(key)) j.at(key).get_to(out);
    };
    opt("num_subjects", c.num_subjects);
    opt("num_videos", c.num_videos);
    opt("num_val_videos", c.num_val_videos);
    opt("num_test_videos", c.num_test_videos);
    opt("session_trs", c.session_trs);
    opt("num_parcels", c.num_parcels);
    opt("tr_seconds", c.tr_seconds);
    opt("frequency_hz", c.frequency_hz);
    opt("latent_dim", c.latent_dim);
    opt("feature_dim", c.feature_dim);
    opt("layer_taus_s", c.layer_taus_s);
    opt("smoothness_s", c.smoothness_s);
    opt("drivers", c.drivers);
    opt("interaction_strength", c.interaction_strength);
    opt("subject_deviation", c.subject_deviation);
    opt("signal_std", c.signal_std);
    opt("noise_std", c.noise_std);
    opt("context_memory_s", c.context_memory_s);
    opt("repeat_heldout", c.repeat_heldout);
    opt("seed", c.seed);
    if (j.contains("hrf")) {
        const auto& h = j.at("hrf");
        reject_unknown_keys(h, {"peak_shape", "undershoot_shape", "undershoot_ratio", "length_s"}, "synth.hrf");
        if (h.contains("peak_shape")) h.at("peak_shape").get_to(c.hrf.peak_shape);
        if (h.contains("undershoot_shape")) h.at("undershoot_shape").get_to(c.hrf.undershoot_shape);
        if (h.contains("undershoot_ratio")) h.at("undershoot_ratio").get_to(c.hrf.undershoot_ratio);
        if (h.contains("length_s")) h.at("length_s").get_to(c.hrf.length_s);
    }
    c.validate();
}

std::string ParcelDriver::describe() const {
    std::string out;
    for (Modality m : modalities) {
        if (!out.empty()) out += '+';
        out += modality_name(m);
    }
    return out;
}

ParcelDriver parse_driver(std::string_view spec) {
    ParcelDriver d;
    const auto plus = spec.find('+');
    if (plus == std::string_view::npos) {
        d.modalities = {parse_modality(spec)};
    } else {
        d.modalities = {parse_modality(spec.substr(0, plus)), parse_modality(spec.substr(plus + 1))};
        if (d.modalities[0] == d.modalities[1])
            throw std::invalid_argument("synth: pair driver '" + std::string(spec) + "' repeats a modality");
    }
    return d;
}

nlohmann::json TeacherRecord::to_json() const {
    nlohmann::json j;
    j["config"] = config;
    j["parcel_drivers"] = nlohmann::json::array();
    for (const auto& d : parcel_drivers) j["parcel_drivers"].push_back(d.describe());
    j["readouts"] = nlohmann::json::array();
    for (const auto& r : readouts) {
        nlohmann::json rows = nlohmann::json::array();
        for (Index p = 0; p < r.rows(); ++p) {
            std::vector<double> row(r.row(p).data(), r.row(p).data() + r.cols());
            rows.push_back(row);
        }
        j["readouts"].push_back(rows);
    }
    j["noise_std"] = std::vector<double>(noise_std.data(), noise_std.data() + noise_std.size());
    return j;
}

namespace {

using Rng = std::mt19937_64;

Rng stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0) {
    const std::array<std::uint64_t, 7> words{seed & 0xffffffffULL, seed >> 32, tag, a & 0xffffffffULL, a >> 32,
                                             b & 0xffffffffULL, b >> 32};
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

MatrixD gaussian(Rng& rng, Index rows, Index cols) {
    std::normal_distribution<double> n(0.0, 1.0);
    MatrixD m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = n(rng);
    return m;
}

void standardize_columns(MatrixD& x) {
    for (Index j = 0; j < x.cols(); ++j) {
        auto col = x.col(j);
        col.array() -= col.mean();
        const double sd = std::sqrt(col.squaredNorm() / double(x.rows()));
        if (sd > 0) col /= sd;
    }
}

// Gaussian-smoothed white noise, standardized per column.
MatrixD smooth_noise(Rng& rng, Index steps, Index channels, double length_scale_steps) {
    const auto half = static_cast<Index>(4.0 * length_scale_steps) + 1;
    VectorD kernel(2 * half + 1);
    for (Index i = 0; i < kernel.size(); ++i) {
        const double u = double(i - half) / length_scale_steps;
        kernel(i) = std::exp(-0.5 * u * u);
    }
    const MatrixD white = gaussian(rng, steps + 2 * half, channels);
    MatrixD out(steps, channels);
    for (Index t = 0; t < steps; ++t) out.row(t) = kernel.transpose() * white.middleRows(t, kernel.size());
    standardize_columns(out);
    return out;
}

// Causal exponential moving average, rescaled to unit RMS per column.
MatrixD causal_ema(const MatrixD& x, double tau_steps) {
    if (tau_steps <= 0) return x;
    const double a = std::exp(-1.0 / tau_steps);
    MatrixD y(x.rows(), x.cols());
    RowVector<double> acc = RowVector<double>::Zero(x.cols());
    for (Index t = 0; t < x.rows(); ++t) {
        acc = a * acc + (1.0 - a) * x.row(t);
        y.row(t) = acc;
    }
    for (Index j = 0; j < y.cols(); ++j) {
        const double mean = y.col(j).mean();
        const double sd = std::sqrt((y.col(j).array() - mean).square().mean());
        if (sd > 0) y.col(j) /= sd;
    }
    return y;
}

std::string video_id(Index v) {
    std::ostringstream s;
    s << "vid-" << std::setw(2) << std::setfill('0') << v;
    return s.str();
}

std::string subject_id(Index s) {
    std::ostringstream o;
    o << "sub-" << std::setw(2) << std::setfill('0') << s + 1;
    return o.str();
}

constexpr Index kBurnIn = 64;

}  // namespace

SynthResult generate(const SynthConfig& c, const std::filesystem::path& out_dir) {
    c.validate();
    const Index K = c.latent_dim, D = c.feature_dim, L = c.num_layers(), P = c.num_parcels;
    const Index T = c.session_trs, Tf = c.feature_steps(), Tall = Tf + kBurnIn;
    const double f = c.frequency_hz;

    SynthResult result;
    TeacherRecord& teacher = result.teacher;
    teacher.config = c;
    for (Index p = 0; p < P; ++p)
        teacher.parcel_drivers.push_back(parse_driver(c.drivers[static_cast<std::size_t>(p) % c.drivers.size()]));
    teacher.noise_std = VectorD::Constant(P, c.noise_std);

    // fixed teacher weights: feature mixing per (modality, layer), shared readouts plus subject deviations
    Rng wrng = stream(c.seed, 1);
    std::array<std::vector<MatrixD>, kNumModalities> mixing;
    for (auto& per_layer : mixing)
        for (Index l = 0; l < L; ++l) per_layer.push_back(gaussian(wrng, K, D) / std::sqrt(double(K)));
    const MatrixD shared = gaussian(wrng, P, 2 * K);
    for (Index s = 0; s < c.num_subjects; ++s)
        teacher.readouts.push_back(shared + c.subject_deviation * gaussian(wrng, P, 2 * K));
    const std::vector<double> hrf = double_gamma_hrf(c.hrf, 1.0 / f);

    DatasetManifest& m = result.manifest;
    m.root = out_dir;
    for (Modality mod : kModalities) m.modalities.push_back({mod, D, L, f});
    m.bold = {P, c.tr_seconds};
    for (Index s = 0; s < c.num_subjects; ++s) m.subjects.push_back(subject_id(s));
    std::filesystem::create_directories(out_dir / "features");
    std::filesystem::create_directories(out_dir / "bold");

    for (Index v = 0; v < c.num_videos; ++v) {
        const std::string vid = video_id(v);
        const Split split = v < c.num_val_videos                      ? Split::val
                            : v < c.num_val_videos + c.num_test_videos ? Split::test
                                                                       : Split::train;
        Rng vrng = stream(c.seed, 2, static_cast<std::uint64_t>(v));
        std::array<MatrixD, kNumModalities> latents;
        for (auto& z : latents) z = smooth_noise(vrng, Tall, K, c.smoothness_s * f);

        std::map<Modality, std::filesystem::path> feature_paths;
        for (Modality mod : kModalities) {
            const auto mi = static_cast<std::size_t>(mod);
            MatrixF feat(Tf, L * D);
            for (Index l = 0; l < L; ++l) {
                const MatrixD layer =
                    causal_ema(latents[mi], c.layer_taus_s[static_cast<std::size_t>(l)] * f).bottomRows(Tf) *
                    mixing[mi][static_cast<std::size_t>(l)];
                feat.middleCols(l * D, D) = layer.cast<float>();
            }
            const std::filesystem::path rel = std::filesystem::path("features") /
                                              (vid + "_" + std::string(modality_name(mod)) + ".f32");
            write_tensor(out_dir / rel, {{Tf, L, D}, f}, std::span<const float>(feat.data(), feat.size()));
            feature_paths[mod] = rel;
        }

        std::array<MatrixD, kNumModalities> drive_latents = latents;
        if (c.context_memory_s > 0)
            drive_latents[static_cast<std::size_t>(Modality::text)] =
                causal_ema(latents[static_cast<std::size_t>(Modality::text)], c.context_memory_s * f);

        for (Index s = 0; s < c.num_subjects; ++s) {
            const MatrixD& w = teacher.readouts[static_cast<std::size_t>(s)];
            MatrixD drive(Tall, P);
            for (Index p = 0; p < P; ++p) {
                const auto& d = teacher.parcel_drivers[static_cast<std::size_t>(p)];
                const VectorD a = drive_latents[static_cast<std::size_t>(d.modalities[0])] * w.row(p).head(K).transpose();
                if (!d.is_pair()) {
                    drive.col(p) = a;
                } else {
                    const VectorD b =
                        drive_latents[static_cast<std::size_t>(d.modalities[1])] * w.row(p).tail(K).transpose();
                    drive.col(p) = c.interaction_strength * a.cwiseProduct(b).array() +
                                   (1.0 - c.interaction_strength) * (a + b).array() / std::sqrt(2.0);
                }
            }
            // causal HRF convolution on the feature grid, then linear interpolation at TR onsets
            MatrixD conv = MatrixD::Zero(Tf, P);
            for (Index t = 0; t < Tf; ++t)
                for (std::size_t k = 0; k < hrf.size() && Index(k) <= t + kBurnIn; ++k)
                    conv.row(t) += hrf[k] * drive.row(t + kBurnIn - Index(k));
            MatrixD signal(T, P);
            for (Index i = 0; i < T; ++i) {
                const double pos = double(i) * c.tr_seconds * f;
                const auto lo = std::min(static_cast<Index>(std::floor(pos)), Tf - 2);
                const double frac = pos - double(lo);
                signal.row(i) = (1.0 - frac) * conv.row(lo) + frac * conv.row(lo + 1);
            }
            standardize_columns(signal);
            signal *= c.signal_std;

            const Index copies = (split != Split::train && c.repeat_heldout) ? 2 : 1;
            std::string first_id;
            for (Index r = 0; r < copies; ++r) {
                Rng nrng = stream(c.seed, 3, static_cast<std::uint64_t>(v * c.num_subjects + s), static_cast<std::uint64_t>(r));
                MatrixD bold = signal;
                if (c.noise_std > 0) bold += c.noise_std * gaussian(nrng, T, P);
                BoldSeries series;
                series.data = zscore_columns(bold.cast<float>());
                SessionRecord rec;
                rec.session_id = subject_id(s) + "_" + vid + (r ? "_rep-" + std::to_string(r) : "");
                rec.subject_id = subject_id(s);
                rec.video_id = vid;
                rec.split = split;
                rec.feature_paths = feature_paths;
                rec.bold_path = std::filesystem::path("bold") / (rec.session_id + ".f32");
                rec.num_trs = T;
                rec.num_feature_steps = Tf;
                if (r) rec.repeat_of = first_id;
                else first_id = rec.session_id;
                write_bold(out_dir / *rec.bold_path, series);
                m.sessions.push_back(std::move(rec));
            }
        }
    }
    result.manifest_path = out_dir / "manifest.json";
    save_manifest(m, result.manifest_path);
    write_json_file(out_dir / "teacher.json", teacher.to_json());
    validate_manifest(m, true);
    return result;
}

}  // namespace tribe
