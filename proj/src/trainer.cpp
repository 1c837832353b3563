#include "tribe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "tribe/evaluator.hpp"

namespace tribe {

std::string_view loss_name(LossKind k) {
    switch (k) {
        case LossKind::mse: return "mse";
        case LossKind::pearson: return "pearson";
        case LossKind::smooth_l1: return "smooth_l1";
        case LossKind::huber: return "huber";
    }
    return "?";
}

LossKind parse_loss(std::string_view name) {
    if (name == "mse") return LossKind::mse;
    if (name == "pearson") return LossKind::pearson;
    if (name == "smooth_l1") return LossKind::smooth_l1;
    if (name == "huber") return LossKind::huber;
    throw std::invalid_argument("unknown loss '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("train config: epochs and batch_size must be >= 1");
    if (!(modality_dropout_p >= 0.0 && modality_dropout_p < 1.0))
        throw std::invalid_argument("train config: modality_dropout_p must be in [0, 1)");
    if (swa_start_epoch < 1 || swa_start_epoch > epochs)
        throw std::invalid_argument("train config: swa_start_epoch must be in [1, epochs]");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
        throw std::invalid_argument("train config: warmup_fraction must be in [0, 1)");
    if (!(lr_peak > 0)) throw std::invalid_argument("train config: lr_peak must be positive");
    if (early_stop_patience < 1) throw std::invalid_argument("train config: early_stop_patience must be >= 1");
    if (!withheld.valid()) throw std::invalid_argument("train config: cannot withhold every modality");
}

ModalityMask sample_modality_mask(double p, std::mt19937_64& rng, const ModalityMask& withheld) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    ModalityMask mask = withheld;
    std::array<int, kNumModalities> candidates{};
    int num_candidates = 0;
    for (int m = 0; m < kNumModalities; ++m) {
        if (withheld.masked[m]) continue;
        candidates[num_candidates++] = m;
        mask.masked[m] = unit(rng) < p;
    }
    if (!mask.valid()) {
        std::uniform_int_distribution<int> pick(0, num_candidates - 1);
        mask.masked[candidates[pick(rng)]] = false;
    }
    return mask;
}

template <typename Scalar>
LossResult<Scalar> compute_loss(std::span<const Matrix<Scalar>> pred, std::span<const Matrix<Scalar>> target,
                                LossKind kind) {
    if (pred.size() != target.size()) throw std::invalid_argument("compute_loss: batch sizes differ");
    LossResult<Scalar> out;
    out.grad.resize(pred.size());
    Index elements = 0;
    for (std::size_t b = 0; b < pred.size(); ++b) {
        if (pred[b].rows() != target[b].rows() || pred[b].cols() != target[b].cols())
            throw std::invalid_argument("compute_loss: prediction and target shapes differ");
        elements += pred[b].size();
    }
    if (pred.empty() || elements == 0) return out;

    if (kind == LossKind::pearson) {
        const Index n = pred.front().rows();
        if (n < 2) throw std::invalid_argument("compute_loss: pearson loss needs at least 2 time steps");
        const double count = double(pred.size()) * double(pred.front().cols());
        double corr_sum = 0.0;
        for (std::size_t b = 0; b < pred.size(); ++b) {
            const MatrixD x = pred[b].template cast<double>();
            const MatrixD y = target[b].template cast<double>();
            MatrixD g = MatrixD::Zero(x.rows(), x.cols());
            for (Index p = 0; p < x.cols(); ++p) {
                const VectorD xc = x.col(p).array() - x.col(p).mean();
                const VectorD yc = y.col(p).array() - y.col(p).mean();
                const double sxx = xc.squaredNorm(), syy = yc.squaredNorm();
                if (!(sxx > 0.0) || !(syy > 0.0)) continue;  // correlation counted as 0
                const double sxy = xc.dot(yc);
                const double r = sxy / std::sqrt(sxx * syy);
                corr_sum += r;
                // d r / d x = (yc / sqrt(sxx syy)) - r xc / sxx ; loss = 1 - mean r
                g.col(p) = -(yc / std::sqrt(sxx * syy) - r * xc / sxx) / count;
            }
            out.grad[b] = g.cast<Scalar>();
        }
        out.value = 1.0 - corr_sum / count;
        return out;
    }

    const double inv = 1.0 / double(elements);
    double total = 0.0;
    for (std::size_t b = 0; b < pred.size(); ++b) {
        const MatrixD diff = (pred[b] - target[b]).template cast<double>();
        MatrixD g(diff.rows(), diff.cols());
        if (kind == LossKind::mse) {
            total += diff.squaredNorm();
            g = 2.0 * inv * diff;
        } else {
            // smooth_l1 (beta 1) and huber (delta 1) coincide
            for (Index i = 0; i < diff.size(); ++i) {
                const double d = diff.data()[i];
                const double a = std::abs(d);
                total += a < 1.0 ? 0.5 * d * d : a - 0.5;
                g.data()[i] = inv * (a < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
            }
        }
        out.grad[b] = g.cast<Scalar>();
    }
    out.value = total * inv;
    return out;
}

template LossResult<float> compute_loss<float>(std::span<const MatrixF>, std::span<const MatrixF>, LossKind);
template LossResult<double> compute_loss<double>(std::span<const MatrixD>, std::span<const MatrixD>, LossKind);

Index warmup_steps(Index total_steps, const TrainConfig& cfg) {
    if (cfg.warmup_fraction <= 0.0) return 0;
    return std::max<Index>(1, round_index(cfg.warmup_fraction * double(total_steps)));
}

double lr_at(Index step, Index total_steps, const TrainConfig& cfg) {
    if (total_steps <= 0 || step < 0 || step >= total_steps) throw std::invalid_argument("lr_at: step out of range");
    const Index warm = warmup_steps(total_steps, cfg);
    if (step < warm) return cfg.lr_peak * double(step) / double(warm);
    const Index decay = total_steps - 1 - warm;
    if (decay <= 0) return cfg.lr_peak;
    const double progress = double(step - warm) / double(decay);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(Index num_params, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay),
      m_(VectorD::Zero(num_params)), v_(VectorD::Zero(num_params)) {}

template <typename Scalar>
void AdamW::step(Vector<Scalar>& params, const Vector<Scalar>& grad, double lr) {
    if (params.size() != m_.size() || grad.size() != m_.size())
        throw std::invalid_argument("AdamW: parameter count mismatch");
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1_, double(steps_));
    const double bc2 = 1.0 - std::pow(beta2_, double(steps_));
    for (Index i = 0; i < m_.size(); ++i) {
        const double g = double(grad(i));
        double p = double(params(i));
        p -= lr * weight_decay_ * p;
        m_(i) = beta1_ * m_(i) + (1.0 - beta1_) * g;
        v_(i) = beta2_ * v_(i) + (1.0 - beta2_) * g * g;
        const double mhat = m_(i) / bc1;
        const double vhat = v_(i) / bc2;
        p -= lr * mhat / (std::sqrt(vhat) + eps_);
        params(i) = Scalar(p);
    }
}

template void AdamW::step<float>(Vector<float>&, const Vector<float>&, double);
template void AdamW::step<double>(Vector<double>&, const Vector<double>&, double);

void EpochLog::write_jsonl(std::ostream& out) const {
    nlohmann::json j = {{"epoch", epoch},           {"step", step},
                        {"lr", lr},                 {"train_loss", train_loss},
                        {"val_pearson", val_pearson}, {"swa_active", swa_active}};
    out << j.dump() << '\n';
}

std::vector<SessionData> load_sessions(const DatasetManifest& manifest, std::span<const SessionRecord* const> sessions,
                                       const LayerGroupSpec& groups, bool with_bold) {
    std::vector<SessionData> out;
    out.reserve(sessions.size());
    for (const SessionRecord* rec : sessions) {
        SessionData s;
        s.session_id = rec->session_id;
        s.subject_index = manifest.subject_index(rec->subject_id);
        s.num_trs = rec->num_trs;
        for (Modality m : kModalities) {
            const auto series = load_features(manifest, *rec, m);
            s.features[static_cast<int>(m)] =
                group_layers(series.data, series.meta.num_layers, series.meta.dim, groups);
        }
        if (with_bold) s.bold = load_bold(manifest, *rec).data;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<SessionData> load_sessions(const DatasetManifest& manifest, Split split, const LayerGroupSpec& groups,
                                       bool with_bold) {
    const auto recs = manifest.sessions_in(split);
    return load_sessions(manifest, std::span<const SessionRecord* const>(recs.data(), recs.size()), groups, with_bold);
}

NetConfig resolve_net_config(NetConfig net, const DatasetManifest& manifest) {
    for (Modality m : kModalities) {
        const auto& meta = manifest.modality(m);
        net.input_dims[static_cast<int>(m)] = grouped_width(meta.num_layers, meta.dim, net.layer_groups);
    }
    net.num_subjects = static_cast<Index>(manifest.subjects.size());
    net.num_parcels = manifest.bold.num_parcels;
    net.window.tr_seconds = manifest.bold.tr_seconds;
    net.window.frequency_hz = manifest.frequency_hz();
    net.validate();
    return net;
}

namespace {

struct WindowRef {
    std::size_t session = 0;
    Index start_tr = 0;
};

}  // namespace

TrainResult train(const DatasetManifest& manifest, const NetConfig& net_config, const TrainConfig& cfg,
                  const TrainHooks* hooks) {
    cfg.validate();
    const NetConfig net_cfg = resolve_net_config(net_config, manifest);
    const auto train_sessions = load_sessions(manifest, Split::train, net_cfg.layer_groups);
    const auto val_sessions = load_sessions(manifest, Split::val, net_cfg.layer_groups);
    if (train_sessions.empty()) throw std::runtime_error("train: empty train split");
    if (val_sessions.empty()) throw std::runtime_error("train: empty val split");

    const WindowConfig& wc = net_cfg.window;
    std::vector<WindowRef> windows;
    for (std::size_t s = 0; s < train_sessions.size(); ++s)
        for (Index start = 0; start + wc.trs_per_window <= train_sessions[s].num_trs; start += wc.trs_per_window)
            windows.push_back({s, start});
    if (windows.empty()) throw std::runtime_error("train: no training session is long enough for one window");

    TribeNet<float> net(net_cfg);
    net.initialize(cfg.seed);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> jitter_dist(-wc.jitter_s, wc.jitter_s);

    const Index steps_per_epoch = (static_cast<Index>(windows.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const Index total_steps = cfg.epochs * steps_per_epoch;
    AdamW opt(net.num_params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    SwaAccumulator swa;
    const ModalityMask eval_mask = cfg.withheld;

    TrainResult result{net, std::nullopt, {}, -std::numeric_limits<double>::infinity(), false};
    Index epochs_since_best = 0;
    Index step = 0;
    Vector<float> grad = Vector<float>::Zero(net.num_params());
    ForwardCache<float> cache;
    for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(windows.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        Index loss_count = 0;
        double lr = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            const double batch = double(end - begin);
            grad.setZero();
            double batch_loss = 0.0;
            for (std::size_t i = begin; i < end; ++i) {
                const auto& ref = windows[order[i]];
                const double jitter = wc.jitter_s > 0 ? jitter_dist(rng) : 0.0;
                const AlignedWindow w = extract_window(train_sessions[ref.session], wc, ref.start_tr, jitter);
                const ModalityMask mask = sample_modality_mask(cfg.modality_dropout_p, rng, cfg.withheld);
                const MatrixF pred = net.forward(w, mask, &cache);
                const MatrixF& target = *w.targets;
                auto loss = compute_loss<float>(std::span<const MatrixF>(&pred, 1), std::span<const MatrixF>(&target, 1),
                                                cfg.loss);
                if (!std::isfinite(loss.value)) {
                    std::ostringstream msg;
                    msg << "train: non-finite loss at epoch " << epoch << ", step " << step << ", session "
                        << w.session_id << ", window start " << w.start_tr << ", mask " << mask.describe();
                    throw std::runtime_error(msg.str());
                }
                batch_loss += loss.value;
                net.backward(cache, MatrixF(loss.grad.front() / float(batch)), grad);
            }
            lr = lr_at(step, total_steps, cfg);
            opt.step(net.params(), grad, lr);
            ++step;
            loss_sum += batch_loss;
            loss_count += static_cast<Index>(end - begin);
        }
        if (hooks && hooks->on_epoch_end) hooks->on_epoch_end(epoch, net);

        const bool swa_active = epoch >= cfg.swa_start_epoch;
        if (swa_active) swa.add(net.params());
        double val = 0.0;
        if (swa_active) {
            TribeNet<float> averaged(net_cfg);
            averaged.params() = swa.mean().cast<float>();
            val = score_sessions(averaged, val_sessions, manifest.subjects, eval_mask).mean_score;
        } else {
            val = score_sessions(net, val_sessions, manifest.subjects, eval_mask).mean_score;
        }
        result.log.push_back({epoch, step, lr, loss_sum / double(std::max<Index>(loss_count, 1)), val, swa_active});

        if (val > result.best_val) {
            result.best_val = val;
            epochs_since_best = 0;
        } else if (++epochs_since_best >= cfg.early_stop_patience) {
            result.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    result.final_net = net;
    if (swa.count() > 0) {
        TribeNet<float> averaged(net_cfg);
        averaged.params() = swa.mean().cast<float>();
        result.swa_net = std::move(averaged);
    }
    return result;
}

}  // namespace tribe
