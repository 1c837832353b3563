#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "tribe/datastore.hpp"
#include "tribe/tribenet.hpp"

namespace tribe {

enum class LossKind { mse, pearson, smooth_l1, huber };
std::string_view loss_name(LossKind k);
LossKind parse_loss(std::string_view name);

struct TrainConfig {
    Index epochs = 15;
    Index batch_size = 16;
    double lr_peak = 1e-4;
    double warmup_fraction = 0.1;
    double weight_decay = 0.0;
    double modality_dropout_p = 0.2;
    Index swa_start_epoch = 8;
    Index early_stop_patience = 3;
    LossKind loss = LossKind::mse;
    std::uint64_t seed = 0;
    // Modalities withheld for the whole run (modality-subset ablations).
    ModalityMask withheld;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

// Each modality allowed by `withheld` is masked independently with probability p;
// if that leaves nothing visible, one of the candidates is unmasked uniformly.
ModalityMask sample_modality_mask(double p, std::mt19937_64& rng, const ModalityMask& withheld = {});

template <typename Scalar>
struct LossResult {
    double value = 0.0;
    std::vector<Matrix<Scalar>> grad;  // d(value)/d(pred), one [N, P] block per batch item
};

// pred/target: B blocks of [N, P]. mse and the two robust losses average over every
// element; pearson is 1 - mean over (batch, parcel) of the correlation along N.
template <typename Scalar>
LossResult<Scalar> compute_loss(std::span<const Matrix<Scalar>> pred, std::span<const Matrix<Scalar>> target,
                                LossKind kind);

// Linear warmup from 0 to lr_peak, then cosine decay reaching 0 at the final step.
double lr_at(Index step, Index total_steps, const TrainConfig& cfg);
Index warmup_steps(Index total_steps, const TrainConfig& cfg);

// Decoupled weight decay Adam with double-precision moments.
class AdamW {
public:
    AdamW() = default;
    AdamW(Index num_params, double beta1, double beta2, double eps, double weight_decay);

    template <typename Scalar>
    void step(Vector<Scalar>& params, const Vector<Scalar>& grad, double lr);

    Index steps() const { return steps_; }
    const VectorD& first_moment() const { return m_; }
    const VectorD& second_moment() const { return v_; }

private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.0;
    Index steps_ = 0;
    VectorD m_, v_;
};

// Running arithmetic mean of parameter snapshots.
class SwaAccumulator {
public:
    template <typename Scalar>
    void add(const Vector<Scalar>& params) {
        if (count_ == 0) mean_ = VectorD::Zero(params.size());
        ++count_;
        mean_ += (params.template cast<double>() - mean_) / double(count_);
    }
    Index count() const { return count_; }
    const VectorD& mean() const { return mean_; }

private:
    VectorD mean_;
    Index count_ = 0;
};

struct EpochLog {
    Index epoch = 0;
    Index step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_pearson = 0.0;
    bool swa_active = false;

    void write_jsonl(std::ostream& out) const;
};

struct TrainResult {
    TribeNet<float> final_net;
    std::optional<TribeNet<float>> swa_net;
    std::vector<EpochLog> log;
    double best_val = 0.0;
    bool stopped_early = false;

    // The weights to ship: SWA when it was active, else the final weights.
    const TribeNet<float>& shipped() const { return swa_net ? *swa_net : final_net; }
};

struct TrainHooks {
    // Called after each epoch with the current (non-averaged) weights.
    std::function<void(Index epoch, const TribeNet<float>&)> on_epoch_end;
};

// Per-session windows after layer grouping, ready for the network.
std::vector<SessionData> load_sessions(const DatasetManifest& manifest, Split split, const LayerGroupSpec& groups,
                                       bool with_bold = true);
std::vector<SessionData> load_sessions(const DatasetManifest& manifest, std::span<const SessionRecord* const> sessions,
                                       const LayerGroupSpec& groups, bool with_bold = true);

// Fills input_dims, num_subjects, num_parcels and window timing from the manifest.
NetConfig resolve_net_config(NetConfig net, const DatasetManifest& manifest);

TrainResult train(const DatasetManifest& manifest, const NetConfig& net_config, const TrainConfig& train_config,
                  const TrainHooks* hooks = nullptr);

}  // namespace tribe
