#pragma once

// Shared fixtures for unit and acceptance tests: temp directories and the
// desk-scale configurations the synthetic experiments run at.

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "tribe/ensembler.hpp"
#include "tribe/synthgen.hpp"
#include "tribe/trainer.hpp"

namespace tribe::testing {

class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("tribe_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Teacher at desk scale: 240-TR sessions, 60 parcels, 4 latent channels per modality.
inline SynthConfig desk_synth(std::uint64_t seed = 100) {
    SynthConfig c;
    c.num_subjects = 2;
    c.num_videos = 8;
    c.num_val_videos = 1;
    c.session_trs = 240;
    c.num_parcels = 60;
    c.noise_std = 0.0;
    c.seed = seed;
    return c;
}

// Unimodal plus pairwise-product parcels.
inline SynthConfig interaction_synth(std::uint64_t seed = 100) {
    SynthConfig c = desk_synth(seed);
    c.drivers = {"text", "audio", "video", "text+audio", "text+video", "audio+video"};
    return c;
}

// 20-TR windows (60 feature steps), hidden 24 = 3 x 8, one block.
inline NetConfig desk_net() {
    NetConfig n;
    n.proj_dim = 8;
    n.hidden_size = 24;
    n.num_layers = 1;
    n.num_heads = 4;
    n.feedforward_mult = 4;
    n.window.trs_per_window = 20;
    n.window.jitter_s = 0.0;
    return n;
}

inline TrainConfig desk_train(std::uint64_t seed = 0) {
    TrainConfig t;
    t.epochs = 20;
    t.batch_size = 8;
    t.lr_peak = 3e-3;
    t.modality_dropout_p = 0.0;
    t.swa_start_epoch = 20;
    t.early_stop_patience = 100;
    t.seed = seed;
    return t;
}

// Gradient-check network: hidden 24, 2 blocks, N = 3 TRs over 8 feature steps.
inline NetConfig tiny_net(Index num_subjects = 2, Index num_parcels = 5) {
    NetConfig n;
    n.proj_dim = 8;
    n.hidden_size = 24;
    n.num_layers = 2;
    n.num_heads = 4;
    n.feedforward_mult = 2;
    n.num_parcels = num_parcels;
    n.num_subjects = num_subjects;
    n.window.trs_per_window = 3;
    n.window.tr_seconds = 4.0 / 3.0;
    n.window.frequency_hz = 2.0;
    n.input_dims = {6, 4, 5};
    return n;
}

template <typename Scalar>
std::array<Matrix<Scalar>, kNumModalities> random_inputs(const NetConfig& c, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::array<Matrix<Scalar>, kNumModalities> x;
    for (int m = 0; m < kNumModalities; ++m) {
        x[m].resize(c.seq_len(), c.input_dims[m]);
        for (Index i = 0; i < x[m].size(); ++i) x[m].data()[i] = Scalar(n(rng));
    }
    return x;
}

}  // namespace tribe::testing
