#pragma once

// Subject-conditioned multimodal transformer encoder with hand-written
// reverse-mode gradients. Parameters live in one flat vector addressed
// through a registry of (name, shape, offset) entries, which is also the
// checkpoint layout.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tribe/alignment.hpp"
#include "tribe/types.hpp"

namespace tribe {

struct NetConfig {
    Index proj_dim = 1024;
    Index num_layers = 8;
    Index num_heads = 8;
    Index hidden_size = 3072;
    Index feedforward_mult = 4;
    Index num_parcels = 1000;
    Index num_subjects = 1;
    Aggregation modality_aggregation = Aggregation::concatenate;
    bool use_subject_embedding = true;
    WindowConfig window;
    LayerGroupSpec layer_groups;
    // Width of each modality's input after layer grouping.
    std::array<Index, kNumModalities> input_dims{0, 0, 0};

    Index seq_len() const { return window.feature_steps(); }
    void validate() const;
    bool operator==(const NetConfig&) const = default;
};

// Closed-form parameter count.
Index count_params(const NetConfig& config);

struct ParamEntry {
    std::string name;
    std::vector<Index> shape;
    Index offset = 0;

    Index size() const;
    Index rows() const;  // product of all but the last dimension
    Index cols() const { return shape.empty() ? 1 : shape.back(); }
};

std::vector<ParamEntry> param_registry(const NetConfig& config);

// [out_len, T_in] averaging matrix for rows [floor(T i / n), ceil(T (i + 1) / n)).
template <typename Scalar>
Matrix<Scalar> pooling_matrix(Index in_len, Index out_len);

template <typename Derived>
Matrix<typename Derived::Scalar> adaptive_avg_pool(const Eigen::MatrixBase<Derived>& x, Index out_len) {
    return pooling_matrix<typename Derived::Scalar>(x.rows(), out_len) * x;
}

template <typename Scalar>
struct LayerNormCache {
    Matrix<Scalar> xhat;
    Vector<Scalar> rstd;
};

template <typename Scalar>
struct BlockCache {
    Matrix<Scalar> h_in;
    LayerNormCache<Scalar> ln1;
    Matrix<Scalar> a;
    Matrix<Scalar> qkv;
    std::vector<Matrix<Scalar>> attn;  // per head [S, S]
    Matrix<Scalar> ctx;
    Matrix<Scalar> h_mid;
    LayerNormCache<Scalar> ln2;
    Matrix<Scalar> b;
    Matrix<Scalar> u;
    Matrix<Scalar> g;
};

template <typename Scalar>
struct ForwardCache {
    bool valid = false;
    Index subject = 0;
    ModalityMask mask;
    std::array<Matrix<Scalar>, kNumModalities> x;
    std::array<LayerNormCache<Scalar>, kNumModalities> in_norm;
    std::vector<BlockCache<Scalar>> blocks;
    LayerNormCache<Scalar> final_norm;
    Matrix<Scalar> pooled;
};

template <typename Scalar>
class TribeNet {
public:
    using MatrixType = Matrix<Scalar>;
    using VectorType = Vector<Scalar>;
    using ParamMap = Eigen::Map<MatrixType>;
    using ConstParamMap = Eigen::Map<const MatrixType>;

    explicit TribeNet(NetConfig config);

    // Seeded initialization: projections, attention and readouts uniform(+-1/sqrt(fan_in)),
    // positional/subject tables normal(0, 0.02), norms at identity, second feedforward
    // layer of every block zero.
    void initialize(std::uint64_t seed);

    const NetConfig& config() const { return config_; }
    const std::vector<ParamEntry>& registry() const { return registry_; }
    Index num_params() const { return params_.size(); }

    VectorType& params() { return params_; }
    const VectorType& params() const { return params_; }
    ParamMap param(const std::string& name);
    ConstParamMap param(const std::string& name) const;
    const ParamEntry& entry(const std::string& name) const;

    // Returns [N, P]. Fills `cache` (when non-null) for a later backward pass.
    MatrixType forward(const AlignedWindow& window, const ModalityMask& mask, ForwardCache<Scalar>* cache = nullptr) const;
    MatrixType forward(const std::array<MatrixType, kNumModalities>& inputs, Index subject, const ModalityMask& mask,
                       ForwardCache<Scalar>* cache = nullptr) const;

    // Accumulates d(loss)/d(params) into `grad` (same layout as params()).
    void backward(const ForwardCache<Scalar>& cache, const MatrixType& grad_out, VectorType& grad) const;

    template <typename Other>
    TribeNet<Other> cast() const {
        TribeNet<Other> out(config_);
        out.params() = params_.template cast<Other>();
        return out;
    }

private:
    struct Ref {
        Index offset = 0;
        Index rows = 0;
        Index cols = 0;
    };
    struct BlockRefs {
        Ref ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
    };

    Ref ref(const std::string& name) const;
    ConstParamMap view(const Ref& r) const { return ConstParamMap(params_.data() + r.offset, r.rows, r.cols); }
    static ParamMap view(VectorType& v, const Ref& r) { return ParamMap(v.data() + r.offset, r.rows, r.cols); }

    MatrixType layer_norm(const MatrixType& x, const Ref& gain, const Ref& bias, LayerNormCache<Scalar>* cache) const;
    MatrixType layer_norm_backward(const MatrixType& dy, const LayerNormCache<Scalar>& cache, const Ref& gain,
                                   const Ref& bias, VectorType& grad) const;

    NetConfig config_;
    std::vector<ParamEntry> registry_;
    VectorType params_;
    MatrixType pool_;

    std::array<Ref, kNumModalities> proj_w_, proj_b_, norm_g_, norm_b_;
    Ref pos_, subject_;
    std::vector<BlockRefs> blocks_;
    Ref final_g_, final_b_, readout_w_, readout_b_;
};

extern template class TribeNet<float>;
extern template class TribeNet<double>;

// Checkpoint: `<stem>.json` (config + registry) and `<stem>.f32` (flat little-endian blob).
void save_checkpoint(const TribeNet<float>& net, const std::filesystem::path& stem);
TribeNet<float> load_checkpoint(const std::filesystem::path& stem);
std::filesystem::path checkpoint_blob(const std::filesystem::path& stem);
std::filesystem::path checkpoint_sidecar(const std::filesystem::path& stem);

}  // namespace tribe
