#include "tribe/tribenet.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace tribe {

void NetConfig::validate() const {
    if (proj_dim <= 0 || hidden_size <= 0 || num_heads <= 0 || feedforward_mult <= 0)
        throw std::invalid_argument("net config: dimensions must be positive");
    if (num_layers < 0) throw std::invalid_argument("net config: num_layers must be >= 0");
    if (num_parcels <= 0 || num_subjects <= 0) throw std::invalid_argument("net config: parcels and subjects must be > 0");
    if (hidden_size % num_heads != 0) throw std::invalid_argument("net config: hidden_size must be divisible by num_heads");
    if (modality_aggregation == Aggregation::concatenate && hidden_size != kNumModalities * proj_dim)
        throw std::invalid_argument("net config: concatenate fusion requires hidden_size = 3 * proj_dim");
    if (modality_aggregation == Aggregation::average && hidden_size != proj_dim)
        throw std::invalid_argument("net config: average fusion requires hidden_size = proj_dim");
    for (Index d : input_dims)
        if (d <= 0) throw std::invalid_argument("net config: input_dims must be positive");
    if (window.trs_per_window <= 0 || window.feature_steps() < window.trs_per_window)
        throw std::invalid_argument("net config: window must have at least one feature step per TR");
}

Index count_params(const NetConfig& c) {
    const Index d = c.proj_dim, h = c.hidden_size, f = c.feedforward_mult * c.hidden_size;
    Index n = 0;
    for (Index in : c.input_dims) n += in * d + 3 * d;
    n += c.seq_len() * h;
    if (c.use_subject_embedding) n += c.num_subjects * h;
    n += c.num_layers * (4 * h + 4 * h * h + 4 * h + 2 * h * f + f + h);
    if (c.num_layers > 0) n += 2 * h;
    n += c.num_subjects * (h * c.num_parcels + c.num_parcels);
    return n;
}

Index ParamEntry::size() const {
    Index n = 1;
    for (Index s : shape) n *= s;
    return n;
}

Index ParamEntry::rows() const {
    Index n = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) n *= shape[i];
    return n;
}

std::vector<ParamEntry> param_registry(const NetConfig& c) {
    c.validate();
    std::vector<ParamEntry> reg;
    Index offset = 0;
    auto add = [&](std::string name, std::vector<Index> shape) {
        ParamEntry e{std::move(name), std::move(shape), offset};
        offset += e.size();
        reg.push_back(std::move(e));
    };
    const Index d = c.proj_dim, h = c.hidden_size, f = c.feedforward_mult * c.hidden_size;
    for (Modality m : kModalities) {
        const std::string p = "input." + std::string(modality_name(m));
        add(p + ".proj.weight", {c.input_dims[static_cast<int>(m)], d});
        add(p + ".proj.bias", {d});
        add(p + ".norm.gain", {d});
        add(p + ".norm.bias", {d});
    }
    add("pos_embedding", {c.seq_len(), h});
    if (c.use_subject_embedding) add("subject_embedding", {c.num_subjects, h});
    for (Index l = 0; l < c.num_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l);
        add(p + ".norm1.gain", {h});
        add(p + ".norm1.bias", {h});
        add(p + ".attn.qkv.weight", {h, 3 * h});
        add(p + ".attn.qkv.bias", {3 * h});
        add(p + ".attn.out.weight", {h, h});
        add(p + ".attn.out.bias", {h});
        add(p + ".norm2.gain", {h});
        add(p + ".norm2.bias", {h});
        add(p + ".ff1.weight", {h, f});
        add(p + ".ff1.bias", {f});
        add(p + ".ff2.weight", {f, h});
        add(p + ".ff2.bias", {h});
    }
    if (c.num_layers > 0) {
        add("final_norm.gain", {h});
        add("final_norm.bias", {h});
    }
    add("readout.weight", {c.num_subjects, h, c.num_parcels});
    add("readout.bias", {c.num_subjects, c.num_parcels});
    return reg;
}

template <typename Scalar>
Matrix<Scalar> pooling_matrix(Index in_len, Index out_len) {
    if (out_len <= 0) throw std::invalid_argument("adaptive_avg_pool: out_len must be positive");
    if (out_len > in_len) throw std::invalid_argument("adaptive_avg_pool: out_len exceeds input length");
    Matrix<Scalar> p = Matrix<Scalar>::Zero(out_len, in_len);
    for (Index i = 0; i < out_len; ++i) {
        const Index begin = (in_len * i) / out_len;                             // floor
        const Index end = (in_len * (i + 1) + out_len - 1) / out_len;           // ceil
        p.row(i).segment(begin, end - begin).setConstant(Scalar(1) / Scalar(end - begin));
    }
    return p;
}

template Matrix<float> pooling_matrix<float>(Index, Index);
template Matrix<double> pooling_matrix<double>(Index, Index);

namespace {

constexpr double kNormEps = 1e-5;

template <typename Scalar>
Scalar gelu(Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x / Scalar(std::numbers::sqrt2)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / Scalar(std::numbers::sqrt2)));
    const Scalar pdf = std::exp(Scalar(-0.5) * x * x) / Scalar(std::sqrt(2.0 * std::numbers::pi));
    return cdf + x * pdf;
}

template <typename Scalar>
void softmax_rows(Matrix<Scalar>& s) {
    for (Index r = 0; r < s.rows(); ++r) {
        auto row = s.row(r);
        const Scalar mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
    }
}

}  // namespace

template <typename Scalar>
TribeNet<Scalar>::TribeNet(NetConfig config) : config_(std::move(config)) {
    registry_ = param_registry(config_);
    const auto& last = registry_.back();
    params_ = VectorType::Zero(last.offset + last.size());
    pool_ = pooling_matrix<Scalar>(config_.seq_len(), config_.window.trs_per_window);

    for (Modality m : kModalities) {
        const int i = static_cast<int>(m);
        const std::string p = "input." + std::string(modality_name(m));
        proj_w_[i] = ref(p + ".proj.weight");
        proj_b_[i] = ref(p + ".proj.bias");
        norm_g_[i] = ref(p + ".norm.gain");
        norm_b_[i] = ref(p + ".norm.bias");
    }
    pos_ = ref("pos_embedding");
    if (config_.use_subject_embedding) subject_ = ref("subject_embedding");
    for (Index l = 0; l < config_.num_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l);
        blocks_.push_back({ref(p + ".norm1.gain"), ref(p + ".norm1.bias"), ref(p + ".attn.qkv.weight"),
                           ref(p + ".attn.qkv.bias"), ref(p + ".attn.out.weight"), ref(p + ".attn.out.bias"),
                           ref(p + ".norm2.gain"), ref(p + ".norm2.bias"), ref(p + ".ff1.weight"),
                           ref(p + ".ff1.bias"), ref(p + ".ff2.weight"), ref(p + ".ff2.bias")});
    }
    if (config_.num_layers > 0) {
        final_g_ = ref("final_norm.gain");
        final_b_ = ref("final_norm.bias");
    }
    readout_w_ = ref("readout.weight");
    readout_b_ = ref("readout.bias");
    initialize(0);
}

template <typename Scalar>
const ParamEntry& TribeNet<Scalar>::entry(const std::string& name) const {
    for (const auto& e : registry_)
        if (e.name == name) return e;
    throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename Scalar>
typename TribeNet<Scalar>::Ref TribeNet<Scalar>::ref(const std::string& name) const {
    const auto& e = entry(name);
    return {e.offset, e.rows(), e.cols()};
}

template <typename Scalar>
typename TribeNet<Scalar>::ParamMap TribeNet<Scalar>::param(const std::string& name) {
    return view(params_, ref(name));
}

template <typename Scalar>
typename TribeNet<Scalar>::ConstParamMap TribeNet<Scalar>::param(const std::string& name) const {
    return view(ref(name));
}

template <typename Scalar>
void TribeNet<Scalar>::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uniform = [&](const Ref& r, double bound) {
        std::uniform_real_distribution<double> dist(-bound, bound);
        auto v = view(params_, r);
        for (Index i = 0; i < v.size(); ++i) v.data()[i] = Scalar(dist(rng));
    };
    auto normal = [&](const Ref& r, double sd) {
        std::normal_distribution<double> dist(0.0, sd);
        auto v = view(params_, r);
        for (Index i = 0; i < v.size(); ++i) v.data()[i] = Scalar(dist(rng));
    };
    auto fill = [&](const Ref& r, Scalar value) { view(params_, r).setConstant(value); };

    const double h = double(config_.hidden_size);
    for (int m = 0; m < kNumModalities; ++m) {
        const double fan_in = double(config_.input_dims[m]);
        uniform(proj_w_[m], 1.0 / std::sqrt(fan_in));
        uniform(proj_b_[m], 1.0 / std::sqrt(fan_in));
        fill(norm_g_[m], Scalar(1));
        fill(norm_b_[m], Scalar(0));
    }
    normal(pos_, 0.02);
    if (config_.use_subject_embedding) normal(subject_, 0.02);
    const double ff = double(config_.feedforward_mult) * h;
    for (const auto& b : blocks_) {
        fill(b.ln1_g, Scalar(1));
        fill(b.ln1_b, Scalar(0));
        uniform(b.qkv_w, 1.0 / std::sqrt(h));
        fill(b.qkv_b, Scalar(0));
        uniform(b.out_w, 1.0 / std::sqrt(h));
        fill(b.out_b, Scalar(0));
        fill(b.ln2_g, Scalar(1));
        fill(b.ln2_b, Scalar(0));
        uniform(b.ff1_w, 1.0 / std::sqrt(h));
        uniform(b.ff1_b, 1.0 / std::sqrt(h));
        fill(b.ff2_w, Scalar(0));
        fill(b.ff2_b, Scalar(0));
        (void)ff;
    }
    if (config_.num_layers > 0) {
        fill(final_g_, Scalar(1));
        fill(final_b_, Scalar(0));
    }
    uniform(readout_w_, 1.0 / std::sqrt(h));
    fill(readout_b_, Scalar(0));
}

template <typename Scalar>
typename TribeNet<Scalar>::MatrixType TribeNet<Scalar>::layer_norm(const MatrixType& x, const Ref& gain,
                                                                    const Ref& bias,
                                                                    LayerNormCache<Scalar>* cache) const {
    const auto g = view(gain);
    const auto b = view(bias);
    const Index width = x.cols();
    MatrixType xhat(x.rows(), width);
    VectorType rstd(x.rows());
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar mean = x.row(r).mean();
        const Scalar var = (x.row(r).array() - mean).square().sum() / Scalar(width);
        rstd(r) = Scalar(1) / std::sqrt(var + Scalar(kNormEps));
        xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
    }
    MatrixType y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <typename Scalar>
typename TribeNet<Scalar>::MatrixType TribeNet<Scalar>::layer_norm_backward(const MatrixType& dy,
                                                                             const LayerNormCache<Scalar>& cache,
                                                                             const Ref& gain, const Ref& bias,
                                                                             VectorType& grad) const {
    const auto g = view(gain);
    view(grad, gain) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    view(grad, bias) += dy.colwise().sum();
    const MatrixType dxhat = dy.array().rowwise() * g.row(0).array();
    const Scalar width = Scalar(dy.cols());
    MatrixType dx(dy.rows(), dy.cols());
    for (Index r = 0; r < dy.rows(); ++r) {
        const Scalar sum_d = dxhat.row(r).sum();
        const Scalar sum_dx = dxhat.row(r).dot(cache.xhat.row(r));
        dx.row(r) = (cache.rstd(r) / width) *
                    (width * dxhat.row(r).array() - sum_d - cache.xhat.row(r).array() * sum_dx);
    }
    return dx;
}

template <typename Scalar>
typename TribeNet<Scalar>::MatrixType TribeNet<Scalar>::forward(const AlignedWindow& window, const ModalityMask& mask,
                                                                 ForwardCache<Scalar>* cache) const {
    std::array<MatrixType, kNumModalities> inputs;
    for (int m = 0; m < kNumModalities; ++m) inputs[m] = window.inputs[m].template cast<Scalar>();
    return forward(inputs, window.subject_index, mask, cache);
}

template <typename Scalar>
typename TribeNet<Scalar>::MatrixType TribeNet<Scalar>::forward(const std::array<MatrixType, kNumModalities>& inputs,
                                                                 Index subject, const ModalityMask& mask,
                                                                 ForwardCache<Scalar>* cache) const {
    const NetConfig& c = config_;
    const Index steps = c.seq_len();
    const Index d = c.proj_dim, h = c.hidden_size;
    if (!mask.valid()) throw std::invalid_argument("forward: every modality is masked");
    if (subject < 0 || subject >= c.num_subjects) throw std::invalid_argument("forward: subject index out of range");
    for (int m = 0; m < kNumModalities; ++m)
        if (inputs[m].rows() != steps || inputs[m].cols() != c.input_dims[m])
            throw std::invalid_argument("forward: input shape mismatch for modality " +
                                        std::string(modality_name(kModalities[m])));

    ForwardCache<Scalar> local;
    ForwardCache<Scalar>& fc = cache ? *cache : local;
    fc.subject = subject;
    fc.mask = mask;
    fc.blocks.assign(static_cast<std::size_t>(c.num_layers), {});

    MatrixType hcur = MatrixType::Zero(steps, h);
    for (int m = 0; m < kNumModalities; ++m) {
        if (mask.masked[m])
            fc.x[m] = MatrixType::Zero(steps, c.input_dims[m]);
        else
            fc.x[m] = inputs[m];
        MatrixType y = fc.x[m] * view(proj_w_[m]);
        y.rowwise() += view(proj_b_[m]).row(0);
        MatrixType z = layer_norm(y, norm_g_[m], norm_b_[m], &fc.in_norm[m]);
        if (c.modality_aggregation == Aggregation::concatenate)
            hcur.middleCols(m * d, d) = z;
        else
            hcur += z / Scalar(kNumModalities);
    }
    hcur += view(pos_);
    if (c.use_subject_embedding) hcur.rowwise() += view(subject_).row(subject);

    const Index heads = c.num_heads, dh = h / heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    for (Index l = 0; l < c.num_layers; ++l) {
        const auto& br = blocks_[static_cast<std::size_t>(l)];
        auto& bc = fc.blocks[static_cast<std::size_t>(l)];
        bc.h_in = hcur;
        bc.a = layer_norm(hcur, br.ln1_g, br.ln1_b, &bc.ln1);
        bc.qkv.noalias() = bc.a * view(br.qkv_w);
        bc.qkv.rowwise() += view(br.qkv_b).row(0);
        bc.ctx.resize(steps, h);
        bc.attn.resize(static_cast<std::size_t>(heads));
        for (Index hd = 0; hd < heads; ++hd) {
            const auto q = bc.qkv.middleCols(hd * dh, dh);
            const auto k = bc.qkv.middleCols(h + hd * dh, dh);
            const auto v = bc.qkv.middleCols(2 * h + hd * dh, dh);
            MatrixType s = (q * k.transpose()) * scale;
            softmax_rows(s);
            bc.ctx.middleCols(hd * dh, dh).noalias() = s * v;
            bc.attn[static_cast<std::size_t>(hd)] = std::move(s);
        }
        MatrixType o = bc.ctx * view(br.out_w);
        o.rowwise() += view(br.out_b).row(0);
        hcur += o;
        bc.h_mid = hcur;
        bc.b = layer_norm(hcur, br.ln2_g, br.ln2_b, &bc.ln2);
        bc.u.noalias() = bc.b * view(br.ff1_w);
        bc.u.rowwise() += view(br.ff1_b).row(0);
        bc.g = bc.u.unaryExpr([](Scalar x) { return gelu(x); });
        MatrixType f = bc.g * view(br.ff2_w);
        f.rowwise() += view(br.ff2_b).row(0);
        hcur += f;
    }
    if (c.num_layers > 0) hcur = layer_norm(hcur, final_g_, final_b_, &fc.final_norm);

    fc.pooled.noalias() = pool_ * hcur;
    const ConstParamMap w(params_.data() + readout_w_.offset + subject * h * c.num_parcels, h, c.num_parcels);
    MatrixType out = fc.pooled * w;
    out.rowwise() += view(readout_b_).row(subject);
    fc.valid = cache != nullptr;
    return out;
}

template <typename Scalar>
void TribeNet<Scalar>::backward(const ForwardCache<Scalar>& fc, const MatrixType& grad_out, VectorType& grad) const {
    if (!fc.valid) throw std::logic_error("backward: forward cache missing (run forward with a cache first)");
    const NetConfig& c = config_;
    const Index h = c.hidden_size, d = c.proj_dim, p = c.num_parcels;
    if (grad_out.rows() != c.window.trs_per_window || grad_out.cols() != p)
        throw std::invalid_argument("backward: output gradient shape mismatch");
    if (grad.size() != params_.size()) grad = VectorType::Zero(params_.size());

    const Index s = fc.subject;
    const ConstParamMap w(params_.data() + readout_w_.offset + s * h * p, h, p);
    ParamMap dw(grad.data() + readout_w_.offset + s * h * p, h, p);
    dw.noalias() += fc.pooled.transpose() * grad_out;
    view(grad, readout_b_).row(s) += grad_out.colwise().sum();
    const MatrixType dpooled = grad_out * w.transpose();
    MatrixType dh = pool_.transpose() * dpooled;

    if (c.num_layers > 0) dh = layer_norm_backward(dh, fc.final_norm, final_g_, final_b_, grad);

    const Index heads = c.num_heads, dhd = h / heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dhd));
    for (Index l = c.num_layers - 1; l >= 0; --l) {
        const auto& br = blocks_[static_cast<std::size_t>(l)];
        const auto& bc = fc.blocks[static_cast<std::size_t>(l)];
        // feedforward residual branch
        view(grad, br.ff2_w).noalias() += bc.g.transpose() * dh;
        view(grad, br.ff2_b) += dh.colwise().sum();
        MatrixType du = dh * view(br.ff2_w).transpose();
        du.array() *= bc.u.unaryExpr([](Scalar x) { return gelu_grad(x); }).array();
        view(grad, br.ff1_w).noalias() += bc.b.transpose() * du;
        view(grad, br.ff1_b) += du.colwise().sum();
        const MatrixType db = du * view(br.ff1_w).transpose();
        dh += layer_norm_backward(db, bc.ln2, br.ln2_g, br.ln2_b, grad);

        // attention residual branch
        view(grad, br.out_w).noalias() += bc.ctx.transpose() * dh;
        view(grad, br.out_b) += dh.colwise().sum();
        const MatrixType dctx = dh * view(br.out_w).transpose();
        MatrixType dqkv(bc.qkv.rows(), bc.qkv.cols());
        for (Index hd = 0; hd < heads; ++hd) {
            const auto& a = bc.attn[static_cast<std::size_t>(hd)];
            const auto q = bc.qkv.middleCols(hd * dhd, dhd);
            const auto k = bc.qkv.middleCols(h + hd * dhd, dhd);
            const auto v = bc.qkv.middleCols(2 * h + hd * dhd, dhd);
            const auto dc = dctx.middleCols(hd * dhd, dhd);
            const MatrixType da = dc * v.transpose();
            dqkv.middleCols(2 * h + hd * dhd, dhd).noalias() = a.transpose() * dc;
            const VectorType row_dot = (da.array() * a.array()).rowwise().sum();
            const MatrixType ds = (a.array() * (da.colwise() - row_dot).array()) * scale;
            dqkv.middleCols(hd * dhd, dhd).noalias() = ds * k;
            dqkv.middleCols(h + hd * dhd, dhd).noalias() = ds.transpose() * q;
        }
        view(grad, br.qkv_w).noalias() += bc.a.transpose() * dqkv;
        view(grad, br.qkv_b) += dqkv.colwise().sum();
        const MatrixType dan = dqkv * view(br.qkv_w).transpose();
        dh += layer_norm_backward(dan, bc.ln1, br.ln1_g, br.ln1_b, grad);
    }

    // embeddings
    view(grad, pos_) += dh;
    if (c.use_subject_embedding) view(grad, subject_).row(s) += dh.colwise().sum();
    for (int m = 0; m < kNumModalities; ++m) {
        MatrixType dz = c.modality_aggregation == Aggregation::concatenate
                            ? MatrixType(dh.middleCols(m * d, d))
                            : MatrixType(dh / Scalar(kNumModalities));
        const MatrixType dy = layer_norm_backward(dz, fc.in_norm[m], norm_g_[m], norm_b_[m], grad);
        view(grad, proj_w_[m]).noalias() += fc.x[m].transpose() * dy;
        view(grad, proj_b_[m]) += dy.colwise().sum();
    }
}

template class TribeNet<float>;
template class TribeNet<double>;

}  // namespace tribe
