#include "tribe/ensembler.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "tribe/config_json.hpp"

namespace tribe {

std::array<Index, EnsembleGrid::kNumAxes> EnsembleGrid::axis_sizes() const {
    return {static_cast<Index>(losses.size()),
            static_cast<Index>(modality_dropout.size()),
            static_cast<Index>(layer_anchors.size()),
            static_cast<Index>(layer_modes.size()),
            static_cast<Index>(layer_aggregations.size()),
            static_cast<Index>(modality_aggregations.size()),
            static_cast<Index>(subject_embedding.size())};
}

void EnsembleGrid::validate() const {
    for (Index n : axis_sizes())
        if (n <= 0) throw std::invalid_argument("ensemble grid: every axis needs at least one value");
    for (const auto& a : layer_anchors) LayerGroupSpec{a}.validate();
}

void EnsembleConfig::validate() const {
    if (num_models < 1) throw std::invalid_argument("ensemble: num_models must be >= 1");
    if (!(temperature > 0)) throw std::invalid_argument("ensemble: temperature must be > 0");
    grid.validate();
    base_train.validate();
}

NetConfig apply_draw(const EnsembleGrid& grid, const GridDraw& d, NetConfig net) {
    net.layer_groups.anchors = grid.layer_anchors.at(static_cast<std::size_t>(d.index[2]));
    net.layer_groups.mode = grid.layer_modes.at(static_cast<std::size_t>(d.index[3]));
    net.layer_groups.aggregation = grid.layer_aggregations.at(static_cast<std::size_t>(d.index[4]));
    net.modality_aggregation = grid.modality_aggregations.at(static_cast<std::size_t>(d.index[5]));
    net.use_subject_embedding = grid.subject_embedding.at(static_cast<std::size_t>(d.index[6]));
    net.hidden_size = net.modality_aggregation == Aggregation::concatenate ? kNumModalities * net.proj_dim : net.proj_dim;
    net.num_heads = std::gcd(net.num_heads, net.hidden_size);
    return net;
}

TrainConfig apply_draw(const EnsembleGrid& grid, const GridDraw& d, TrainConfig train) {
    train.loss = grid.losses.at(static_cast<std::size_t>(d.index[0]));
    train.modality_dropout_p = grid.modality_dropout.at(static_cast<std::size_t>(d.index[1]));
    return train;
}

nlohmann::json describe_draw(const EnsembleGrid& grid, const GridDraw& d) {
    const auto i = [&](int axis) { return static_cast<std::size_t>(d.index[static_cast<std::size_t>(axis)]); };
    return {{"loss", loss_name(grid.losses.at(i(0)))},
            {"modality_dropout_p", grid.modality_dropout.at(i(1))},
            {"layer_anchors", grid.layer_anchors.at(i(2))},
            {"layer_mode", layer_mode_name(grid.layer_modes.at(i(3)))},
            {"layer_aggregation", aggregation_name(grid.layer_aggregations.at(i(4)))},
            {"modality_aggregation", aggregation_name(grid.modality_aggregations.at(i(5)))},
            {"use_subject_embedding", bool(grid.subject_embedding.at(i(6)))}};
}

namespace {

std::string member_id(Index i) {
    std::ostringstream s;
    s << "member-" << std::setw(3) << std::setfill('0') << i;
    return s.str();
}

}  // namespace

std::vector<EnsembleMember> sample_grid(const EnsembleConfig& config) {
    config.validate();
    const auto sizes = config.grid.axis_sizes();
    std::mt19937_64 rng(config.seed);
    std::vector<EnsembleMember> out;
    for (Index i = 0; i < config.num_models; ++i) {
        EnsembleMember m;
        m.id = member_id(i);
        if (i > 0)
            for (std::size_t a = 0; a < sizes.size(); ++a)
                m.draw.index[a] = std::uniform_int_distribution<Index>(0, sizes[a] - 1)(rng);
        m.net = apply_draw(config.grid, m.draw, config.base_net);
        m.train = apply_draw(config.grid, m.draw, config.base_train);
        m.train.seed = config.base_train.seed + static_cast<std::uint64_t>(i);
        out.push_back(std::move(m));
    }
    return out;
}

EnsembleWeights fit_weights(const MatrixD& val_scores, double temperature) {
    if (!(temperature > 0)) throw std::invalid_argument("fit_weights: temperature must be > 0");
    if (val_scores.rows() < 1) throw std::invalid_argument("fit_weights: need at least one member");
    if (!val_scores.allFinite()) throw std::invalid_argument("fit_weights: validation scores must be finite");
    EnsembleWeights w;
    w.weights.resize(val_scores.rows(), val_scores.cols());
    for (Index p = 0; p < val_scores.cols(); ++p) {
        const VectorD z = val_scores.col(p) / temperature;
        const VectorD e = (z.array() - z.maxCoeff()).exp();
        w.weights.col(p) = e / e.sum();
    }
    for (Index i = 0; i < val_scores.rows(); ++i) w.member_ids.push_back(member_id(i));
    return w;
}

MatrixD member_scores(std::span<const TribeNet<float>> members, const DatasetManifest& manifest, Split split) {
    if (members.empty()) throw std::invalid_argument("member_scores: no members");
    MatrixD out(static_cast<Index>(members.size()), manifest.bold.num_parcels);
    for (std::size_t i = 0; i < members.size(); ++i)
        out.row(static_cast<Index>(i)) = score_model(members[i], manifest, split, ModalityMask::none()).parcel_means();
    return out;
}

std::vector<MatrixF> blend_predictions(const std::vector<std::vector<MatrixF>>& member_predictions,
                                       const MatrixD& weights) {
    if (member_predictions.empty() || static_cast<Index>(member_predictions.size()) != weights.rows())
        throw std::invalid_argument("blend_predictions: member count differs from weight rows");
    const std::size_t sessions = member_predictions.front().size();
    std::vector<MatrixF> out;
    for (std::size_t s = 0; s < sessions; ++s) {
        MatrixD acc = MatrixD::Zero(member_predictions.front()[s].rows(), member_predictions.front()[s].cols());
        if (acc.cols() != weights.cols()) throw std::invalid_argument("blend_predictions: parcel count mismatch");
        for (std::size_t i = 0; i < member_predictions.size(); ++i)
            acc += (member_predictions[i].at(s).cast<double>().array().rowwise() *
                    weights.row(static_cast<Index>(i)).array())
                       .matrix();
        out.push_back(acc.cast<float>());
    }
    return out;
}

EnsemblePrediction predict_ensemble(std::span<const TribeNet<float>> members, const EnsembleWeights& weights,
                                    const DatasetManifest& manifest, Split split) {
    if (split_name(split) == weights.fit_split)
        throw std::invalid_argument("predict_ensemble: weights were fit on '" + weights.fit_split +
                                    "'; evaluate on a disjoint split");
    if (static_cast<Index>(members.size()) != weights.weights.rows())
        throw std::invalid_argument("predict_ensemble: member count differs from weight rows");
    EnsemblePrediction out;
    std::vector<std::vector<MatrixF>> preds;
    for (std::size_t i = 0; i < members.size(); ++i) {
        auto sessions = load_sessions(manifest, split, members[i].config().layer_groups);
        if (sessions.empty())
            throw std::invalid_argument("predict_ensemble: split '" + std::string(split_name(split)) + "' is empty");
        std::vector<MatrixF> p;
        for (const auto& s : sessions) p.push_back(predict_session(members[i], s, ModalityMask::none()));
        preds.push_back(std::move(p));
        if (i == 0) out.sessions = std::move(sessions);
    }
    out.predictions = blend_predictions(preds, weights.weights);
    out.table = score_predictions(out.predictions, out.sessions, manifest.subjects);
    out.table.split = split_name(split);
    out.table.run_id = "ensemble";
    return out;
}

void save_weights(const EnsembleWeights& w, const std::filesystem::path& path) {
    const MatrixF f = w.weights.cast<float>();
    write_tensor(path, {{f.rows(), f.cols()}, std::nullopt}, std::span<const float>(f.data(), f.size()));
}

EnsembleWeights load_weights(const std::filesystem::path& path, std::vector<std::string> member_ids,
                             std::string fit_split) {
    TensorMeta meta;
    const auto values = read_tensor(path, &meta);
    if (meta.shape.size() != 2 || meta.shape[0] != static_cast<Index>(member_ids.size()))
        throw std::runtime_error(path.string() + ": weights must be [num_members, P]");
    EnsembleWeights w;
    w.weights = Eigen::Map<const MatrixF>(values.data(), meta.shape[0], meta.shape[1]).cast<double>();
    w.member_ids = std::move(member_ids);
    w.fit_split = std::move(fit_split);
    return w;
}

void EnsembleRegistry::save(const std::filesystem::path& path) const {
    json j;
    j["temperature"] = temperature;
    j["members"] = json::array();
    for (const auto& e : members)
        j["members"].push_back({{"id", e.id},
                                {"checkpoint", e.checkpoint.generic_string()},
                                {"score_file", e.score_file.generic_string()},
                                {"draw", e.draw},
                                {"seed", e.seed}});
    write_json_file(path, j);
}

EnsembleRegistry EnsembleRegistry::load(const std::filesystem::path& path) {
    const json j = read_json_file(path);
    EnsembleRegistry r;
    r.root = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    r.temperature = j.value("temperature", 0.3);
    for (const auto& m : j.at("members"))
        r.members.push_back({m.at("id").get<std::string>(), m.at("checkpoint").get<std::string>(),
                             m.at("score_file").get<std::string>(), m.at("draw"), m.at("seed").get<std::uint64_t>()});
    return r;
}

std::vector<TribeNet<float>> EnsembleRegistry::load_members() const {
    std::vector<TribeNet<float>> out;
    for (const auto& e : members) out.push_back(load_checkpoint(root / e.checkpoint));
    return out;
}

EnsembleRegistry train_members(const EnsembleConfig& config, const DatasetManifest& manifest,
                               const std::filesystem::path& out_dir, Index jobs) {
    const auto members = sample_grid(config);
    std::filesystem::create_directories(out_dir / "members");
    EnsembleRegistry reg;
    reg.root = out_dir;
    reg.temperature = config.temperature;
    for (const auto& m : members)
        reg.members.push_back({m.id, std::filesystem::path("members") / m.id,
                               std::filesystem::path("members") / (m.id + ".scores.csv"),
                               describe_draw(config.grid, m.draw), m.train.seed});

    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
        for (std::size_t i = next++; i < members.size(); i = next++) {
            try {
                const auto stem = out_dir / reg.members[i].checkpoint;
                if (std::filesystem::exists(checkpoint_sidecar(stem)) && std::filesystem::exists(checkpoint_blob(stem)))
                    continue;  // already trained in an earlier run
                const TrainResult r = train(manifest, members[i].net, members[i].train);
                const ScoreTable t = score_model(r.shipped(), manifest, Split::val, ModalityMask::none());
                std::ofstream csv(out_dir / reg.members[i].score_file);
                write_score_csv(csv, t);
                save_checkpoint(r.shipped(), stem);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    const auto threads = static_cast<std::size_t>(std::clamp<Index>(jobs, 1, static_cast<Index>(members.size())));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
    reg.save(out_dir / "registry.json");
    return reg;
}

void to_json(nlohmann::json& j, const EnsembleConfig& c) {
    json losses = json::array(), modes = json::array(), layer_aggs = json::array(), mod_aggs = json::array();
    for (auto l : c.grid.losses) losses.push_back(loss_name(l));
    for (auto m : c.grid.layer_modes) modes.push_back(layer_mode_name(m));
    for (auto a : c.grid.layer_aggregations) layer_aggs.push_back(aggregation_name(a));
    for (auto a : c.grid.modality_aggregations) mod_aggs.push_back(aggregation_name(a));
    j = {{"num_models", c.num_models},
         {"temperature", c.temperature},
         {"seed", c.seed},
         {"grid",
          {{"losses", losses},
           {"modality_dropout", c.grid.modality_dropout},
           {"layer_anchors", c.grid.layer_anchors},
           {"layer_modes", modes},
           {"layer_aggregations", layer_aggs},
           {"modality_aggregations", mod_aggs},
           {"subject_embedding", c.grid.subject_embedding}}},
         {"net", c.base_net},
         {"train", c.base_train}};
}

void from_json(const nlohmann::json& j, EnsembleConfig& c) {
    reject_unknown_keys(j, {"num_models", "temperature", "seed", "grid", "net", "train"}, "ensemble");
    if (j.contains("num_models")) j.at("num_models").get_to(c.num_models);
    if (j.contains("temperature")) j.at("temperature").get_to(c.temperature);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("net")) j.at("net").get_to(c.base_net);
    if (j.contains("train")) j.at("train").get_to(c.base_train);
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        reject_unknown_keys(g,
                            {"losses", "modality_dropout", "layer_anchors", "layer_modes", "layer_aggregations",
                             "modality_aggregations", "subject_embedding"},
                            "ensemble.grid");
        auto strings = [&](const char* key) { return g.at(key).get<std::vector<std::string>>(); };
        if (g.contains("losses")) {
            c.grid.losses.clear();
            for (const auto& s : strings("losses")) c.grid.losses.push_back(parse_loss(s));
        }
        if (g.contains("modality_dropout")) g.at("modality_dropout").get_to(c.grid.modality_dropout);
        if (g.contains("layer_anchors")) g.at("layer_anchors").get_to(c.grid.layer_anchors);
        if (g.contains("layer_modes")) {
            c.grid.layer_modes.clear();
            for (const auto& s : strings("layer_modes")) c.grid.layer_modes.push_back(parse_layer_mode(s));
        }
        if (g.contains("layer_aggregations")) {
            c.grid.layer_aggregations.clear();
            for (const auto& s : strings("layer_aggregations")) c.grid.layer_aggregations.push_back(parse_aggregation(s));
        }
        if (g.contains("modality_aggregations")) {
            c.grid.modality_aggregations.clear();
            for (const auto& s : strings("modality_aggregations"))
                c.grid.modality_aggregations.push_back(parse_aggregation(s));
        }
        if (g.contains("subject_embedding")) g.at("subject_embedding").get_to(c.grid.subject_embedding);
    }
    c.validate();
}

}  // namespace tribe
