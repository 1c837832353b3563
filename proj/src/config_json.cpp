#include "tribe/config_json.hpp"

#include <fstream>
#include <stdexcept>

namespace tribe {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& context) {
    if (!j.is_object()) throw std::invalid_argument(context + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) throw std::invalid_argument(context + ": unknown key '" + key + "'");
    }
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

std::string_view aggregation_name(Aggregation a) { return a == Aggregation::concatenate ? "concatenate" : "average"; }

Aggregation parse_aggregation(std::string_view name) {
    if (name == "concatenate") return Aggregation::concatenate;
    if (name == "average") return Aggregation::average;
    throw std::invalid_argument("unknown aggregation '" + std::string(name) + "'");
}

std::string_view layer_mode_name(LayerMode m) {
    return m == LayerMode::group_by_intervals ? "group_by_intervals" : "single_layers";
}

LayerMode parse_layer_mode(std::string_view name) {
    if (name == "group_by_intervals") return LayerMode::group_by_intervals;
    if (name == "single_layers") return LayerMode::single_layers;
    throw std::invalid_argument("unknown layer mode '" + std::string(name) + "'");
}

void to_json(json& j, const ModalityMask& m) { j = m.describe(); }
void from_json(const json& j, ModalityMask& m) { m = ModalityMask::keep_only(j.get<std::string>()); }

void to_json(json& j, const WindowConfig& c) {
    j = {{"trs_per_window", c.trs_per_window},
         {"tr_seconds", c.tr_seconds},
         {"frequency_hz", c.frequency_hz},
         {"jitter_s", c.jitter_s}};
}

void from_json(const json& j, WindowConfig& c) {
    reject_unknown_keys(j, {"trs_per_window", "tr_seconds", "frequency_hz", "jitter_s"}, "window");
    read_opt(j, "trs_per_window", c.trs_per_window);
    read_opt(j, "tr_seconds", c.tr_seconds);
    read_opt(j, "frequency_hz", c.frequency_hz);
    read_opt(j, "jitter_s", c.jitter_s);
}

void to_json(json& j, const LayerGroupSpec& c) {
    j = {{"anchors", c.anchors},
         {"mode", layer_mode_name(c.mode)},
         {"aggregation", aggregation_name(c.aggregation)}};
}

void from_json(const json& j, LayerGroupSpec& c) {
    reject_unknown_keys(j, {"anchors", "mode", "aggregation"}, "layer_groups");
    read_opt(j, "anchors", c.anchors);
    if (j.contains("mode")) c.mode = parse_layer_mode(j.at("mode").get<std::string>());
    if (j.contains("aggregation")) c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    c.validate();
}

void to_json(json& j, const NetConfig& c) {
    j = {{"proj_dim", c.proj_dim},
         {"num_layers", c.num_layers},
         {"num_heads", c.num_heads},
         {"hidden_size", c.hidden_size},
         {"feedforward_mult", c.feedforward_mult},
         {"num_parcels", c.num_parcels},
         {"num_subjects", c.num_subjects},
         {"modality_aggregation", aggregation_name(c.modality_aggregation)},
         {"use_subject_embedding", c.use_subject_embedding},
         {"window", c.window},
         {"layer_groups", c.layer_groups},
         {"input_dims", c.input_dims}};
}

void from_json(const json& j, NetConfig& c) {
    reject_unknown_keys(j,
                        {"proj_dim", "num_layers", "num_heads", "hidden_size", "feedforward_mult", "num_parcels",
                         "num_subjects", "modality_aggregation", "use_subject_embedding", "window", "layer_groups",
                         "input_dims"},
                        "net");
    read_opt(j, "proj_dim", c.proj_dim);
    read_opt(j, "num_layers", c.num_layers);
    read_opt(j, "num_heads", c.num_heads);
    read_opt(j, "feedforward_mult", c.feedforward_mult);
    read_opt(j, "num_parcels", c.num_parcels);
    read_opt(j, "num_subjects", c.num_subjects);
    if (j.contains("modality_aggregation"))
        c.modality_aggregation = parse_aggregation(j.at("modality_aggregation").get<std::string>());
    // hidden size follows the fusion rule unless given explicitly
    c.hidden_size = c.modality_aggregation == Aggregation::concatenate ? kNumModalities * c.proj_dim : c.proj_dim;
    read_opt(j, "hidden_size", c.hidden_size);
    read_opt(j, "use_subject_embedding", c.use_subject_embedding);
    read_opt(j, "window", c.window);
    read_opt(j, "layer_groups", c.layer_groups);
    read_opt(j, "input_dims", c.input_dims);
}

void to_json(json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"lr_peak", c.lr_peak},
         {"warmup_fraction", c.warmup_fraction},
         {"weight_decay", c.weight_decay},
         {"modality_dropout_p", c.modality_dropout_p},
         {"swa_start_epoch", c.swa_start_epoch},
         {"early_stop_patience", c.early_stop_patience},
         {"loss", loss_name(c.loss)},
         {"seed", c.seed},
         {"withheld", c.withheld},
         {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2},
         {"adam_eps", c.adam_eps}};
}

void from_json(const json& j, TrainConfig& c) {
    reject_unknown_keys(j,
                        {"epochs", "batch_size", "lr_peak", "warmup_fraction", "weight_decay", "modality_dropout_p",
                         "swa_start_epoch", "early_stop_patience", "loss", "seed", "withheld", "adam_beta1",
                         "adam_beta2", "adam_eps"},
                        "train");
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "lr_peak", c.lr_peak);
    read_opt(j, "warmup_fraction", c.warmup_fraction);
    read_opt(j, "weight_decay", c.weight_decay);
    read_opt(j, "modality_dropout_p", c.modality_dropout_p);
    read_opt(j, "swa_start_epoch", c.swa_start_epoch);
    read_opt(j, "early_stop_patience", c.early_stop_patience);
    if (j.contains("loss")) c.loss = parse_loss(j.at("loss").get<std::string>());
    read_opt(j, "seed", c.seed);
    read_opt(j, "withheld", c.withheld);
    read_opt(j, "adam_beta1", c.adam_beta1);
    read_opt(j, "adam_beta2", c.adam_beta2);
    read_opt(j, "adam_eps", c.adam_eps);
    c.validate();
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace tribe
