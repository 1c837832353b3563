#pragma once

// JSON (de)serialization of configs. Missing keys keep their defaults; unknown
// keys are rejected so typos in run configs fail loudly.

#include <initializer_list>
#include <string>

#include "json.hpp"
#include "tribe/trainer.hpp"
#include "tribe/tribenet.hpp"

namespace tribe {

using nlohmann::json;

// Throws std::invalid_argument naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& context);

void to_json(json& j, const ModalityMask& m);
void from_json(const json& j, ModalityMask& m);
void to_json(json& j, const WindowConfig& c);
void from_json(const json& j, WindowConfig& c);
void to_json(json& j, const LayerGroupSpec& c);
void from_json(const json& j, LayerGroupSpec& c);
void to_json(json& j, const NetConfig& c);
void from_json(const json& j, NetConfig& c);
void to_json(json& j, const TrainConfig& c);
void from_json(const json& j, TrainConfig& c);

std::string_view aggregation_name(Aggregation a);
Aggregation parse_aggregation(std::string_view name);
std::string_view layer_mode_name(LayerMode m);
LayerMode parse_layer_mode(std::string_view name);

json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& j);

}  // namespace tribe
