#include <bit>
#include <fstream>
#include <stdexcept>

#include "tribe/config_json.hpp"
#include "tribe/datastore.hpp"
#include "tribe/tribenet.hpp"

namespace tribe {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian f32");

std::filesystem::path checkpoint_blob(const std::filesystem::path& stem) {
    auto p = stem;
    p += ".f32";
    return p;
}

std::filesystem::path checkpoint_sidecar(const std::filesystem::path& stem) {
    auto p = stem;
    p += ".json";
    return p;
}

void save_checkpoint(const TribeNet<float>& net, const std::filesystem::path& stem) {
    json reg = json::array();
    for (const auto& e : net.registry()) reg.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
    json side = {{"format", "tribe-checkpoint"},
                 {"version", 1},
                 {"dtype", "f32"},
                 {"num_params", net.num_params()},
                 {"config", net.config()},
                 {"registry", reg}};
    write_json_file(checkpoint_sidecar(stem), side);

    std::ofstream out(checkpoint_blob(stem), std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + checkpoint_blob(stem).string());
    out.write(reinterpret_cast<const char*>(net.params().data()),
              static_cast<std::streamsize>(net.num_params() * Index(sizeof(float))));
    if (!out) throw std::runtime_error("short write to " + checkpoint_blob(stem).string());
}

TribeNet<float> load_checkpoint(const std::filesystem::path& stem) {
    const json side = read_json_file(checkpoint_sidecar(stem));
    if (side.value("format", "") != "tribe-checkpoint")
        throw std::runtime_error(checkpoint_sidecar(stem).string() + ": not a checkpoint sidecar");
    TribeNet<float> net(side.at("config").get<NetConfig>());
    const auto& reg = side.at("registry");
    if (reg.size() != net.registry().size())
        throw std::runtime_error(stem.string() + ": registry does not match the configured architecture");
    for (std::size_t i = 0; i < reg.size(); ++i) {
        const auto& e = net.registry()[i];
        if (reg[i].at("name") != e.name || reg[i].at("shape").get<std::vector<Index>>() != e.shape ||
            reg[i].at("offset").get<Index>() != e.offset)
            throw std::runtime_error(stem.string() + ": registry entry '" + e.name + "' does not match");
    }
    const auto blob = checkpoint_blob(stem);
    std::ifstream in(blob, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open " + blob.string());
    const auto bytes = static_cast<Index>(in.tellg());
    if (bytes != net.num_params() * Index(sizeof(float)))
        throw std::runtime_error(blob.string() + ": expected " + std::to_string(net.num_params() * 4) + " bytes, found " +
                                 std::to_string(bytes));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(net.params().data()), bytes);
    return net;
}

}  // namespace tribe
