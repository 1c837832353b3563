#include "tribe/types.hpp"

#include <cmath>
#include <stdexcept>

namespace tribe {

std::string_view modality_name(Modality m) {
    switch (m) {
        case Modality::text: return "text";
        case Modality::audio: return "audio";
        case Modality::video: return "video";
    }
    return "?";
}

Modality parse_modality(std::string_view name) {
    if (name == "text") return Modality::text;
    if (name == "audio") return Modality::audio;
    if (name == "video") return Modality::video;
    throw std::invalid_argument("unknown modality '" + std::string(name) + "'");
}

ModalityMask ModalityMask::solo(Modality m) {
    ModalityMask mask;
    mask.masked = {true, true, true};
    mask[m] = false;
    return mask;
}

ModalityMask ModalityMask::keep_only(std::string_view spec) {
    if (spec == "none" || spec.empty()) return none();
    ModalityMask mask;
    mask.masked = {true, true, true};
    std::size_t start = 0;
    while (start <= spec.size()) {
        auto end = spec.find('+', start);
        if (end == std::string_view::npos) end = spec.size();
        mask[parse_modality(spec.substr(start, end - start))] = false;
        start = end + 1;
    }
    return mask;
}

std::string ModalityMask::describe() const {
    if (num_unmasked() == kNumModalities) return "none";
    std::string out;
    for (Modality m : kModalities) {
        if ((*this)[m]) continue;
        if (!out.empty()) out += '+';
        out += modality_name(m);
    }
    return out;
}

double round_half_even(double x) {
    double r = std::round(x);
    if (std::abs(x - std::trunc(x)) == 0.5) r = 2.0 * std::round(x / 2.0);
    return r;
}

}  // namespace tribe
