#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace tribe {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorD = Vector<double>;

enum class Modality : int { text = 0, audio = 1, video = 2 };
inline constexpr int kNumModalities = 3;
inline constexpr std::array<Modality, kNumModalities> kModalities{Modality::text, Modality::audio,
                                                                  Modality::video};

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view name);

// true = masked (input zeroed)
struct ModalityMask {
    std::array<bool, kNumModalities> masked{false, false, false};

    bool operator[](Modality m) const { return masked[static_cast<int>(m)]; }
    bool& operator[](Modality m) { return masked[static_cast<int>(m)]; }
    bool valid() const { return !(masked[0] && masked[1] && masked[2]); }
    int num_unmasked() const { return int(!masked[0]) + int(!masked[1]) + int(!masked[2]); }
    bool operator==(const ModalityMask&) const = default;

    static ModalityMask none() { return {}; }
    // Everything masked except `m`.
    static ModalityMask solo(Modality m);
    // Parse "none" | "text" | "audio" | "video" (the modality left unmasked) or "text+audio" style subsets.
    static ModalityMask keep_only(std::string_view spec);
    std::string describe() const;
};

// Half-to-even rounding, used for every grid-index computation so that
// fractional-depth and time-step arithmetic is reproducible across toolchains.
double round_half_even(double x);
inline Index round_index(double x) { return static_cast<Index>(round_half_even(x)); }

}  // namespace tribe
