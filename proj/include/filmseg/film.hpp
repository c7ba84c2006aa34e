#pragma once

#include <cstdint>
#include <random>

#include "filmseg/tensor.hpp"

namespace filmseg::film {

/// Acquisition times in seconds since contrast injection: pre-contrast,
/// first post-contrast, and the selected later post-contrast phase.
struct TimeVector {
    double t1 = 0.0;
    double t2 = 0.0;
    double t3 = 0.0;
};

/// Enforces 0 <= t1 <= t2 <= t3 and finiteness.
void validate(const TimeVector& t);

inline constexpr int kHiddenWidth = 16;
// Typical post-contrast schedules span 0-600 s; dividing keeps the
// conditioning input O(1).
inline constexpr double kTimeScale = 600.0;

/// Two-layer generator mapping a normalized TimeVector to 2C coefficients.
/// The output layer starts at zero so modulation starts as the identity.
struct FilmGenerator {
    Tensor w1;  // [hidden, 3]
    Tensor b1;  // [hidden]
    Tensor w2;  // [2C, hidden]
    Tensor b2;  // [2C]
    int channels = 0;
};

FilmGenerator make_generator(int channels, std::mt19937_64& rng);

struct FilmCoefficients {
    Tensor gamma;  // [C]
    Tensor beta;   // [C]
};

/// t/kTimeScale -> hidden leaky-relu layer -> linear output; the first C
/// outputs are gamma offsets (returned gamma = 1 + offset), the last C are
/// beta. Differentiable into all generator parameters.
FilmCoefficients generate_coefficients(Tape* tape, const TimeVector& t,
                                       const FilmGenerator& gen);

/// Per-channel affine gamma[c]*x + beta[c]; shape-preserving. Coefficients
/// that are exactly identity copy the input through bit-for-bit.
Tensor modulate(Tape* tape, const Tensor& x, const FilmCoefficients& coeffs);

}  // namespace filmseg::film
