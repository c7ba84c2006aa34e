#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "filmseg/film.hpp"
#include "filmseg/phantom.hpp"
#include "filmseg/tensor.hpp"

namespace filmseg::pipeline {

/// Study-wide intensity normalization: pooled (all phases) minimum m and
/// 99th percentile q under the linear-interpolation percentile rule; each
/// voxel maps to (v-m)/(q-m), clamped to [0, 1.5]. Geometry and times are
/// copied unchanged. Throws when the study is constant (q == m).
phantom::DceStudy normalize_study(const phantom::DceStudy& study);

/// Trilinear resampling onto the grid of size
/// ceil(size * spacing / target_spacing), corner-aligned (output voxel i
/// sits at i*target mm, sampling is clamped to the source grid). The
/// returned volume has spacing target_spacing. Equal spacings reproduce the
/// input exactly.
Tensor resample_volume(const Tensor& volume, const std::array<float, 3>& spacing_mm,
                       const std::array<float, 3>& target_spacing_mm);

/// One three-channel training view of a study: always (pre-contrast, first
/// post-contrast, phase k) for some k >= 2, with the matching times.
struct Triplet {
    Tensor channels;  // {3, D, H, W}
    film::TimeVector times;
    int third_phase_index = 2;
};

/// One triplet per later phase k in {2..P-1}; P-2 triplets total.
std::vector<Triplet> build_triplets(const phantom::DceStudy& study);

struct TrainingSample {
    Tensor channels;  // {3, pD, pH, pW}
    film::TimeVector times;
    Tensor label;  // {pD, pH, pW}, values 0/1
    std::string case_id;
    int third_phase_index = 2;
};

/// Congruent crop of all three channels and the label. With probability
/// fg_probability the patch is centered on a uniformly drawn tumor voxel
/// (clamped to bounds); otherwise the offset is uniform. An empty mask
/// falls back to the uniform branch.
TrainingSample sample_patch(const Triplet& triplet, const std::vector<uint8_t>& mask,
                            const std::array<int, 3>& patch_size, float fg_probability,
                            std::mt19937_64& rng, const std::string& case_id);

/// Dataset manifest: every case id tagged with its split.
struct ManifestEntry {
    std::string id;
    std::string split;  // train | val | test
};
using Manifest = std::vector<ManifestEntry>;

/// Seeded shuffle, then train/val/test by fractions (rounded; test takes
/// the remainder).
Manifest make_split(std::vector<std::string> ids, uint64_t seed, double train_frac = 0.6,
                    double val_frac = 0.2);

void save_manifest(const std::string& path, const Manifest& manifest);
Manifest load_manifest(const std::string& path);

std::vector<std::string> split_ids(const Manifest& manifest, const std::string& split);

}  // namespace filmseg::pipeline
