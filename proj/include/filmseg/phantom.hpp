#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "filmseg/tensor.hpp"

namespace filmseg::phantom {

/// Contrast-enhancement kinetics of one tissue class.
struct KineticParams {
    float amplitude = 0.0f;     // peak-scale signal gain, arbitrary units
    float uptake_rate = 0.0f;   // per second
    float washout_rate = 0.0f;  // per second; 0 = persistent enhancement
};

void validate(const KineticParams& params);

/// E(t) = amplitude * (1 - exp(-uptake*t)) * exp(-washout*t).
/// Wash-in/wash-out for washout_rate > 0; saturating persistent
/// enhancement (asymptote = amplitude) for washout_rate == 0.
float enhancement_curve(const KineticParams& params, double t_seconds);

/// Time of the curve's maximum: ln(1 + uptake/washout)/uptake for
/// washout > 0, +infinity for persistent tissue.
double peak_time(const KineticParams& params);

/// The three tissue classes of the phantom, with pre-contrast baselines.
/// Tumor and benign parenchyma share a baseline by default so the lesion is
/// invisible before contrast; only its kinetics give it away.
struct TissueSet {
    KineticParams fat{0.05f, 0.005f, 0.0f};
    KineticParams benign{0.7f, 0.008f, 0.0f};
    KineticParams tumor{1.0f, 0.05f, 0.002f};
    float fat_baseline = 0.30f;
    float benign_baseline = 0.35f;
    float tumor_baseline = 0.35f;
};

struct PhantomSpec {
    std::array<int, 3> volume_size{48, 48, 48};
    std::array<float, 3> spacing_mm{1.0f, 1.0f, 1.0f};
    int num_lesions = 1;
    float lesion_radius_min_mm = 3.0f;
    float lesion_radius_max_mm = 7.0f;
    std::vector<double> schedule_s{0.0, 75.0, 150.0, 300.0};  // schedule_s[0] must be 0
    float noise_sigma = 0.02f;
    TissueSet tissues;
    uint64_t seed = 0;
};

void validate(const PhantomSpec& spec);

/// One dynamic study: aligned phase volumes, acquisition times, and (for
/// generated data) an exact tumor mask.
struct DceStudy {
    std::string case_id;
    std::vector<Tensor> phases;  // each {D,H,W}, f32
    std::vector<double> times_s;
    std::array<float, 3> spacing_mm{1.0f, 1.0f, 1.0f};
    std::vector<uint8_t> truth_mask;  // D*H*W in {0,1}; empty when absent
};

void validate(const DceStudy& study);

/// Deterministic from spec.seed. A smooth fat background carries an
/// embedded benign-parenchyma ellipsoid; tumor lesions are non-overlapping
/// ellipsoids fully inside the parenchyma. Voxel value at phase k is
/// baseline(class)*field + E(class, t_k) + Gaussian noise, where field is a
/// low-frequency multiplicative variation of the baseline only. Throws if
/// the lesions cannot be placed without overlap within bounded retries.
DceStudy generate_study(const PhantomSpec& spec);

/// One acquisition-protocol cluster: the first post-contrast time and the
/// inter-phase gaps are sampled uniformly from these ranges (seconds).
struct ScheduleCluster {
    double first_post_min_s = 0.0;
    double first_post_max_s = 0.0;
    double gap_min_s = 0.0;
    double gap_max_s = 0.0;
};

/// Per-case schedule randomization: each case draws a phase count, one
/// cluster, then its post-contrast times. jitter=false replays the template
/// schedule for every case.
struct SchedulePolicy {
    bool jitter = true;
    std::vector<ScheduleCluster> clusters;  // empty = default three clusters
    int min_phases = 3;
    int max_phases = 6;
};

/// The default rapid / standard / delayed protocol mix.
const std::vector<ScheduleCluster>& default_schedule_clusters();

std::vector<double> sample_schedule(const SchedulePolicy& policy,
                                    const std::vector<double>& template_schedule,
                                    std::mt19937_64& rng);

/// count studies derived from the template: per-case schedule (policy),
/// kinetic-parameter and baseline jitter, and fresh lesion geometry.
/// Deterministic from seed; case ids are case_0000, case_0001, ...
std::vector<DceStudy> generate_dataset(const PhantomSpec& tmpl, int count,
                                       const SchedulePolicy& policy, uint64_t seed);

/// On-disk form: <case_id>.json sidecar (shape, spacing, times, tissue
/// metadata, format version), <case_id>.raw (phases concatenated, f32
/// little-endian), <case_id>.mask (u8, only when a truth mask is present).
void save_study(const std::string& dir, const DceStudy& study, const PhantomSpec* provenance = nullptr);

DceStudy load_study(const std::string& dir, const std::string& case_id);

}  // namespace filmseg::phantom
