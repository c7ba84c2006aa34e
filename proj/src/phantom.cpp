#include "filmseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "filmseg/common.hpp"

namespace filmseg::phantom {

void validate(const KineticParams& params) {
    check(std::isfinite(params.amplitude) && params.amplitude >= 0.0f,
          "kinetics: amplitude must be finite and >= 0");
    check(std::isfinite(params.uptake_rate) && params.uptake_rate > 0.0f,
          "kinetics: uptake_rate must be finite and > 0");
    check(std::isfinite(params.washout_rate) && params.washout_rate >= 0.0f,
          "kinetics: washout_rate must be finite and >= 0");
}

float enhancement_curve(const KineticParams& params, double t_seconds) {
    check(t_seconds >= 0.0, "enhancement_curve: t must be >= 0");
    double u = params.uptake_rate;
    double w = params.washout_rate;
    double e = double(params.amplitude) * (1.0 - std::exp(-u * t_seconds)) * std::exp(-w * t_seconds);
    return float(e);
}

double peak_time(const KineticParams& params) {
    validate(params);
    if (params.washout_rate == 0.0f) return std::numeric_limits<double>::infinity();
    double u = params.uptake_rate;
    double w = params.washout_rate;
    return std::log(1.0 + u / w) / u;
}

void validate(const PhantomSpec& spec) {
    for (int i = 0; i < 3; ++i) {
        check(spec.volume_size[size_t(i)] >= 4, "phantom: volume_size must be >= 4 per axis");
        check(spec.spacing_mm[size_t(i)] > 0.0f, "phantom: spacing must be > 0");
    }
    check(spec.num_lesions >= 0, "phantom: num_lesions must be >= 0");
    if (spec.num_lesions > 0) {
        check(spec.lesion_radius_min_mm > 0.0f &&
                  spec.lesion_radius_min_mm <= spec.lesion_radius_max_mm,
              "phantom: lesion radius range must satisfy 0 < min <= max");
        double min_extent = std::numeric_limits<double>::max();
        for (int i = 0; i < 3; ++i)
            min_extent = std::min(min_extent, double(spec.volume_size[size_t(i)]) *
                                                  double(spec.spacing_mm[size_t(i)]));
        check(double(spec.lesion_radius_max_mm) <= 0.25 * min_extent,
              "phantom: lesion radii do not fit inside the volume");
    }
    check(spec.schedule_s.size() >= 3, "phantom: schedule needs at least 3 phases");
    check(spec.schedule_s[0] == 0.0, "phantom: schedule must start at 0");
    for (size_t i = 1; i < spec.schedule_s.size(); ++i)
        check(spec.schedule_s[i] > spec.schedule_s[i - 1],
              "phantom: schedule must be strictly increasing");
    check(spec.noise_sigma >= 0.0f, "phantom: noise_sigma must be >= 0");
    validate(spec.tissues.fat);
    validate(spec.tissues.benign);
    validate(spec.tissues.tumor);
    check(spec.tissues.fat_baseline >= 0.0f && spec.tissues.benign_baseline >= 0.0f &&
              spec.tissues.tumor_baseline >= 0.0f,
          "phantom: baselines must be >= 0");
}

void validate(const DceStudy& study) {
    check(study.phases.size() == study.times_s.size(), "study: phases and times must align");
    check(study.phases.size() >= 3, "study: needs at least 3 phases");
    for (size_t i = 1; i < study.times_s.size(); ++i)
        check(study.times_s[i] > study.times_s[i - 1], "study: times must be strictly increasing");
    const Shape& shape = study.phases[0].shape();
    check(shape.size() == 3, "study: phases must be 3D");
    for (const Tensor& p : study.phases)
        check(p.shape() == shape, "study: all phases must share one shape");
    if (!study.truth_mask.empty()) {
        check(study.truth_mask.size() == study.phases[0].numel(),
              "study: mask size must match the phase volumes");
        for (uint8_t v : study.truth_mask) check(v <= 1, "study: mask values must be 0 or 1");
    }
    for (float s : study.spacing_mm) check(s > 0.0f, "study: spacing must be > 0");
}

namespace {

struct Vec3 {
    double v[3];
};

struct Ellipsoid {
    Vec3 center;   // mm
    Vec3 radii;    // semi-axes, mm
    double max_radius() const { return std::max({radii.v[0], radii.v[1], radii.v[2]}); }
};

double norm3(const Vec3& a) {
    return std::sqrt(a.v[0] * a.v[0] + a.v[1] * a.v[1] + a.v[2] * a.v[2]);
}

// Scaled squared distance: <= 1 means p lies inside the ellipsoid.
double ellipsoid_coord(const Ellipsoid& e, double x, double y, double z) {
    double dx = (x - e.center.v[0]) / e.radii.v[0];
    double dy = (y - e.center.v[1]) / e.radii.v[1];
    double dz = (z - e.center.v[2]) / e.radii.v[2];
    return dx * dx + dy * dy + dz * dz;
}

constexpr int kPlacementAttempts = 500;
constexpr double kLesionGapMm = 2.0;

}  // namespace

DceStudy generate_study(const PhantomSpec& spec) {
    validate(spec);
    const int D = spec.volume_size[0], H = spec.volume_size[1], W = spec.volume_size[2];
    const double sd = spec.spacing_mm[0], sh = spec.spacing_mm[1], sw = spec.spacing_mm[2];
    const double extent[3] = {double(D) * sd, double(H) * sh, double(W) * sw};
    const size_t numel = size_t(D) * size_t(H) * size_t(W);

    // Geometry stream: parenchyma, baseline field, lesion placement. Kept
    // separate from the noise stream so the pre-contrast phase does not
    // depend on how many placement retries were needed.
    std::mt19937_64 geo(mix_seed(spec.seed, "geometry"));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(geo); };

    Ellipsoid parenchyma;
    for (int i = 0; i < 3; ++i) parenchyma.center.v[i] = 0.5 * extent[i] + uni(-3.0, 3.0);
    for (int i = 0; i < 3; ++i) parenchyma.radii.v[i] = extent[i] * uni(0.30, 0.38);

    // Low-frequency multiplicative variation of the baseline: a sum of three
    // random plane-wave cosines, amplitude 10%.
    double wavevec[3][3];
    double wavephase[3];
    const double mean_extent = (extent[0] + extent[1] + extent[2]) / 3.0;
    std::normal_distribution<double> nd01(0.0, 1.0);
    for (int j = 0; j < 3; ++j) {
        Vec3 n{{nd01(geo), nd01(geo), nd01(geo)}};
        double len = std::max(norm3(n), 1e-9);
        double freq = uni(0.5, 1.5) * 2.0 * std::acos(-1.0) / mean_extent;
        for (int i = 0; i < 3; ++i) wavevec[j][i] = n.v[i] / len * freq;
        wavephase[j] = uni(0.0, 2.0 * std::acos(-1.0));
    }

    std::vector<Ellipsoid> lesions;
    lesions.reserve(size_t(spec.num_lesions));
    const double min_par_radius =
        std::min({parenchyma.radii.v[0], parenchyma.radii.v[1], parenchyma.radii.v[2]});
    for (int li = 0; li < spec.num_lesions; ++li) {
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
            Ellipsoid e;
            for (int i = 0; i < 3; ++i) e.center.v[i] = uni(0.0, extent[i]);
            double base_r = uni(spec.lesion_radius_min_mm, spec.lesion_radius_max_mm);
            for (int i = 0; i < 3; ++i)
                e.radii.v[i] = std::min(base_r * uni(0.75, 1.25), double(spec.lesion_radius_max_mm));
            // Containment inside the parenchyma, by the triangle bound in
            // parenchyma-scaled coordinates: center offset plus the worst
            // axis ratio must stay under 1 with margin.
            Vec3 off;
            for (int i = 0; i < 3; ++i)
                off.v[i] = (e.center.v[i] - parenchyma.center.v[i]) / parenchyma.radii.v[i];
            double worst_ratio = e.max_radius() / min_par_radius;
            if (norm3(off) + worst_ratio > 0.95) continue;
            bool overlaps = false;
            for (const Ellipsoid& other : lesions) {
                Vec3 d{{e.center.v[0] - other.center.v[0], e.center.v[1] - other.center.v[1],
                        e.center.v[2] - other.center.v[2]}};
                if (norm3(d) < e.max_radius() + other.max_radius() + kLesionGapMm) {
                    overlaps = true;
                    break;
                }
            }
            if (overlaps) continue;
            lesions.push_back(e);
            placed = true;
        }
        check(placed, "phantom: could not place lesion " + std::to_string(li + 1) +
                          " without overlap after " + std::to_string(kPlacementAttempts) +
                          " attempts");
    }

    // Voxel class grid (0 fat, 1 benign, 2 tumor) and the f32 baseline.
    std::vector<uint8_t> cls(numel);
    std::vector<float> baseline(numel);
    const float class_baseline[3] = {spec.tissues.fat_baseline, spec.tissues.benign_baseline,
                                     spec.tissues.tumor_baseline};
    size_t v = 0;
    for (int z = 0; z < D; ++z) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x, ++v) {
                const double p[3] = {double(z) * sd, double(y) * sh, double(x) * sw};
                uint8_t c = 0;
                if (ellipsoid_coord(parenchyma, p[0], p[1], p[2]) <= 1.0) c = 1;
                for (const Ellipsoid& e : lesions) {
                    if (ellipsoid_coord(e, p[0], p[1], p[2]) <= 1.0) {
                        c = 2;
                        break;
                    }
                }
                double field = 1.0;
                for (int j = 0; j < 3; ++j)
                    field += (0.1 / 3.0) * std::cos(wavevec[j][0] * p[0] + wavevec[j][1] * p[1] +
                                                    wavevec[j][2] * p[2] + wavephase[j]);
                cls[v] = c;
                baseline[v] = float(double(class_baseline[c]) * field);
            }
        }
    }

    DceStudy study;
    study.times_s = spec.schedule_s;
    study.spacing_mm = spec.spacing_mm;
    study.truth_mask.resize(numel);
    for (size_t i = 0; i < numel; ++i) study.truth_mask[i] = cls[i] == 2 ? 1 : 0;

    const KineticParams* kin[3] = {&spec.tissues.fat, &spec.tissues.benign, &spec.tissues.tumor};
    study.phases.reserve(spec.schedule_s.size());
    for (size_t k = 0; k < spec.schedule_s.size(); ++k) {
        float e[3];
        for (int c = 0; c < 3; ++c) e[c] = enhancement_curve(*kin[c], spec.schedule_s[k]);
        Tensor phase = Tensor::zeros({D, H, W});
        std::span<float> pv = phase.value();
        for (size_t i = 0; i < numel; ++i) pv[i] = baseline[i] + e[cls[i]];
        if (spec.noise_sigma > 0.0f) {
            // One stream per phase index: the pre-contrast phase is
            // bit-identical across schedule or kinetics changes.
            std::mt19937_64 noise(mix_seed(mix_seed(spec.seed, "noise"), uint64_t(k)));
            std::normal_distribution<float> nphase(0.0f, spec.noise_sigma);
            for (size_t i = 0; i < numel; ++i) pv[i] += nphase(noise);
        }
        study.phases.push_back(std::move(phase));
    }
    return study;
}

const std::vector<ScheduleCluster>& default_schedule_clusters() {
    // rapid / standard / delayed acquisition protocols (seconds). The delayed
    // cluster deliberately starts past the tumor enhancement peak (~1 min for
    // the default kinetics), so the same lesion can present as bright-rising,
    // plateau, or washed-out depending purely on when a site scans.
    static const std::vector<ScheduleCluster> clusters = {
        {25.0, 45.0, 20.0, 50.0},
        {55.0, 110.0, 60.0, 130.0},
        {140.0, 300.0, 130.0, 320.0},
    };
    return clusters;
}

std::vector<double> sample_schedule(const SchedulePolicy& policy,
                                    const std::vector<double>& template_schedule,
                                    std::mt19937_64& rng) {
    if (!policy.jitter) return template_schedule;
    check(policy.min_phases >= 3 && policy.max_phases >= policy.min_phases,
          "schedule policy: phase count range must satisfy 3 <= min <= max");
    const std::vector<ScheduleCluster>& clusters =
        policy.clusters.empty() ? default_schedule_clusters() : policy.clusters;
    std::uniform_int_distribution<int> phase_count(policy.min_phases, policy.max_phases);
    std::uniform_int_distribution<size_t> pick_cluster(0, clusters.size() - 1);
    int phases = phase_count(rng);
    const ScheduleCluster& c = clusters[pick_cluster(rng)];
    std::uniform_real_distribution<double> first(c.first_post_min_s, c.first_post_max_s);
    std::uniform_real_distribution<double> gap(c.gap_min_s, c.gap_max_s);
    std::vector<double> times{0.0, first(rng)};
    while (int(times.size()) < phases) times.push_back(times.back() + gap(rng));
    return times;
}

std::vector<DceStudy> generate_dataset(const PhantomSpec& tmpl, int count,
                                       const SchedulePolicy& policy, uint64_t seed) {
    check(count >= 1, "generate_dataset: count must be >= 1");
    validate(tmpl);
    std::vector<DceStudy> studies(static_cast<size_t>(count));
    parallel_for(count, [&](int64_t i) {
        std::mt19937_64 rng(mix_seed(seed, uint64_t(i)));
        PhantomSpec spec = tmpl;
        spec.schedule_s = sample_schedule(policy, tmpl.schedule_s, rng);
        std::uniform_real_distribution<double> jit(0.75, 1.25);
        std::uniform_real_distribution<double> bjit(0.95, 1.05);
        for (KineticParams* kp : {&spec.tissues.fat, &spec.tissues.benign, &spec.tissues.tumor}) {
            kp->amplitude = float(kp->amplitude * jit(rng));
            kp->uptake_rate = float(kp->uptake_rate * jit(rng));
            kp->washout_rate = float(kp->washout_rate * jit(rng));
        }
        // Parenchymal enhancement is heterogeneous across patients: persistent,
        // plateau, or mildly washing out. Sampling a small benign washout keeps
        // "did it fade, and by how much?" ambiguous unless the reader also
        // knows how much time passed between phases.
        std::uniform_real_distribution<double> benign_washout(0.0, 0.002);
        spec.tissues.benign.washout_rate =
            float(spec.tissues.benign.washout_rate + benign_washout(rng));
        spec.tissues.fat_baseline = float(spec.tissues.fat_baseline * bjit(rng));
        // one factor for the whole parenchyma keeps tumor and benign
        // baselines equal, so pre-contrast stays uninformative
        double parenchyma_factor = bjit(rng);
        spec.tissues.benign_baseline = float(spec.tissues.benign_baseline * parenchyma_factor);
        spec.tissues.tumor_baseline = float(spec.tissues.tumor_baseline * parenchyma_factor);
        spec.seed = rng();
        DceStudy study = generate_study(spec);
        char id[32];
        std::snprintf(id, sizeof id, "case_%04d", int(i));
        study.case_id = id;
        studies[size_t(i)] = std::move(study);
    });
    return studies;
}

namespace {

nlohmann::json kinetics_json(const KineticParams& k, float baseline) {
    return {{"amplitude", k.amplitude},
            {"uptake_rate", k.uptake_rate},
            {"washout_rate", k.washout_rate},
            {"baseline", baseline}};
}

void write_file(const std::string& path, const char* data, size_t bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.is_open(), "cannot open for writing: " + path);
    out.write(data, std::streamsize(bytes));
    check(out.good(), "write failed: " + path);
}

}  // namespace

void save_study(const std::string& dir, const DceStudy& study, const PhantomSpec* provenance) {
    validate(study);
    check(!study.case_id.empty(), "save_study: case_id is empty");
    const Shape& shape = study.phases[0].shape();
    nlohmann::json j;
    j["format_version"] = 1;
    j["case_id"] = study.case_id;
    j["shape"] = {shape[0], shape[1], shape[2]};
    j["spacing_mm"] = {study.spacing_mm[0], study.spacing_mm[1], study.spacing_mm[2]};
    j["times_s"] = study.times_s;
    if (provenance != nullptr) {
        j["noise_sigma"] = provenance->noise_sigma;
        j["seed"] = provenance->seed;
        j["num_lesions"] = provenance->num_lesions;
        j["tissues"] = {
            {"fat", kinetics_json(provenance->tissues.fat, provenance->tissues.fat_baseline)},
            {"benign",
             kinetics_json(provenance->tissues.benign, provenance->tissues.benign_baseline)},
            {"tumor",
             kinetics_json(provenance->tissues.tumor, provenance->tissues.tumor_baseline)},
        };
    }
    std::string text = j.dump(2);
    text.push_back('\n');
    write_file(dir + "/" + study.case_id + ".json", text.data(), text.size());

    std::string raw;
    raw.reserve(study.phases.size() * study.phases[0].numel() * sizeof(float));
    for (const Tensor& p : study.phases) {
        std::span<const float> pv = p.value();
        raw.append(reinterpret_cast<const char*>(pv.data()), pv.size() * sizeof(float));
    }
    write_file(dir + "/" + study.case_id + ".raw", raw.data(), raw.size());

    if (!study.truth_mask.empty())
        write_file(dir + "/" + study.case_id + ".mask",
                   reinterpret_cast<const char*>(study.truth_mask.data()),
                   study.truth_mask.size());
}

DceStudy load_study(const std::string& dir, const std::string& case_id) {
    std::ifstream jin(dir + "/" + case_id + ".json");
    check(jin.is_open(), "cannot open study sidecar: " + dir + "/" + case_id + ".json");
    nlohmann::json j = nlohmann::json::parse(jin);
    check(j.at("format_version").get<int>() == 1, "unsupported study format version");

    DceStudy study;
    study.case_id = j.at("case_id").get<std::string>();
    std::vector<int> shape = j.at("shape").get<std::vector<int>>();
    check(shape.size() == 3, "study sidecar: shape must have 3 axes");
    std::vector<float> spacing = j.at("spacing_mm").get<std::vector<float>>();
    check(spacing.size() == 3, "study sidecar: spacing must have 3 axes");
    std::copy(spacing.begin(), spacing.end(), study.spacing_mm.begin());
    study.times_s = j.at("times_s").get<std::vector<double>>();

    size_t numel = size_t(shape[0]) * size_t(shape[1]) * size_t(shape[2]);
    std::ifstream rin(dir + "/" + case_id + ".raw", std::ios::binary);
    check(rin.is_open(), "cannot open study volume: " + dir + "/" + case_id + ".raw");
    std::string raw((std::istreambuf_iterator<char>(rin)), std::istreambuf_iterator<char>());
    check(raw.size() == study.times_s.size() * numel * sizeof(float),
          "study volume size does not match sidecar shape and phase count");
    for (size_t k = 0; k < study.times_s.size(); ++k) {
        Tensor phase = Tensor::zeros({shape[0], shape[1], shape[2]});
        std::memcpy(phase.value().data(), raw.data() + k * numel * sizeof(float),
                    numel * sizeof(float));
        study.phases.push_back(std::move(phase));
    }

    std::ifstream min(dir + "/" + case_id + ".mask", std::ios::binary);
    if (min.is_open()) {
        std::string mask((std::istreambuf_iterator<char>(min)), std::istreambuf_iterator<char>());
        check(mask.size() == numel, "study mask size does not match sidecar shape");
        study.truth_mask.assign(mask.begin(), mask.end());
    }
    validate(study);
    return study;
}

}  // namespace filmseg::phantom
