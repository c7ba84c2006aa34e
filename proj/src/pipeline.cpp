#include "filmseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "filmseg/common.hpp"

namespace filmseg::pipeline {

phantom::DceStudy normalize_study(const phantom::DceStudy& study) {
    // lighter precondition than a full study: any aligned phase stack can be
    // normalized, even below the 3-phase minimum a training study needs
    check(!study.phases.empty(), "normalize_study: study has no phases");
    for (const Tensor& p : study.phases)
        check(p.shape() == study.phases[0].shape(), "normalize_study: phases must share one shape");
    std::vector<double> pooled;
    pooled.reserve(study.phases.size() * study.phases[0].numel());
    double m = std::numeric_limits<double>::max();
    for (const Tensor& phase : study.phases) {
        for (float v : phase.value()) {
            pooled.push_back(double(v));
            m = std::min(m, double(v));
        }
    }
    double q = percentile_linear(std::move(pooled), 0.99);
    check(q > m, "normalize_study: constant study (99th percentile equals the minimum)");
    double inv = 1.0 / (q - m);

    phantom::DceStudy out;
    out.case_id = study.case_id;
    out.times_s = study.times_s;
    out.spacing_mm = study.spacing_mm;
    out.truth_mask = study.truth_mask;
    out.phases.reserve(study.phases.size());
    for (const Tensor& phase : study.phases) {
        Tensor n = Tensor::zeros(phase.shape());
        std::span<const float> src = phase.value();
        std::span<float> dst = n.value();
        for (size_t i = 0; i < src.size(); ++i)
            dst[i] = float(std::clamp((double(src[i]) - m) * inv, 0.0, 1.5));
        out.phases.push_back(std::move(n));
    }
    return out;
}

Tensor resample_volume(const Tensor& volume, const std::array<float, 3>& spacing_mm,
                       const std::array<float, 3>& target_spacing_mm) {
    const Shape& shape = volume.shape();
    check(shape.size() == 3, "resample_volume: volume must be 3D");
    for (int i = 0; i < 3; ++i) {
        check(spacing_mm[size_t(i)] > 0.0f && target_spacing_mm[size_t(i)] > 0.0f,
              "resample_volume: spacings must be > 0");
    }
    int out_size[3];
    double ratio[3];
    for (int i = 0; i < 3; ++i) {
        out_size[i] = int(std::ceil(double(shape[size_t(i)]) * double(spacing_mm[size_t(i)]) /
                                    double(target_spacing_mm[size_t(i)])));
        ratio[i] = double(target_spacing_mm[size_t(i)]) / double(spacing_mm[size_t(i)]);
    }
    Tensor out = Tensor::zeros({out_size[0], out_size[1], out_size[2]});
    std::span<const float> src = volume.value();
    std::span<float> dst = out.value();
    const int D = shape[0], H = shape[1], W = shape[2];
    auto at = [&](int z, int y, int x) -> double {
        return double(src[(size_t(z) * size_t(H) + size_t(y)) * size_t(W) + size_t(x)]);
    };
    size_t o = 0;
    for (int z = 0; z < out_size[0]; ++z) {
        double zc = std::min(double(z) * ratio[0], double(D - 1));
        int z0 = int(zc);
        int z1 = std::min(z0 + 1, D - 1);
        double wz = zc - double(z0);
        for (int y = 0; y < out_size[1]; ++y) {
            double yc = std::min(double(y) * ratio[1], double(H - 1));
            int y0 = int(yc);
            int y1 = std::min(y0 + 1, H - 1);
            double wy = yc - double(y0);
            for (int x = 0; x < out_size[2]; ++x, ++o) {
                double xc = std::min(double(x) * ratio[2], double(W - 1));
                int x0 = int(xc);
                int x1 = std::min(x0 + 1, W - 1);
                double wx = xc - double(x0);
                double c00 = at(z0, y0, x0) * (1.0 - wx) + at(z0, y0, x1) * wx;
                double c01 = at(z0, y1, x0) * (1.0 - wx) + at(z0, y1, x1) * wx;
                double c10 = at(z1, y0, x0) * (1.0 - wx) + at(z1, y0, x1) * wx;
                double c11 = at(z1, y1, x0) * (1.0 - wx) + at(z1, y1, x1) * wx;
                double c0 = c00 * (1.0 - wy) + c01 * wy;
                double c1 = c10 * (1.0 - wy) + c11 * wy;
                dst[o] = float(c0 * (1.0 - wz) + c1 * wz);
            }
        }
    }
    return out;
}

std::vector<Triplet> build_triplets(const phantom::DceStudy& study) {
    phantom::validate(study);
    const Shape& shape = study.phases[0].shape();
    const size_t numel = study.phases[0].numel();
    std::vector<Triplet> out;
    out.reserve(study.phases.size() - 2);
    for (size_t k = 2; k < study.phases.size(); ++k) {
        Triplet t;
        t.channels = Tensor::zeros({3, shape[0], shape[1], shape[2]});
        std::span<float> dst = t.channels.value();
        const Tensor* srcs[3] = {&study.phases[0], &study.phases[1], &study.phases[k]};
        for (int c = 0; c < 3; ++c)
            std::memcpy(dst.data() + size_t(c) * numel, srcs[c]->value().data(),
                        numel * sizeof(float));
        t.times = {study.times_s[0], study.times_s[1], study.times_s[k]};
        t.third_phase_index = int(k);
        out.push_back(std::move(t));
    }
    return out;
}

TrainingSample sample_patch(const Triplet& triplet, const std::vector<uint8_t>& mask,
                            const std::array<int, 3>& patch_size, float fg_probability,
                            std::mt19937_64& rng, const std::string& case_id) {
    const Shape& cs = triplet.channels.shape();
    check(cs.size() == 4 && cs[0] == 3, "sample_patch: triplet channels must be {3,D,H,W}");
    const int size[3] = {cs[1], cs[2], cs[3]};
    const size_t numel = size_t(size[0]) * size_t(size[1]) * size_t(size[2]);
    check(mask.size() == numel, "sample_patch: mask size must match the volume");
    for (int i = 0; i < 3; ++i)
        check(patch_size[size_t(i)] >= 1 && patch_size[size_t(i)] <= size[i],
              "sample_patch: patch must fit within the volume");
    check(fg_probability >= 0.0f && fg_probability <= 1.0f,
          "sample_patch: fg_probability must be in [0,1]");

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    bool want_fg = u01(rng) < double(fg_probability);
    int start[3] = {0, 0, 0};
    bool placed = false;
    if (want_fg) {
        std::vector<size_t> fg;
        for (size_t i = 0; i < mask.size(); ++i)
            if (mask[i] != 0) fg.push_back(i);
        if (!fg.empty()) {
            std::uniform_int_distribution<size_t> pick(0, fg.size() - 1);
            size_t idx = fg[pick(rng)];
            int center[3] = {int(idx / (size_t(size[1]) * size_t(size[2]))),
                             int(idx / size_t(size[2]) % size_t(size[1])),
                             int(idx % size_t(size[2]))};
            for (int i = 0; i < 3; ++i) {
                start[i] = std::clamp(center[i] - patch_size[size_t(i)] / 2, 0,
                                      size[i] - patch_size[size_t(i)]);
            }
            placed = true;
        }
    }
    if (!placed) {
        for (int i = 0; i < 3; ++i) {
            std::uniform_int_distribution<int> pick(0, size[i] - patch_size[size_t(i)]);
            start[i] = pick(rng);
        }
    }

    const int pd = patch_size[0], ph = patch_size[1], pw = patch_size[2];
    TrainingSample sample;
    sample.channels = Tensor::zeros({3, pd, ph, pw});
    sample.label = Tensor::zeros({pd, ph, pw});
    sample.times = triplet.times;
    sample.case_id = case_id;
    sample.third_phase_index = triplet.third_phase_index;

    std::span<const float> src = triplet.channels.value();
    std::span<float> dst = sample.channels.value();
    std::span<float> lab = sample.label.value();
    for (int c = 0; c < 3; ++c) {
        for (int z = 0; z < pd; ++z) {
            for (int y = 0; y < ph; ++y) {
                size_t srow = ((size_t(c) * size_t(size[0]) + size_t(start[0] + z)) * size_t(size[1]) +
                               size_t(start[1] + y)) *
                                  size_t(size[2]) +
                              size_t(start[2]);
                size_t drow = ((size_t(c) * size_t(pd) + size_t(z)) * size_t(ph) + size_t(y)) *
                              size_t(pw);
                std::memcpy(dst.data() + drow, src.data() + srow, size_t(pw) * sizeof(float));
            }
        }
    }
    for (int z = 0; z < pd; ++z) {
        for (int y = 0; y < ph; ++y) {
            size_t srow = (size_t(start[0] + z) * size_t(size[1]) + size_t(start[1] + y)) *
                              size_t(size[2]) +
                          size_t(start[2]);
            size_t drow = (size_t(z) * size_t(ph) + size_t(y)) * size_t(pw);
            for (int x = 0; x < pw; ++x) lab[drow + size_t(x)] = mask[srow + size_t(x)] ? 1.0f : 0.0f;
        }
    }
    return sample;
}

Manifest make_split(std::vector<std::string> ids, uint64_t seed, double train_frac,
                    double val_frac) {
    check(!ids.empty(), "make_split: no case ids");
    check(train_frac >= 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0,
          "make_split: fractions must be nonnegative and sum to at most 1");
    std::mt19937_64 rng(mix_seed(seed, "split"));
    std::shuffle(ids.begin(), ids.end(), rng);
    size_t n = ids.size();
    size_t n_train = size_t(std::lround(train_frac * double(n)));
    size_t n_val = std::min(size_t(std::lround(val_frac * double(n))), n - n_train);
    Manifest manifest;
    manifest.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
        manifest.push_back({ids[i], split});
    }
    std::sort(manifest.begin(), manifest.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.id < b.id; });
    return manifest;
}

void save_manifest(const std::string& path, const Manifest& manifest) {
    nlohmann::json cases = nlohmann::json::array();
    for (const ManifestEntry& e : manifest) cases.push_back({{"id", e.id}, {"split", e.split}});
    nlohmann::json j{{"format_version", 1}, {"cases", std::move(cases)}};
    std::ofstream out(path, std::ios::trunc);
    check(out.is_open(), "cannot open manifest for writing: " + path);
    out << j.dump(2) << "\n";
    check(out.good(), "manifest write failed: " + path);
}

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    check(in.is_open(), "cannot open manifest: " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    check(j.at("format_version").get<int>() == 1, "unsupported manifest format version");
    Manifest manifest;
    std::set<std::string> seen;
    for (const nlohmann::json& e : j.at("cases")) {
        ManifestEntry entry{e.at("id").get<std::string>(), e.at("split").get<std::string>()};
        check(entry.split == "train" || entry.split == "val" || entry.split == "test",
              "manifest: unknown split tag '" + entry.split + "'");
        check(seen.insert(entry.id).second, "manifest: duplicate case id '" + entry.id + "'");
        manifest.push_back(std::move(entry));
    }
    check(!manifest.empty(), "manifest: no cases");
    return manifest;
}

std::vector<std::string> split_ids(const Manifest& manifest, const std::string& split) {
    std::vector<std::string> out;
    for (const ManifestEntry& e : manifest)
        if (e.split == split) out.push_back(e.id);
    return out;
}

}  // namespace filmseg::pipeline
