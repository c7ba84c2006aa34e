#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>

#include "filmseg/common.hpp"
#include "filmseg/gradcheck.hpp"
#include "filmseg/pipeline.hpp"
#include "filmseg/unet.hpp"

using namespace filmseg;
using namespace filmseg::unet;

namespace {

Tensor rand_input(std::mt19937_64& rng, Shape shape) {
    std::uniform_real_distribution<float> ud(0.0f, 1.2f);
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.value()) v = ud(rng);
    return t;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.numel() == b.numel() &&
           std::memcmp(a.value().data(), b.value().data(), a.numel() * sizeof(float)) == 0;
}

ArchitectureConfig small_cfg(Placement p, uint64_t seed) {
    ArchitectureConfig c;
    c.stage_channels = {4, 8};
    c.placement = p;
    c.seed = seed;
    return c;
}

phantom::DceStudy make_prediction_study(uint64_t seed,
                                        std::array<int, 3> volume = {12, 12, 12}) {
    phantom::PhantomSpec spec;
    spec.volume_size = volume;
    spec.lesion_radius_min_mm = 1.0f;
    spec.lesion_radius_max_mm = 2.0f;
    spec.seed = seed;
    return phantom::generate_study(spec);
}

// Noise on the generator outputs and the scoring head so modulation is live
// and the class boundary lands somewhere interesting.
void perturb_head(ModelParams& m, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, 0.3f);
    for (auto& site : m.film_sites) {
        for (float& v : site.gen.w2.value()) v = nd(rng);
        for (float& v : site.gen.b2.value()) v = nd(rng);
    }
    for (float& v : m.final_w.value()) v += nd(rng);
    for (float& v : m.final_b.value()) v = nd(rng);
}

}  // namespace

TEST_SUITE("unet") {
    TEST_CASE("placement parsing round-trips and rejects junk") {
        for (Placement p : all_placements())
            CHECK(placement_from_string(placement_name(p)) == p);
        try {
            placement_from_string("encdec");
            FAIL("expected rejection");
        } catch (const std::invalid_argument& e) {
            std::string msg = e.what();
            CHECK(msg.find("encdec") != std::string::npos);
            CHECK(msg.find("bottleneck") != std::string::npos);  // lists valid names
        }
    }

    TEST_CASE("config validation") {
        ArchitectureConfig c;
        CHECK_NOTHROW(validate(c));
        c.stage_channels = {8};
        CHECK_THROWS_AS(validate(c), std::invalid_argument);
        c.stage_channels = {8, 8};
        CHECK_THROWS_AS(validate(c), std::invalid_argument);
        c.stage_channels = {8, 16};
        c.in_channels = 4;
        CHECK_THROWS_AS(validate(c), std::invalid_argument);
    }

    TEST_CASE("film site counts follow the placement") {
        ArchitectureConfig c;  // depth 3
        c.placement = Placement::None;
        CHECK(build_model(c).film_sites.empty());
        c.placement = Placement::Encoder;
        CHECK(build_model(c).film_sites.size() == 3);
        c.placement = Placement::Decoder;
        CHECK(build_model(c).film_sites.size() == 3);
        c.placement = Placement::Bottleneck;
        CHECK(build_model(c).film_sites.size() == 1);
        c.placement = Placement::All;
        ModelParams m = build_model(c);
        CHECK(m.film_sites.size() == 7);
        CHECK(m.film_sites[0].id == "enc0");
        CHECK(m.film_sites[3].id == "bottleneck");
        CHECK(m.film_sites[4].id == "dec2");
        CHECK(m.film_sites[6].id == "dec0");
        // generator widths match their site's feature channels
        CHECK(m.film_sites[0].gen.channels == 8);
        CHECK(m.film_sites[3].gen.channels == 64);
        CHECK(m.film_sites[4].gen.channels == 32);
    }

    TEST_CASE("same seed builds bit-identical parameters") {
        ModelParams a = build_model(small_cfg(Placement::All, 99));
        ModelParams b = build_model(small_cfg(Placement::All, 99));
        auto pa = parameters(a), pb = parameters(b);
        REQUIRE(pa.size() == pb.size());
        for (size_t i = 0; i < pa.size(); ++i) CHECK(same_bits(pa[i], pb[i]));
        ModelParams c = build_model(small_cfg(Placement::All, 100));
        CHECK(!same_bits(parameters(c)[0], pa[0]));
    }

    TEST_CASE("backbone parameters do not depend on the placement") {
        ModelParams none = build_model(small_cfg(Placement::None, 7));
        ModelParams all = build_model(small_cfg(Placement::All, 7));
        // backbone tensors come first in canonical order
        auto pn = parameters(none);
        auto pa = parameters(all);
        REQUIRE(pa.size() == pn.size() + all.film_sites.size() * 4);
        for (size_t i = 0; i < pn.size(); ++i) CHECK(same_bits(pn[i], pa[i]));
    }

    TEST_CASE("forward produces logits of the input spatial shape") {
        std::mt19937_64 rng(1);
        ModelParams m = build_model(small_cfg(Placement::None, 5));
        Tensor x = rand_input(rng, {1, 3, 16, 16, 16});
        Tensor y = forward(nullptr, m, x, {0, 60, 120});
        CHECK(y.shape() == Shape{1, 2, 16, 16, 16});
        for (float v : y.value()) CHECK(std::isfinite(v));
    }

    TEST_CASE("forward rejects indivisible spatial sizes naming the divisor") {
        ModelParams m = build_model(ArchitectureConfig{});  // depth 3
        Tensor x = Tensor::zeros({1, 3, 12, 16, 16});
        try {
            forward(nullptr, m, x, {0, 60, 120});
            FAIL("expected divisibility error");
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find("divisible by 8") != std::string::npos);
        }
    }

    TEST_CASE("modulated model at init equals its unmodulated twin bit-exactly") {
        std::mt19937_64 rng(2);
        for (uint64_t seed : {11ull, 12ull}) {
            ModelParams none = build_model(small_cfg(Placement::None, seed));
            ModelParams all = build_model(small_cfg(Placement::All, seed));
            Tensor x = rand_input(rng, {1, 3, 8, 8, 8});
            Tensor yn = forward(nullptr, none, x, {0, 45, 200});
            Tensor ya = forward(nullptr, all, x, {0, 45, 200});
            CHECK(same_bits(yn, ya));
        }
    }

    TEST_CASE("unmodulated forward ignores the time vector exactly") {
        std::mt19937_64 rng(3);
        ModelParams m = build_model(small_cfg(Placement::None, 21));
        Tensor x = rand_input(rng, {1, 3, 8, 8, 8});
        Tensor base = forward(nullptr, m, x, {0, 30, 60});
        for (int i = 0; i < 5; ++i) {
            double t2 = 20.0 + 80.0 * i, t3 = t2 + 100.0 * (i + 1);
            CHECK(same_bits(base, forward(nullptr, m, x, {0, t2, t3})));
        }
    }

    TEST_CASE("a perturbed generator makes the output time-sensitive") {
        std::mt19937_64 rng(4);
        ModelParams m = build_model(small_cfg(Placement::Bottleneck, 31));
        REQUIRE(m.film_sites.size() == 1);
        std::normal_distribution<float> nd(0.0f, 0.5f);
        for (float& v : m.film_sites[0].gen.w2.value()) v = nd(rng);
        for (float& v : m.film_sites[0].gen.b2.value()) v = nd(rng);

        Tensor x = rand_input(rng, {1, 3, 8, 8, 8});
        Tensor base = forward(nullptr, m, x, {0, 30, 90});
        bool witness = false;
        for (int i = 0; i < 10 && !witness; ++i) {
            double t2 = 25.0 + 30.0 * i;
            witness = !same_bits(base, forward(nullptr, m, x, {0, t2, t2 + 120.0}));
        }
        CHECK(witness);
    }

    TEST_CASE("checkpoints round-trip parameters, config, and epoch") {
        std::mt19937_64 rng(5);
        ModelParams m = build_model(small_cfg(Placement::All, 77));
        std::normal_distribution<float> nd(0.0f, 0.1f);
        for (Tensor p : parameters(m))
            for (float& v : p.value()) v += nd(rng);

        std::string path = "/tmp/filmseg_test_ckpt.bin";
        save_checkpoint(path, m, 42);
        LoadedCheckpoint lc = load_checkpoint(path);
        CHECK(lc.epoch == 42);
        CHECK(lc.model.config.placement == Placement::All);
        CHECK(lc.model.config.seed == 77);
        CHECK(lc.model.config.stage_channels == std::vector<int>{4, 8});
        auto pa = parameters(m), pb = parameters(lc.model);
        REQUIRE(pa.size() == pb.size());
        for (size_t i = 0; i < pa.size(); ++i) CHECK(same_bits(pa[i], pb[i]));
        std::remove(path.c_str());
    }

    TEST_CASE("checkpoint loader rejects foreign and truncated files") {
        std::string path = "/tmp/filmseg_bad_ckpt.bin";
        {
            std::ofstream f(path, std::ios::binary);
            f << "not a checkpoint at all";
        }
        CHECK_THROWS_AS(load_checkpoint(path), std::invalid_argument);
        {
            ModelParams m = build_model(small_cfg(Placement::None, 1));
            save_checkpoint(path, m, 0);
            // chop off the tail of the parameter blob
            std::ifstream in(path, std::ios::binary);
            std::string data((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
            in.close();
            std::ofstream out(path, std::ios::binary);
            out.write(data.data(), std::streamsize(data.size() - 128));
        }
        CHECK_THROWS_AS(load_checkpoint(path), std::invalid_argument);
        std::remove(path.c_str());
    }

    TEST_CASE("end-to-end gradients match finite differences") {
        auto suite = gradient_check_suite(2024);
        size_t total_checked = 0;
        for (const auto& r : suite) {
            CHECK_MESSAGE(r.pass(1e-3), r.name, " max rel ", r.max_rel_error, " (analytic ",
                          r.worst_analytic, " vs fd ", r.worst_estimate, ")");
            total_checked += r.checked;
        }
        CHECK(total_checked >= 100);
    }

    TEST_CASE("patch-sized prediction equals the direct forward argmax") {
        auto study = make_prediction_study(31);
        auto model = build_model(small_cfg(Placement::All, 5));
        perturb_head(model, 77);
        auto mask = predict_mask(model, study, {12, 12, 12});
        REQUIRE(mask.shape == Shape{12, 12, 12});
        CHECK(mask.spacing_mm == study.spacing_mm);

        auto normalized = pipeline::normalize_study(study);
        Tensor input = Tensor::zeros({1, 3, 12, 12, 12});
        auto in = input.value();
        for (int k = 0; k < 3; ++k) {
            auto pv = normalized.phases[size_t(k)].value();
            std::memcpy(in.data() + size_t(k) * pv.size(), pv.data(),
                        pv.size() * sizeof(float));
        }
        film::TimeVector t{study.times_s[0], study.times_s[1], study.times_s[2]};
        Tensor probs = softmax_channel(nullptr, forward(nullptr, model, input, t));
        auto p = probs.value();
        size_t n = mask.data.size();
        for (size_t i = 0; i < n; ++i) {
            uint8_t expect = p[n + i] > p[i] ? 1 : 0;
            REQUIRE(mask.data[i] == expect);
        }
    }

    TEST_CASE("sliding-window prediction matches explicit window averaging") {
        auto study = make_prediction_study(32, {16, 16, 12});
        auto model = build_model(small_cfg(Placement::All, 6));
        perturb_head(model, 78);
        const int vd = 16, vh = 16, vw = 12, pp = 8;
        auto mask = predict_mask(model, study, {pp, pp, pp});

        auto normalized = pipeline::normalize_study(study);
        film::TimeVector t{study.times_s[0], study.times_s[1], study.times_s[2]};
        auto starts = [](int n, int p) {
            std::vector<int> s;
            for (int v = 0; v + p < n; v += p) s.push_back(v);
            s.push_back(n - p);
            return s;
        };
        size_t voxels = size_t(vd) * vh * vw;
        std::vector<double> bg(voxels, 0.0), fg(voxels, 0.0);
        std::vector<int> cover(voxels, 0);
        for (int sz : starts(vd, pp))
            for (int sy : starts(vh, pp))
                for (int sx : starts(vw, pp)) {
                    Tensor input = Tensor::zeros({1, 3, pp, pp, pp});
                    auto in = input.value();
                    for (int k = 0; k < 3; ++k) {
                        auto pv = normalized.phases[size_t(k)].value();
                        for (int z = 0; z < pp; ++z)
                            for (int y = 0; y < pp; ++y)
                                for (int x = 0; x < pp; ++x)
                                    in[((size_t(k) * pp + z) * pp + y) * pp + x] =
                                        pv[(size_t(sz + z) * vh + sy + y) * vw + sx + x];
                    }
                    Tensor probs = softmax_channel(nullptr, forward(nullptr, model, input, t));
                    auto p = probs.value();
                    size_t plane = size_t(pp) * pp * pp;
                    for (int z = 0; z < pp; ++z)
                        for (int y = 0; y < pp; ++y)
                            for (int x = 0; x < pp; ++x) {
                                size_t local = (size_t(z) * pp + y) * pp + x;
                                size_t global = (size_t(sz + z) * vh + sy + y) * vw + sx + x;
                                bg[global] += p[local];
                                fg[global] += p[plane + local];
                                ++cover[global];
                            }
                }
        int max_cover = *std::max_element(cover.begin(), cover.end());
        CHECK(max_cover > 1);  // overlap averaging is actually exercised
        for (size_t i = 0; i < voxels; ++i) {
            REQUIRE(cover[i] >= 1);
            uint8_t expect = fg[i] > bg[i] ? 1 : 0;
            REQUIRE(mask.data[i] == expect);
        }
    }

    TEST_CASE("a constant scoring head yields a uniform mask of its favored class") {
        auto study = make_prediction_study(33);
        auto model = build_model(small_cfg(Placement::None, 7));
        for (float& v : model.final_w.value()) v = 0.0f;
        model.final_b.value()[0] = 4.0f;
        model.final_b.value()[1] = -4.0f;
        auto empty = predict_mask(model, study, {8, 8, 8});
        CHECK(std::count(empty.data.begin(), empty.data.end(), 1) == 0);

        model.final_b.value()[0] = -4.0f;
        model.final_b.value()[1] = 4.0f;
        auto full = predict_mask(model, study, {8, 8, 8});
        CHECK(std::count(full.data.begin(), full.data.end(), 0) == 0);
    }

    TEST_CASE("prediction rejects unusable inputs") {
        auto study = make_prediction_study(34);
        auto model = build_model(small_cfg(Placement::None, 8));
        CHECK_THROWS_WITH_AS(predict_mask(model, study, {16, 16, 16}),
                             doctest::Contains("fit inside"), std::invalid_argument);
        CHECK_THROWS_WITH_AS(predict_mask(model, study, {6, 6, 6}),
                             doctest::Contains("divisible"), std::invalid_argument);

        auto cfg3 = small_cfg(Placement::None, 9);
        cfg3.num_classes = 3;
        auto model3 = build_model(cfg3);
        CHECK_THROWS_WITH_AS(predict_mask(model3, study, {8, 8, 8}),
                             doctest::Contains("binary"), std::invalid_argument);

        auto two_phase = study;
        two_phase.phases.resize(2);
        two_phase.times_s.resize(2);
        CHECK_THROWS_WITH_AS(predict_mask(model, two_phase, {8, 8, 8}),
                             doctest::Contains("3 phases"), std::invalid_argument);
    }
}
