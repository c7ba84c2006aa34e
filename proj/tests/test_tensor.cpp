#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "filmseg/common.hpp"
#include "filmseg/gradcheck.hpp"
#include "filmseg/tensor.hpp"

using namespace filmseg;

namespace {

Tensor rand_tensor(std::mt19937_64& rng, Shape shape, float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> ud(lo, hi);
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.value()) v = ud(rng);
    return t;
}

// Six-nested-loop cross-correlation reference, accumulated in f64.
std::vector<double> conv3d_ref(const Tensor& x, const Tensor& w, const Tensor& b,
                               const Conv3dSpec& spec) {
    int n = x.dim(0), cin = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    int cout = w.dim(0), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
    auto [sd, sh, sw] = spec.stride;
    auto [pd, ph, pw] = spec.padding;
    int od = (D + 2 * pd - kd) / sd + 1;
    int oh = (H + 2 * ph - kh) / sh + 1;
    int ow = (W + 2 * pw - kw) / sw + 1;
    std::vector<double> out(size_t(n) * cout * od * oh * ow, 0.0);
    auto xi = [&](int i, int c, int z, int y, int xx) {
        return x.value()[size_t((((i * cin + c) * D + z) * H + y) * W + xx)];
    };
    auto wi = [&](int co, int ci, int z, int y, int xx) {
        return w.value()[size_t((((co * cin + ci) * kd + z) * kh + y) * kw + xx)];
    };
    size_t o = 0;
    for (int i = 0; i < n; ++i)
        for (int co = 0; co < cout; ++co)
            for (int z = 0; z < od; ++z)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx, ++o) {
                        double acc = b.value()[size_t(co)];
                        for (int ci = 0; ci < cin; ++ci)
                            for (int fz = 0; fz < kd; ++fz)
                                for (int fy = 0; fy < kh; ++fy)
                                    for (int fx = 0; fx < kw; ++fx) {
                                        int iz = z * sd - pd + fz;
                                        int iy = y * sh - ph + fy;
                                        int ix = xx * sw - pw + fx;
                                        if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 ||
                                            ix >= W)
                                            continue;
                                        acc += double(xi(i, ci, iz, iy, ix)) *
                                               wi(co, ci, fz, fy, fx);
                                    }
                        out[o] = acc;
                    }
    return out;
}

// Scatter-accumulate reference for the transposed convolution.
std::vector<double> tconv3d_ref(const Tensor& x, const Tensor& w, const Tensor& b,
                                const std::array<int, 3>& stride) {
    int n = x.dim(0), cin = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    int cout = w.dim(1), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
    auto [sd, sh, sw] = stride;
    int od = (D - 1) * sd + kd, oh = (H - 1) * sh + kh, ow = (W - 1) * sw + kw;
    std::vector<double> out(size_t(n) * cout * od * oh * ow);
    for (int i = 0; i < n; ++i)
        for (int co = 0; co < cout; ++co)
            for (size_t v = 0; v < size_t(od) * oh * ow; ++v)
                out[(size_t(i) * cout + co) * od * oh * ow + v] = b.value()[size_t(co)];
    for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < cin; ++ci)
            for (int z = 0; z < D; ++z)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        double v = x.value()[size_t((((i * cin + ci) * D + z) * H + y) * W + xx)];
                        for (int co = 0; co < cout; ++co)
                            for (int fz = 0; fz < kd; ++fz)
                                for (int fy = 0; fy < kh; ++fy)
                                    for (int fx = 0; fx < kw; ++fx) {
                                        double wv = w.value()[size_t(
                                            (((ci * cout + co) * kd + fz) * kh + fy) * kw + fx)];
                                        size_t oi =
                                            ((size_t(i) * cout + co) * od + z * sd + fz) * oh *
                                                ow +
                                            size_t(y * sh + fy) * ow + (xx * sw + fx);
                                        out[oi] += v * wv;
                                    }
                    }
    return out;
}

void expect_close(std::span<const float> got, const std::vector<double>& want, double tol) {
    REQUIRE(got.size() == want.size());
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i)
        worst = std::max(worst, std::fabs(double(got[i]) - want[i]));
    CHECK(worst <= tol);
}

}  // namespace

TEST_SUITE("tensor") {
    TEST_CASE("conv3d matches the nested-loop reference") {
        std::mt19937_64 rng(11);
        struct Cfg {
            Shape x, w;
            Conv3dSpec spec;
        };
        std::vector<Cfg> cfgs = {
            {{2, 3, 5, 6, 4}, {4, 3, 3, 3, 3}, {{1, 1, 1}, {1, 1, 1}}},
            {{1, 2, 7, 5, 5}, {3, 2, 3, 3, 3}, {{2, 2, 2}, {1, 1, 1}}},
            {{1, 4, 4, 4, 4}, {2, 4, 1, 1, 1}, {{1, 1, 1}, {0, 0, 0}}},
            {{2, 1, 6, 6, 6}, {2, 1, 2, 2, 2}, {{2, 2, 2}, {0, 0, 0}}},
            {{1, 2, 5, 4, 6}, {2, 2, 3, 1, 3}, {{1, 1, 1}, {1, 0, 1}}},
        };
        for (const Cfg& c : cfgs) {
            Tensor x = rand_tensor(rng, c.x);
            Tensor w = rand_tensor(rng, c.w);
            Tensor b = rand_tensor(rng, {c.w[0]});
            Tensor out = conv3d(nullptr, x, w, b, c.spec);
            expect_close(out.value(), conv3d_ref(x, w, b, c.spec), 1e-4);
        }
    }

    TEST_CASE("conv3d reports shape problems by axis") {
        Tensor x = Tensor::zeros({1, 3, 4, 4, 4});
        Tensor w = Tensor::zeros({2, 4, 3, 3, 3});
        Tensor b = Tensor::zeros({2});
        try {
            conv3d(nullptr, x, w, b);
            FAIL("expected channel mismatch");
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find("Cin=3") != std::string::npos);
        }
        Tensor w2 = Tensor::zeros({2, 3, 3, 3, 3});
        Conv3dSpec s2;
        s2.stride = {2, 2, 2};  // (4-3)/2 not integral
        try {
            conv3d(nullptr, x, w2, b, s2);
            FAIL("expected non-integer output size");
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find("depth") != std::string::npos);
        }
    }

    TEST_CASE("conv3d is linear in its input") {
        std::mt19937_64 rng(12);
        Tensor x = rand_tensor(rng, {1, 2, 5, 5, 5});
        Tensor y = rand_tensor(rng, {1, 2, 5, 5, 5});
        Tensor w = rand_tensor(rng, {3, 2, 3, 3, 3});
        Tensor zero_b = Tensor::zeros({3});
        Conv3dSpec spec;
        spec.padding = {1, 1, 1};
        const float a = 0.7f, b = -1.3f;
        Tensor mix = Tensor::zeros(x.shape());
        for (size_t i = 0; i < mix.numel(); ++i)
            mix.value()[i] = a * x.value()[i] + b * y.value()[i];
        Tensor lhs = conv3d(nullptr, mix, w, zero_b, spec);
        Tensor cx = conv3d(nullptr, x, w, zero_b, spec);
        Tensor cy = conv3d(nullptr, y, w, zero_b, spec);
        double worst = 0.0;
        for (size_t i = 0; i < lhs.numel(); ++i)
            worst = std::max(worst, std::fabs(double(lhs.value()[i]) - (a * cx.value()[i] +
                                                                        b * cy.value()[i])));
        CHECK(worst <= 1e-5);
    }

    TEST_CASE("transposed_conv3d matches the scatter reference") {
        std::mt19937_64 rng(13);
        struct Cfg {
            Shape x, w;
            std::array<int, 3> s;
        };
        std::vector<Cfg> cfgs = {
            {{1, 3, 3, 4, 3}, {3, 2, 2, 2, 2}, {2, 2, 2}},
            {{2, 2, 3, 3, 3}, {2, 4, 2, 2, 2}, {2, 2, 2}},
            {{1, 2, 4, 3, 5}, {2, 2, 3, 3, 3}, {1, 1, 1}},
        };
        for (const Cfg& c : cfgs) {
            Tensor x = rand_tensor(rng, c.x);
            Tensor w = rand_tensor(rng, c.w);
            Tensor b = rand_tensor(rng, {c.w[1]});
            Tensor out = transposed_conv3d(nullptr, x, w, b, c.s);
            CHECK(out.dim(2) == (c.x[2] - 1) * c.s[0] + c.w[2]);
            expect_close(out.value(), tconv3d_ref(x, w, b, c.s), 1e-4);
        }
    }

    TEST_CASE("transposed then strided conv restores the spatial extent") {
        std::mt19937_64 rng(14);
        Tensor x = rand_tensor(rng, {1, 4, 5, 5, 5});
        Tensor wu = rand_tensor(rng, {4, 2, 2, 2, 2});
        Tensor bu = Tensor::zeros({2});
        Tensor up = transposed_conv3d(nullptr, x, wu, bu, {2, 2, 2});
        CHECK(up.shape() == Shape{1, 2, 10, 10, 10});
        Tensor wd = rand_tensor(rng, {4, 2, 2, 2, 2});
        Conv3dSpec down;
        down.stride = {2, 2, 2};
        Tensor back = conv3d(nullptr, up, wd, Tensor::zeros({4}), down);
        CHECK(back.shape() == Shape{1, 4, 5, 5, 5});
    }

    TEST_CASE("instance_norm standardizes per sample and channel") {
        std::mt19937_64 rng(15);
        Tensor x = rand_tensor(rng, {2, 3, 4, 5, 4}, -2.0f, 3.0f);
        Tensor gain = Tensor::full({3}, 1.0f);
        Tensor shift = Tensor::zeros({3});
        const float eps = 1e-5f;
        Tensor out = instance_norm(nullptr, x, gain, shift, eps);

        int64_t vol = 4 * 5 * 4;
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 3; ++c) {
                const float* y = out.value().data() + (int64_t(n) * 3 + c) * vol;
                double mean = 0.0;
                for (int64_t v = 0; v < vol; ++v) mean += y[v];
                mean /= double(vol);
                double var = 0.0;
                for (int64_t v = 0; v < vol; ++v) var += (y[v] - mean) * (y[v] - mean);
                var /= double(vol);
                CHECK(std::fabs(mean) <= 1e-5);
                CHECK(std::fabs(var - 1.0) <= 1e-3);
            }

        // affine and epsilon agree with the two-pass reference formula
        Tensor g2 = rand_tensor(rng, {3});
        Tensor s2 = rand_tensor(rng, {3});
        Tensor out2 = instance_norm(nullptr, x, g2, s2, eps);
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 3; ++c) {
                const float* xs = x.value().data() + (int64_t(n) * 3 + c) * vol;
                const float* ys = out2.value().data() + (int64_t(n) * 3 + c) * vol;
                double mean = 0.0;
                for (int64_t v = 0; v < vol; ++v) mean += xs[v];
                mean /= double(vol);
                double var = 0.0;
                for (int64_t v = 0; v < vol; ++v) var += (xs[v] - mean) * (xs[v] - mean);
                var /= double(vol);
                double inv = 1.0 / std::sqrt(var + double(eps));
                double worst = 0.0;
                for (int64_t v = 0; v < vol; ++v) {
                    double want = g2.value()[size_t(c)] * ((xs[v] - mean) * inv) +
                                  s2.value()[size_t(c)];
                    worst = std::max(worst, std::fabs(ys[v] - want));
                }
                CHECK(worst <= 1e-4);
            }

        CHECK_THROWS_AS(instance_norm(nullptr, Tensor::zeros({1, 1, 1, 1, 1}), Tensor::zeros({1}),
                                      Tensor::zeros({1})),
                        std::invalid_argument);
    }

    TEST_CASE("instance_norm stays finite on constant input") {
        Tensor x = Tensor::full({1, 1, 2, 2, 2}, 3.5f);
        Tensor out = instance_norm(nullptr, x, Tensor::full({1}, 1.0f), Tensor::zeros({1}));
        for (float v : out.value()) CHECK(std::isfinite(v));
    }

    TEST_CASE("leaky_relu values and kink behavior") {
        Tensor x = Tensor::from_data({5}, {-2.0f, -0.5f, 0.0f, 0.5f, 2.0f});
        Tensor out = leaky_relu(nullptr, x);
        CHECK(out.value()[0] == doctest::Approx(-0.02f));
        CHECK(out.value()[1] == doctest::Approx(-0.005f));
        CHECK(out.value()[2] == 0.0f);
        CHECK(out.value()[3] == 0.5f);
        CHECK(out.value()[4] == 2.0f);

        // subgradient at exactly zero is 1
        Tensor z = Tensor::from_data({1}, {0.0f}, true);
        Tape tape;
        Tensor y = leaky_relu(&tape, z);
        Tensor loss = reduce_sum(&tape, y);
        backward(tape, loss);
        CHECK(z.grad()[0] == 1.0f);
    }

    TEST_CASE("softmax_channel sums to one and is stable") {
        std::mt19937_64 rng(16);
        Tensor x = rand_tensor(rng, {2, 4, 3, 2, 3}, -4.0f, 4.0f);
        Tensor out = softmax_channel(nullptr, x);
        int64_t vol = 3 * 2 * 3;
        for (int n = 0; n < 2; ++n)
            for (int64_t v = 0; v < vol; ++v) {
                double s = 0.0;
                for (int c = 0; c < 4; ++c) {
                    float val = out.value()[size_t((int64_t(n) * 4 + c) * vol + v)];
                    CHECK(val > 0.0f);
                    s += val;
                }
                CHECK(std::fabs(s - 1.0) <= 1e-6);
            }

        // direct reference on one voxel column
        std::vector<double> e(4);
        double denom = 0.0;
        for (int c = 0; c < 4; ++c) {
            e[size_t(c)] = std::exp(double(x.value()[size_t(c * vol)]));
            denom += e[size_t(c)];
        }
        for (int c = 0; c < 4; ++c)
            CHECK(double(out.value()[size_t(c * vol)]) ==
                  doctest::Approx(e[size_t(c)] / denom).epsilon(1e-5));

        Tensor big = Tensor::from_data({1, 2, 1, 1, 1}, {1000.0f, 0.0f});
        Tensor sb = softmax_channel(nullptr, big);
        CHECK(sb.value()[0] == doctest::Approx(1.0f));
        CHECK(sb.value()[1] == doctest::Approx(0.0f));
        Tensor low = Tensor::from_data({1, 2, 1, 1, 1}, {-1000.0f, -1000.0f});
        Tensor sl = softmax_channel(nullptr, low);
        CHECK(sl.value()[0] == doctest::Approx(0.5f));
    }

    TEST_CASE("concat_channels lays out a then b per sample") {
        Tensor a = Tensor::from_data({2, 1, 1, 1, 2}, {1, 2, 3, 4});
        Tensor b = Tensor::from_data({2, 2, 1, 1, 2}, {5, 6, 7, 8, 9, 10, 11, 12});
        Tensor out = concat_channels(nullptr, a, b);
        CHECK(out.shape() == Shape{2, 3, 1, 1, 2});
        std::vector<float> want = {1, 2, 5, 6, 7, 8, 3, 4, 9, 10, 11, 12};
        for (size_t i = 0; i < want.size(); ++i) CHECK(out.value()[i] == want[i]);

        CHECK_THROWS_AS(concat_channels(nullptr, a, Tensor::zeros({2, 1, 1, 1, 3})),
                        std::invalid_argument);
    }

    TEST_CASE("linear matches the dot-product reference") {
        Tensor x = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f});
        Tensor w = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
        Tensor b = Tensor::from_data({2}, {0.1f, -0.1f});
        Tensor y = linear(nullptr, x, w, b);
        CHECK(y.value()[0] == doctest::Approx(1 - 4 + 1.5 + 0.1));
        CHECK(y.value()[1] == doctest::Approx(4 - 10 + 3 - 0.1));
    }

    TEST_CASE("backward of sum and of sum of squares") {
        Tensor x = Tensor::from_data({4}, {1, -2, 3, 0.5}, true);
        {
            Tape tape;
            Tensor loss = reduce_sum(&tape, x);
            backward(tape, loss);
            for (float g : x.grad()) CHECK(g == 1.0f);
        }
        x.zero_grad();
        {
            Tape tape;
            Tensor loss = reduce_sum(&tape, mul(&tape, x, x));
            backward(tape, loss);
            for (size_t i = 0; i < 4; ++i)
                CHECK(x.grad()[i] == doctest::Approx(2.0f * x.value()[i]));
        }
    }

    TEST_CASE("a tensor consumed twice accumulates both contributions") {
        std::mt19937_64 rng(17);
        Tensor x = rand_tensor(rng, {6}, 0.1f, 1.0f);
        x.set_requires_grad(true);
        Tensor c = rand_tensor(rng, {6});

        Tape tape;
        Tensor both = add(&tape, mul(&tape, x, c), mul(&tape, x, x));
        Tensor loss = reduce_sum(&tape, both);
        backward(tape, loss);
        std::vector<float> twice(x.grad().begin(), x.grad().end());

        x.zero_grad();
        Tape t1;
        backward(t1, reduce_sum(&t1, mul(&t1, x, c)));
        std::vector<float> g1(x.grad().begin(), x.grad().end());
        x.zero_grad();
        Tape t2;
        backward(t2, reduce_sum(&t2, mul(&t2, x, x)));
        for (size_t i = 0; i < 6; ++i)
            CHECK(std::fabs(twice[i] - (g1[i] + x.grad()[i])) <= 1e-6f);
    }

    TEST_CASE("backward rejects bad losses") {
        Tensor x = Tensor::from_data({2}, {1, 2}, true);
        Tape tape;
        Tensor y = mul(&tape, x, x);
        CHECK_THROWS_AS(backward(tape, y), std::invalid_argument);  // not scalar
        Tensor stray = Tensor::scalar(1.0f);
        CHECK_THROWS_AS(backward(tape, stray), std::invalid_argument);  // not on tape
    }

    TEST_CASE("ops skip recording when nothing needs gradients") {
        Tensor x = Tensor::from_data({2}, {1, 2});
        Tape tape;
        Tensor y = mul(&tape, x, x);
        CHECK(tape.size() == 0);
        CHECK(!y.requires_grad());
    }

    TEST_CASE("finite differences on simple functionals") {
        Tensor p = Tensor::scalar(3.0f);
        auto square = [&]() { return double(p.value()[0]) * p.value()[0]; };
        double d = finite_difference_at(square, p, 0, 1e-3f);
        CHECK(std::fabs(d - 6.0) <= 1e-4);
        CHECK(p.value()[0] == 3.0f);  // restored

        auto constant = [&]() { return 4.2; };
        std::vector<Tensor> params = {p};
        auto grads = finite_difference_grad(constant, params, 1e-3f);
        CHECK(grads[0][0] == 0.0f);
    }

    TEST_CASE("every primitive passes randomized finite-difference checks") {
        // 20 trials with randomized small shapes per primitive
        for (uint64_t trial = 0; trial < 20; ++trial) {
            std::mt19937_64 rng(mix_seed(9000, trial));
            auto dim = [&](int lo, int hi) {
                return int(lo + rng() % uint64_t(hi - lo + 1));
            };
            auto randn = [&](Shape s, float scale) {
                std::normal_distribution<float> nd(0.0f, scale);
                Tensor t = Tensor::zeros(std::move(s), true);
                for (float& v : t.value()) v = nd(rng);
                return t;
            };

            {
                int cin = dim(1, 3), cout = dim(1, 3);
                Tensor x = randn({1, cin, dim(3, 6), dim(3, 6), dim(3, 6)}, 0.6f);
                Tensor w = randn({cout, cin, 3, 3, 3}, 0.25f);
                Tensor b = randn({cout}, 0.3f);
                Conv3dSpec spec;
                spec.padding = {1, 1, 1};
                auto res = check_projected_op("conv", trial, 1e-3f, {x, w, b},
                                              [&](Tape* t) { return conv3d(t, x, w, b, spec); },
                                              8);
                CHECK_MESSAGE(res.pass(1e-3), res.name, " trial ", trial, " rel ",
                              res.max_rel_error);
            }
            {
                int cin = dim(1, 3), cout = dim(1, 3);
                Tensor x = randn({1, cin, dim(2, 4), dim(2, 4), dim(2, 4)}, 0.6f);
                Tensor w = randn({cin, cout, 2, 2, 2}, 0.3f);
                Tensor b = randn({cout}, 0.3f);
                auto res = check_projected_op(
                    "tconv", trial, 1e-3f, {x, w, b},
                    [&](Tape* t) { return transposed_conv3d(t, x, w, b, {2, 2, 2}); }, 8);
                CHECK_MESSAGE(res.pass(1e-3), res.name, " trial ", trial, " rel ",
                              res.max_rel_error);
            }
            {
                int c = dim(1, 3);
                Tensor x = randn({dim(1, 2), c, dim(2, 4), dim(2, 4), dim(2, 4)}, 1.0f);
                Tensor g = randn({c}, 0.5f);
                Tensor s = randn({c}, 0.5f);
                auto res = check_projected_op(
                    "inorm", trial, 1e-3f, {x, g, s},
                    [&](Tape* t) { return instance_norm(t, x, g, s); }, 8);
                CHECK_MESSAGE(res.pass(1e-3), res.name, " trial ", trial, " rel ",
                              res.max_rel_error);
            }
            {
                Tensor x = randn({1, dim(2, 4), dim(2, 4), dim(2, 4), dim(2, 4)}, 1.0f);
                for (float& v : x.value())
                    if (std::fabs(v) < 5e-3f) v = 0.1f;
                auto res = check_projected_op("lrelu", trial, 1e-3f, {x},
                                              [&](Tape* t) { return leaky_relu(t, x); }, 8);
                CHECK_MESSAGE(res.pass(1e-3), res.name, " trial ", trial, " rel ",
                              res.max_rel_error);
            }
            {
                Tensor x = randn({1, dim(2, 4), dim(2, 3), dim(2, 3), dim(2, 3)}, 1.2f);
                auto res = check_projected_op("softmax", trial, 1e-3f, {x},
                                              [&](Tape* t) { return softmax_channel(t, x); }, 8);
                CHECK_MESSAGE(res.pass(1e-3), res.name, " trial ", trial, " rel ",
                              res.max_rel_error);
            }
            {
                int in = dim(2, 6), out_d = dim(2, 6);
                Tensor x = randn({in}, 1.0f);
                Tensor w = randn({out_d, in}, 0.5f);
                Tensor b = randn({out_d}, 0.5f);
                auto res = check_projected_op("linear", trial, 1e-3f, {x, w, b},
                                              [&](Tape* t) { return linear(t, x, w, b); }, 8);
                CHECK_MESSAGE(res.pass(1e-3), res.name, " trial ", trial, " rel ",
                              res.max_rel_error);
            }
        }
    }

    TEST_CASE("gemm-backed ops are identical across worker counts") {
        std::mt19937_64 rng(18);
        Tensor x = rand_tensor(rng, {1, 4, 9, 9, 9});
        Tensor w = rand_tensor(rng, {8, 4, 3, 3, 3});
        Tensor b = rand_tensor(rng, {8});
        Conv3dSpec spec;
        spec.padding = {1, 1, 1};
        set_thread_count(1);
        Tensor one = conv3d(nullptr, x, w, b, spec);
        set_thread_count(7);
        Tensor many = conv3d(nullptr, x, w, b, spec);
        set_thread_count(0);
        REQUIRE(one.numel() == many.numel());
        CHECK(std::memcmp(one.value().data(), many.value().data(),
                          one.numel() * sizeof(float)) == 0);
    }
}
