#include "filmseg/film.hpp"

#include <cmath>
#include <cstring>

#include "filmseg/common.hpp"

namespace filmseg::film {

void validate(const TimeVector& t) {
    check(std::isfinite(t.t1) && std::isfinite(t.t2) && std::isfinite(t.t3),
          "TimeVector: times must be finite");
    check(t.t1 >= 0.0, "TimeVector: t1 must be >= 0");
    check(t.t1 <= t.t2 && t.t2 <= t.t3, "TimeVector: times must be ordered t1 <= t2 <= t3");
}

FilmGenerator make_generator(int channels, std::mt19937_64& rng) {
    check(channels >= 1, "make_generator: channels must be >= 1");
    FilmGenerator g;
    g.channels = channels;
    g.w1 = Tensor::zeros({kHiddenWidth, 3}, true);
    std::normal_distribution<float> he(0.0f, std::sqrt(2.0f / 3.0f));
    for (float& v : g.w1.value()) v = he(rng);
    g.b1 = Tensor::zeros({kHiddenWidth}, true);
    g.w2 = Tensor::zeros({2 * channels, kHiddenWidth}, true);
    g.b2 = Tensor::zeros({2 * channels}, true);
    return g;
}

namespace {

// Contiguous sub-vector of a rank-1 tensor, with gradient scatter back.
Tensor slice_vec(Tape* tape, const Tensor& x, int offset, int len) {
    Tensor out = Tensor::zeros({len});
    std::memcpy(out.value().data(), x.value().data() + offset, sizeof(float) * size_t(len));
    if (tape && x.requires_grad()) {
        Tensor x_t = x, out_t = out;
        out.set_requires_grad(true);
        tape->record("slice_vec", out, [x_t, out_t, offset, len]() mutable {
            std::span<const float> go = out_t.grad();
            std::span<float> gx = x_t.grad();
            for (int i = 0; i < len; ++i) gx[size_t(offset + i)] += go[size_t(i)];
        });
    }
    return out;
}

}  // namespace

FilmCoefficients generate_coefficients(Tape* tape, const TimeVector& t,
                                       const FilmGenerator& gen) {
    const int c = gen.channels;
    check(c >= 1 && gen.w2.dim(0) == 2 * c, "generate_coefficients: generator is malformed");
    Tensor tin = Tensor::from_data(
        {3}, {float(t.t1 / kTimeScale), float(t.t2 / kTimeScale), float(t.t3 / kTimeScale)});
    Tensor hidden = leaky_relu(tape, linear(tape, tin, gen.w1, gen.b1));
    Tensor raw = linear(tape, hidden, gen.w2, gen.b2);  // [2C]
    FilmCoefficients out;
    out.gamma = add(tape, slice_vec(tape, raw, 0, c), Tensor::full({c}, 1.0f));
    out.beta = slice_vec(tape, raw, c, c);
    return out;
}

Tensor modulate(Tape* tape, const Tensor& x, const FilmCoefficients& coeffs) {
    check(x.ndim() >= 2, "modulate: input must have a channel axis (dim 1)");
    const int n = x.dim(0), c = x.dim(1);
    check(coeffs.gamma.ndim() == 1 && coeffs.gamma.dim(0) == c && coeffs.beta.ndim() == 1 &&
              coeffs.beta.dim(0) == c,
          "modulate: coefficient length does not match channel count C=" + std::to_string(c));
    int64_t vol = 1;
    for (int a = 2; a < x.ndim(); ++a) vol *= x.dim(a);

    Tensor out = Tensor::zeros(x.shape());
    bool identity = true;
    for (int ch = 0; ch < c && identity; ++ch)
        identity = coeffs.gamma.value()[size_t(ch)] == 1.0f &&
                   coeffs.beta.value()[size_t(ch)] == 0.0f;
    if (identity) {
        // bit-exact passthrough (keeps a freshly built modulated model
        // indistinguishable from its unmodulated twin)
        std::memcpy(out.value().data(), x.value().data(), sizeof(float) * x.numel());
    } else {
        const float* xp = x.value().data();
        float* yp = out.value().data();
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                float g = coeffs.gamma.value()[size_t(ch)];
                float b = coeffs.beta.value()[size_t(ch)];
                const float* xr = xp + (int64_t(i) * c + ch) * vol;
                float* yr = yp + (int64_t(i) * c + ch) * vol;
                for (int64_t v = 0; v < vol; ++v) yr[v] = g * xr[v] + b;
            }
    }

    bool needs = x.requires_grad() || coeffs.gamma.requires_grad() || coeffs.beta.requires_grad();
    if (tape && needs) {
        Tensor x_t = x, g_t = coeffs.gamma, b_t = coeffs.beta, out_t = out;
        out.set_requires_grad(true);
        tape->record("modulate", out, [x_t, g_t, b_t, out_t, n, c, vol]() mutable {
            std::span<const float> go = out_t.grad();
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    const float* dy = go.data() + (int64_t(i) * c + ch) * vol;
                    const float* xr = x_t.value().data() + (int64_t(i) * c + ch) * vol;
                    if (g_t.requires_grad() || b_t.requires_grad()) {
                        double dg = 0.0, db = 0.0;
                        for (int64_t v = 0; v < vol; ++v) {
                            dg += double(dy[v]) * xr[v];
                            db += dy[v];
                        }
                        if (g_t.requires_grad()) g_t.grad()[size_t(ch)] += float(dg);
                        if (b_t.requires_grad()) b_t.grad()[size_t(ch)] += float(db);
                    }
                    if (x_t.requires_grad()) {
                        float g = g_t.value()[size_t(ch)];
                        float* gx = x_t.grad().data() + (int64_t(i) * c + ch) * vol;
                        for (int64_t v = 0; v < vol; ++v) gx[v] += g * dy[v];
                    }
                }
        });
    }
    return out;
}

}  // namespace filmseg::film
