#include "filmseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "filmseg/common.hpp"
#include "filmseg/film.hpp"
#include "filmseg/train.hpp"
#include "filmseg/unet.hpp"

namespace filmseg {

GradCheckResult run_gradcheck(const std::string& name, const GradCheckSpec& spec) {
    check(!spec.params.empty(), "run_gradcheck: no parameters given");
    GradCheckResult res;
    res.name = name;

    for (Tensor p : spec.params) p.zero_grad();
    spec.compute_grads();
    std::vector<std::vector<float>> analytic;
    analytic.reserve(spec.params.size());
    for (Tensor p : spec.params) {
        std::span<const float> g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
    }

    // The finite-difference noise is an absolute property of the loss
    // functional, so the resolvability floor is set by the largest gradient
    // anywhere in the model, not per tensor.
    double gmax = 0.0;
    for (const auto& g : analytic)
        for (float v : g) gmax = std::max(gmax, double(std::fabs(v)));
    double floor = spec.meaningful_fraction * gmax;

    std::mt19937_64 rng(mix_seed(spec.seed, name.c_str()));
    for (size_t pi = 0; pi < spec.params.size(); ++pi) {
        Tensor p = spec.params[pi];
        const std::vector<float>& g = analytic[pi];

        std::set<size_t> coords;
        if (p.numel() <= size_t(spec.max_coords_per_param)) {
            for (size_t i = 0; i < p.numel(); ++i) coords.insert(i);
        } else {
            std::uniform_int_distribution<size_t> pick(0, p.numel() - 1);
            while (coords.size() < size_t(spec.max_coords_per_param)) coords.insert(pick(rng));
        }

        for (size_t i : coords) {
            double a = g[i];
            if (gmax == 0.0 || std::fabs(a) < floor) {
                ++res.skipped;
                continue;
            }
            double fd = finite_difference_at(spec.loss, p, i, spec.h);
            double fd_half = finite_difference_at(spec.loss, p, i, 0.5f * spec.h);
            double scale = std::max({std::fabs(a), std::fabs(fd), std::fabs(fd_half)});
            if (std::fabs(fd - fd_half) > spec.consistency_tol * scale) {
                // the secant moved when the step halved: no reliable
                // derivative estimate exists at this coordinate
                ++res.skipped;
                continue;
            }
            double rel = std::fabs(a - fd) / std::max(std::fabs(a), std::fabs(fd));
            ++res.checked;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_analytic = a;
                res.worst_estimate = fd;
            }
        }
    }
    return res;
}

namespace {

Tensor randn(std::mt19937_64& rng, Shape shape, float scale, bool requires_grad) {
    std::normal_distribution<float> nd(0.0f, scale);
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (float& v : t.value()) v = nd(rng);
    return t;
}

// Uniform away from zero, so finite differences never straddle the
// leaky-relu kink.
Tensor rand_off_kink(std::mt19937_64& rng, Shape shape, bool requires_grad) {
    std::uniform_real_distribution<float> ud(-1.0f, 1.0f);
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (float& v : t.value()) {
        do {
            v = ud(rng);
        } while (std::fabs(v) < 5e-3f);
    }
    return t;
}

// Fixed random projection of the output; reduced in f64 so the loss
// functional adds as little rounding noise as possible on top of the f32
// forward pass.
double project(const Tensor& out, const std::vector<float>& w) {
    double s = 0.0;
    std::span<const float> v = out.value();
    for (size_t i = 0; i < v.size(); ++i) s += double(v[i]) * w[i];
    return s;
}

std::vector<float> projection_weights(std::mt19937_64& rng, size_t n) {
    std::uniform_real_distribution<float> ud(-1.0f, 1.0f);
    std::vector<float> w(n);
    for (float& v : w) v = ud(rng);
    return w;
}

// Moves a freshly built model to a generic, finite-difference-friendly point
// in parameter space.  At init every instance norm standardizes its output,
// so thousands of leaky-relu inputs sit within the FD window of the kink and
// the secant stops estimating the derivative (it straddles two linear
// pieces).  Pushing the norm shifts to +/-3.5 keeps every pre-activation far
// from zero; alternating the sign keeps both activation branches exercised.
// The generator output layers are also perturbed so film coefficients differ
// from identity and their whole backward path carries gradient.  The code
// paths checked are exactly those of a model at init.
void move_off_kinks(unet::ModelParams& model, uint64_t seed) {
    auto condition_block = [](unet::ConvBlock& b) {
        if (!b.gain.defined()) return;  // bare strided convs carry no norm
        auto gv = b.gain.value();
        auto sv = b.shift.value();
        for (size_t c = 0; c < gv.size(); ++c) {
            gv[c] = (c % 2 == 0) ? 1.25f : 0.8f;
            sv[c] = (c % 2 == 0) ? 3.5f : -3.5f;
        }
    };
    for (auto& stage : model.encoder) {
        condition_block(stage.c1);
        condition_block(stage.c2);
    }
    condition_block(model.bottleneck.c1);
    condition_block(model.bottleneck.c2);
    for (auto& stage : model.decoder) {
        condition_block(stage.c1);
        condition_block(stage.c2);
    }
    std::mt19937_64 rng(mix_seed(seed, "fd-conditioning"));
    std::normal_distribution<float> nd(0.0f, 0.3f);
    for (auto& site : model.film_sites) {
        for (float& v : site.gen.w2.value()) v = nd(rng);
        for (float& v : site.gen.b2.value()) v = nd(rng);
    }
}

}  // namespace

GradCheckResult check_projected_op(const std::string& name, uint64_t seed, float h,
                                   std::vector<Tensor> params,
                                   const std::function<Tensor(Tape*)>& forward,
                                   int max_coords_per_param, double meaningful_fraction,
                                   double consistency_tol) {
    std::mt19937_64 rng(mix_seed(seed, (name + "/proj").c_str()));
    Tensor probe = forward(nullptr);
    std::vector<float> w = projection_weights(rng, probe.numel());

    GradCheckSpec spec;
    spec.params = std::move(params);
    spec.h = h;
    spec.seed = seed;
    spec.max_coords_per_param = max_coords_per_param;
    spec.meaningful_fraction = meaningful_fraction;
    spec.consistency_tol = consistency_tol;
    spec.loss = [forward, w]() { return project(forward(nullptr), w); };
    Tensor wt = Tensor::from_data(probe.shape(), w);
    auto params_copy = spec.params;
    spec.compute_grads = [forward, wt, params_copy]() {
        for (Tensor p : params_copy) p.zero_grad();
        Tape tape;
        Tensor out = forward(&tape);
        Tensor loss = reduce_sum(&tape, mul(&tape, out, wt));
        backward(tape, loss);
    };
    return run_gradcheck(name, spec);
}


std::vector<GradCheckResult> gradient_check_suite(uint64_t seed, float h) {
    std::vector<GradCheckResult> out;
    std::mt19937_64 rng(mix_seed(seed, "gradcheck-suite"));

    {
        Tensor x = randn(rng, {2, 3, 5, 6, 4}, 0.5f, true);
        Tensor wgt = randn(rng, {4, 3, 3, 3, 3}, 0.2f, true);
        Tensor b = randn(rng, {4}, 0.2f, true);
        Conv3dSpec cs;
        cs.padding = {1, 1, 1};
        out.push_back(check_projected_op("conv3d_k3s1p1", seed, h, {x, wgt, b}, [=](Tape* t) {
            return conv3d(t, x, wgt, b, cs);
        }));
    }
    {
        Tensor x = randn(rng, {1, 2, 7, 5, 7}, 0.5f, true);
        Tensor wgt = randn(rng, {3, 2, 3, 3, 3}, 0.2f, true);
        Tensor b = randn(rng, {3}, 0.2f, true);
        Conv3dSpec cs;
        cs.stride = {2, 2, 2};
        cs.padding = {1, 1, 1};
        out.push_back(check_projected_op("conv3d_k3s2p1", seed, h, {x, wgt, b}, [=](Tape* t) {
            return conv3d(t, x, wgt, b, cs);
        }));
    }
    {
        Tensor x = randn(rng, {1, 4, 4, 5, 4}, 0.5f, true);
        Tensor wgt = randn(rng, {2, 4, 1, 1, 1}, 0.3f, true);
        Tensor b = randn(rng, {2}, 0.2f, true);
        out.push_back(check_projected_op("conv3d_k1", seed, h, {x, wgt, b}, [=](Tape* t) {
            return conv3d(t, x, wgt, b, Conv3dSpec{});
        }));
    }
    {
        Tensor x = randn(rng, {1, 3, 3, 4, 3}, 0.5f, true);
        Tensor wgt = randn(rng, {3, 2, 2, 2, 2}, 0.3f, true);
        Tensor b = randn(rng, {2}, 0.2f, true);
        out.push_back(check_projected_op("transposed_conv3d_k2s2", seed, h, {x, wgt, b}, [=](Tape* t) {
            return transposed_conv3d(t, x, wgt, b, {2, 2, 2});
        }));
    }
    {
        Tensor x = randn(rng, {2, 3, 4, 4, 4}, 1.0f, true);
        Tensor g = randn(rng, {3}, 0.5f, true);
        Tensor s = randn(rng, {3}, 0.5f, true);
        out.push_back(check_projected_op("instance_norm", seed, h, {x, g, s}, [=](Tape* t) {
            return instance_norm(t, x, g, s);
        }));
    }
    {
        Tensor x = rand_off_kink(rng, {2, 2, 4, 4, 4}, true);
        out.push_back(check_projected_op("leaky_relu", seed, h, {x},
                               [=](Tape* t) { return leaky_relu(t, x); }));
    }
    {
        // Smooth everywhere, so the wider step is pure noise margin.
        Tensor x = randn(rng, {1, 4, 3, 3, 3}, 1.0f, true);
        out.push_back(check_projected_op("softmax_channel", seed, 2 * h, {x},
                               [=](Tape* t) { return softmax_channel(t, x); }));
    }
    {
        Tensor x = randn(rng, {6}, 1.0f, true);
        Tensor wgt = randn(rng, {4, 6}, 0.5f, true);
        Tensor b = randn(rng, {4}, 0.5f, true);
        out.push_back(check_projected_op("linear", seed, h, {x, wgt, b},
                               [=](Tape* t) { return linear(t, x, wgt, b); }));
    }
    {
        // concat/add/mul/reduce_sum exercised as one composed graph
        Tensor a = randn(rng, {1, 2, 3, 3, 3}, 0.7f, true);
        Tensor b = randn(rng, {1, 3, 3, 3, 3}, 0.7f, true);
        Tensor c = randn(rng, {1, 5, 3, 3, 3}, 0.7f, true);
        out.push_back(check_projected_op("concat_add_mul", seed, h, {a, b, c}, [=](Tape* t) {
            Tensor cat = concat_channels(t, a, b);
            return mul(t, add(t, cat, c), cat);
        }));
    }
    {
        std::mt19937_64 grng(mix_seed(seed, "film-gen"));
        film::FilmGenerator gen = film::make_generator(4, grng);
        std::normal_distribution<float> nd(0.0f, 0.3f);
        for (float& v : gen.w2.value()) v = nd(grng);
        for (float& v : gen.b2.value()) v = nd(grng);
        Tensor x = randn(rng, {1, 4, 3, 3, 3}, 0.8f, false);
        film::TimeVector t{0, 80, 260};
        // The generator head is linear->leaky_relu->linear and therefore
        // smooth away from the 16 hidden kinks (which the step-halving gate
        // rejects), so a wider step buys noise margin at O(h^2) cost.
        out.push_back(check_projected_op("film_generator", seed, 2 * h,
                                         {gen.w1, gen.b1, gen.w2, gen.b2}, [=](Tape* tp) {
                                             return film::modulate(
                                                 tp, x, film::generate_coefficients(tp, t, gen));
                                         }));
    }
    {
        Tensor x = randn(rng, {2, 3, 4, 4, 4}, 0.7f, true);
        out.push_back(check_projected_op("scale", seed, h, {x},
                               [=](Tape* t) { return scale(t, x, -1.7f); }));
    }
    {
        // Both losses average over all positions, so per-coordinate gradients
        // shrink with the voxel count while the loss value (and with it the
        // f32 rounding of the forward) does not.  Small tensors and a wider
        // step keep the secants above that noise floor; both losses are
        // smooth, so the larger step costs only O(h^2) truncation.
        const float h_loss = 10 * h;
        std::mt19937_64 lrng(mix_seed(seed, "loss-labels"));
        std::uniform_real_distribution<float> up(0.2f, 0.8f);
        std::uniform_int_distribution<int> ub(0, 1);
        Tensor probs = Tensor::zeros({1, 2, 2, 2, 2}, true);
        for (float& v : probs.value()) v = up(lrng);
        Tensor y = Tensor::zeros({1, 2, 2, 2});
        for (float& v : y.value()) v = float(ub(lrng));
        // Guarantee both classes are present: an all-background draw would
        // leave only the epsilon term of the dice overlap, whose gradient
        // sits below what f32 forward evaluations can resolve.
        y.value()[0] = 1.0f;
        y.value()[1] = 0.0f;
        out.push_back(check_projected_op("soft_dice_loss", seed, h_loss, {probs}, [=](Tape* t) {
            return train::soft_dice_loss(t, probs, y);
        }));
        Tensor logits = randn(rng, {1, 2, 2, 2, 2}, 0.8f, true);
        out.push_back(check_projected_op("cross_entropy_loss", seed, h_loss, {logits},
                                         [=](Tape* t) {
                                             return train::cross_entropy_loss(t, logits, y);
                                         }));
    }
    {
        unet::ArchitectureConfig cfg;
        // Narrow stages: every extra channel lengthens the f32 dot products
        // and with them the rounding jitter of the forward pass, which is
        // what limits finite-difference accuracy on a full model.  The
        // composition under test (conv/norm/film/skip wiring across two
        // levels, every site modulated) is width-independent.
        cfg.stage_channels = {4, 8};
        cfg.placement = unet::Placement::All;
        cfg.seed = mix_seed(seed, "gradcheck-model");
        unet::ModelParams model = unet::build_model(cfg);
        move_off_kinks(model, seed);
        unet::set_requires_grad(model, true);
        Tensor x = randn(rng, {1, 3, 8, 8, 8}, 0.8f, false);
        film::TimeVector t{0, 95, 310};
        // A wider step (safe: move_off_kinks pushed pre-activations far from
        // the activation kinks), a higher meaningful-gradient bar, and a
        // stricter step-halving agreement gate keep only coordinates whose
        // secants actually estimate the derivative.
        out.push_back(check_projected_op("unet_depth2_all", seed, 3 * h,
                                         unet::parameters(model),
                                         [=](Tape* tp) { return unet::forward(tp, model, x, t); },
                                         16, 0.2, 1e-3));
    }
    return out;
}

}  // namespace filmseg
