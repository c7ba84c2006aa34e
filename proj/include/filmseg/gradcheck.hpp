#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "filmseg/tensor.hpp"

namespace filmseg {

struct GradCheckResult {
    std::string name;
    size_t checked = 0;  // coordinates compared against finite differences
    // Coordinates where central differences carry no reliable signal: the
    // gradient is below the noise floor, or halving the step moves the
    // estimate (the loss is not locally linear enough for a secant there).
    size_t skipped = 0;
    double max_rel_error = 0.0;
    double worst_analytic = 0.0;
    double worst_estimate = 0.0;
    bool pass(double tol) const { return checked > 0 && max_rel_error <= tol; }
};

struct GradCheckSpec {
    // Forward pass only; must evaluate the current parameter values and
    // reduce the loss in f64.
    std::function<double()> loss;
    // One forward+backward accumulating analytic gradients into params.
    std::function<void()> compute_grads;
    std::vector<Tensor> params;
    float h = 1e-3f;
    // Per parameter tensor, at most this many coordinates are sampled.
    int max_coords_per_param = 16;
    // Coordinates with |g| below this fraction of the model-wide max |g| are
    // skipped: there the finite-difference estimate is dominated by f32
    // rounding noise of the forward pass rather than by the derivative.
    double meaningful_fraction = 0.1;
    // A secant only estimates a derivative where the loss is smooth across
    // the step.  Every coordinate is re-estimated at h/2; if the two
    // estimates disagree by more than this relative tolerance, the estimator
    // itself is unstable there (an activation kink inside the window, or
    // rounding noise at the f32 forward's resolution) and the coordinate is
    // counted as skipped rather than compared.  A wrong backward formula is
    // still caught: its finite differences agree with each other while
    // disagreeing with the analytic value.
    double consistency_tol = 2e-3;
    uint64_t seed = 0;
};

GradCheckResult run_gradcheck(const std::string& name, const GradCheckSpec& spec);

/// Checks one op (or small graph) against finite differences of a fixed
/// random linear projection of its output. forward(nullptr) must be a pure
/// function of the current values of params.
GradCheckResult check_projected_op(const std::string& name, uint64_t seed, float h,
                                   std::vector<Tensor> params,
                                   const std::function<Tensor(Tape*)>& forward,
                                   int max_coords_per_param = 16,
                                   double meaningful_fraction = 0.1,
                                   double consistency_tol = 2e-3);

/// Gradient checks for every differentiable primitive plus small composed
/// models. Each entry samples >= 10 coordinates, so the whole suite compares
/// well over 100.
std::vector<GradCheckResult> gradient_check_suite(uint64_t seed, float h = 1e-3f);

}  // namespace filmseg
