#include "filmseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "filmseg/common.hpp"

namespace filmseg::metrics {

namespace {

struct SurfacePoint {
    double x, y, z;  // mm
};

// Foreground voxels with at least one of the six face neighbors outside the
// mask; voxels touching the volume border always qualify.
std::vector<SurfacePoint> surface_points(const SegmentationMask& mask) {
    const int d = mask.shape[0], h = mask.shape[1], w = mask.shape[2];
    const auto& v = mask.data;
    auto at = [&](int z, int y, int x) { return v[(static_cast<size_t>(z) * h + y) * w + x]; };
    std::vector<SurfacePoint> out;
    for (int z = 0; z < d; ++z) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!at(z, y, x)) continue;
                bool boundary = z == 0 || z == d - 1 || y == 0 || y == h - 1 || x == 0 ||
                                x == w - 1;
                if (!boundary) {
                    boundary = !at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) ||
                               !at(z, y + 1, x) || !at(z, y, x - 1) || !at(z, y, x + 1);
                }
                if (boundary) {
                    out.push_back({x * static_cast<double>(mask.spacing_mm[2]),
                                   y * static_cast<double>(mask.spacing_mm[1]),
                                   z * static_cast<double>(mask.spacing_mm[0])});
                }
            }
        }
    }
    return out;
}

double squared_distance(const SurfacePoint& a, const SurfacePoint& b) {
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    const double dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
}

// Static median-split k-d tree over surface points. Nearest-neighbor
// queries evaluate the same squared-distance expression a linear scan
// would, so the minimum matches an exhaustive search exactly.
class KdTree {
public:
    explicit KdTree(std::vector<SurfacePoint> points) : pts_(std::move(points)) {
        check(!pts_.empty(), "metrics: k-d tree needs at least one point");
        axes_.assign(pts_.size(), 0);
        build(0, static_cast<int>(pts_.size()));
    }

    double nearest_squared(const SurfacePoint& q) const {
        double best = std::numeric_limits<double>::infinity();
        search(0, static_cast<int>(pts_.size()), q, best);
        return best;
    }

private:
    void build(int lo, int hi) {
        if (lo >= hi) return;
        int axis = widest_axis(lo, hi);
        int mid = lo + (hi - lo) / 2;
        std::nth_element(pts_.begin() + lo, pts_.begin() + mid, pts_.begin() + hi,
                         [axis](const SurfacePoint& a, const SurfacePoint& b) {
                             return coord(a, axis) < coord(b, axis);
                         });
        axes_[static_cast<size_t>(mid)] = static_cast<int8_t>(axis);
        build(lo, mid);
        build(mid + 1, hi);
    }

    int widest_axis(int lo, int hi) const {
        double mins[3], maxs[3];
        for (int a = 0; a < 3; ++a) {
            mins[a] = std::numeric_limits<double>::infinity();
            maxs[a] = -mins[a];
        }
        for (int i = lo; i < hi; ++i) {
            for (int a = 0; a < 3; ++a) {
                mins[a] = std::min(mins[a], coord(pts_[static_cast<size_t>(i)], a));
                maxs[a] = std::max(maxs[a], coord(pts_[static_cast<size_t>(i)], a));
            }
        }
        int best = 0;
        for (int a = 1; a < 3; ++a) {
            if (maxs[a] - mins[a] > maxs[best] - mins[best]) best = a;
        }
        return best;
    }

    void search(int lo, int hi, const SurfacePoint& q, double& best) const {
        if (lo >= hi) return;
        int mid = lo + (hi - lo) / 2;
        const SurfacePoint& p = pts_[static_cast<size_t>(mid)];
        best = std::min(best, squared_distance(q, p));
        int axis = axes_[static_cast<size_t>(mid)];
        double delta = coord(q, axis) - coord(p, axis);
        int near_lo = lo, near_hi = mid, far_lo = mid + 1, far_hi = hi;
        if (delta > 0) {
            std::swap(near_lo, far_lo);
            std::swap(near_hi, far_hi);
        }
        search(near_lo, near_hi, q, best);
        if (delta * delta < best) search(far_lo, far_hi, q, best);
    }

    static double coord(const SurfacePoint& p, int axis) {
        return axis == 0 ? p.x : axis == 1 ? p.y : p.z;
    }

    std::vector<SurfacePoint> pts_;
    std::vector<int8_t> axes_;
};

void append_directed_distances(const std::vector<SurfacePoint>& from, const KdTree& to,
                               std::vector<double>& pooled) {
    for (const auto& p : from) pooled.push_back(std::sqrt(to.nearest_squared(p)));
}

// Continued fraction for the regularized incomplete beta (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
    constexpr double kTiny = 1e-30;
    constexpr int kMaxIter = 300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-14) return h;
    }
    fail("metrics: incomplete beta continued fraction did not converge");
}

double regularized_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                             a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_continued_fraction(a, b, x) / a;
    }
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

}  // namespace

void validate(const SegmentationMask& mask) {
    check(mask.shape.size() == 3, "mask: shape must be 3-dimensional {D,H,W}");
    int64_t n = 1;
    for (int s : mask.shape) {
        check(s > 0, "mask: all dimensions must be positive");
        n *= s;
    }
    check(static_cast<int64_t>(mask.data.size()) == n,
          "mask: data size does not match shape");
    for (float s : mask.spacing_mm) {
        check(s > 0.0f && std::isfinite(s), "mask: spacing must be positive and finite");
    }
    for (uint8_t v : mask.data) {
        check(v <= 1, "mask: labels must be 0 or 1");
    }
}

double dice(const SegmentationMask& a, const SegmentationMask& b) {
    validate(a);
    validate(b);
    check(a.shape == b.shape, "dice: masks have mismatched shapes");
    int64_t inter = 0, total = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        inter += a.data[i] & b.data[i];
        total += a.data[i] + b.data[i];
    }
    if (total == 0) return 1.0;  // both empty: nothing to disagree about
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

double dice10(const std::vector<double>& scores) {
    check(!scores.empty(), "dice10: needs at least one score");
    return percentile_linear(scores, 0.10);
}

Hd95Result hd95(const SegmentationMask& a, const SegmentationMask& b) {
    validate(a);
    validate(b);
    check(a.shape == b.shape, "hd95: masks have mismatched shapes");
    check(a.spacing_mm == b.spacing_mm, "hd95: masks have mismatched spacings");
    auto sa = surface_points(a);
    auto sb = surface_points(b);
    if (sa.empty() || sb.empty()) return {0.0, false};
    KdTree ta(sa), tb(sb);
    std::vector<double> pooled;
    pooled.reserve(sa.size() + sb.size());
    append_directed_distances(sa, tb, pooled);
    append_directed_distances(sb, ta, pooled);
    return {percentile_linear(pooled, 0.95), true};
}

TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    check(a.size() == b.size(), "paired_ttest: samples have different lengths");
    check(a.size() >= 2, "paired_ttest: needs at least two pairs");
    const size_t n = a.size();
    std::vector<double> d(n);
    for (size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    TTestResult res;
    if (sd == 0.0) {
        if (mean == 0.0) return {0.0, 1.0, false};
        res.t = mean > 0.0 ? std::numeric_limits<double>::infinity()
                           : -std::numeric_limits<double>::infinity();
        res.p = 0.0;
        res.degenerate_variance = true;
        return res;
    }
    res.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    const double nu = static_cast<double>(n - 1);
    res.p = regularized_incomplete_beta(nu / 2.0, 0.5, nu / (nu + res.t * res.t));
    return res;
}

MetricsReport evaluate_cases(const std::vector<CasePrediction>& cases) {
    check(!cases.empty(), "evaluate_cases: no cases given");
    MetricsReport report;
    std::vector<double> dices;
    double hd_sum = 0.0;
    for (const auto& c : cases) {
        CaseMetrics m;
        m.case_id = c.case_id;
        m.dice = dice(c.predicted, c.truth);
        m.hd95 = hd95(c.predicted, c.truth);
        dices.push_back(m.dice);
        if (m.hd95.defined) {
            hd_sum += m.hd95.value_mm;
            ++report.hd95_defined_cases;
        }
        report.per_case.push_back(std::move(m));
    }
    double dice_sum = 0.0;
    for (double v : dices) dice_sum += v;
    report.mean_dice = dice_sum / static_cast<double>(dices.size());
    report.dice10 = dice10(dices);
    report.mean_hd95 =
        report.hd95_defined_cases > 0 ? hd_sum / report.hd95_defined_cases : 0.0;
    return report;
}

}  // namespace filmseg::metrics
