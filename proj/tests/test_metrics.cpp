#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "filmseg/common.hpp"
#include "filmseg/metrics.hpp"

using namespace filmseg;
using namespace filmseg::metrics;

namespace {

SegmentationMask make_mask(Shape shape, std::array<float, 3> spacing = {1, 1, 1}) {
    SegmentationMask m;
    m.shape = std::move(shape);
    int64_t n = 1;
    for (int s : m.shape) n *= s;
    m.data.assign(static_cast<size_t>(n), 0);
    m.spacing_mm = spacing;
    return m;
}

SegmentationMask random_mask(Shape shape, std::array<float, 3> spacing, double density,
                             uint64_t seed) {
    auto m = make_mask(std::move(shape), spacing);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (auto& v : m.data) v = u01(rng) < density ? 1 : 0;
    if (std::count(m.data.begin(), m.data.end(), 1) == 0) m.data[0] = 1;
    return m;
}

// Long-hand reference: every foreground voxel with a face neighbor outside
// the mask (or sitting on the volume border) contributes a point in mm.
struct Point3 {
    double x, y, z;
};

std::vector<Point3> surface_oracle(const SegmentationMask& m) {
    const int d = m.shape[0], h = m.shape[1], w = m.shape[2];
    auto fg = [&](int z, int y, int x) {
        if (z < 0 || z >= d || y < 0 || y >= h || x < 0 || x >= w) return false;
        return m.data[(static_cast<size_t>(z) * h + y) * w + x] != 0;
    };
    std::vector<Point3> pts;
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!fg(z, y, x)) continue;
                if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) ||
                    !fg(z, y + 1, x) || !fg(z, y, x - 1) || !fg(z, y, x + 1)) {
                    pts.push_back({x * static_cast<double>(m.spacing_mm[2]),
                                   y * static_cast<double>(m.spacing_mm[1]),
                                   z * static_cast<double>(m.spacing_mm[0])});
                }
            }
    return pts;
}

double hd95_brute_force(const SegmentationMask& a, const SegmentationMask& b) {
    auto sa = surface_oracle(a);
    auto sb = surface_oracle(b);
    REQUIRE(!sa.empty());
    REQUIRE(!sb.empty());
    std::vector<double> pooled;
    auto directed = [&](const std::vector<Point3>& from, const std::vector<Point3>& to) {
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) {
                double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
                best = std::min(best, dx * dx + dy * dy + dz * dz);
            }
            pooled.push_back(std::sqrt(best));
        }
    };
    directed(sa, sb);
    directed(sb, sa);
    std::sort(pooled.begin(), pooled.end());
    double pos = 0.95 * static_cast<double>(pooled.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= pooled.size()) return pooled.back();
    double frac = pos - static_cast<double>(lo);
    return pooled[lo] + frac * (pooled[lo + 1] - pooled[lo]);
}

// Student-t two-tailed p-value by adaptive Simpson integration of the
// density, entirely independent of the incomplete-beta route.
double t_pdf(double x, double nu) {
    double log_c = std::lgamma((nu + 1.0) / 2.0) - std::lgamma(nu / 2.0) -
                   0.5 * std::log(nu * std::acos(-1.0));
    return std::exp(log_c - (nu + 1.0) / 2.0 * std::log1p(x * x / nu));
}

double simpson(double a, double b, double fa, double fm, double fb) {
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

double adaptive_simpson(double a, double b, double fa, double fm, double fb, double whole,
                        double nu, double tol, int depth) {
    double m = 0.5 * (a + b);
    double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    double flm = t_pdf(lm, nu), frm = t_pdf(rm, nu);
    double left = simpson(a, m, fa, flm, fm);
    double right = simpson(m, b, fm, frm, fb);
    if (depth <= 0 || std::fabs(left + right - whole) < 15.0 * tol) {
        return left + right + (left + right - whole) / 15.0;
    }
    return adaptive_simpson(a, m, fa, flm, fm, left, nu, tol / 2.0, depth - 1) +
           adaptive_simpson(m, b, fm, frm, fb, right, nu, tol / 2.0, depth - 1);
}

double two_tailed_p_oracle(double t, double nu) {
    double a = 0.0, b = std::fabs(t);
    if (b == 0.0) return 1.0;
    double fa = t_pdf(a, nu), fb = t_pdf(b, nu), fm = t_pdf(0.5 * (a + b), nu);
    double whole = simpson(a, b, fa, fm, fb);
    double integral = adaptive_simpson(a, b, fa, fm, fb, whole, nu, 1e-12, 40);
    return 2.0 * (0.5 - integral);
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("dice matches the overlap formula on a hand-built pair") {
    auto a = make_mask({2, 3, 3});
    auto b = make_mask({2, 3, 3});
    // |A| = 4, |B| = 6, |A∩B| = 3: expect 2*3/(4+6) = 0.6
    for (int i : {0, 1, 2, 3}) a.data[static_cast<size_t>(i)] = 1;
    for (int i : {1, 2, 3, 8, 9, 10}) b.data[static_cast<size_t>(i)] = 1;
    CHECK(dice(a, b) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(dice(b, a) == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("dice edge cases: empty masks and mismatched shapes") {
    auto a = make_mask({3, 3, 3});
    auto b = make_mask({3, 3, 3});
    CHECK(dice(a, b) == 1.0);  // both empty: perfect agreement
    b.data[5] = 1;
    CHECK(dice(a, b) == 0.0);
    auto c = make_mask({3, 3, 4});
    CHECK_THROWS_WITH_AS(dice(a, c), doctest::Contains("mismatched shapes"),
                         std::invalid_argument);
    auto bad = make_mask({3, 3, 3});
    bad.data[0] = 2;
    CHECK_THROWS_WITH_AS(dice(bad, b), doctest::Contains("0 or 1"), std::invalid_argument);
}

TEST_CASE("dice10 is the linear-rule 10th percentile") {
    CHECK(dice10({0.0, 1.0}) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(dice10({0.7}) == 0.7);
    CHECK_THROWS_WITH_AS(dice10({}), doctest::Contains("at least one"),
                         std::invalid_argument);
}

TEST_CASE("at least 90 of 100 scores sit at or above their dice10") {
    std::mt19937_64 rng(311);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> scores(100);
        for (auto& s : scores) s = u01(rng);
        double q = dice10(scores);
        int above = 0;
        for (double s : scores)
            if (s >= q - 1e-12) ++above;
        CHECK(above >= 90);
    }
}

TEST_CASE("hd95 of identical masks is zero") {
    auto a = random_mask({6, 6, 6}, {1, 1, 1}, 0.4, 17);
    auto r = hd95(a, a);
    CHECK(r.defined);
    CHECK(r.value_mm == 0.0);
}

TEST_CASE("hd95 of two voxels three steps apart is their distance") {
    auto a = make_mask({8, 8, 8});
    auto b = make_mask({8, 8, 8});
    a.data[(2u * 8 + 3) * 8 + 1] = 1;
    b.data[(2u * 8 + 3) * 8 + 4] = 1;  // same row, 3 voxels along x at 1 mm
    auto r = hd95(a, b);
    CHECK(r.defined);
    CHECK(r.value_mm == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("hd95 is undefined when either mask is empty") {
    auto a = make_mask({5, 5, 5});
    auto b = random_mask({5, 5, 5}, {1, 1, 1}, 0.3, 23);
    CHECK_FALSE(hd95(a, b).defined);
    CHECK_FALSE(hd95(b, a).defined);
    CHECK_FALSE(hd95(a, a).defined);
}

TEST_CASE("hd95 equals the all-pairs brute force on random volumes") {
    for (int trial = 0; trial < 20; ++trial) {
        std::array<float, 3> spacing =
            trial < 10 ? std::array<float, 3>{1, 1, 1} : std::array<float, 3>{0.5f, 0.7f, 1.3f};
        auto a = random_mask({8, 8, 8}, spacing, 0.25, 1000 + static_cast<uint64_t>(trial));
        auto b = random_mask({8, 8, 8}, spacing, 0.25, 2000 + static_cast<uint64_t>(trial));
        auto fast = hd95(a, b);
        REQUIRE(fast.defined);
        CHECK(fast.value_mm == hd95_brute_force(a, b));
    }
}

TEST_CASE("hd95 is symmetric and rigid-shift invariant") {
    // blobs kept off the border so a one-voxel shift moves the surfaces rigidly
    auto blob = [&](uint64_t seed, int shift) {
        auto m = make_mask({10, 10, 10});
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> pos(2, 5);
        for (int i = 0; i < 12; ++i) {
            int z = pos(rng) + shift, y = pos(rng) + shift, x = pos(rng) + shift;
            m.data[(static_cast<size_t>(z) * 10 + y) * 10 + x] = 1;
        }
        return m;
    };
    auto a0 = blob(7, 0), b0 = blob(8, 0);
    auto a1 = blob(7, 1), b1 = blob(8, 1);
    auto r_ab = hd95(a0, b0);
    CHECK(r_ab.value_mm == hd95(b0, a0).value_mm);
    CHECK(r_ab.value_mm == hd95(a1, b1).value_mm);
}

TEST_CASE("doubling the spacing doubles hd95") {
    auto a = random_mask({8, 8, 8}, {1, 1, 1}, 0.25, 91);
    auto b = random_mask({8, 8, 8}, {1, 1, 1}, 0.25, 92);
    auto base = hd95(a, b);
    a.spacing_mm = b.spacing_mm = {2, 2, 2};
    auto scaled = hd95(a, b);
    CHECK(scaled.value_mm == 2.0 * base.value_mm);
    a.spacing_mm = {2, 2, 2};
    b.spacing_mm = {1, 1, 1};
    CHECK_THROWS_WITH_AS(hd95(a, b), doctest::Contains("mismatched spacings"),
                         std::invalid_argument);
}

TEST_CASE("paired t-test reproduces the classic ten-pair critical point") {
    // mean(d) = 2.262, sample sd = 3 over ten pairs gives t = 2.262 with
    // nine degrees of freedom, the canonical p ≈ 0.05 boundary
    std::vector<double> a, b;
    for (int i = 0; i < 10; ++i) {
        a.push_back(2.262 + (i % 2 == 0 ? 3.0 : -3.0));
        b.push_back(0.0);
    }
    auto r = paired_ttest(a, b);
    CHECK(r.t == doctest::Approx(2.262).epsilon(1e-9));
    CHECK(r.p == doctest::Approx(0.050).epsilon(0.02));  // |p - 0.050| well under 1e-3
    CHECK(std::fabs(r.p - 0.050) < 1e-3);
    CHECK_FALSE(r.degenerate_variance);
}

TEST_CASE("t-test p-values agree with direct density integration") {
    for (int n : {4, 10, 31}) {
        for (double target_t : {0.5, 1.5, 2.262, 4.0}) {
            // build a sample with the requested t statistic: alternating
            // unit deviations have mean 0 and sample sd sqrt(n/(n-1))
            std::vector<double> a(static_cast<size_t>(n)), b(static_cast<size_t>(n), 0.0);
            double sd_unit = std::sqrt(static_cast<double>(n) / (n - 1.0));
            double mean = target_t * sd_unit / std::sqrt(static_cast<double>(n));
            for (int i = 0; i < n; ++i) a[static_cast<size_t>(i)] = mean + (i % 2 == 0 ? 1.0 : -1.0);
            auto r = paired_ttest(a, b);
            double expect = two_tailed_p_oracle(r.t, static_cast<double>(n - 1));
            CHECK(r.p == doctest::Approx(expect).epsilon(1e-7));
        }
    }
}

TEST_CASE("t-test sign symmetry and edge cases") {
    std::vector<double> a{1.0, 2.0, 3.5, 0.5, 2.5};
    std::vector<double> b{0.5, 2.5, 2.0, 1.0, 1.5};
    auto fwd = paired_ttest(a, b);
    auto rev = paired_ttest(b, a);
    CHECK(fwd.t == doctest::Approx(-rev.t).epsilon(1e-12));
    CHECK(fwd.p == doctest::Approx(rev.p).epsilon(1e-12));

    std::vector<double> same{0.25, 0.5, 0.75};
    auto zero = paired_ttest(same, same);
    CHECK(zero.t == 0.0);
    CHECK(zero.p == 1.0);
    CHECK_FALSE(zero.degenerate_variance);

    // dyadic values so the differences are exactly equal in floating point
    std::vector<double> shifted{1.25, 1.5, 1.75};
    auto degen = paired_ttest(shifted, same);
    CHECK(degen.degenerate_variance);
    CHECK(degen.p == 0.0);

    CHECK_THROWS_WITH_AS(paired_ttest({1.0}, {2.0}), doctest::Contains("at least two"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(paired_ttest({1.0, 2.0}, {1.0}),
                         doctest::Contains("different lengths"), std::invalid_argument);
}

TEST_CASE("evaluate_cases aggregates and excludes undefined hd95") {
    auto truth = random_mask({6, 6, 6}, {1, 1, 1}, 0.3, 41);
    auto empty = make_mask({6, 6, 6});
    std::vector<CasePrediction> cases;
    cases.push_back({"case_0000", truth, truth});
    cases.push_back({"case_0001", empty, truth});  // empty prediction: hd95 undefined
    auto report = evaluate_cases(cases);
    REQUIRE(report.per_case.size() == 2);
    CHECK(report.per_case[0].dice == 1.0);
    CHECK(report.per_case[0].hd95.defined);
    CHECK(report.per_case[1].dice == 0.0);
    CHECK_FALSE(report.per_case[1].hd95.defined);
    CHECK(report.mean_dice == doctest::Approx(0.5));
    CHECK(report.dice10 == doctest::Approx(0.1));  // linear rule between 0 and 1
    CHECK(report.hd95_defined_cases == 1);
    CHECK(report.mean_hd95 == 0.0);  // the one defined case is a perfect match
    CHECK_THROWS_WITH_AS(evaluate_cases({}), doctest::Contains("no cases"),
                         std::invalid_argument);
}

}  // TEST_SUITE
