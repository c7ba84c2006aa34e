#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "filmseg/tensor.hpp"

namespace filmseg::metrics {

struct SegmentationMask {
    std::vector<uint8_t> data;  // 0/1, layout {D,H,W}
    Shape shape;
    std::array<float, 3> spacing_mm{1.0f, 1.0f, 1.0f};
};

void validate(const SegmentationMask& mask);

/// 2|A∩B| / (|A|+|B|); both masks empty count as perfect agreement (1.0).
double dice(const SegmentationMask& a, const SegmentationMask& b);

/// 10th percentile of the scores under the linear-interpolation rule: in
/// 90% of cases the score is at least this value.
double dice10(const std::vector<double>& scores);

struct Hd95Result {
    double value_mm = 0.0;
    bool defined = false;  // false when either mask is empty
};

/// 95th percentile (linear rule) of the pooled directed surface distances
/// in mm, both directions. Surfaces are foreground voxels with a face
/// neighbor outside the mask or on the volume border.
Hd95Result hd95(const SegmentationMask& a, const SegmentationMask& b);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    bool degenerate_variance = false;  // sd == 0 with nonzero mean difference
};

/// Two-tailed paired t-test: t = mean(d) / (sd(d)/sqrt(n)) with the n-1
/// sample deviation; p from the Student-t distribution with n-1 degrees of
/// freedom via the regularized incomplete beta function. All-zero
/// differences give (t=0, p=1).
TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b);

struct CaseMetrics {
    std::string case_id;
    double dice = 0.0;
    Hd95Result hd95;
};

struct MetricsReport {
    std::vector<CaseMetrics> per_case;
    double mean_dice = 0.0;
    double dice10 = 0.0;
    double mean_hd95 = 0.0;        // over cases where HD95 is defined
    int hd95_defined_cases = 0;
};

struct CasePrediction {
    std::string case_id;
    SegmentationMask predicted;
    SegmentationMask truth;
};

/// Per-case Dice and HD95 plus the Table-style aggregates. Cases with
/// undefined HD95 stay listed but are excluded from the HD95 mean.
MetricsReport evaluate_cases(const std::vector<CasePrediction>& cases);

}  // namespace filmseg::metrics
