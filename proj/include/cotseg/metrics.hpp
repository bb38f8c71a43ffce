#pragma once

// Region overlap and boundary distance metrics for brain tumour labels.

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cotseg/volume.hpp"

namespace cotseg {

enum class Region { ET, TC, WT };

struct RegionSpec {
    Region region;
    std::string_view name;
    std::vector<int> labels;
};

/// ET = {4}, TC = {1, 4}, WT = {1, 2, 4}, in that order.
const std::array<RegionSpec, 3>& brats_regions();
const RegionSpec& region_spec(Region r);

/// Throws ValidationError for labels outside {0,1,2,4}.
BinaryMask binarize_region(const LabelMask& mask, const RegionSpec& region);

/// 2TP / (FN + FP + 2TP); 1 when both are empty. Throws DimensionError.
double dice_score(const BinaryMask& pred, const BinaryMask& truth);

/// Region voxels with at least one 6-neighbour outside the region; voxels
/// beyond the grid count as outside.
std::vector<std::size_t> surface_voxels(const BinaryMask& m);

/// Exact squared Euclidean distance (in mm^2) from every voxel to the
/// nearest voxel flagged in `sites`; +inf everywhere if there are none.
std::vector<double> squared_distance_transform(const BinaryMask& sites, const Spacing3& spacing);

struct SurfaceDistance {
    double hd95 = 0.0;   // 95th percentile of pooled directed distances
    double hd100 = 0.0;  // maximum of the same set
    bool one_empty = false;  // exactly one region empty; both values are +inf
};

/// Linear interpolation at position q/100 * (n - 1) of the sorted values.
double percentile(std::vector<double> values, double q);

/// Both directed surface distance sets pooled. Both empty gives 0.
SurfaceDistance surface_distance(const BinaryMask& pred, const BinaryMask& truth,
                                 const Spacing3& spacing = {1.0, 1.0, 1.0});

double hd95(const BinaryMask& pred, const BinaryMask& truth, const Spacing3& spacing = {1.0, 1.0, 1.0});

struct RegionScore {
    double dice = 0.0;
    double hd95 = 0.0;
    double hd100 = 0.0;
    bool hd95_undefined = false;  // one side empty; hd95 is +inf
};

struct CaseEval {
    std::string case_id;
    std::array<RegionScore, 3> regions;  // ET, TC, WT
    double avg_dice = 0.0;
    double avg_hd95 = 0.0;  // +inf if any region's hd95 is
};

CaseEval evaluate_case(const LabelMask& pred, const LabelMask& truth, const Spacing3& spacing,
                       std::string case_id = {});

struct Aggregate {
    double mean = 0.0;
    double std = 0.0;        // population standard deviation
    std::size_t count = 0;     // finite values used
    std::size_t excluded = 0;  // non-finite values left out
};

/// Mean and std over the finite values, in order.
Aggregate aggregate(const std::vector<double>& values);

struct EvalReport {
    std::string tag;
    std::vector<CaseEval> cases;
    // Columns ET, TC, WT, Avg.
    std::array<Aggregate, 4> dice;
    std::array<Aggregate, 4> hd95;

    /// Recomputes the aggregates from `cases`.
    void finalize();

    /// Per-case rows followed by a mean+-std summary row.
    std::string to_tsv() const;
    std::string to_json() const;
};

/// One row per report (its tag), columns Dice (%) and HD95 (mm) for
/// ET, TC, WT and their average, each as mean+-std.
std::string comparison_table(const std::vector<EvalReport>& reports);

}  // namespace cotseg
