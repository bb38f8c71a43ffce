#pragma once

// Straightforward reference computations used to check the optimized
// implementation. Nothing here calls into the kernels, the tensor engine or
// the metrics module; each routine is the textbook formula in plain loops.

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace cotseg::oracle {

/// Direct nested-loop convolution. Shapes are [N,Cin,H,W,D] and
/// [Cout,Cin,k,k,k]; bias may be empty.
std::vector<double> conv3d(const std::vector<double>& input, const std::array<std::size_t, 5>& in_shape,
                           const std::vector<double>& weight, const std::array<std::size_t, 5>& w_shape,
                           const std::vector<double>& bias, int stride, int padding,
                           std::array<std::size_t, 5>* out_shape = nullptr);

/// exp(x_c) / sum_j exp(x_j) per voxel of [N,C,V].
std::vector<double> softmax(const std::vector<double>& logits, std::size_t batch, std::size_t channels);

/// 1 - mean_c (2 sum y*p + eps) / (sum y^2 + sum p^2 + eps), voxels pooled over the batch.
double dice_loss(const std::vector<double>& probs, const std::vector<double>& target, std::size_t batch,
                 std::size_t channels, double eps);

/// -(1/M) sum_c sum_i y log(max(p, 1e-12)), M = number of voxels.
double cross_entropy(const std::vector<double>& probs, const std::vector<double>& target, std::size_t batch,
                     std::size_t channels);

/// 2TP / (FN + FP + 2TP) by counting; 1 if both empty.
double dice_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);

struct SurfaceDistances {
    std::vector<double> pooled;  // d(t, P) for t in surf(T), then d(p, T) for p in surf(P)
    double hd95 = 0.0;
    double hd100 = 0.0;
    bool one_empty = false;
};

/// All-pairs surface distances between two binary masks of extents `dims`
/// (row-major, last axis fastest). Surface = region voxel with a 6-neighbour
/// outside the region or outside the grid.
SurfaceDistances surface_distances(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
                                   const std::array<std::size_t, 3>& dims, const std::array<double, 3>& spacing);

/// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

/// Number of sliding windows covering each voxel, from an independent
/// enumeration of window starts along each axis.
std::vector<int> window_coverage(const std::array<std::size_t, 3>& dims, const std::array<std::size_t, 3>& patch,
                                 double overlap);

}  // namespace cotseg::oracle
