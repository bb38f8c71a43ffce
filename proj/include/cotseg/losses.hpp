#pragma once

// Segmentation losses over softmax probabilities and one-hot targets,
// both [N,C,H,W,D] with C = num_classes.
//
//   dice = 1 - (1/C) sum_c (2 sum y*p + eps) / (sum y^2 + sum p^2 + eps)
//   ce   = -(1/M) sum y * log(max(p, 1e-12)),   M = N*H*W*D
//   combined = alpha * dice + (1 - alpha) * ce
//
// Sums over the batch and spatial axes are pooled per class.

#include <cstddef>

#include "cotseg/tensor.hpp"

namespace cotseg {

struct LossConfig {
    double alpha = 0.5;
    double epsilon = 1e-5;
    std::size_t num_classes = 4;  // [BG, NCR/NET, ED, ET]
    /// Reject targets that are not one-hot (ValidationError). Costs a pass
    /// over the target; meant for tests.
    bool check_targets = false;

    /// Throws ParameterError.
    void validate() const;
};

inline constexpr double kLogFloor = 1e-12;

template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg = {});

template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg = {});

template <class T>
Tensor<T> combined_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg = {});

}  // namespace cotseg
