#pragma once

// Whole-volume prediction by overlapping patches and decoding to labels.

#include <cstdint>
#include <functional>
#include <vector>

#include "cotseg/preprocess.hpp"
#include "cotseg/tensor.hpp"
#include "cotseg/unet.hpp"
#include "cotseg/volume.hpp"

namespace cotseg {

struct SlidingWindowConfig {
    Dims3 patch{32, 32, 32};
    double overlap = 0.5;

    /// Throws ParameterError unless 0 <= overlap < 1 and every patch extent
    /// is a positive multiple of `multiple`.
    void validate(std::size_t multiple = 1) const;
};

/// Window origins on one axis: stride max(1, floor(patch * (1 - overlap))),
/// plus a final window flush with the end. A single origin 0 when
/// size <= patch.
std::vector<std::size_t> window_starts(std::size_t size, std::size_t patch, double overlap);

/// Origins of all windows in canonical (x-major) order.
std::vector<Dims3> window_origins(const Dims3& dims, const SlidingWindowConfig& cfg);

/// Number of windows covering each voxel (canonical voxel order).
std::vector<int> coverage_counts(const Dims3& dims, const SlidingWindowConfig& cfg);

/// Maps a [1,Cin,...] patch to [1,K,...] logits.
template <class T>
using SegmentationModel = std::function<Tensor<T>(const Tensor<T>&)>;

/// Holds `params` by reference; they must outlive the model.
template <class T>
SegmentationModel<T> unet_model(const UNetParams<T>& params, const UNetConfig& cfg);

/// Mean of per-window softmax probabilities, [K,H,W,D]. Extents smaller than
/// the patch are zero-padded at the far end and cropped after aggregation.
/// `visit_order`, a permutation of window indices, changes only the order in
/// which windows are evaluated: contributions are always summed in canonical
/// window order, so the result does not depend on it.
template <class T>
Tensor<T> predict_volume(const Volume& vol, const SegmentationModel<T>& model, const SlidingWindowConfig& cfg,
                         std::size_t spatial_multiple = 1, const std::vector<std::size_t>* visit_order = nullptr);

/// Per-voxel argmax (lowest index wins ties) remapped to {0,1,2,4}.
template <class T>
LabelMask decode_prediction(const Tensor<T>& probs, const Spacing3& spacing = {1.0, 1.0, 1.0});

}  // namespace cotseg
