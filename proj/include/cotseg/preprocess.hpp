#pragma once

// Multimodal case assembly and preprocessing: z-scoring, cropping/padding,
// one-hot targets, modality dropout and cross-validation folds.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cotseg/tensor.hpp"
#include "cotseg/volume.hpp"

namespace cotseg {

enum class Modality { Flair = 0, T1 = 1, T1c = 2, T2 = 3 };
inline constexpr std::size_t kNumModalities = 4;

/// "Flair", "T1", "T1c", "T2".
std::string modality_name(Modality m);
/// File suffixes: "flair", "t1", "t1ce", "t2".
std::string modality_suffix(Modality m);
/// Accepts display names or suffixes, case-insensitive. Throws ParameterError.
Modality parse_modality(const std::string& s);

/// Four co-registered channels ordered [FLAIR, T1, T1c, T2].
struct Volume {
    std::string case_id;
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::array<std::vector<double>, kNumModalities> channels;

    /// Throws ValidationError if a channel's size disagrees with dims.
    void validate() const;
};

struct Case {
    Volume image;
    std::optional<LabelMask> seg;
};

/// `<root>/<id>/<id>_{flair,t1,t1ce,t2}.nii[.gz]` and optional `_seg`.
/// Throws NiftiError on parse failures and ValidationError when the
/// modalities disagree in dims or spacing.
Case read_case(const std::filesystem::path& root, const std::string& case_id);
void write_case(const std::filesystem::path& root, const Case& c);
/// Sorted ids of sub-directories that contain a FLAIR image.
std::vector<std::string> list_cases(const std::filesystem::path& root);

/// Non-zero voxels mapped to (v - mean) / std with statistics over the
/// non-zero voxels; zeros stay 0. If std < 1e-8 non-zero voxels become 0.
std::vector<double> zscore_normalize(const std::vector<double>& values);
Volume zscore_normalize(const Volume& vol);

/// Output voxel i on each axis reads source voxel i + offset; reads outside
/// the source are zero.
struct CropWindow {
    Dims3 source{0, 0, 0};
    Dims3 target{0, 0, 0};
    std::array<long, 3> offset{0, 0, 0};

    /// Window mapping the target grid back onto the source grid.
    CropWindow inverse() const { return {target, source, {-offset[0], -offset[1], -offset[2]}}; }
};

enum class CropMode { Centered, Random };

/// Centered: around the bounding box of `content` (the whole grid if it is
/// empty), clamped so no padding is introduced on an axis that is being
/// cropped. Random: offset drawn per axis from the valid range with `seed`.
CropWindow plan_crop(const Dims3& source, const Dims3& target, CropMode mode, const BinaryMask* content = nullptr,
                     std::uint64_t seed = 0);

template <class V>
std::vector<V> apply_crop(const std::vector<V>& values, const CropWindow& w);

Volume apply_crop(const Volume& vol, const CropWindow& w);
LabelMask apply_crop(const LabelMask& mask, const CropWindow& w);

/// Non-zero support over all channels.
BinaryMask nonzero_support(const Volume& vol);

/// Same window for image and mask so the patches stay aligned.
Case crop_or_pad(const Case& c, const Dims3& target, CropMode mode, std::uint64_t seed = 0);

/// Dense slot of a label: 0,1,2,4 -> 0,1,2,3. Throws ValidationError.
std::size_t label_to_slot(std::uint8_t label);
std::uint8_t slot_to_label(std::size_t slot);

/// [4,H,W,D] indicator tensor in slot order [BG, NCR/NET, ED, ET].
template <class T>
Tensor<T> one_hot_labels(const LabelMask& mask);

/// [4,H,W,D] image tensor.
template <class T>
Tensor<T> volume_tensor(const Volume& vol);

/// Prepends a unit batch axis (no graph history).
template <class T>
Tensor<T> with_batch(const Tensor<T>& t);

/// Drops the unit batch axis of [1,...] (no graph history).
template <class T>
Tensor<T> without_batch(const Tensor<T>& t);

using ModalitySet = std::array<bool, kNumModalities>;
inline constexpr ModalitySet kAllModalities{true, true, true, true};

/// Dropped channels become all-zero. Throws ParameterError if none is kept.
Volume mask_modalities(const Volume& vol, const ModalitySet& keep);
/// "Flair,T1,T2" style tag of the kept modalities.
std::string keep_set_tag(const ModalitySet& keep);

/// Seeded shuffle, then round-robin into k folds. Throws ParameterError if
/// k < 2 or k > ids.size().
std::vector<std::vector<std::string>> split_folds(const std::vector<std::string>& ids, std::size_t k,
                                                  std::uint64_t seed);

}  // namespace cotseg
