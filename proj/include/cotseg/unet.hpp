#pragma once

// 3D U-Net with optional CoT blocks.
//
// Encoder level 0: two conv-norm-relu units (in_channels -> C0 -> C0).
// Encoder level l >= 1: stride-2 conv-norm-relu (C_{l-1} -> C_l), then two
// conv-norm-relu units at C_l. The deepest level is the bottleneck.
// A CoT block follows the conv pair of every placed level; with
// replace_conv_with_cot the second conv of the pair is swapped for the block
// (its norm and relu are kept).
// Decoder level l (depth-2 .. 0): nearest x2 upsample, conv-norm-relu
// (C_{l+1} -> C_l), concat [skip_l, up], then conv-norm-relu units
// (2C_l -> C_l -> C_l). Head: 1x1x1 conv with bias to num_classes.
//
// Convolutions feeding an instance norm carry no bias; the norm's beta
// makes it redundant. All 3x3x3 convolutions use padding 1.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cotseg/cot.hpp"
#include "cotseg/params.hpp"
#include "cotseg/tensor.hpp"

namespace cotseg {

struct UNetConfig {
    std::size_t in_channels = 4;
    std::size_t num_classes = 4;
    std::size_t depth = 4;
    std::size_t base_channels = 8;
    std::vector<std::size_t> cot_placement{0, 1, 2, 3};
    std::size_t cot_context_kernel = 3;
    std::size_t cot_hidden_divisor = 1;  // attention_hidden = C_l / divisor
    bool cot_attention_normalization = false;
    CoTFusion cot_fusion = CoTFusion::Sum;
    bool replace_conv_with_cot = false;
    double norm_eps = 1e-5;

    std::size_t channels_at(std::size_t level) const { return base_channels << level; }
    bool has_cot(std::size_t level) const;
    CoTConfig cot_config(std::size_t level) const;
    /// Spatial extents must be multiples of this.
    std::size_t spatial_multiple() const { return std::size_t{1} << (depth - 1); }

    /// Throws ParameterError.
    void validate() const;

    static std::vector<std::size_t> all_levels(std::size_t depth);
    /// Small network for quick runs: depth 4, base 8, CoT on every level.
    static UNetConfig desk();
    /// Larger network with base 16.
    static UNetConfig full_scale();
    static UNetConfig baseline(UNetConfig cfg) {
        cfg.cot_placement.clear();
        return cfg;
    }
};

template <class T>
using UNetParams = ParamStore<T>;

/// Closed-form count; independent of allocation.
std::size_t unet_param_count(const UNetConfig& cfg);

template <class T>
UNetParams<T> init_unet_params(const UNetConfig& cfg, std::uint64_t seed);

struct UNetTrace {
    std::vector<Shape> encoder;  // output of each encoder level, shallow to deep
    std::vector<Shape> decoder;  // output of each decoder level, deep to shallow
};

/// x [N,in_channels,H,W,D] -> logits [N,num_classes,H,W,D].
template <class T>
Tensor<T> unet_forward(const Tensor<T>& x, const UNetParams<T>& params, const UNetConfig& cfg,
                       UNetTrace* trace = nullptr);

}  // namespace cotseg
