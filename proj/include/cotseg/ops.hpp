#pragma once

// Differentiable primitives over N,C,H,W,D tensors. No implicit
// broadcasting: every shape mismatch is a DimensionError.

#include <optional>
#include <vector>

#include "cotseg/tensor.hpp"

namespace cotseg {

struct ConvOptions {
    int stride = 1;
    int padding = 0;
};

/// input [N,Cin,H,W,D], weight [Cout,Cin,k,k,k], bias [Cout] or undefined.
/// Output extents are (E + 2*padding - k) / stride + 1.
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 ConvOptions opts = {});

/// conv3d with a 1x1x1 kernel, stride 1, no padding.
template <class T>
Tensor<T> pointwise_conv(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {});

/// Nearest-neighbour upsampling of the three spatial axes by `factor`.
template <class T>
Tensor<T> upsample_nearest3d(const Tensor<T>& input, int factor);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// Subgradient at exactly 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x);

/// Concatenates [N,Ci,H,W,D] operands along the channel axis, in order.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Sum of all elements as a rank-0 tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x);

/// Max-shifted softmax over the channel axis of [N,C,...]. Throws
/// NumericError on non-finite input.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x);

/// Per-sample, per-channel normalisation over the spatial axes with an
/// affine gamma/beta of shape [C].
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5));

}  // namespace cotseg
