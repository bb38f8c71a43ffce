#pragma once

// Volumetric Contextual Transformer block.
//
//   K = W_K x,  Q = W_Q x,  V = W_V x          (1x1x1 embeddings)
//   K1 = conv_kxkxk(K)                          (static context)
//   A  = W_delta (W_theta [K1, Q])              (two 1x1x1 maps, no activation)
//   K2 = V * A                                  (dynamic context, elementwise)
//   Y  = K1 + K2
//
// All convolutions are bias-free. Shapes are preserved.

#include <cstddef>
#include <string>
#include <vector>

#include "cotseg/params.hpp"
#include "cotseg/tensor.hpp"

namespace cotseg {

enum class CoTFusion {
    Sum,     // Y = K1 + K2
    Bypass,  // block switched off: Y = x
};

struct CoTConfig {
    std::size_t channels = 1;
    std::size_t context_kernel = 3;  // odd
    std::size_t attention_hidden = 1;
    bool apply_attention_normalization = false;  // softmax over channels of A
    CoTFusion fusion = CoTFusion::Sum;

    /// Default block for `channels`: k = 3, no bottleneck.
    static CoTConfig for_channels(std::size_t channels) {
        CoTConfig c;
        c.channels = channels;
        c.attention_hidden = channels;
        return c;
    }

    /// Throws ParameterError on an invalid configuration.
    void validate() const;
};

template <class T>
struct CoTParams {
    Tensor<T> w_key, w_value, w_query;  // [C,C,1,1,1]
    Tensor<T> w_context;                // [C,C,k,k,k]
    Tensor<T> w_theta;                  // [hidden,2C,1,1,1]
    Tensor<T> w_delta;                  // [C,hidden,1,1,1]

    std::vector<Tensor<T>> all() const { return {w_key, w_value, w_query, w_context, w_theta, w_delta}; }
};

/// 3C^2 + C^2 k^3 + 2C*hidden + hidden*C
std::size_t cot_param_count(const CoTConfig& cfg);

/// Allocates and registers the block's weights under `prefix` ("<prefix>.w_key", ...).
template <class T>
CoTParams<T> register_cot_params(ParamStore<T>& store, const std::string& prefix, const CoTConfig& cfg, Rng& rng);

/// Looks up weights registered by register_cot_params.
template <class T>
CoTParams<T> find_cot_params(const ParamStore<T>& store, const std::string& prefix);

template <class T>
struct CoTTrace {
    Tensor<T> key, query, value, static_context, attention, dynamic_context, output;
};

template <class T>
Tensor<T> cot_forward(const Tensor<T>& x, const CoTParams<T>& params, const CoTConfig& cfg,
                      CoTTrace<T>* trace = nullptr);

}  // namespace cotseg
