#include "cotseg/cot.hpp"

#include "cotseg/errors.hpp"
#include "cotseg/ops.hpp"

namespace cotseg {

void CoTConfig::validate() const {
    if (channels < 1) throw ParameterError("cot: channels must be >= 1");
    if (context_kernel < 1 || context_kernel % 2 == 0) throw ParameterError("cot: kernel must be odd and >= 1");
    if (attention_hidden < 1) throw ParameterError("cot: attention_hidden must be >= 1");
}

std::size_t cot_param_count(const CoTConfig& cfg) {
    const std::size_t C = cfg.channels, k = cfg.context_kernel, h = cfg.attention_hidden;
    return 3 * C * C + C * C * k * k * k + 2 * C * h + h * C;
}

template <class T>
CoTParams<T> register_cot_params(ParamStore<T>& store, const std::string& prefix, const CoTConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t C = cfg.channels, k = cfg.context_kernel, h = cfg.attention_hidden;
    CoTParams<T> p;
    p.w_key = store.add_uniform(prefix + ".w_key", {C, C, 1, 1, 1}, rng);
    p.w_value = store.add_uniform(prefix + ".w_value", {C, C, 1, 1, 1}, rng);
    p.w_query = store.add_uniform(prefix + ".w_query", {C, C, 1, 1, 1}, rng);
    p.w_context = store.add_uniform(prefix + ".w_context", {C, C, k, k, k}, rng);
    p.w_theta = store.add_uniform(prefix + ".w_theta", {h, 2 * C, 1, 1, 1}, rng);
    p.w_delta = store.add_uniform(prefix + ".w_delta", {C, h, 1, 1, 1}, rng);
    return p;
}

template <class T>
CoTParams<T> find_cot_params(const ParamStore<T>& store, const std::string& prefix) {
    CoTParams<T> p;
    p.w_key = store.get(prefix + ".w_key");
    p.w_value = store.get(prefix + ".w_value");
    p.w_query = store.get(prefix + ".w_query");
    p.w_context = store.get(prefix + ".w_context");
    p.w_theta = store.get(prefix + ".w_theta");
    p.w_delta = store.get(prefix + ".w_delta");
    return p;
}

template <class T>
Tensor<T> cot_forward(const Tensor<T>& x, const CoTParams<T>& params, const CoTConfig& cfg, CoTTrace<T>* trace) {
    cfg.validate();
    if (x.rank() != 5 || x.dim(1) != cfg.channels)
        throw DimensionError("cot: expected [N," + std::to_string(cfg.channels) + ",H,W,D], got " +
                             shape_str(x.shape()));
    if (cfg.fusion == CoTFusion::Bypass) return x;

    const Tensor<T> none;
    const int pad = static_cast<int>((cfg.context_kernel - 1) / 2);
    auto key = pointwise_conv(x, params.w_key);
    auto query = pointwise_conv(x, params.w_query);
    auto value = pointwise_conv(x, params.w_value);
    auto static_ctx = conv3d(key, params.w_context, none, {1, pad});
    auto attention = pointwise_conv(pointwise_conv(concat_channels<T>({static_ctx, query}), params.w_theta),
                                    params.w_delta);
    if (cfg.apply_attention_normalization) attention = softmax_channels(attention);
    auto dynamic_ctx = mul(value, attention);
    auto y = add(static_ctx, dynamic_ctx);
    if (trace) *trace = {key, query, value, static_ctx, attention, dynamic_ctx, y};
    return y;
}

template CoTParams<float> register_cot_params(ParamStore<float>&, const std::string&, const CoTConfig&, Rng&);
template CoTParams<double> register_cot_params(ParamStore<double>&, const std::string&, const CoTConfig&, Rng&);
template CoTParams<float> find_cot_params(const ParamStore<float>&, const std::string&);
template CoTParams<double> find_cot_params(const ParamStore<double>&, const std::string&);
template CoTParams<long double> register_cot_params(ParamStore<long double>&, const std::string&, const CoTConfig&,
                                                    Rng&);
template CoTParams<long double> find_cot_params(const ParamStore<long double>&, const std::string&);
template Tensor<long double> cot_forward(const Tensor<long double>&, const CoTParams<long double>&, const CoTConfig&,
                                         CoTTrace<long double>*);
template Tensor<float> cot_forward(const Tensor<float>&, const CoTParams<float>&, const CoTConfig&,
                                   CoTTrace<float>*);
template Tensor<double> cot_forward(const Tensor<double>&, const CoTParams<double>&, const CoTConfig&,
                                    CoTTrace<double>*);

}  // namespace cotseg
