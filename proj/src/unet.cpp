#include "cotseg/unet.hpp"

#include <algorithm>
#include <string>

#include "cotseg/errors.hpp"
#include "cotseg/ops.hpp"

namespace cotseg {

bool UNetConfig::has_cot(std::size_t level) const {
    return std::find(cot_placement.begin(), cot_placement.end(), level) != cot_placement.end();
}

CoTConfig UNetConfig::cot_config(std::size_t level) const {
    CoTConfig c;
    c.channels = channels_at(level);
    c.context_kernel = cot_context_kernel;
    c.attention_hidden = std::max<std::size_t>(1, c.channels / cot_hidden_divisor);
    c.apply_attention_normalization = cot_attention_normalization;
    c.fusion = cot_fusion;
    return c;
}

void UNetConfig::validate() const {
    if (depth < 2) throw ParameterError("unet: depth must be >= 2");
    if (depth > 12) throw ParameterError("unet: depth must be <= 12");
    if (base_channels < 1) throw ParameterError("unet: base_channels must be >= 1");
    if (in_channels < 1) throw ParameterError("unet: in_channels must be >= 1");
    if (num_classes < 1) throw ParameterError("unet: num_classes must be >= 1");
    if (cot_hidden_divisor < 1) throw ParameterError("unet: cot_hidden_divisor must be >= 1");
    if (!(norm_eps > 0.0)) throw ParameterError("unet: norm_eps must be > 0");
    for (std::size_t l : cot_placement)
        if (l >= depth) throw ParameterError("unet: cot placement level " + std::to_string(l) + " >= depth");
    if (!cot_placement.empty()) cot_config(0).validate();
}

std::vector<std::size_t> UNetConfig::all_levels(std::size_t depth) {
    std::vector<std::size_t> v(depth);
    for (std::size_t i = 0; i < depth; ++i) v[i] = i;
    return v;
}

UNetConfig UNetConfig::desk() { return UNetConfig{}; }

UNetConfig UNetConfig::full_scale() {
    UNetConfig c;
    c.base_channels = 16;
    return c;
}

namespace {

std::size_t conv_unit_count(std::size_t cin, std::size_t cout) { return 27 * cin * cout + 2 * cout; }

std::string lvl(const char* prefix, std::size_t l) { return prefix + std::to_string(l); }

}  // namespace

std::size_t unet_param_count(const UNetConfig& cfg) {
    cfg.validate();
    std::size_t n = 0;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::size_t c = cfg.channels_at(l);
        const std::size_t prev = l == 0 ? cfg.in_channels : cfg.channels_at(l - 1);
        if (l > 0) n += conv_unit_count(prev, c);
        n += conv_unit_count(l == 0 ? prev : c, c);
        n += conv_unit_count(c, c);
        if (cfg.has_cot(l)) {
            n += cot_param_count(cfg.cot_config(l));
            if (cfg.replace_conv_with_cot) n -= 27 * c * c;
        }
    }
    for (std::size_t l = 0; l + 1 < cfg.depth; ++l) {
        const std::size_t c = cfg.channels_at(l);
        n += conv_unit_count(cfg.channels_at(l + 1), c);
        n += conv_unit_count(2 * c, c);
        n += conv_unit_count(c, c);
    }
    n += cfg.channels_at(0) * cfg.num_classes + cfg.num_classes;
    return n;
}

template <class T>
UNetParams<T> init_unet_params(const UNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    UNetParams<T> p;
    auto unit = [&](const std::string& conv, const std::string& norm, std::size_t cin, std::size_t cout) {
        p.add_uniform(conv + ".weight", {cout, cin, 3, 3, 3}, rng);
        p.add_constant(norm + ".gamma", {cout}, T(1));
        p.add_constant(norm + ".beta", {cout}, T(0));
    };
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string e = lvl("enc", l);
        const std::size_t c = cfg.channels_at(l);
        if (l > 0) unit(e + ".down", e + ".down_norm", cfg.channels_at(l - 1), c);
        unit(e + ".conv1", e + ".norm1", l == 0 ? cfg.in_channels : c, c);
        const bool cot = cfg.has_cot(l);
        if (cot && cfg.replace_conv_with_cot) {
            register_cot_params(p, e + ".cot", cfg.cot_config(l), rng);
            p.add_constant(e + ".norm2.gamma", {c}, T(1));
            p.add_constant(e + ".norm2.beta", {c}, T(0));
        } else {
            unit(e + ".conv2", e + ".norm2", c, c);
            if (cot) register_cot_params(p, e + ".cot", cfg.cot_config(l), rng);
        }
    }
    for (std::size_t l = cfg.depth - 1; l-- > 0;) {
        const std::string d = lvl("dec", l);
        const std::size_t c = cfg.channels_at(l);
        unit(d + ".up", d + ".up_norm", cfg.channels_at(l + 1), c);
        unit(d + ".conv1", d + ".norm1", 2 * c, c);
        unit(d + ".conv2", d + ".norm2", c, c);
    }
    p.add_uniform("head.weight", {cfg.num_classes, cfg.channels_at(0), 1, 1, 1}, rng);
    p.add_uniform("head.bias", {cfg.num_classes}, rng);
    return p;
}

template <class T>
Tensor<T> unet_forward(const Tensor<T>& x, const UNetParams<T>& params, const UNetConfig& cfg, UNetTrace* trace) {
    cfg.validate();
    if (x.rank() != 5 || x.dim(1) != cfg.in_channels)
        throw DimensionError("unet: expected [N," + std::to_string(cfg.in_channels) + ",H,W,D], got " +
                             shape_str(x.shape()));
    const std::size_t m = cfg.spatial_multiple();
    for (std::size_t a = 2; a < 5; ++a)
        if (x.dim(a) % m != 0)
            throw DimensionError("unet: spatial extents " + shape_str(x.shape()) + " must be multiples of " +
                                 std::to_string(m) + "; pad first");
    if (trace) *trace = {};

    const Tensor<T> none;
    const T eps = static_cast<T>(cfg.norm_eps);
    auto norm_relu = [&](const Tensor<T>& h, const std::string& norm) {
        return relu(instance_norm(h, params.get(norm + ".gamma"), params.get(norm + ".beta"), eps));
    };
    auto unit = [&](const Tensor<T>& h, const std::string& conv, const std::string& norm, int stride = 1) {
        return norm_relu(conv3d(h, params.get(conv + ".weight"), none, {stride, 1}), norm);
    };

    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string e = lvl("enc", l);
        if (l > 0) h = unit(h, e + ".down", e + ".down_norm", 2);
        h = unit(h, e + ".conv1", e + ".norm1");
        if (cfg.has_cot(l)) {
            const auto cot_cfg = cfg.cot_config(l);
            const auto cot_p = find_cot_params(params, e + ".cot");
            if (cfg.replace_conv_with_cot) {
                h = norm_relu(cot_forward(h, cot_p, cot_cfg), e + ".norm2");
            } else {
                h = unit(h, e + ".conv2", e + ".norm2");
                h = cot_forward(h, cot_p, cot_cfg);
            }
        } else {
            h = unit(h, e + ".conv2", e + ".norm2");
        }
        if (trace) trace->encoder.push_back(h.shape());
        if (l + 1 < cfg.depth) skips.push_back(h);
    }
    for (std::size_t l = cfg.depth - 1; l-- > 0;) {
        const std::string d = lvl("dec", l);
        h = unit(upsample_nearest3d(h, 2), d + ".up", d + ".up_norm");
        h = concat_channels<T>({skips[l], h});
        h = unit(h, d + ".conv1", d + ".norm1");
        h = unit(h, d + ".conv2", d + ".norm2");
        if (trace) trace->decoder.push_back(h.shape());
    }
    return pointwise_conv(h, params.get("head.weight"), params.get("head.bias"));
}

template UNetParams<float> init_unet_params<float>(const UNetConfig&, std::uint64_t);
template UNetParams<double> init_unet_params<double>(const UNetConfig&, std::uint64_t);
template UNetParams<long double> init_unet_params<long double>(const UNetConfig&, std::uint64_t);
template Tensor<long double> unet_forward(const Tensor<long double>&, const UNetParams<long double>&,
                                          const UNetConfig&, UNetTrace*);
template Tensor<float> unet_forward(const Tensor<float>&, const UNetParams<float>&, const UNetConfig&, UNetTrace*);
template Tensor<double> unet_forward(const Tensor<double>&, const UNetParams<double>&, const UNetConfig&,
                                     UNetTrace*);

}  // namespace cotseg
