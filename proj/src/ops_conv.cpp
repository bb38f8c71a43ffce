// Volumetric convolution lowered to tiled im2col + axpy/dot kernels.
//
// The output volume is processed in tiles of whole (oh, ow) rows. For every
// tile the receptive fields are unrolled into a [Cin*k^3, tile] column
// buffer; each output channel is then an ordered sequence of axpy calls over
// the unrolled rows, so every output element accumulates its terms in the
// fixed (ic, kh, kw, kd) order regardless of tiling or SIMD width.

#include <algorithm>
#include <array>

#include "cotseg/errors.hpp"
#include "cotseg/kernels.hpp"
#include "cotseg/ops.hpp"

namespace cotseg {
namespace {

constexpr std::size_t kTileElems = 512;

long ceil_div(long a, long b) { return a <= 0 ? 0 : (a + b - 1) / b; }

struct ConvGeom {
    std::size_t batch = 0, cin = 0, cout = 0;
    long k = 1, stride = 1, pad = 0;
    std::array<long, 3> in{}, out{};

    std::size_t vin() const { return static_cast<std::size_t>(in[0] * in[1] * in[2]); }
    std::size_t vout() const { return static_cast<std::size_t>(out[0] * out[1] * out[2]); }
    std::size_t unrolled() const { return cin * static_cast<std::size_t>(k * k * k); }
    std::size_t out_rows() const { return static_cast<std::size_t>(out[0] * out[1]); }
    bool identity_unroll() const { return k == 1 && stride == 1 && pad == 0; }
    std::size_t rows_per_tile() const {
        return std::max<std::size_t>(1, kTileElems / static_cast<std::size_t>(out[2]));
    }
};

template <class T>
ConvGeom make_geom(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                   const ConvOptions& opts) {
    if (input.rank() != 5)
        throw DimensionError("conv3d: input must be [N,C,H,W,D], got " + shape_str(input.shape()));
    if (weight.rank() != 5)
        throw DimensionError("conv3d: weight must be [Cout,Cin,k,k,k], got " + shape_str(weight.shape()));
    const auto& ws = weight.shape();
    if (ws[2] != ws[3] || ws[2] != ws[4])
        throw DimensionError("conv3d: kernel must be cubic, got " + shape_str(ws));
    if (ws[1] != input.dim(1))
        throw DimensionError("conv3d: weight expects " + std::to_string(ws[1]) + " input channels, input has " +
                             std::to_string(input.dim(1)));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != ws[0]))
        throw DimensionError("conv3d: bias must be [" + std::to_string(ws[0]) + "], got " +
                             shape_str(bias.shape()));
    if (opts.stride < 1) throw ParameterError("conv3d: stride must be >= 1");
    if (opts.padding < 0) throw ParameterError("conv3d: padding must be >= 0");

    ConvGeom g;
    g.batch = input.dim(0);
    g.cin = ws[1];
    g.cout = ws[0];
    g.k = static_cast<long>(ws[2]);
    g.stride = opts.stride;
    g.pad = opts.padding;
    for (int a = 0; a < 3; ++a) {
        g.in[a] = static_cast<long>(input.dim(2 + a));
        const long span = g.in[a] + 2 * g.pad - g.k;
        if (span < 0)
            throw DimensionError("conv3d: padded extent " + std::to_string(g.in[a] + 2 * g.pad) +
                                 " smaller than kernel " + std::to_string(g.k));
        g.out[a] = span / g.stride + 1;
    }
    return g;
}

// Valid output range along the fastest axis for kernel tap kd.
struct Span1 {
    long lo, hi;
};

Span1 valid_range(const ConvGeom& g, long kd) {
    long lo = ceil_div(g.pad - kd, g.stride);
    long hi = ceil_div(g.in[2] - kd + g.pad, g.stride);
    hi = std::min(hi, g.out[2]);
    lo = std::min(lo, hi);
    return {lo, hi};
}

// Visits every (unrolled row r, output row) pair of one tile. The callback
// gets the tile-local offset of the output row, whether the input row
// exists, the input index of od = 0 (may be negative) and the valid od range.
template <class F>
void for_each_tap(const ConvGeom& g, std::size_t row0, std::size_t row1, F&& f) {
    const long wout = g.out[1];
    const long iw_stride = g.in[2];
    const long ih_stride = g.in[1] * g.in[2];
    std::size_t r = 0;
    for (std::size_t ic = 0; ic < g.cin; ++ic)
        for (long kh = 0; kh < g.k; ++kh)
            for (long kw = 0; kw < g.k; ++kw)
                for (long kd = 0; kd < g.k; ++kd, ++r) {
                    const Span1 span = valid_range(g, kd);
                    for (std::size_t row = row0; row < row1; ++row) {
                        const long oh = static_cast<long>(row) / wout;
                        const long ow = static_cast<long>(row) % wout;
                        const long ih = oh * g.stride + kh - g.pad;
                        const long iw = ow * g.stride + kw - g.pad;
                        const std::size_t local = (row - row0) * static_cast<std::size_t>(g.out[2]);
                        if (ih < 0 || ih >= g.in[0] || iw < 0 || iw >= g.in[1]) {
                            f(r, local, false, 0L, span);
                        } else {
                            const long base = static_cast<long>(ic * g.vin()) + ih * ih_stride + iw * iw_stride +
                                              kd - g.pad;
                            f(r, local, true, base, span);
                        }
                    }
                }
}

template <class T>
void im2col(const ConvGeom& g, const T* in, std::size_t row0, std::size_t row1, T* col) {
    const std::size_t tw = (row1 - row0) * static_cast<std::size_t>(g.out[2]);
    const long dout = g.out[2];
    for_each_tap(g, row0, row1, [&](std::size_t r, std::size_t local, bool valid, long base, Span1 span) {
        T* d = col + r * tw + local;
        if (!valid) {
            std::fill(d, d + dout, T(0));
            return;
        }
        std::fill(d, d + span.lo, T(0));
        if (g.stride == 1) {
            std::copy(in + (base + span.lo), in + (base + span.hi), d + span.lo);
        } else {
            for (long od = span.lo; od < span.hi; ++od) d[od] = in[base + od * g.stride];
        }
        std::fill(d + span.hi, d + dout, T(0));
    });
}

template <class T>
void col2im_add(const ConvGeom& g, const T* col, std::size_t row0, std::size_t row1, T* in,
                const kernels::KernelTable<T>& kt) {
    const std::size_t tw = (row1 - row0) * static_cast<std::size_t>(g.out[2]);
    for_each_tap(g, row0, row1, [&](std::size_t r, std::size_t local, bool valid, long base, Span1 span) {
        if (!valid || span.hi <= span.lo) return;
        const T* s = col + r * tw + local;
        if (g.stride == 1) {
            kt.axpy(in + (base + span.lo), s + span.lo, T(1), static_cast<std::size_t>(span.hi - span.lo));
        } else {
            for (long od = span.lo; od < span.hi; ++od) in[base + od * g.stride] += s[od];
        }
    });
}

template <class T>
void conv_forward(const ConvGeom& g, const T* in, const T* w, const T* bias, T* out) {
    const auto& kt = kernels::table<T>();
    const std::size_t R = g.unrolled();
    const std::size_t vout = g.vout();
    const std::size_t dout = static_cast<std::size_t>(g.out[2]);
    const std::size_t rpt = g.rows_per_tile();
    std::vector<T> col;
    if (!g.identity_unroll()) col.resize(R * rpt * dout);

    for (std::size_t row0 = 0; row0 < g.out_rows(); row0 += rpt) {
        const std::size_t row1 = std::min(g.out_rows(), row0 + rpt);
        const std::size_t m0 = row0 * dout;
        const std::size_t tw = (row1 - row0) * dout;
        const T* cols = in + m0;
        std::size_t ld = g.vin();
        if (!g.identity_unroll()) {
            im2col(g, in, row0, row1, col.data());
            cols = col.data();
            ld = tw;
        }
        for (std::size_t oc = 0; oc < g.cout; ++oc) {
            T* o = out + oc * vout + m0;
            std::fill(o, o + tw, bias ? bias[oc] : T(0));
            const T* wr = w + oc * R;
            for (std::size_t r = 0; r < R; ++r) kt.axpy(o, cols + r * ld, wr[r], tw);
        }
    }
}

template <class T>
void conv_backward(const ConvGeom& g, const T* in, const T* w, const T* gout, T* gin, T* gw, T* gb) {
    const auto& kt = kernels::table<T>();
    const std::size_t R = g.unrolled();
    const std::size_t vout = g.vout();
    const std::size_t dout = static_cast<std::size_t>(g.out[2]);
    const std::size_t rpt = g.rows_per_tile();
    std::vector<T> col, gcol;
    if (!g.identity_unroll()) {
        if (gw) col.resize(R * rpt * dout);
        if (gin) gcol.resize(R * rpt * dout);
    }

    if (gb)
        for (std::size_t oc = 0; oc < g.cout; ++oc) gb[oc] += kt.sum(gout + oc * vout, vout);

    for (std::size_t row0 = 0; row0 < g.out_rows(); row0 += rpt) {
        const std::size_t row1 = std::min(g.out_rows(), row0 + rpt);
        const std::size_t m0 = row0 * dout;
        const std::size_t tw = (row1 - row0) * dout;

        if (gw) {
            const T* cols = in + m0;
            std::size_t ld = g.vin();
            if (!g.identity_unroll()) {
                im2col(g, in, row0, row1, col.data());
                cols = col.data();
                ld = tw;
            }
            for (std::size_t oc = 0; oc < g.cout; ++oc) {
                const T* go = gout + oc * vout + m0;
                T* gwr = gw + oc * R;
                for (std::size_t r = 0; r < R; ++r) gwr[r] += kt.dot(go, cols + r * ld, tw);
            }
        }

        if (gin) {
            if (g.identity_unroll()) {
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t oc = 0; oc < g.cout; ++oc)
                        kt.axpy(gin + r * g.vin() + m0, gout + oc * vout + m0, w[oc * R + r], tw);
            } else {
                std::fill(gcol.begin(), gcol.begin() + static_cast<long>(R * tw), T(0));
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t oc = 0; oc < g.cout; ++oc)
                        kt.axpy(gcol.data() + r * tw, gout + oc * vout + m0, w[oc * R + r], tw);
                col2im_add(g, gcol.data(), row0, row1, gin, kt);
            }
        }
    }
}

}  // namespace

template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, ConvOptions opts) {
    const ConvGeom g = make_geom(input, weight, bias, opts);
    const std::size_t vin = g.vin(), vout = g.vout();
    std::vector<T> out(g.batch * g.cout * vout);
    const T* b = bias.defined() ? bias.data().data() : nullptr;
    for (std::size_t n = 0; n < g.batch; ++n)
        conv_forward(g, input.data().data() + n * g.cin * vin, weight.data().data(), b,
                     out.data() + n * g.cout * vout);

    Shape shape{g.batch, g.cout, static_cast<std::size_t>(g.out[0]), static_cast<std::size_t>(g.out[1]),
                static_cast<std::size_t>(g.out[2])};
    std::vector<Tensor<T>> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    const bool has_bias = bias.defined();
    return detail::make_result<T>(
        std::move(shape), std::move(out), "conv3d", inputs, [g, has_bias](detail::Node<T>& self) {
            auto& in_node = *self.parents[0];
            auto& w_node = *self.parents[1];
            detail::Node<T>* b_node = has_bias ? self.parents[2].get() : nullptr;
            const std::size_t vin = g.vin(), vout = g.vout();
            std::vector<T> gin;
            if (in_node.requires_grad) gin.assign(in_node.data.size(), T(0));
            T* gw = w_node.requires_grad ? w_node.grad.data() : nullptr;
            T* gb = (b_node && b_node->requires_grad) ? b_node->grad.data() : nullptr;
            for (std::size_t n = 0; n < g.batch; ++n)
                conv_backward(g, in_node.data.data() + n * g.cin * vin, w_node.data.data(),
                              self.grad.data() + n * g.cout * vout,
                              gin.empty() ? nullptr : gin.data() + n * g.cin * vin, gw, gb);
            if (!gin.empty()) {
                const T factor = debug::fault_enabled("conv3d") ? T(1.01) : T(1);
                kernels::table<T>().axpy(in_node.grad.data(), gin.data(), factor, gin.size());
            }
        });
}

template <class T>
Tensor<T> pointwise_conv(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (weight.rank() == 5 && weight.dim(2) != 1)
        throw DimensionError("pointwise_conv: weight must be [Cout,Cin,1,1,1], got " + shape_str(weight.shape()));
    return conv3d(input, weight, bias, ConvOptions{1, 0});
}

template Tensor<float> conv3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, ConvOptions);
template Tensor<double> conv3d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, ConvOptions);
template Tensor<float> pointwise_conv(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> pointwise_conv(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template Tensor<long double> conv3d(const Tensor<long double>&, const Tensor<long double>&,
                                    const Tensor<long double>&, ConvOptions);
template Tensor<long double> pointwise_conv(const Tensor<long double>&, const Tensor<long double>&,
                                            const Tensor<long double>&);

}  // namespace cotseg
