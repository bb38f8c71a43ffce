#include <algorithm>
#include <cmath>
#include <limits>

#include "cotseg/errors.hpp"
#include "cotseg/kernels.hpp"
#include "cotseg/ops.hpp"

namespace cotseg {
namespace {

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

template <class T>
void require_volume(const char* op, const Tensor<T>& x) {
    if (x.rank() != 5)
        throw DimensionError(std::string(op) + ": expected [N,C,H,W,D], got " + shape_str(x.shape()));
}

// Adds `src` into node.grad when the node takes part in differentiation.
template <class T>
void accumulate(detail::Node<T>& node, const T* src, T factor = T(1)) {
    if (!node.requires_grad) return;
    kernels::table<T>().axpy(node.grad.data(), src, factor, node.grad.size());
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("add", a, b);
    std::vector<T> out(a.numel());
    kernels::table<T>().add(out.data(), a.data().data(), b.data().data(), out.size());
    return detail::make_result<T>(a.shape(), std::move(out), "add", {&a, &b}, [](detail::Node<T>& self) {
        accumulate(*self.parents[0], self.grad.data());
        accumulate(*self.parents[1], self.grad.data());
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("mul", a, b);
    std::vector<T> out(a.numel());
    kernels::table<T>().mul(out.data(), a.data().data(), b.data().data(), out.size());
    return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b}, [](detail::Node<T>& self) {
        const auto& kt = kernels::table<T>();
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // Same tensor on both sides (x*x) accumulates twice, as it should.
        if (pa.requires_grad) kt.mul_acc(pa.grad.data(), self.grad.data(), pb.data.data(), self.grad.size());
        if (pb.requires_grad) kt.mul_acc(pb.grad.data(), self.grad.data(), pa.data.data(), self.grad.size());
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    if (debug::kink_tracking()) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (T v : x.data()) h = (h ^ (v > T(0) ? 1u : 0u)) * 0x100000001b3ULL;
        debug::fold_kink_signature(h);
    }
    std::vector<T> out(x.numel());
    kernels::table<T>().relu(out.data(), x.data().data(), out.size());
    return detail::make_result<T>(x.shape(), std::move(out), "relu", {&x}, [](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        kernels::table<T>().relu_backward(px.grad.data(), self.grad.data(), px.data.data(), self.grad.size());
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.numel(), T(0));
    kernels::table<T>().axpy(out.data(), x.data().data(), factor, out.size());
    return detail::make_result<T>(x.shape(), std::move(out), "scale", {&x}, [factor](detail::Node<T>& self) {
        accumulate(*self.parents[0], self.grad.data(), factor);
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    const T s = kernels::table<T>().sum(x.data().data(), x.numel());
    return detail::make_result<T>({}, {s}, "sum", {&x}, [](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        const T g = self.grad[0];
        for (auto& v : px.grad) v += g;
    });
}

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_channels: no operands");
    for (const auto& p : parts) require_volume("concat_channels", p);
    const Shape& ref = parts.front().shape();
    std::size_t channels = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s[0] != ref[0] || s[2] != ref[2] || s[3] != ref[3] || s[4] != ref[4])
            throw DimensionError("concat_channels: operand " + shape_str(s) + " incompatible with " + shape_str(ref));
        channels += s[1];
    }
    const std::size_t batch = ref[0];
    const std::size_t vox = ref[2] * ref[3] * ref[4];
    std::vector<T> out;
    out.reserve(batch * channels * vox);
    for (std::size_t n = 0; n < batch; ++n)
        for (const auto& p : parts) {
            const std::size_t block = p.dim(1) * vox;
            const T* src = p.data().data() + n * block;
            out.insert(out.end(), src, src + block);
        }
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1) * vox);
    Shape shape{batch, channels, ref[2], ref[3], ref[4]};
    return detail::make_result<T>(std::move(shape), std::move(out), "concat_channels", parts,
                                  [batch, widths, total = channels * vox](detail::Node<T>& self) {
                                      const auto& kt = kernels::table<T>();
                                      for (std::size_t n = 0; n < batch; ++n) {
                                          std::size_t off = n * total;
                                          for (std::size_t i = 0; i < widths.size(); ++i) {
                                              auto& p = *self.parents[i];
                                              if (p.requires_grad)
                                                  kt.axpy(p.grad.data() + n * widths[i], self.grad.data() + off, T(1),
                                                          widths[i]);
                                              off += widths[i];
                                          }
                                      }
                                  });
}

template <class T>
Tensor<T> upsample_nearest3d(const Tensor<T>& input, int factor) {
    if (factor < 1) throw ParameterError("upsample_nearest3d: factor must be >= 1, got " + std::to_string(factor));
    require_volume("upsample_nearest3d", input);
    const auto& s = input.shape();
    const std::size_t f = static_cast<std::size_t>(factor);
    const std::size_t planes = s[0] * s[1];
    const std::size_t H = s[2], W = s[3], D = s[4];
    const std::size_t oH = H * f, oW = W * f, oD = D * f;
    std::vector<T> out(planes * oH * oW * oD);
    const T* in = input.data().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t h = 0; h < oH; ++h)
            for (std::size_t w = 0; w < oW; ++w) {
                const T* src = in + ((p * H + h / f) * W + w / f) * D;
                T* dst = out.data() + ((p * oH + h) * oW + w) * oD;
                for (std::size_t d = 0; d < oD; ++d) dst[d] = src[d / f];
            }
    Shape shape{s[0], s[1], oH, oW, oD};
    return detail::make_result<T>(std::move(shape), std::move(out), "upsample_nearest3d", {&input},
                                  [=](detail::Node<T>& self) {
                                      auto& px = *self.parents[0];
                                      for (std::size_t p = 0; p < planes; ++p)
                                          for (std::size_t h = 0; h < oH; ++h)
                                              for (std::size_t w = 0; w < oW; ++w) {
                                                  T* dst = px.grad.data() + ((p * H + h / f) * W + w / f) * D;
                                                  const T* src = self.grad.data() + ((p * oH + h) * oW + w) * oD;
                                                  for (std::size_t d = 0; d < oD; ++d) dst[d / f] += src[d];
                                              }
                                  });
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    if (x.rank() < 2) throw DimensionError("softmax_channels: expected [N,C,...], got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), C = x.dim(1);
    const std::size_t vox = x.numel() / (batch * C);
    const T* in = x.data().data();
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (!std::isfinite(in[i])) throw NumericError("softmax_channels: non-finite input");

    std::vector<T> out(x.numel());
    std::vector<T> mx(vox), denom(vox);
    for (std::size_t n = 0; n < batch; ++n) {
        const T* xi = in + n * C * vox;
        T* yo = out.data() + n * C * vox;
        std::copy(xi, xi + vox, mx.begin());
        for (std::size_t c = 1; c < C; ++c)
            for (std::size_t v = 0; v < vox; ++v) mx[v] = std::max(mx[v], xi[c * vox + v]);
        std::fill(denom.begin(), denom.end(), T(0));
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t v = 0; v < vox; ++v) {
                const T e = std::exp(xi[c * vox + v] - mx[v]);
                yo[c * vox + v] = e;
                denom[v] += e;
            }
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t v = 0; v < vox; ++v) yo[c * vox + v] /= denom[v];
    }
    return detail::make_result<T>(x.shape(), std::move(out), "softmax_channels", {&x},
                                  [batch, C, vox](detail::Node<T>& self) {
                                      auto& px = *self.parents[0];
                                      std::vector<T> dotv(vox);
                                      for (std::size_t n = 0; n < batch; ++n) {
                                          const T* y = self.data.data() + n * C * vox;
                                          const T* gy = self.grad.data() + n * C * vox;
                                          T* gx = px.grad.data() + n * C * vox;
                                          std::fill(dotv.begin(), dotv.end(), T(0));
                                          for (std::size_t c = 0; c < C; ++c)
                                              for (std::size_t v = 0; v < vox; ++v)
                                                  dotv[v] += gy[c * vox + v] * y[c * vox + v];
                                          for (std::size_t c = 0; c < C; ++c)
                                              for (std::size_t v = 0; v < vox; ++v)
                                                  gx[c * vox + v] += y[c * vox + v] * (gy[c * vox + v] - dotv[v]);
                                      }
                                  });
}

template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    require_volume("instance_norm", x);
    const std::size_t batch = x.dim(0), C = x.dim(1);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw DimensionError("instance_norm: gamma/beta must be [" + std::to_string(C) + "]");
    const std::size_t vox = x.numel() / (batch * C);
    const auto& kt = kernels::table<T>();
    const T inv_n = T(1) / static_cast<T>(vox);

    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(batch * C);
    std::vector<T> centered(vox);
    for (std::size_t p = 0; p < batch * C; ++p) {
        const std::size_t c = p % C;
        const T* xi = x.data().data() + p * vox;
        const T mean = kt.sum(xi, vox) * inv_n;
        for (std::size_t v = 0; v < vox; ++v) centered[v] = xi[v] - mean;
        const T var = kt.dot(centered.data(), centered.data(), vox) * inv_n;
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[p] = is;
        T* xh = xhat.data() + p * vox;
        T* yo = out.data() + p * vox;
        const T g = gamma.data()[c], b = beta.data()[c];
        for (std::size_t v = 0; v < vox; ++v) {
            xh[v] = centered[v] * is;
            yo[v] = g * xh[v] + b;
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), "instance_norm", {&x, &gamma, &beta},
        [batch, C, vox, inv_n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            const auto& kt = kernels::table<T>();
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            std::vector<T> dxh(vox);
            for (std::size_t p = 0; p < batch * C; ++p) {
                const std::size_t c = p % C;
                const T* gy = self.grad.data() + p * vox;
                const T* xh = xhat.data() + p * vox;
                if (pg.requires_grad) pg.grad[c] += kt.dot(gy, xh, vox);
                if (pb.requires_grad) pb.grad[c] += kt.sum(gy, vox);
                if (!px.requires_grad) continue;
                const T g = pg.data[c];
                for (std::size_t v = 0; v < vox; ++v) dxh[v] = gy[v] * g;
                const T mean_d = kt.sum(dxh.data(), vox) * inv_n;
                const T mean_dx = kt.dot(dxh.data(), xh, vox) * inv_n;
                T* gx = px.grad.data() + p * vox;
                const T is = inv_std[p];
                for (std::size_t v = 0; v < vox; ++v) gx[v] += is * (dxh[v] - mean_d - xh[v] * mean_dx);
            }
        });
}

#define COTSEG_INSTANTIATE(T)                                                                         \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
    template Tensor<T> relu(const Tensor<T>&);                                                        \
    template Tensor<T> scale(const Tensor<T>&, T);                                                    \
    template Tensor<T> sum(const Tensor<T>&);                                                         \
    template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                                \
    template Tensor<T> upsample_nearest3d(const Tensor<T>&, int);                                     \
    template Tensor<T> softmax_channels(const Tensor<T>&);                                            \
    template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);

COTSEG_INSTANTIATE(float)
COTSEG_INSTANTIATE(double)
COTSEG_INSTANTIATE(long double)
#undef COTSEG_INSTANTIATE

}  // namespace cotseg
