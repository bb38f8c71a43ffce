#include "cotseg/verify/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace cotseg::oracle {

std::vector<double> conv3d(const std::vector<double>& input, const std::array<std::size_t, 5>& in_shape,
                           const std::vector<double>& weight, const std::array<std::size_t, 5>& w_shape,
                           const std::vector<double>& bias, int stride, int padding,
                           std::array<std::size_t, 5>* out_shape) {
    const long N = static_cast<long>(in_shape[0]), Ci = static_cast<long>(in_shape[1]);
    const long H = static_cast<long>(in_shape[2]), W = static_cast<long>(in_shape[3]),
               D = static_cast<long>(in_shape[4]);
    const long Co = static_cast<long>(w_shape[0]), K = static_cast<long>(w_shape[2]);
    const long oH = (H + 2 * padding - K) / stride + 1;
    const long oW = (W + 2 * padding - K) / stride + 1;
    const long oD = (D + 2 * padding - K) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(N * Co * oH * oW * oD), 0.0);
    auto in_at = [&](long n, long c, long h, long w, long d) {
        return input[static_cast<std::size_t>((((n * Ci + c) * H + h) * W + w) * D + d)];
    };
    auto w_at = [&](long o, long c, long a, long b, long e) {
        return weight[static_cast<std::size_t>((((o * Ci + c) * K + a) * K + b) * K + e)];
    };
    for (long n = 0; n < N; ++n)
        for (long o = 0; o < Co; ++o)
            for (long h = 0; h < oH; ++h)
                for (long w = 0; w < oW; ++w)
                    for (long d = 0; d < oD; ++d) {
                        double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
                        for (long c = 0; c < Ci; ++c)
                            for (long a = 0; a < K; ++a)
                                for (long b = 0; b < K; ++b)
                                    for (long e = 0; e < K; ++e) {
                                        const long ih = h * stride + a - padding;
                                        const long iw = w * stride + b - padding;
                                        const long id = d * stride + e - padding;
                                        if (ih < 0 || ih >= H || iw < 0 || iw >= W || id < 0 || id >= D) continue;
                                        acc += in_at(n, c, ih, iw, id) * w_at(o, c, a, b, e);
                                    }
                        out[static_cast<std::size_t>((((n * Co + o) * oH + h) * oW + w) * oD + d)] = acc;
                    }
    if (out_shape)
        *out_shape = {static_cast<std::size_t>(N), static_cast<std::size_t>(Co), static_cast<std::size_t>(oH),
                      static_cast<std::size_t>(oW), static_cast<std::size_t>(oD)};
    return out;
}

std::vector<double> softmax(const std::vector<double>& logits, std::size_t batch, std::size_t channels) {
    const std::size_t vox = logits.size() / (batch * channels);
    std::vector<double> out(logits.size());
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t v = 0; v < vox; ++v) {
            double z = 0.0;
            for (std::size_t c = 0; c < channels; ++c) z += std::exp(logits[(n * channels + c) * vox + v]);
            for (std::size_t c = 0; c < channels; ++c) {
                const std::size_t i = (n * channels + c) * vox + v;
                out[i] = std::exp(logits[i]) / z;
            }
        }
    return out;
}

double dice_loss(const std::vector<double>& probs, const std::vector<double>& target, std::size_t batch,
                 std::size_t channels, double eps) {
    const std::size_t vox = probs.size() / (batch * channels);
    double ratio_sum = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        double inter = 0.0, yy = 0.0, pp = 0.0;
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t v = 0; v < vox; ++v) {
                const std::size_t i = (n * channels + c) * vox + v;
                inter += target[i] * probs[i];
                yy += target[i] * target[i];
                pp += probs[i] * probs[i];
            }
        ratio_sum += (2.0 * inter + eps) / (yy + pp + eps);
    }
    return 1.0 - ratio_sum / static_cast<double>(channels);
}

double cross_entropy(const std::vector<double>& probs, const std::vector<double>& target, std::size_t batch,
                     std::size_t channels) {
    const std::size_t vox = probs.size() / (batch * channels);
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) total += target[i] * std::log(std::max(probs[i], 1e-12));
    return -total / static_cast<double>(batch * vox);
}

double dice_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] && truth[i]) ++tp;
        if (pred[i] && !truth[i]) ++fp;
        if (!pred[i] && truth[i]) ++fn;
    }
    if (tp + fp + fn == 0) return 1.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(fn + fp + 2 * tp);
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

namespace {

std::vector<std::array<long, 3>> surface(const std::vector<std::uint8_t>& m, const std::array<std::size_t, 3>& dims) {
    const long X = static_cast<long>(dims[0]), Y = static_cast<long>(dims[1]), Z = static_cast<long>(dims[2]);
    auto inside = [&](long x, long y, long z) {
        if (x < 0 || y < 0 || z < 0 || x >= X || y >= Y || z >= Z) return false;
        return m[static_cast<std::size_t>((x * Y + y) * Z + z)] != 0;
    };
    std::vector<std::array<long, 3>> pts;
    for (long x = 0; x < X; ++x)
        for (long y = 0; y < Y; ++y)
            for (long z = 0; z < Z; ++z) {
                if (!inside(x, y, z)) continue;
                const bool border = !inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) ||
                                    !inside(x, y + 1, z) || !inside(x, y, z - 1) || !inside(x, y, z + 1);
                if (border) pts.push_back({x, y, z});
            }
    return pts;
}

void directed(const std::vector<std::array<long, 3>>& from, const std::vector<std::array<long, 3>>& to,
              const std::array<double, 3>& sp, std::vector<double>& out) {
    for (const auto& a : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : to) {
            const double dx = static_cast<double>(a[0] - b[0]) * sp[0];
            const double dy = static_cast<double>(a[1] - b[1]) * sp[1];
            const double dz = static_cast<double>(a[2] - b[2]) * sp[2];
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        out.push_back(std::sqrt(best));
    }
}

}  // namespace

SurfaceDistances surface_distances(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
                                   const std::array<std::size_t, 3>& dims, const std::array<double, 3>& spacing) {
    SurfaceDistances r;
    const auto sp = surface(pred, dims);
    const auto st = surface(truth, dims);
    if (sp.empty() && st.empty()) return r;
    if (sp.empty() || st.empty()) {
        r.one_empty = true;
        r.hd95 = r.hd100 = std::numeric_limits<double>::infinity();
        return r;
    }
    directed(st, sp, spacing, r.pooled);
    directed(sp, st, spacing, r.pooled);
    r.hd95 = percentile(r.pooled, 95.0);
    r.hd100 = *std::max_element(r.pooled.begin(), r.pooled.end());
    return r;
}

std::vector<int> window_coverage(const std::array<std::size_t, 3>& dims, const std::array<std::size_t, 3>& patch,
                                 double overlap) {
    std::array<std::vector<int>, 3> axis_count;
    for (int a = 0; a < 3; ++a) {
        const long size = static_cast<long>(dims[a]);
        const long p = static_cast<long>(patch[a]);
        axis_count[a].assign(dims[a], 0);
        std::set<long> starts;
        if (size <= p) {
            starts.insert(0);
        } else {
            const long stride = std::max(1L, static_cast<long>(std::floor(static_cast<double>(p) * (1.0 - overlap))));
            for (long s = 0; s + p <= size; s += stride) starts.insert(s);
            starts.insert(size - p);
        }
        for (long s : starts)
            for (long i = s; i < std::min(size, s + p); ++i) ++axis_count[a][static_cast<std::size_t>(i)];
    }
    std::vector<int> cov(dims[0] * dims[1] * dims[2]);
    for (std::size_t x = 0; x < dims[0]; ++x)
        for (std::size_t y = 0; y < dims[1]; ++y)
            for (std::size_t z = 0; z < dims[2]; ++z)
                cov[(x * dims[1] + y) * dims[2] + z] = axis_count[0][x] * axis_count[1][y] * axis_count[2][z];
    return cov;
}

}  // namespace cotseg::oracle
