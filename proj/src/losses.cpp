#include "cotseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cotseg/errors.hpp"
#include "cotseg/kernels.hpp"
#include "cotseg/ops.hpp"

namespace cotseg {

void LossConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("loss: alpha must lie in [0, 1]");
    if (!(epsilon > 0.0)) throw ParameterError("loss: epsilon must be > 0");
    if (num_classes != 4) throw ParameterError("loss: the class set has exactly 4 entries");
}

namespace {

template <class T>
void check_inputs(const char* op, const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg) {
    cfg.validate();
    if (probs.rank() != 5 || probs.dim(1) != cfg.num_classes)
        throw DimensionError(std::string(op) + ": expected [N," + std::to_string(cfg.num_classes) +
                             ",H,W,D] probabilities, got " + shape_str(probs.shape()));
    if (probs.shape() != target.shape())
        throw DimensionError(std::string(op) + ": prediction " + shape_str(probs.shape()) + " vs target " +
                             shape_str(target.shape()));
    if (!cfg.check_targets) return;
    const std::size_t batch = target.dim(0), classes = target.dim(1);
    const std::size_t vox = target.numel() / (batch * classes);
    const auto y = target.data();
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t v = 0; v < vox; ++v) {
            std::size_t hot = 0;
            for (std::size_t c = 0; c < classes; ++c) {
                const T t = y[(n * classes + c) * vox + v];
                if (t != T(0) && t != T(1)) throw ValidationError(std::string(op) + ": target is not one-hot");
                hot += t == T(1);
            }
            if (hot != 1) throw ValidationError(std::string(op) + ": target is not one-hot");
        }
}

// Per-class pooled sums over batch and voxels.
template <class T>
struct DiceSums {
    std::vector<T> inter, yy, pp;
};

template <class T>
DiceSums<T> dice_sums(const Tensor<T>& probs, const Tensor<T>& target) {
    const auto& kt = kernels::table<T>();
    const std::size_t batch = probs.dim(0), classes = probs.dim(1);
    const std::size_t vox = probs.numel() / (batch * classes);
    DiceSums<T> s{std::vector<T>(classes, T(0)), std::vector<T>(classes, T(0)), std::vector<T>(classes, T(0))};
    const T* p = probs.data().data();
    const T* y = target.data().data();
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < classes; ++c) {
            const std::size_t off = (n * classes + c) * vox;
            s.inter[c] += kt.dot(y + off, p + off, vox);
            s.yy[c] += kt.dot(y + off, y + off, vox);
            s.pp[c] += kt.dot(p + off, p + off, vox);
        }
    return s;
}

}  // namespace

template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg) {
    check_inputs("dice_loss", probs, target, cfg);
    const T eps = static_cast<T>(cfg.epsilon);
    const std::size_t classes = probs.dim(1);
    const auto s = dice_sums(probs, target);
    T ratio_sum = 0;
    std::vector<T> num(classes), den(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        num[c] = T(2) * s.inter[c] + eps;
        den[c] = s.yy[c] + s.pp[c] + eps;
        ratio_sum += num[c] / den[c];
    }
    const T value = T(1) - ratio_sum / static_cast<T>(classes);

    return detail::make_result<T>({}, {value}, "dice_loss", {&probs, &target}, [num, den](detail::Node<T>& self) {
        const T g = self.grad[0];
        auto& pp = *self.parents[0];
        auto& py = *self.parents[1];
        const std::size_t batch = pp.shape[0], classes = pp.shape[1];
        const std::size_t vox = pp.data.size() / (batch * classes);
        const T inv_c = T(1) / static_cast<T>(classes);
        // d ratio / d p = (2y*den - num*2p) / den^2, symmetric in (p, y).
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < classes; ++c) {
                const std::size_t off = (n * classes + c) * vox;
                const T a = -g * inv_c * T(2) / den[c];
                const T b = g * inv_c * T(2) * num[c] / (den[c] * den[c]);
                if (pp.requires_grad)
                    for (std::size_t v = 0; v < vox; ++v)
                        pp.grad[off + v] += a * py.data[off + v] + b * pp.data[off + v];
                if (py.requires_grad)
                    for (std::size_t v = 0; v < vox; ++v)
                        py.grad[off + v] += a * pp.data[off + v] + b * py.data[off + v];
            }
    });
}

template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg) {
    check_inputs("cross_entropy_loss", probs, target, cfg);
    const std::size_t batch = probs.dim(0), classes = probs.dim(1);
    const std::size_t vox = probs.numel() / (batch * classes);
    const T floor = static_cast<T>(kLogFloor);
    const auto p = probs.data();
    const auto y = target.data();
    std::vector<T> logs(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) logs[i] = std::log(std::max(p[i], floor));
    const T total = kernels::table<T>().dot(y.data(), logs.data(), logs.size());
    const T inv_m = T(1) / static_cast<T>(batch * vox);
    const T value = -total * inv_m;

    return detail::make_result<T>({}, {value}, "cross_entropy_loss", {&probs, &target},
                                  [logs = std::move(logs), inv_m, floor](detail::Node<T>& self) {
                                      const T g = self.grad[0];
                                      auto& pp = *self.parents[0];
                                      auto& py = *self.parents[1];
                                      if (pp.requires_grad)
                                          for (std::size_t i = 0; i < pp.data.size(); ++i)
                                              if (pp.data[i] > floor)
                                                  pp.grad[i] -= g * inv_m * py.data[i] / pp.data[i];
                                      if (py.requires_grad)
                                          for (std::size_t i = 0; i < py.data.size(); ++i)
                                              py.grad[i] -= g * inv_m * logs[i];
                                  });
}

template <class T>
Tensor<T> combined_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg) {
    const T alpha = static_cast<T>(cfg.alpha);
    return add(scale(dice_loss(probs, target, cfg), alpha),
               scale(cross_entropy_loss(probs, target, cfg), T(1) - alpha));
}

#define COTSEG_INSTANTIATE(T)                                                              \
    template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, const LossConfig&);          \
    template Tensor<T> cross_entropy_loss(const Tensor<T>&, const Tensor<T>&, const LossConfig&); \
    template Tensor<T> combined_loss(const Tensor<T>&, const Tensor<T>&, const LossConfig&);

COTSEG_INSTANTIATE(float)
COTSEG_INSTANTIATE(double)
COTSEG_INSTANTIATE(long double)
#undef COTSEG_INSTANTIATE

}  // namespace cotseg
