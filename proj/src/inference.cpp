#include "cotseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cotseg/errors.hpp"
#include "cotseg/ops.hpp"

namespace cotseg {

void SlidingWindowConfig::validate(std::size_t multiple) const {
    if (!(overlap >= 0.0 && overlap < 1.0))
        throw ParameterError("sliding window overlap must be in [0, 1), got " + std::to_string(overlap));
    for (auto p : patch)
        if (p == 0 || p % multiple != 0)
            throw ParameterError("patch " + dims_str(patch) + " must be a positive multiple of " +
                                 std::to_string(multiple) + " per axis");
}

std::vector<std::size_t> window_starts(std::size_t size, std::size_t patch, double overlap) {
    if (size <= patch) return {0};
    const auto stride =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + patch <= size; s += stride) starts.push_back(s);
    if (starts.back() != size - patch) starts.push_back(size - patch);
    return starts;
}

std::vector<Dims3> window_origins(const Dims3& dims, const SlidingWindowConfig& cfg) {
    const auto sx = window_starts(dims[0], cfg.patch[0], cfg.overlap);
    const auto sy = window_starts(dims[1], cfg.patch[1], cfg.overlap);
    const auto sz = window_starts(dims[2], cfg.patch[2], cfg.overlap);
    std::vector<Dims3> out;
    for (auto x : sx)
        for (auto y : sy)
            for (auto z : sz) out.push_back({x, y, z});
    return out;
}

std::vector<int> coverage_counts(const Dims3& dims, const SlidingWindowConfig& cfg) {
    std::vector<int> cov(dims_numel(dims), 0);
    for (const auto& o : window_origins(dims, cfg))
        for (std::size_t x = o[0]; x < std::min(dims[0], o[0] + cfg.patch[0]); ++x)
            for (std::size_t y = o[1]; y < std::min(dims[1], o[1] + cfg.patch[1]); ++y)
                for (std::size_t z = o[2]; z < std::min(dims[2], o[2] + cfg.patch[2]); ++z)
                    ++cov[(x * dims[1] + y) * dims[2] + z];
    return cov;
}

template <class T>
SegmentationModel<T> unet_model(const UNetParams<T>& params, const UNetConfig& cfg) {
    return [&params, cfg](const Tensor<T>& x) { return unet_forward(x, params, cfg); };
}

template <class T>
Tensor<T> predict_volume(const Volume& vol, const SegmentationModel<T>& model, const SlidingWindowConfig& cfg,
                         std::size_t spatial_multiple, const std::vector<std::size_t>* visit_order) {
    cfg.validate(spatial_multiple);
    vol.validate();
    NoGradGuard no_grad;

    // Pad undersized axes at the far end.
    Dims3 grid;
    for (int a = 0; a < 3; ++a) grid[a] = std::max(vol.dims[a], cfg.patch[a]);
    const auto origins = window_origins(grid, cfg);
    std::vector<std::size_t> order(origins.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (visit_order) {
        auto sorted = *visit_order;
        std::sort(sorted.begin(), sorted.end());
        if (sorted != order) throw ParameterError("visit_order is not a permutation of the window indices");
        order = *visit_order;
    }

    const auto [px, py, pz] = cfg.patch;
    const std::size_t pvox = px * py * pz;
    const std::size_t gvox = dims_numel(grid);
    const auto [vx, vy, vz] = vol.dims;
    std::size_t classes = 0;
    std::vector<T> acc;
    std::vector<int> count(gvox, 0);

    auto run_window = [&](const Dims3& o) {
        std::vector<T> patch(kNumModalities * pvox, T(0));
        for (std::size_t c = 0; c < kNumModalities; ++c)
            for (std::size_t x = 0; x < px && o[0] + x < vx; ++x)
                for (std::size_t y = 0; y < py && o[1] + y < vy; ++y)
                    for (std::size_t z = 0; z < pz && o[2] + z < vz; ++z)
                        patch[c * pvox + (x * py + y) * pz + z] =
                            static_cast<T>(vol.channels[c][((o[0] + x) * vy + o[1] + y) * vz + o[2] + z]);
        const auto input = Tensor<T>::from_data({1, kNumModalities, px, py, pz}, std::move(patch));
        const auto probs = softmax_channels(model(input));
        if (probs.rank() != 5 || probs.dim(0) != 1 || probs.dim(2) != px || probs.dim(3) != py || probs.dim(4) != pz)
            throw DimensionError("model returned " + shape_str(probs.shape()) + " for patch " + dims_str(cfg.patch));
        const auto d = probs.data();
        return std::vector<T>(d.begin(), d.end());
    };
    auto add_window = [&](const Dims3& o, const std::vector<T>& p) {
        const std::size_t k = p.size() / pvox;
        if (acc.empty()) {
            classes = k;
            acc.assign(classes * gvox, T(0));
        }
        for (std::size_t x = 0; x < px; ++x)
            for (std::size_t y = 0; y < py; ++y)
                for (std::size_t z = 0; z < pz; ++z) {
                    const std::size_t g = ((o[0] + x) * grid[1] + o[1] + y) * grid[2] + o[2] + z;
                    const std::size_t l = (x * py + y) * pz + z;
                    for (std::size_t c = 0; c < classes; ++c) acc[c * gvox + g] += p[c * pvox + l];
                    ++count[g];
                }
    };

    // Contributions are folded in canonical order; out-of-order results wait.
    std::map<std::size_t, std::vector<T>> pending;
    std::size_t next = 0;
    for (std::size_t w : order) {
        pending.emplace(w, run_window(origins[w]));
        for (auto it = pending.find(next); it != pending.end(); it = pending.find(next)) {
            add_window(origins[next], it->second);
            pending.erase(it);
            ++next;
        }
    }

    std::vector<T> out(classes * dims_numel(vol.dims));
    const std::size_t ovox = dims_numel(vol.dims);
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t x = 0; x < vx; ++x)
            for (std::size_t y = 0; y < vy; ++y)
                for (std::size_t z = 0; z < vz; ++z) {
                    const std::size_t g = (x * grid[1] + y) * grid[2] + z;
                    out[c * ovox + (x * vy + y) * vz + z] = acc[c * gvox + g] / static_cast<T>(count[g]);
                }
    return Tensor<T>::from_data({classes, vx, vy, vz}, std::move(out));
}

template <class T>
LabelMask decode_prediction(const Tensor<T>& probs, const Spacing3& spacing) {
    if (probs.rank() != 4 || probs.dim(0) != 4)
        throw DimensionError("decode_prediction expects [4,H,W,D], got " + shape_str(probs.shape()));
    LabelMask m;
    m.dims = {probs.dim(1), probs.dim(2), probs.dim(3)};
    m.spacing = spacing;
    const std::size_t vox = dims_numel(m.dims);
    m.labels.resize(vox);
    const auto p = probs.data();
    for (std::size_t i = 0; i < vox; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < 4; ++c)
            if (p[c * vox + i] > p[best * vox + i]) best = c;
        m.labels[i] = slot_to_label(best);
    }
    return m;
}

template SegmentationModel<float> unet_model(const UNetParams<float>&, const UNetConfig&);
template SegmentationModel<double> unet_model(const UNetParams<double>&, const UNetConfig&);
template Tensor<float> predict_volume(const Volume&, const SegmentationModel<float>&, const SlidingWindowConfig&,
                                      std::size_t, const std::vector<std::size_t>*);
template Tensor<double> predict_volume(const Volume&, const SegmentationModel<double>&, const SlidingWindowConfig&,
                                       std::size_t, const std::vector<std::size_t>*);
template LabelMask decode_prediction(const Tensor<float>&, const Spacing3&);
template LabelMask decode_prediction(const Tensor<double>&, const Spacing3&);

}  // namespace cotseg
