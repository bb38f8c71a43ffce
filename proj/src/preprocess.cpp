#include "cotseg/preprocess.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "cotseg/errors.hpp"
#include "cotseg/nifti.hpp"
#include "cotseg/rng.hpp"

namespace cotseg {

namespace fs = std::filesystem;

std::string modality_name(Modality m) {
    static const char* names[] = {"Flair", "T1", "T1c", "T2"};
    return names[static_cast<int>(m)];
}

std::string modality_suffix(Modality m) {
    static const char* names[] = {"flair", "t1", "t1ce", "t2"};
    return names[static_cast<int>(m)];
}

Modality parse_modality(const std::string& s) {
    std::string lower;
    for (char c : s) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    for (int i = 0; i < 4; ++i) {
        const auto m = static_cast<Modality>(i);
        std::string name = modality_name(m);
        std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
        if (lower == name || lower == modality_suffix(m)) return m;
    }
    throw ParameterError("unknown modality '" + s + "' (expected Flair, T1, T1c or T2)");
}

void Volume::validate() const {
    for (std::size_t c = 0; c < kNumModalities; ++c)
        if (channels[c].size() != dims_numel(dims))
            throw ValidationError("case " + case_id + ": channel " + modality_name(static_cast<Modality>(c)) +
                                  " holds " + std::to_string(channels[c].size()) + " values for grid " +
                                  dims_str(dims));
}

namespace {

fs::path find_image(const fs::path& dir, const std::string& stem) {
    for (const char* ext : {".nii.gz", ".nii"}) {
        auto p = dir / (stem + ext);
        if (fs::exists(p)) return p;
    }
    return {};
}

}  // namespace

Case read_case(const fs::path& root, const std::string& case_id) {
    const fs::path dir = root / case_id;
    Case c;
    c.image.case_id = case_id;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        const std::string stem = case_id + "_" + modality_suffix(static_cast<Modality>(m));
        const auto path = find_image(dir, stem);
        if (path.empty()) throw ValidationError("case " + case_id + ": missing " + (dir / (stem + ".nii.gz")).string());
        auto vol = read_nifti(path);
        if (m == 0) {
            c.image.dims = vol.dims;
            c.image.spacing = vol.spacing;
        } else if (vol.dims != c.image.dims || vol.spacing != c.image.spacing) {
            throw ValidationError("case " + case_id + ": " + path.filename().string() +
                                  " is not aligned with the FLAIR grid");
        }
        c.image.channels[m] = std::move(vol.data);
    }
    const auto seg_path = find_image(dir, case_id + "_seg");
    if (!seg_path.empty()) {
        auto mask = to_label_mask(read_nifti(seg_path));
        if (mask.dims != c.image.dims)
            throw ValidationError("case " + case_id + ": segmentation grid " + dims_str(mask.dims) +
                                  " differs from image grid " + dims_str(c.image.dims));
        c.seg = std::move(mask);
    }
    return c;
}

void write_case(const fs::path& root, const Case& c) {
    c.image.validate();
    const fs::path dir = root / c.image.case_id;
    fs::create_directories(dir);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        NiftiVolume v;
        v.dims = c.image.dims;
        v.spacing = c.image.spacing;
        v.dtype = NiftiType::Float32;
        v.data = c.image.channels[m];
        for (auto& x : v.data) x = static_cast<double>(static_cast<float>(x));
        write_nifti(v, dir / (c.image.case_id + "_" + modality_suffix(static_cast<Modality>(m)) + ".nii.gz"));
    }
    if (c.seg) write_nifti(from_label_mask(*c.seg), dir / (c.image.case_id + "_seg.nii.gz"));
}

std::vector<std::string> list_cases(const fs::path& root) {
    std::vector<std::string> ids;
    if (!fs::is_directory(root)) return ids;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        const std::string id = entry.path().filename().string();
        if (!find_image(entry.path(), id + "_flair").empty()) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<double> zscore_normalize(const std::vector<double>& values) {
    double sum = 0.0;
    std::size_t n = 0;
    for (double v : values)
        if (v != 0.0) {
            sum += v;
            ++n;
        }
    std::vector<double> out(values.size(), 0.0);
    if (n == 0) return out;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (double v : values)
        if (v != 0.0) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (sd < 1e-8) return out;
    for (std::size_t i = 0; i < values.size(); ++i)
        if (values[i] != 0.0) out[i] = (values[i] - mean) / sd;
    return out;
}

Volume zscore_normalize(const Volume& vol) {
    Volume out = vol;
    for (auto& ch : out.channels) ch = zscore_normalize(ch);
    return out;
}

CropWindow plan_crop(const Dims3& source, const Dims3& target, CropMode mode, const BinaryMask* content,
                     std::uint64_t seed) {
    for (auto t : target)
        if (t == 0) throw ParameterError("crop target extents must be positive");
    CropWindow w{source, target, {0, 0, 0}};
    std::array<long, 3> lo{0, 0, 0}, hi{static_cast<long>(source[0]) - 1, static_cast<long>(source[1]) - 1,
                                         static_cast<long>(source[2]) - 1};
    if (mode == CropMode::Centered && content && content->count() > 0) {
        if (content->dims != source) throw DimensionError("crop: content mask grid differs from source");
        lo = {hi[0], hi[1], hi[2]};
        hi = {0, 0, 0};
        const std::size_t ny = source[1], nz = source[2];
        for (std::size_t i = 0; i < content->data.size(); ++i) {
            if (!content->data[i]) continue;
            const std::array<long, 3> p{static_cast<long>(i / (ny * nz)), static_cast<long>(i / nz % ny),
                                        static_cast<long>(i % nz)};
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], p[a]);
                hi[a] = std::max(hi[a], p[a]);
            }
        }
    }
    Rng rng(seed);
    for (int a = 0; a < 3; ++a) {
        const long s = static_cast<long>(source[a]), t = static_cast<long>(target[a]);
        const long min_off = std::min(0L, s - t), max_off = std::max(0L, s - t);
        long off;
        if (mode == CropMode::Centered) {
            // floor((lo + hi + 1 - t) / 2)
            const long twice = lo[a] + hi[a] + 1 - t;
            off = twice >= 0 ? twice / 2 : -((-twice + 1) / 2);
        } else {
            off = min_off + static_cast<long>(rng.below(static_cast<std::uint64_t>(max_off - min_off + 1)));
        }
        w.offset[a] = std::clamp(off, min_off, max_off);
    }
    return w;
}

template <class V>
std::vector<V> apply_crop(const std::vector<V>& values, const CropWindow& w) {
    if (values.size() != dims_numel(w.source))
        throw DimensionError("crop: " + std::to_string(values.size()) + " values for grid " + dims_str(w.source));
    std::vector<V> out(dims_numel(w.target), V{});
    const long sx = static_cast<long>(w.source[0]), sy = static_cast<long>(w.source[1]),
               sz = static_cast<long>(w.source[2]);
    for (std::size_t x = 0; x < w.target[0]; ++x) {
        const long ix = static_cast<long>(x) + w.offset[0];
        if (ix < 0 || ix >= sx) continue;
        for (std::size_t y = 0; y < w.target[1]; ++y) {
            const long iy = static_cast<long>(y) + w.offset[1];
            if (iy < 0 || iy >= sy) continue;
            for (std::size_t z = 0; z < w.target[2]; ++z) {
                const long iz = static_cast<long>(z) + w.offset[2];
                if (iz < 0 || iz >= sz) continue;
                out[(x * w.target[1] + y) * w.target[2] + z] = values[static_cast<std::size_t>((ix * sy + iy) * sz + iz)];
            }
        }
    }
    return out;
}

template std::vector<double> apply_crop(const std::vector<double>&, const CropWindow&);
template std::vector<float> apply_crop(const std::vector<float>&, const CropWindow&);
template std::vector<std::uint8_t> apply_crop(const std::vector<std::uint8_t>&, const CropWindow&);

Volume apply_crop(const Volume& vol, const CropWindow& w) {
    Volume out;
    out.case_id = vol.case_id;
    out.dims = w.target;
    out.spacing = vol.spacing;
    for (std::size_t c = 0; c < kNumModalities; ++c) out.channels[c] = apply_crop(vol.channels[c], w);
    return out;
}

LabelMask apply_crop(const LabelMask& mask, const CropWindow& w) {
    return {w.target, mask.spacing, apply_crop(mask.labels, w)};
}

BinaryMask nonzero_support(const Volume& vol) {
    BinaryMask m{vol.dims, std::vector<std::uint8_t>(dims_numel(vol.dims), 0)};
    for (const auto& ch : vol.channels)
        for (std::size_t i = 0; i < ch.size(); ++i) m.data[i] = m.data[i] || ch[i] != 0.0;
    return m;
}

Case crop_or_pad(const Case& c, const Dims3& target, CropMode mode, std::uint64_t seed) {
    const auto support = nonzero_support(c.image);
    const auto w = plan_crop(c.image.dims, target, mode, &support, seed);
    Case out;
    out.image = apply_crop(c.image, w);
    if (c.seg) out.seg = apply_crop(*c.seg, w);
    return out;
}

std::size_t label_to_slot(std::uint8_t label) {
    switch (label) {
        case 0: return 0;
        case 1: return 1;
        case 2: return 2;
        case 4: return 3;
        default: throw ValidationError("label " + std::to_string(label) + " is outside {0,1,2,4}");
    }
}

std::uint8_t slot_to_label(std::size_t slot) {
    static const std::uint8_t labels[] = {0, 1, 2, 4};
    if (slot > 3) throw ValidationError("class slot " + std::to_string(slot) + " is outside 0..3");
    return labels[slot];
}

template <class T>
Tensor<T> one_hot_labels(const LabelMask& mask) {
    const std::size_t vox = dims_numel(mask.dims);
    if (mask.labels.size() != vox) throw DimensionError("one_hot_labels: mask size disagrees with dims");
    std::vector<T> data(4 * vox, T(0));
    for (std::size_t i = 0; i < vox; ++i) data[label_to_slot(mask.labels[i]) * vox + i] = T(1);
    return Tensor<T>::from_data({4, mask.dims[0], mask.dims[1], mask.dims[2]}, std::move(data));
}

template <class T>
Tensor<T> volume_tensor(const Volume& vol) {
    vol.validate();
    const std::size_t vox = dims_numel(vol.dims);
    std::vector<T> data(kNumModalities * vox);
    for (std::size_t c = 0; c < kNumModalities; ++c)
        for (std::size_t i = 0; i < vox; ++i) data[c * vox + i] = static_cast<T>(vol.channels[c][i]);
    return Tensor<T>::from_data({kNumModalities, vol.dims[0], vol.dims[1], vol.dims[2]}, std::move(data));
}

template <class T>
Tensor<T> with_batch(const Tensor<T>& t) {
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return Tensor<T>::from_data(std::move(s), {t.data().begin(), t.data().end()});
}

template <class T>
Tensor<T> without_batch(const Tensor<T>& t) {
    if (t.rank() < 1 || t.dim(0) != 1) throw DimensionError("without_batch: leading extent is not 1");
    return Tensor<T>::from_data(Shape(t.shape().begin() + 1, t.shape().end()), {t.data().begin(), t.data().end()});
}

template Tensor<float> one_hot_labels<float>(const LabelMask&);
template Tensor<double> one_hot_labels<double>(const LabelMask&);
template Tensor<float> volume_tensor<float>(const Volume&);
template Tensor<double> volume_tensor<double>(const Volume&);
template Tensor<float> with_batch(const Tensor<float>&);
template Tensor<double> with_batch(const Tensor<double>&);
template Tensor<float> without_batch(const Tensor<float>&);
template Tensor<double> without_batch(const Tensor<double>&);

Volume mask_modalities(const Volume& vol, const ModalitySet& keep) {
    if (std::none_of(keep.begin(), keep.end(), [](bool b) { return b; }))
        throw ParameterError("mask_modalities: at least one modality must be kept");
    Volume out = vol;
    for (std::size_t c = 0; c < kNumModalities; ++c)
        if (!keep[c]) std::fill(out.channels[c].begin(), out.channels[c].end(), 0.0);
    return out;
}

std::string keep_set_tag(const ModalitySet& keep) {
    std::string tag;
    for (std::size_t c = 0; c < kNumModalities; ++c)
        if (keep[c]) tag += (tag.empty() ? "" : ",") + modality_name(static_cast<Modality>(c));
    return tag;
}

std::vector<std::vector<std::string>> split_folds(const std::vector<std::string>& ids, std::size_t k,
                                                  std::uint64_t seed) {
    if (k < 2) throw ParameterError("split_folds: k must be >= 2");
    if (k > ids.size())
        throw ParameterError("split_folds: k = " + std::to_string(k) + " exceeds " + std::to_string(ids.size()) +
                             " cases");
    std::vector<std::string> order = ids;
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<std::vector<std::string>> folds(k);
    for (std::size_t i = 0; i < order.size(); ++i) folds[i % k].push_back(order[i]);
    return folds;
}

}  // namespace cotseg
