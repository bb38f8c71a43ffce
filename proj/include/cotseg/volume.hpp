#pragma once

// Grid types shared by I/O, metrics and inference. Voxel (x, y, z) lives at
// (x * ny + y) * nz + z, matching the H, W, D axes of network tensors.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace cotseg {

using Dims3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

inline std::size_t dims_numel(const Dims3& d) { return d[0] * d[1] * d[2]; }
std::string dims_str(const Dims3& d);

/// Segmentation labels from the vocabulary {0, 1, 2, 4}.
struct LabelMask {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> labels;

    static bool valid_label(long v) { return v == 0 || v == 1 || v == 2 || v == 4; }
    /// Throws ValidationError on an out-of-vocabulary value or size mismatch.
    void validate() const;
};

struct BinaryMask {
    Dims3 dims{0, 0, 0};
    std::vector<std::uint8_t> data;  // 0 or 1

    std::size_t count() const;
};

}  // namespace cotseg
