#include "cotseg/volume.hpp"

#include "cotseg/errors.hpp"

namespace cotseg {

std::string dims_str(const Dims3& d) {
    return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

void LabelMask::validate() const {
    if (labels.size() != dims_numel(dims))
        throw ValidationError("label mask of " + dims_str(dims) + " holds " + std::to_string(labels.size()) +
                              " values");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (!valid_label(labels[i]))
            throw ValidationError("label " + std::to_string(labels[i]) + " at voxel " + std::to_string(i) +
                                  " is outside {0,1,2,4}");
}

std::size_t BinaryMask::count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
}

}  // namespace cotseg
