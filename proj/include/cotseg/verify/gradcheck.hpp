#pragma once

// Central finite-difference gradient checking in 64-bit.
//
// The forward closure may return a tensor of any shape; it is reduced to a
// scalar with a fixed random projection L = sum(w * out). The numeric
// derivative is evaluated as sum(w * (out(x+h) - out(x-h))) / 2h, which
// subtracts matching outputs before summing and keeps cancellation error
// proportional to the perturbed outputs only.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cotseg/tensor.hpp"

namespace cotseg::verify {

struct GradCheckOptions {
    double step = 1e-5;
    /// 2: (f(x+h) - f(x-h)) / 2h. 4: the five-point central stencil at the
    /// same h, which cancels the h^2 truncation term for composed networks
    /// with large third derivatives.
    int order = 2;
    double tolerance = 1e-6;
    /// 0 checks every coordinate; otherwise a seeded sample of this many.
    std::size_t max_coords_per_tensor = 0;
    std::uint64_t seed = 17;
    /// Coordinates whose +-h perturbation flips a relu are not
    /// differentiable at that scale and are skipped; at most this fraction.
    double max_skip_fraction = 0.1;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst;  // "<tensor>[<index>]"
    double worst_analytic = 0.0, worst_numeric = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    bool passed = false;
};

/// |a-b| / max(|a|, |b|, 1e-8)
double relative_error(double a, double b);

using NamedTensor = std::pair<std::string, Tensor<double>>;

GradCheckReport check_gradients(const std::function<Tensor<double>()>& forward,
                                const std::vector<NamedTensor>& wrt, const GradCheckOptions& opts = {});

/// As check_gradients, but the perturbed evaluations run through an
/// extended-precision twin of the forward pass. For deep compositions with
/// thousands of outputs, double rounding in the outputs alone puts ~1e-10
/// of noise into a numeric derivative at h = 1e-5, which is larger than
/// 1e-6 of a small gradient. `extended_wrt[i]` must hold exactly the values
/// of `wrt[i]`; the analytic side stays in double.
GradCheckReport check_gradients_extended(const std::function<Tensor<double>()>& forward,
                                         const std::vector<NamedTensor>& wrt,
                                         const std::function<Tensor<long double>()>& extended_forward,
                                         const std::vector<Tensor<long double>>& extended_wrt,
                                         const GradCheckOptions& opts = {});

}  // namespace cotseg::verify
