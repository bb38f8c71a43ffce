#pragma once

#include <vector>

#include "cotseg/rng.hpp"
#include "cotseg/tensor.hpp"

namespace cotseg::testing {

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

template <class T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from_data(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vector(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace cotseg::testing
