#include "cotseg/kernels.hpp"

#include <array>

namespace cotseg::kernels::scalar {
namespace {

template <class T>
void axpy(T* dst, const T* src, T a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

template <class T>
void mul_acc(T* dst, const T* a, const T* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

template <class T>
void mul(T* dst, const T* a, const T* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

template <class T>
void add(T* dst, const T* a, const T* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

template <class T>
void relu(T* dst, const T* src, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
}

template <class T>
void relu_backward(T* dst, const T* grad, const T* src, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i] > T(0) ? grad[i] : T(0);
}

template <class T>
T combine(const std::array<T, kReductionLanes>& acc) {
    T s = acc[0];
    for (std::size_t j = 1; j < kReductionLanes; ++j) s += acc[j];
    return s;
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
    std::array<T, kReductionLanes> acc{};
    std::size_t i = 0;
    for (; i + kReductionLanes <= n; i += kReductionLanes)
        for (std::size_t j = 0; j < kReductionLanes; ++j) acc[j] += a[i + j] * b[i + j];
    T s = combine(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
T sum(const T* a, std::size_t n) {
    std::array<T, kReductionLanes> acc{};
    std::size_t i = 0;
    for (; i + kReductionLanes <= n; i += kReductionLanes)
        for (std::size_t j = 0; j < kReductionLanes; ++j) acc[j] += a[i + j];
    T s = combine(acc);
    for (; i < n; ++i) s += a[i];
    return s;
}

template <class T>
const KernelTable<T> kTable{Backend::Scalar, &axpy<T>, &mul_acc<T>, &mul<T>, &add<T>,
                            &relu<T>, &relu_backward<T>, &dot<T>, &sum<T>};

}  // namespace

template <class T>
const KernelTable<T>& get() {
    return kTable<T>;
}

template const KernelTable<float>& get<float>();
template const KernelTable<double>& get<double>();
template const KernelTable<long double>& get<long double>();

}  // namespace cotseg::kernels::scalar
