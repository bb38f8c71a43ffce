// Compiled with -mavx2 only (no FMA) so every lane rounds exactly like the
// scalar reference. Nothing here may run before the dispatcher has checked
// the CPU.
#include "cotseg/kernels.hpp"

#if defined(__x86_64__) && defined(__AVX2__)
#define COTSEG_HAVE_AVX2 1
#include <immintrin.h>
#include <array>
#else
#define COTSEG_HAVE_AVX2 0
#endif

#include "cotseg/errors.hpp"

namespace cotseg::kernels::avx2 {

#if COTSEG_HAVE_AVX2
namespace {

template <class T>
struct Vec;

template <>
struct Vec<double> {
    using reg = __m256d;
    static constexpr std::size_t width = 4;
    static reg load(const double* p) { return _mm256_loadu_pd(p); }
    static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
    static reg set1(double v) { return _mm256_set1_pd(v); }
    static reg zero() { return _mm256_setzero_pd(); }
    static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
    static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
    static reg max(reg a, reg b) { return _mm256_max_pd(a, b); }
    static reg gt_mask_and(reg src, reg g) {
        return _mm256_and_pd(_mm256_cmp_pd(src, zero(), _CMP_GT_OQ), g);
    }
};

template <>
struct Vec<float> {
    using reg = __m256;
    static constexpr std::size_t width = 8;
    static reg load(const float* p) { return _mm256_loadu_ps(p); }
    static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
    static reg set1(float v) { return _mm256_set1_ps(v); }
    static reg zero() { return _mm256_setzero_ps(); }
    static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
    static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
    static reg max(reg a, reg b) { return _mm256_max_ps(a, b); }
    static reg gt_mask_and(reg src, reg g) {
        return _mm256_and_ps(_mm256_cmp_ps(src, zero(), _CMP_GT_OQ), g);
    }
};

// Registers needed to hold kReductionLanes partial sums.
template <class T>
constexpr std::size_t kRegs = kReductionLanes / Vec<T>::width;

template <class T>
void axpy(T* dst, const T* src, T a, std::size_t n) {
    using V = Vec<T>;
    const auto va = V::set1(a);
    std::size_t i = 0;
    for (; i + 2 * V::width <= n; i += 2 * V::width) {
        V::store(dst + i, V::add(V::load(dst + i), V::mul(va, V::load(src + i))));
        V::store(dst + i + V::width,
                 V::add(V::load(dst + i + V::width), V::mul(va, V::load(src + i + V::width))));
    }
    for (; i + V::width <= n; i += V::width)
        V::store(dst + i, V::add(V::load(dst + i), V::mul(va, V::load(src + i))));
    for (; i < n; ++i) dst[i] += a * src[i];
}

template <class T>
void mul_acc(T* dst, const T* a, const T* b, std::size_t n) {
    using V = Vec<T>;
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width)
        V::store(dst + i, V::add(V::load(dst + i), V::mul(V::load(a + i), V::load(b + i))));
    for (; i < n; ++i) dst[i] += a[i] * b[i];
}

template <class T>
void mul(T* dst, const T* a, const T* b, std::size_t n) {
    using V = Vec<T>;
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width)
        V::store(dst + i, V::mul(V::load(a + i), V::load(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

template <class T>
void add(T* dst, const T* a, const T* b, std::size_t n) {
    using V = Vec<T>;
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width)
        V::store(dst + i, V::add(V::load(a + i), V::load(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

template <class T>
void relu(T* dst, const T* src, std::size_t n) {
    using V = Vec<T>;
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width)
        V::store(dst + i, V::max(V::load(src + i), V::zero()));
    for (; i < n; ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
}

template <class T>
void relu_backward(T* dst, const T* grad, const T* src, std::size_t n) {
    using V = Vec<T>;
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width)
        V::store(dst + i,
                 V::add(V::load(dst + i), V::gt_mask_and(V::load(src + i), V::load(grad + i))));
    for (; i < n; ++i) dst[i] += src[i] > T(0) ? grad[i] : T(0);
}

template <class T>
T combine(const typename Vec<T>::reg (&acc)[kRegs<T>]) {
    std::array<T, kReductionLanes> lanes;
    for (std::size_t r = 0; r < kRegs<T>; ++r) Vec<T>::store(lanes.data() + r * Vec<T>::width, acc[r]);
    T s = lanes[0];
    for (std::size_t j = 1; j < kReductionLanes; ++j) s += lanes[j];
    return s;
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
    using V = Vec<T>;
    typename V::reg acc[kRegs<T>];
    for (auto& r : acc) r = V::zero();
    std::size_t i = 0;
    for (; i + kReductionLanes <= n; i += kReductionLanes)
        for (std::size_t r = 0; r < kRegs<T>; ++r) {
            const std::size_t o = i + r * V::width;
            acc[r] = V::add(acc[r], V::mul(V::load(a + o), V::load(b + o)));
        }
    T s = combine<T>(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
T sum(const T* a, std::size_t n) {
    using V = Vec<T>;
    typename V::reg acc[kRegs<T>];
    for (auto& r : acc) r = V::zero();
    std::size_t i = 0;
    for (; i + kReductionLanes <= n; i += kReductionLanes)
        for (std::size_t r = 0; r < kRegs<T>; ++r)
            acc[r] = V::add(acc[r], V::load(a + i + r * V::width));
    T s = combine<T>(acc);
    for (; i < n; ++i) s += a[i];
    return s;
}

template <class T>
const KernelTable<T> kTable{Backend::Avx2, &axpy<T>, &mul_acc<T>, &mul<T>, &add<T>,
                            &relu<T>, &relu_backward<T>, &dot<T>, &sum<T>};

}  // namespace

bool compiled() { return true; }

template <class T>
const KernelTable<T>& get() {
    return kTable<T>;
}

#else

bool compiled() { return false; }

template <class T>
const KernelTable<T>& get() {
    throw ParameterError("AVX2 kernels were not compiled into this build");
}

#endif

template const KernelTable<float>& get<float>();
template const KernelTable<double>& get<double>();

}  // namespace cotseg::kernels::avx2
