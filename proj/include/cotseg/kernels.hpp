#pragma once

// Data-parallel inner loops shared by every tensor operation.
//
// Each kernel has a portable scalar reference and, where the CPU allows, an
// AVX2 variant chosen at runtime. Variants are bit-identical to the scalar
// reference: elementwise kernels never fuse multiply-add, and reductions
// use a fixed 8-lane blocked order that the scalar code reproduces exactly.

#include <cstddef>
#include <string_view>

namespace cotseg::kernels {

enum class Backend { Scalar, Avx2 };

/// Number of interleaved partial sums in the canonical reduction order.
inline constexpr std::size_t kReductionLanes = 8;

template <class T>
struct KernelTable {
    Backend backend;
    /// dst[i] += a * src[i]
    void (*axpy)(T* dst, const T* src, T a, std::size_t n);
    /// dst[i] += a[i] * b[i]
    void (*mul_acc)(T* dst, const T* a, const T* b, std::size_t n);
    /// dst[i] = a[i] * b[i]
    void (*mul)(T* dst, const T* a, const T* b, std::size_t n);
    /// dst[i] = a[i] + b[i]
    void (*add)(T* dst, const T* a, const T* b, std::size_t n);
    /// dst[i] = max(src[i], 0)
    void (*relu)(T* dst, const T* src, std::size_t n);
    /// dst[i] += src[i] > 0 ? grad[i] : 0
    void (*relu_backward)(T* dst, const T* grad, const T* src, std::size_t n);
    /// sum_i a[i] * b[i], canonical lane-blocked order
    T (*dot)(const T* a, const T* b, std::size_t n);
    /// sum_i a[i], canonical lane-blocked order
    T (*sum)(const T* a, std::size_t n);
};

bool backend_available(Backend b);

/// Backend used by table<T>(). Initialised from the COTSEG_SIMD environment
/// variable ("scalar" or "avx2") or else the best the CPU supports.
Backend active_backend();

/// Throws ParameterError if the backend is not available on this CPU.
void set_backend(Backend b);

std::string_view backend_name(Backend b);

template <class T>
const KernelTable<T>& table_for(Backend b);

template <class T>
const KernelTable<T>& table() {
    return table_for<T>(active_backend());
}

// Per-backend entry points; used by the dispatcher and by equivalence tests.
namespace scalar {
template <class T>
const KernelTable<T>& get();
}
namespace avx2 {
bool compiled();
template <class T>
const KernelTable<T>& get();
}  // namespace avx2

}  // namespace cotseg::kernels
