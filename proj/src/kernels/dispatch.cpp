#include <atomic>
#include <cstdlib>
#include <string>
#include <type_traits>

#include "cotseg/errors.hpp"
#include "cotseg/kernels.hpp"

namespace cotseg::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

Backend initial_backend() {
    if (const char* env = std::getenv("COTSEG_SIMD")) {
        const std::string v = env;
        if (v == "scalar") return Backend::Scalar;
        if (v == "avx2" && backend_available(Backend::Avx2)) return Backend::Avx2;
    }
    return backend_available(Backend::Avx2) ? Backend::Avx2 : Backend::Scalar;
}

std::atomic<Backend>& current() {
    static std::atomic<Backend> b{initial_backend()};
    return b;
}

}  // namespace

bool backend_available(Backend b) {
    switch (b) {
        case Backend::Scalar: return true;
        case Backend::Avx2: return avx2::compiled() && cpu_has_avx2();
    }
    return false;
}

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
    if (!backend_available(b))
        throw ParameterError("kernel backend " + std::string(backend_name(b)) + " is not available");
    current().store(b, std::memory_order_relaxed);
}

std::string_view backend_name(Backend b) {
    switch (b) {
        case Backend::Scalar: return "scalar";
        case Backend::Avx2: return "avx2";
    }
    return "unknown";
}

template <class T>
const KernelTable<T>& table_for(Backend b) {
    if constexpr (std::is_same_v<T, long double>) return scalar::get<T>();
    if (b == Backend::Avx2) {
        if (!backend_available(b)) throw ParameterError("kernel backend avx2 is not available");
        return avx2::get<T>();
    }
    return scalar::get<T>();
}

template const KernelTable<float>& table_for<float>(Backend);
template const KernelTable<double>& table_for<double>(Backend);
// Extended precision is only used by verification code; no SIMD variant.
template const KernelTable<long double>& table_for<long double>(Backend);

}  // namespace cotseg::kernels
