// Scalar reference vs SIMD variants: every kernel must agree bit-for-bit.
#include <cstring>

#include "cotseg/errors.hpp"
#include "cotseg/kernels.hpp"
#include "cotseg/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cotseg;
using kernels::Backend;

namespace {

template <class T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <class T>
std::vector<T> draw(std::size_t n, Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-2.0, 2.0));
    // Exercise the relu boundary including signed zero.
    if (n > 3) {
        v[1] = T(0);
        v[2] = -T(0);
    }
    return v;
}

template <class T>
void check_equivalence() {
    const auto& ref = kernels::scalar::get<T>();
    const auto& simd = kernels::table_for<T>(Backend::Avx2);
    Rng rng(99);
    for (std::size_t n : {0u, 1u, 3u, 7u, 8u, 9u, 15u, 16u, 17u, 31u, 64u, 100u, 1023u}) {
        const auto a = draw<T>(n, rng), b = draw<T>(n, rng), d0 = draw<T>(n, rng);
        const T alpha = static_cast<T>(rng.uniform(-1.5, 1.5));

        auto r1 = d0, s1 = d0;
        ref.axpy(r1.data(), a.data(), alpha, n);
        simd.axpy(s1.data(), a.data(), alpha, n);
        CHECK(bitwise_equal(r1, s1));

        auto r2 = d0, s2 = d0;
        ref.mul_acc(r2.data(), a.data(), b.data(), n);
        simd.mul_acc(s2.data(), a.data(), b.data(), n);
        CHECK(bitwise_equal(r2, s2));

        std::vector<T> r3(n), s3(n);
        ref.mul(r3.data(), a.data(), b.data(), n);
        simd.mul(s3.data(), a.data(), b.data(), n);
        CHECK(bitwise_equal(r3, s3));
        ref.add(r3.data(), a.data(), b.data(), n);
        simd.add(s3.data(), a.data(), b.data(), n);
        CHECK(bitwise_equal(r3, s3));
        ref.relu(r3.data(), a.data(), n);
        simd.relu(s3.data(), a.data(), n);
        CHECK(bitwise_equal(r3, s3));

        auto r4 = d0, s4 = d0;
        ref.relu_backward(r4.data(), b.data(), a.data(), n);
        simd.relu_backward(s4.data(), b.data(), a.data(), n);
        CHECK(bitwise_equal(r4, s4));

        const T rd = ref.dot(a.data(), b.data(), n), sd = simd.dot(a.data(), b.data(), n);
        CHECK(std::memcmp(&rd, &sd, sizeof(T)) == 0);
        const T rs = ref.sum(a.data(), n), ss = simd.sum(a.data(), n);
        CHECK(std::memcmp(&rs, &ss, sizeof(T)) == 0);
    }
}

struct BackendScope {
    explicit BackendScope(Backend b) : saved(kernels::active_backend()) { kernels::set_backend(b); }
    ~BackendScope() { kernels::set_backend(saved); }
    Backend saved;
};

}  // namespace

TEST_CASE("scalar backend is always available") {
    CHECK(kernels::backend_available(Backend::Scalar));
    CHECK(kernels::backend_name(Backend::Scalar) == "scalar");
}

TEST_CASE("avx2 kernels are bit-identical to the scalar reference") {
    if (!kernels::backend_available(Backend::Avx2)) {
        MESSAGE("AVX2 unavailable on this CPU; skipping");
        return;
    }
    check_equivalence<double>();
    check_equivalence<float>();
}

TEST_CASE("conv3d forward and backward agree bit-for-bit across backends") {
    if (!kernels::backend_available(Backend::Avx2)) return;
    Rng rng(5);
    const auto x0 = testing::random_tensor({1, 3, 6, 5, 9}, rng);
    const auto w0 = testing::random_tensor({4, 3, 3, 3, 3}, rng);
    const auto b0 = testing::random_tensor({4}, rng);
    for (int stride : {1, 2}) {
        std::vector<std::vector<double>> results;
        for (Backend be : {Backend::Scalar, Backend::Avx2}) {
            BackendScope scope(be);
            auto x = x0.detach(), w = w0.detach(), b = b0.detach();
            x.set_requires_grad(true);
            w.set_requires_grad(true);
            b.set_requires_grad(true);
            auto y = conv3d(x, w, b, {stride, 1});
            std::vector<double> all(y.data().begin(), y.data().end());
            Rng proj_rng(1234);
            auto proj = testing::random_tensor(y.shape(), proj_rng);
            sum(mul(y, proj)).backward();
            for (auto* t : {&x, &w, &b}) all.insert(all.end(), t->grad().begin(), t->grad().end());
            results.push_back(std::move(all));
        }
        CHECK(bitwise_equal(results[0], results[1]));
    }
}

TEST_CASE("set_backend rejects unavailable backends") {
    if (kernels::backend_available(Backend::Avx2)) return;
    CHECK_THROWS_AS(kernels::set_backend(Backend::Avx2), ParameterError);
}
