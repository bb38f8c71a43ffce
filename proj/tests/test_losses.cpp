#include <cmath>

#include "cotseg/errors.hpp"
#include "cotseg/losses.hpp"
#include "cotseg/ops.hpp"
#include "cotseg/verify/gradcheck.hpp"
#include "cotseg/verify/oracles.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cotseg;
using testing::random_tensor;
using testing::to_vector;
using TensorD = Tensor<double>;

namespace {

// Random one-hot target with per-voxel class drawn uniformly.
TensorD random_onehot(Shape shape, Rng& rng) {
    const std::size_t batch = shape[0], classes = shape[1];
    const std::size_t vox = shape_numel(shape) / (batch * classes);
    std::vector<double> v(shape_numel(shape), 0.0);
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < vox; ++i) v[(n * classes + rng.below(classes)) * vox + i] = 1.0;
    return TensorD::from_data(std::move(shape), std::move(v));
}

TensorD random_simplex(Shape shape, Rng& rng, bool requires_grad = false) {
    NoGradGuard guard;
    auto p = softmax_channels(random_tensor(shape, rng, false, -2.0, 2.0));
    return TensorD::from_data(p.shape(), {p.data().begin(), p.data().end()}, requires_grad);
}

}  // namespace

TEST_CASE("cross entropy anchors") {
    Rng rng(1);
    const auto y = random_onehot({1, 4, 3, 3, 3}, rng);
    const auto uniform = TensorD::full(y.shape(), 0.25);
    CHECK(std::abs(cross_entropy_loss(uniform, y).item() - std::log(4.0)) < 1e-12);
    CHECK(cross_entropy_loss(uniform, y).item() == doctest::Approx(1.3862944).epsilon(1e-7));
    CHECK(cross_entropy_loss(y, y).item() <= 1e-10);
    CHECK(cross_entropy_loss(y, y).item() >= 0.0);
}

TEST_CASE("dice anchors") {
    Rng rng(2);
    const auto y = random_onehot({1, 4, 4, 4, 4}, rng);
    CHECK(dice_loss(y, y).item() <= 1e-4);
    CHECK(dice_loss(y, y).item() >= 0.0);

    // Target uses classes 0..2 only; prediction puts everything on class 3.
    std::vector<double> t(4 * 27, 0.0), p(4 * 27, 0.0);
    for (std::size_t v = 0; v < 27; ++v) {
        t[(v % 3) * 27 + v] = 1.0;
        p[3 * 27 + v] = 1.0;
    }
    const auto target = TensorD::from_data({1, 4, 3, 3, 3}, t);
    const auto pred = TensorD::from_data({1, 4, 3, 3, 3}, p);
    CHECK(dice_loss(pred, target).item() > 0.999);
    CHECK(dice_loss(pred, target).item() <= 1.0);
}

TEST_CASE("losses match the direct-formula oracles") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t batch = 1 + trial % 2;
        const auto y = random_onehot({batch, 4, 2, 2, 2}, rng);
        const auto p = random_simplex({batch, 4, 2, 2, 2}, rng);
        const double d = oracle::dice_loss(to_vector(p), to_vector(y), batch, 4, 1e-5);
        const double ce = oracle::cross_entropy(to_vector(p), to_vector(y), batch, 4);
        CHECK(std::abs(dice_loss(p, y).item() - d) < 1e-10);
        CHECK(std::abs(cross_entropy_loss(p, y).item() - ce) < 1e-10);
        const double dl = dice_loss(p, y).item();
        CHECK(dl >= 0.0);
        CHECK(dl <= 1.0);
    }
}

TEST_CASE("combined loss is the alpha mix") {
    Rng rng(4);
    const auto y = random_onehot({1, 4, 3, 4, 2}, rng);
    const auto p = random_simplex({1, 4, 3, 4, 2}, rng);
    const double d = dice_loss(p, y).item(), ce = cross_entropy_loss(p, y).item();
    LossConfig cfg;
    cfg.alpha = 1.0;
    const double f1 = combined_loss(p, y, cfg).item();
    CHECK(f1 == d);
    cfg.alpha = 0.0;
    const double f0 = combined_loss(p, y, cfg).item();
    CHECK(f0 == ce);
    cfg.alpha = 0.5;
    const double fh = combined_loss(p, y, cfg).item();
    CHECK(std::abs(fh - 0.5 * (d + ce)) < 1e-12);
    CHECK(std::abs(fh - 0.5 * (f0 + f1)) < 1e-9);
}

TEST_CASE("dice decreases along the path to the target") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto y = random_onehot({1, 4, 3, 3, 3}, rng);
        const auto p = random_simplex({1, 4, 3, 3, 3}, rng);
        double prev = 2.0;
        for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            std::vector<double> mix(p.numel());
            for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = (1 - t) * p.data()[i] + t * y.data()[i];
            const double v = dice_loss(TensorD::from_data(p.shape(), mix), y).item();
            CHECK(v < prev);
            prev = v;
        }
    }
}

TEST_CASE("loss gradients match finite differences") {
    Rng rng(6);
    const auto y = random_onehot({2, 4, 2, 3, 2}, rng);
    const auto p = random_simplex({2, 4, 2, 3, 2}, rng, true);
    auto y_grad = TensorD::from_data(y.shape(), {y.data().begin(), y.data().end()}, true);
    for (int which = 0; which < 3; ++which) {
        auto f = [&]() -> TensorD {
            if (which == 0) return dice_loss(p, y_grad);
            if (which == 1) return cross_entropy_loss(p, y_grad);
            return combined_loss(p, y_grad);
        };
        auto r = verify::check_gradients(f, {{"pred", p}, {"target", y_grad}});
        INFO("loss " << which << " worst " << r.worst << " rel " << r.max_rel_error);
        CHECK(r.passed);
    }
}

TEST_CASE("loss input validation") {
    Rng rng(7);
    const auto y = random_onehot({1, 4, 2, 2, 2}, rng);
    const auto p = random_simplex({1, 4, 2, 2, 2}, rng);
    CHECK_THROWS_AS(dice_loss(p, random_onehot({1, 4, 2, 2, 3}, rng)), DimensionError);
    CHECK_THROWS_AS(cross_entropy_loss(random_simplex({1, 3, 2, 2, 2}, rng), random_onehot({1, 3, 2, 2, 2}, rng)),
                    DimensionError);
    LossConfig strict;
    strict.check_targets = true;
    CHECK_NOTHROW(dice_loss(p, y, strict));
    CHECK_THROWS_AS(dice_loss(p, p, strict), ValidationError);
    CHECK_THROWS_AS(cross_entropy_loss(p, TensorD::zeros(y.shape()), strict), ValidationError);
    LossConfig bad;
    bad.alpha = 1.5;
    CHECK_THROWS_AS(combined_loss(p, y, bad), ParameterError);
    bad = {};
    bad.epsilon = 0.0;
    CHECK_THROWS_AS(dice_loss(p, y, bad), ParameterError);
}

TEST_CASE("single precision losses agree with double") {
    Rng rng(8);
    const auto y = random_onehot({1, 4, 4, 4, 4}, rng);
    const auto p = random_simplex({1, 4, 4, 4, 4}, rng);
    auto to_f = [](const TensorD& t) {
        return Tensor<float>::from_data(t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
    };
    CHECK(combined_loss(to_f(p), to_f(y)).item() == doctest::Approx(combined_loss(p, y).item()).epsilon(1e-5));
}
