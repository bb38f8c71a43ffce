#include <doctest.h>

#include <algorithm>
#include <cstring>

#include "cotseg/errors.hpp"
#include "cotseg/inference.hpp"
#include "cotseg/ops.hpp"
#include "cotseg/rng.hpp"
#include "cotseg/verify/oracles.hpp"

using namespace cotseg;

namespace {

Volume random_volume(const Dims3& dims, Rng& rng) {
    Volume v;
    v.case_id = "v";
    v.dims = dims;
    for (auto& ch : v.channels) {
        ch.resize(dims_numel(dims));
        for (auto& x : ch) x = rng.normal();
    }
    return v;
}

UNetConfig tiny_net() {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.cot_placement = {0, 1};
    return cfg;
}

}  // namespace

TEST_CASE("window starts follow the stride rule") {
    CHECK(window_starts(12, 8, 0.5) == std::vector<std::size_t>{0, 4});
    CHECK(window_starts(16, 8, 0.5) == std::vector<std::size_t>{0, 4, 8});
    CHECK(window_starts(17, 8, 0.5) == std::vector<std::size_t>{0, 4, 8, 9});
    CHECK(window_starts(8, 8, 0.5) == std::vector<std::size_t>{0});
    CHECK(window_starts(5, 8, 0.5) == std::vector<std::size_t>{0});
    CHECK(window_starts(20, 8, 0.0) == std::vector<std::size_t>{0, 8, 12});
    CHECK(window_starts(10, 4, 0.9) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
}

TEST_CASE("coverage matches the brute-force oracle") {
    const SlidingWindowConfig half{{8, 8, 8}, 0.5};
    const auto cov = coverage_counts({12, 12, 12}, half);
    CHECK(cov == oracle::window_coverage({12, 12, 12}, {8, 8, 8}, 0.5));
    CHECK(*std::min_element(cov.begin(), cov.end()) == 1);
    CHECK(*std::max_element(cov.begin(), cov.end()) == 8);

    Rng rng(31);
    for (int rep = 0; rep < 200; ++rep) {
        const Dims3 patch{1 + rng.below(10), 1 + rng.below(10), 1 + rng.below(10)};
        const Dims3 dims{patch[0] + rng.below(20), patch[1] + rng.below(20), patch[2] + rng.below(20)};
        const double overlap = static_cast<double>(rng.below(10)) / 10.0;
        const auto c = coverage_counts(dims, {patch, overlap});
        CHECK(c == oracle::window_coverage(dims, patch, overlap));
        CHECK(*std::min_element(c.begin(), c.end()) >= 1);
    }
}

TEST_CASE("single window equals a direct forward pass bit for bit") {
    const auto cfg = tiny_net();
    const auto params = init_unet_params<double>(cfg, 7);
    Rng rng(1);
    const auto vol = random_volume({8, 8, 8}, rng);
    const auto probs = predict_volume<double>(vol, unet_model(params, cfg), {{8, 8, 8}, 0.5}, cfg.spatial_multiple());
    const auto x = with_batch(volume_tensor<double>(vol));
    const auto direct = without_batch(softmax_channels(unet_forward(x, params, cfg)));
    REQUIRE(probs.shape() == direct.shape());
    CHECK(std::memcmp(probs.data().data(), direct.data().data(), probs.numel() * sizeof(double)) == 0);
}

TEST_CASE("undersized volumes are padded and cropped back") {
    const auto cfg = tiny_net();
    const auto params = init_unet_params<double>(cfg, 9);
    Rng rng(2);
    const auto vol = random_volume({5, 8, 3}, rng);
    const auto probs = predict_volume<double>(vol, unet_model(params, cfg), {{8, 8, 8}, 0.5}, cfg.spatial_multiple());
    CHECK(probs.shape() == Shape{4, 5, 8, 3});
    const auto padded = apply_crop(vol, CropWindow{vol.dims, {8, 8, 8}, {0, 0, 0}});
    const auto direct =
        without_batch(softmax_channels(unet_forward(with_batch(volume_tensor<double>(padded)), params, cfg)));
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t x = 0; x < 5; ++x)
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t z = 0; z < 3; ++z) CHECK(probs.at({c, x, y, z}) == direct.at({c, x, y, z}));
}

TEST_CASE("uniform model averages to 0.25") {
    const SegmentationModel<double> flat = [](const Tensor<double>& x) {
        return Tensor<double>::zeros({1, 4, x.dim(2), x.dim(3), x.dim(4)});
    };
    Rng rng(3);
    const auto vol = random_volume({13, 9, 17}, rng);
    const auto probs = predict_volume<double>(vol, flat, {{4, 4, 4}, 0.5});
    for (double p : probs.data()) CHECK(p == 0.25);
}

TEST_CASE("aggregation is independent of window visit order") {
    const auto cfg = tiny_net();
    const auto params = init_unet_params<double>(cfg, 4);
    Rng rng(5);
    const auto vol = random_volume({12, 10, 8}, rng);
    const SlidingWindowConfig sw{{8, 8, 4}, 0.5};
    const auto model = unet_model(params, cfg);
    const auto canonical = predict_volume<double>(vol, model, sw, cfg.spatial_multiple());
    const std::size_t n = window_origins(vol.dims, sw).size();
    REQUIRE(n > 4);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = n - 1 - i;
    const auto reversed = predict_volume<double>(vol, model, sw, cfg.spatial_multiple(), &order);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const auto shuffled = predict_volume<double>(vol, model, sw, cfg.spatial_multiple(), &order);
    CHECK(std::memcmp(canonical.data().data(), reversed.data().data(), canonical.numel() * sizeof(double)) == 0);
    CHECK(std::memcmp(canonical.data().data(), shuffled.data().data(), canonical.numel() * sizeof(double)) == 0);

    const std::size_t vox = dims_numel(vol.dims);
    for (std::size_t i = 0; i < vox; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < 4; ++c) s += canonical.data()[c * vox + i];
        CHECK(std::abs(s - 1.0) < 1e-5);
    }
    std::vector<std::size_t> bad(n, 0);
    CHECK_THROWS_AS(predict_volume<double>(vol, model, sw, cfg.spatial_multiple(), &bad), ParameterError);
}

TEST_CASE("windowed mean matches an independent recomputation") {
    const auto cfg = tiny_net();
    const auto params = init_unet_params<double>(cfg, 12);
    Rng rng(6);
    const auto vol = random_volume({12, 6, 6}, rng);
    const SlidingWindowConfig sw{{8, 4, 4}, 0.5};
    const auto probs = predict_volume<double>(vol, unet_model(params, cfg), sw, cfg.spatial_multiple());
    // Starts: x {0,4}, y {0,2}, z {0,2}.
    std::vector<double> sum(4 * 12 * 6 * 6, 0.0);
    std::vector<int> cnt(12 * 6 * 6, 0);
    for (std::size_t ox : {0, 4})
        for (std::size_t oy : {0, 2})
            for (std::size_t oz : {0, 2}) {
                const auto patch = apply_crop(vol, CropWindow{vol.dims, {8, 4, 4}, {long(ox), long(oy), long(oz)}});
                const auto p =
                    without_batch(softmax_channels(unet_forward(with_batch(volume_tensor<double>(patch)), params, cfg)));
                for (std::size_t x = 0; x < 8; ++x)
                    for (std::size_t y = 0; y < 4; ++y)
                        for (std::size_t z = 0; z < 4; ++z) {
                            const std::size_t g = ((ox + x) * 6 + oy + y) * 6 + oz + z;
                            ++cnt[g];
                            for (std::size_t c = 0; c < 4; ++c) sum[c * 432 + g] += p.at({c, x, y, z});
                        }
            }
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t g = 0; g < 432; ++g) CHECK(probs.data()[c * 432 + g] == doctest::Approx(sum[c * 432 + g] / cnt[g]).epsilon(1e-12));
}

TEST_CASE("configuration errors") {
    const auto cfg = tiny_net();
    const auto params = init_unet_params<double>(cfg, 1);
    Rng rng(7);
    const auto vol = random_volume({8, 8, 8}, rng);
    CHECK_THROWS_AS(predict_volume<double>(vol, unet_model(params, cfg), {{7, 8, 8}, 0.5}, 2), ParameterError);
    CHECK_THROWS_AS(predict_volume<double>(vol, unet_model(params, cfg), {{8, 8, 8}, 1.0}, 2), ParameterError);
    CHECK_THROWS_AS(predict_volume<double>(vol, unet_model(params, cfg), {{8, 8, 8}, -0.1}, 2), ParameterError);
}

TEST_CASE("decode_prediction") {
    std::vector<double> d(4 * 3, 0.0);
    // voxel 0: channel 3 dominant; voxel 1: exact tie; voxel 2: tie between 1 and 2.
    d[0 * 3 + 0] = 0.1; d[1 * 3 + 0] = 0.2; d[2 * 3 + 0] = 0.1; d[3 * 3 + 0] = 0.6;
    for (std::size_t c = 0; c < 4; ++c) d[c * 3 + 1] = 0.25;
    d[0 * 3 + 2] = 0.1; d[1 * 3 + 2] = 0.4; d[2 * 3 + 2] = 0.4; d[3 * 3 + 2] = 0.1;
    const auto m = decode_prediction(Tensor<double>::from_data({4, 1, 1, 3}, d), {1, 2, 3});
    CHECK(m.labels == std::vector<std::uint8_t>{4, 0, 1});
    CHECK(m.spacing == Spacing3{1, 2, 3});

    Rng rng(8);
    const std::uint8_t vocab[] = {0, 1, 2, 4};
    LabelMask mask{{6, 5, 4}, {1, 1, 1}, std::vector<std::uint8_t>(120)};
    for (auto& l : mask.labels) l = vocab[rng.below(4)];
    const auto once = one_hot_labels<float>(mask);
    const auto decoded = decode_prediction(once);
    CHECK(decoded.labels == mask.labels);
    const auto twice = one_hot_labels<float>(decoded);
    CHECK(std::equal(once.data().begin(), once.data().end(), twice.data().begin()));
    CHECK_THROWS_AS(decode_prediction(Tensor<double>::zeros({3, 2, 2, 2})), DimensionError);
}

TEST_CASE("float and double predictions agree") {
    const auto cfg = tiny_net();
    const auto pd = init_unet_params<double>(cfg, 3);
    auto pf = init_unet_params<float>(cfg, 0);
    pf.assign_from(pd);
    Rng rng(9);
    const auto vol = random_volume({8, 12, 8}, rng);
    const SlidingWindowConfig sw{{8, 8, 8}, 0.5};
    const auto a = predict_volume<double>(vol, unet_model(pd, cfg), sw, 2);
    const auto b = predict_volume<float>(vol, unet_model(pf, cfg), sw, 2);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-4);
}
