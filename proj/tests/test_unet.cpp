#include <numeric>

#include "cotseg/errors.hpp"
#include "cotseg/ops.hpp"
#include "cotseg/unet.hpp"
#include "cotseg/verify/gradcheck.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cotseg;
using testing::random_tensor;
using TensorD = Tensor<double>;

namespace {

UNetConfig small(std::size_t depth, std::size_t base, std::vector<std::size_t> cot = {}) {
    UNetConfig c;
    c.depth = depth;
    c.base_channels = base;
    c.cot_placement = std::move(cot);
    return c;
}

}  // namespace

TEST_CASE("unet output shape") {
    Rng rng(1);
    auto cfg = small(3, 2, {0, 1, 2});
    auto p = init_unet_params<double>(cfg, 7);
    UNetTrace tr;
    auto y = unet_forward(random_tensor({1, 4, 16, 16, 16}, rng), p, cfg, &tr);
    CHECK(y.shape() == Shape{1, 4, 16, 16, 16});

    REQUIRE(tr.encoder.size() == 3);
    REQUIRE(tr.decoder.size() == 2);
    CHECK(tr.encoder[0] == Shape{1, 2, 16, 16, 16});
    CHECK(tr.encoder[1] == Shape{1, 4, 8, 8, 8});
    CHECK(tr.encoder[2] == Shape{1, 8, 4, 4, 4});
    CHECK(tr.decoder[0] == Shape{1, 4, 8, 8, 8});
    CHECK(tr.decoder[1] == Shape{1, 2, 16, 16, 16});

    auto y2 = unet_forward(random_tensor({1, 4, 8, 4, 12}, rng), p, cfg);
    CHECK(y2.shape() == Shape{1, 4, 8, 4, 12});
}

TEST_CASE("encoder halves and decoder restores extents") {
    Rng rng(4);
    for (std::size_t depth : {2, 3, 4}) {
        auto cfg = small(depth, 1, UNetConfig::all_levels(depth));
        cfg.in_channels = 2;
        cfg.num_classes = 3;
        auto p = init_unet_params<double>(cfg, 1);
        const std::size_t m = cfg.spatial_multiple();
        UNetTrace tr;
        auto y = unet_forward(random_tensor({1, 2, 2 * m, m, 3 * m}, rng), p, cfg, &tr);
        CHECK(y.shape() == Shape{1, 3, 2 * m, m, 3 * m});
        for (std::size_t l = 1; l < depth; ++l)
            for (std::size_t a = 2; a < 5; ++a) CHECK(tr.encoder[l][a] * 2 == tr.encoder[l - 1][a]);
        for (std::size_t i = 0; i < tr.decoder.size(); ++i) {
            const std::size_t level = depth - 2 - i;
            CHECK(tr.decoder[i] == tr.encoder[level]);
        }
    }
}

TEST_CASE("unet input validation") {
    Rng rng(2);
    auto cfg = small(3, 1);
    auto p = init_unet_params<double>(cfg, 1);
    CHECK_THROWS_AS(unet_forward(random_tensor({1, 4, 6, 8, 8}, rng), p, cfg), DimensionError);
    CHECK_THROWS_AS(unet_forward(random_tensor({1, 3, 8, 8, 8}, rng), p, cfg), DimensionError);
    CHECK_THROWS_AS(small(1, 1).validate(), ParameterError);
    CHECK_THROWS_AS(small(2, 0).validate(), ParameterError);
    CHECK_THROWS_AS(small(2, 1, {2}).validate(), ParameterError);
}

TEST_CASE("zero head gives uniform class probabilities") {
    Rng rng(3);
    auto cfg = small(2, 2, {0, 1});
    auto p = init_unet_params<double>(cfg, 5);
    for (const char* name : {"head.weight", "head.bias"}) {
        auto t = p.get(name);
        for (auto& v : t.mutable_data()) v = 0.0;
    }
    auto logits = unet_forward(random_tensor({1, 4, 4, 4, 4}, rng), p, cfg);
    for (double v : logits.data()) CHECK(v == 0.0);
    const auto probs = softmax_channels(logits);
    for (double v : probs.data()) CHECK(v == 0.25);
}

TEST_CASE("param count by hand enumeration") {
    UNetConfig cfg = small(2, 1);
    cfg.in_channels = 1;
    cfg.num_classes = 1;
    // conv weights 27*cin*cout plus norm gamma/beta 2*cout
    const std::vector<std::size_t> layers{
        27 * 1 * 1 + 2,  // enc0.conv1
        27 * 1 * 1 + 2,  // enc0.conv2
        27 * 1 * 2 + 4,  // enc1.down
        27 * 2 * 2 + 4,  // enc1.conv1
        27 * 2 * 2 + 4,  // enc1.conv2
        27 * 2 * 1 + 2,  // dec0.up
        27 * 2 * 1 + 2,  // dec0.conv1 (concat)
        27 * 1 * 1 + 2,  // dec0.conv2
        1 + 1,           // head
    };
    const std::size_t expected = std::accumulate(layers.begin(), layers.end(), std::size_t{0});
    CHECK(expected == 483);
    CHECK(unet_param_count(cfg) == expected);
    CHECK(init_unet_params<double>(cfg, 1).total_size() == expected);
}

TEST_CASE("param count matches allocation and CoT additivity") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        UNetConfig cfg;
        cfg.depth = 2 + rng.below(3);
        cfg.base_channels = 1 + rng.below(4);
        cfg.in_channels = 1 + rng.below(4);
        cfg.num_classes = 1 + rng.below(4);
        cfg.cot_context_kernel = rng.below(2) ? 3 : 1;
        cfg.cot_hidden_divisor = 1 + rng.below(2);
        cfg.replace_conv_with_cot = rng.below(4) == 0;
        cfg.cot_placement.clear();
        for (std::size_t l = 0; l < cfg.depth; ++l)
            if (rng.below(2)) cfg.cot_placement.push_back(l);
        CHECK(unet_param_count(cfg) == init_unet_params<float>(cfg, trial).total_size());

        auto base = UNetConfig::baseline(cfg);
        std::size_t cot_sum = 0;
        for (std::size_t l : cfg.cot_placement) {
            cot_sum += cot_param_count(cfg.cot_config(l));
            if (cfg.replace_conv_with_cot) cot_sum -= 27 * cfg.channels_at(l) * cfg.channels_at(l);
        }
        CHECK(unet_param_count(cfg) == unet_param_count(base) + cot_sum);
    }
}

TEST_CASE("large-scale preset parameter magnitude") {
    const auto n = unet_param_count(UNetConfig::full_scale());
    CHECK(n >= 1000000);
    CHECK(n <= 3000000);
    CHECK(unet_param_count(UNetConfig::desk()) < n);
}

TEST_CASE("bypassed CoT reproduces the baseline network") {
    Rng rng(6);
    auto cfg = small(3, 2, {0, 1, 2});
    cfg.cot_fusion = CoTFusion::Bypass;
    auto with_cot = init_unet_params<double>(cfg, 11);
    auto base_cfg = UNetConfig::baseline(cfg);
    auto base = init_unet_params<double>(base_cfg, 99);
    CHECK(base.assign_from(with_cot) == base.entries().size());
    auto x = random_tensor({1, 4, 8, 8, 8}, rng);
    auto a = unet_forward(x, with_cot, cfg);
    auto b = unet_forward(x, base, base_cfg);
    bool equal = true;
    for (std::size_t i = 0; i < a.numel(); ++i) equal = equal && a.data()[i] == b.data()[i];
    CHECK(equal);

    cfg.cot_fusion = CoTFusion::Sum;
    auto c = unet_forward(x, with_cot, cfg);
    bool differs = false;
    for (std::size_t i = 0; i < a.numel(); ++i) differs = differs || a.data()[i] != c.data()[i];
    CHECK(differs);
}

TEST_CASE("replace_conv_with_cot drops the second conv") {
    Rng rng(12);
    auto cfg = small(2, 2, {0, 1});
    cfg.replace_conv_with_cot = true;
    auto p = init_unet_params<double>(cfg, 3);
    CHECK_FALSE(p.contains("enc0.conv2.weight"));
    CHECK(p.contains("enc0.cot.w_context"));
    CHECK(unet_forward(random_tensor({1, 4, 4, 4, 4}, rng), p, cfg).shape() == Shape{1, 4, 4, 4, 4});
}

TEST_CASE("end-to-end gradient check at desk scale") {
    Rng rng(15);
    auto cfg = small(2, 2, {0, 1});
    auto p = init_unet_params<double>(cfg, 21);
    auto pe = init_unet_params<long double>(cfg, 21);
    auto x = random_tensor({1, 4, 8, 8, 8}, rng, true);
    auto xe = Tensor<long double>::from_data(x.shape(), {x.data().begin(), x.data().end()}, true);
    std::vector<verify::NamedTensor> wrt{{"x", x}};
    std::vector<Tensor<long double>> wrt_e{xe};
    for (const auto& e : p.entries()) wrt.emplace_back(e.name, e.tensor);
    for (const auto& e : pe.entries()) wrt_e.push_back(e.tensor);
    verify::GradCheckOptions opts;
    opts.order = 4;
    opts.max_coords_per_tensor = 12;
    auto r = verify::check_gradients_extended([&] { return unet_forward(x, p, cfg); }, wrt,
                                              [&] { return unet_forward(xe, pe, cfg); }, wrt_e, opts);
    INFO("worst " << r.worst << " rel " << r.max_rel_error << " checked " << r.checked << " skipped "
                  << r.skipped);
    CHECK(r.passed);
}
