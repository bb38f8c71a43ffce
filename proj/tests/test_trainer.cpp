#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cotseg/config.hpp"
#include "cotseg/errors.hpp"
#include "cotseg/metrics.hpp"
#include "cotseg/trainer.hpp"

using namespace cotseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("cotseg_train_" + std::to_string(Rng(std::random_device{}()).next()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ParamStore<double> scalar_store(double value, double grad) {
    ParamStore<double> s;
    auto t = s.add_constant("w", {1}, value);
    t.mutable_grad()[0] = grad;
    return s;
}

UNetConfig small_net() {
    UNetConfig n;
    n.depth = 2;
    n.base_channels = 2;
    n.cot_placement = {0, 1};
    return n;
}

TrainConfig small_train(std::size_t epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.seed = 3;
    t.patch = {8, 8, 8};
    t.record_wall_time = false;
    t.lr0 = 1e-2;
    return t;
}

std::vector<Case> small_data(std::size_t n, const Dims3& extents = {10, 8, 9}) {
    std::vector<Case> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(prepare_case(generate_synthetic_case(100 + i, extents)));
    return v;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    return lines;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("cosine schedule anchors") {
    CHECK(cosine_lr(0, 100, 3e-4) == 3e-4);
    CHECK(cosine_lr(50, 100, 3e-4) == 1.5e-4);
    CHECK(cosine_lr(100, 100, 3e-4) == 0.0);
    CHECK(cosine_lr(7, 7, 1.0) == 0.0);
    CHECK(cosine_lr(25, 100, 1.0) == doctest::Approx(0.5 * (1 + std::sqrt(0.5))).epsilon(1e-15));
    for (std::size_t s = 1; s <= 100; ++s) CHECK(cosine_lr(s, 100, 1.0) <= cosine_lr(s - 1, 100, 1.0));
    CHECK_THROWS_AS(cosine_lr(101, 100, 3e-4), ParameterError);
    CHECK_THROWS_AS(cosine_lr(0, 0, 3e-4), ParameterError);
}

TEST_CASE("adam update matches a hand trace") {
    TrainConfig cfg;
    cfg.weight_decay = 1e-2;
    auto s = scalar_store(0.5, 0.2);
    Optimizer<double> opt(s, cfg);
    const double lr = 1e-3;
    opt.step(s, lr);
    // m = 0.02, v = 4e-5, m_hat = 0.2, v_hat = 0.04.
    long double p = 0.5L - 1e-3L * 0.2L / (0.2L + 1e-8L);
    p *= 1.0L - 1e-3L * 1e-2L;
    CHECK(std::abs(s.get("w").data()[0] - static_cast<double>(p)) < 1e-12);

    // Second step: g = -0.1.
    s.entries()[0].tensor.mutable_grad()[0] = -0.1;
    opt.step(s, lr);
    const long double m = 0.9L * 0.02L + 0.1L * -0.1L;
    const long double v = 0.999L * 4e-5L + 0.001L * 0.01L;
    const long double mh = m / (1.0L - 0.81L), vh = v / (1.0L - 0.999L * 0.999L);
    p = (p - 1e-3L * mh / (std::sqrt(vh) + 1e-8L)) * (1.0L - 1e-5L);
    CHECK(std::abs(s.get("w").data()[0] - static_cast<double>(p)) < 1e-12);
    CHECK(opt.steps_taken() == 2);
}

TEST_CASE("zero gradient: unchanged without decay, pure shrink with it") {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    auto s = scalar_store(0.75, 0.0);
    Optimizer<double> opt(s, cfg);
    opt.step(s, 1e-3);
    CHECK(s.get("w").data()[0] == 0.75);

    cfg.weight_decay = 0.1;
    auto d = scalar_store(0.75, 0.0);
    Optimizer<double> opt2(d, cfg);
    opt2.step(d, 1e-2);
    CHECK(d.get("w").data()[0] == 0.75 * (1.0 - 1e-2 * 0.1));
}

TEST_CASE("coupled L2 and SGD variants") {
    TrainConfig cfg;
    cfg.weight_decay = 0.5;
    cfg.decay = DecayMode::CoupledL2;
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.momentum = 0.9;
    auto s = scalar_store(2.0, 0.3);
    Optimizer<double> opt(s, cfg);
    opt.step(s, 0.1);
    // g' = 0.3 + 0.5 * 2 = 1.3; buf = 1.3; p = 2 - 0.13.
    CHECK(s.get("w").data()[0] == doctest::Approx(1.87).epsilon(1e-15));
    s.entries()[0].tensor.mutable_grad()[0] = 0.0;
    opt.step(s, 0.1);
    // g' = 0.935; buf = 0.9 * 1.3 + 0.935 = 2.105.
    CHECK(s.get("w").data()[0] == doctest::Approx(1.87 - 0.2105).epsilon(1e-14));
}

TEST_CASE("non-finite gradients are rejected by name") {
    ParamStore<double> s;
    s.add_constant("a", {2}, 1.0).mutable_grad()[0] = 0.5;
    s.add_constant("b", {2}, 1.0).mutable_grad()[1] = NAN;
    Optimizer<double> opt(s, TrainConfig{});
    try {
        opt.step(s, 1e-3);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("parameter b") != std::string::npos);
    }
    CHECK(s.get("a").data()[0] == 1.0);
    CHECK(opt.steps_taken() == 0);
}

TEST_CASE("train config validation") {
    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    auto bad = [](auto mutate) {
        TrainConfig c;
        mutate(c);
        CHECK_THROWS_AS(c.validate(), ParameterError);
    };
    bad([](TrainConfig& c) { c.lr0 = 0; });
    bad([](TrainConfig& c) { c.weight_decay = -1; });
    bad([](TrainConfig& c) { c.epochs = 0; });
    bad([](TrainConfig& c) { c.batch_size = 2; });
    bad([](TrainConfig& c) { c.loss.alpha = 1.5; });
    bad([](TrainConfig& c) { c.beta2 = 1.0; });
}

TEST_CASE("step records round trip through JSON") {
    StepRecord r{12, 3, 0.123456789012345678, 2.5e-4, 1.75, 33.25};
    const auto back = StepRecord::from_json_line(r.to_json_line());
    CHECK(back.step == 12);
    CHECK(back.epoch == 3);
    CHECK(back.loss == r.loss);
    CHECK(back.lr == r.lr);
    CHECK(back.grad_norm == r.grad_norm);
    CHECK(back.wall_ms == r.wall_ms);
}

TEST_CASE("synthetic cases") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const Dims3 ext{8 + seed % 5, 8 + seed % 7, 8 + (seed * 3) % 11};
        const auto c = generate_synthetic_case(seed, ext);
        REQUIRE(c.seg.has_value());
        CHECK_NOTHROW(c.seg->validate());
        std::array<std::size_t, 5> hist{};
        for (auto l : c.seg->labels) ++hist[l];
        CHECK(hist[1] > 0);
        CHECK(hist[2] > 0);
        CHECK(hist[4] > 0);
        CHECK(hist[0] > 0);
        // Every tumour voxel carries signal in every modality.
        for (std::size_t i = 0; i < c.seg->labels.size(); ++i)
            if (c.seg->labels[i] != 0)
                for (const auto& ch : c.image.channels) CHECK(ch[i] > 0.0);
    }
    CHECK_THROWS_AS(generate_synthetic_case(1, {7, 8, 8}), ParameterError);

    const auto a = generate_synthetic_case(5, {16, 16, 16});
    const auto b = generate_synthetic_case(5, {16, 16, 16});
    CHECK(a.seg->labels == b.seg->labels);
    for (std::size_t m = 0; m < 4; ++m) CHECK(a.image.channels[m] == b.image.channels[m]);
}

TEST_CASE("synthetic label histogram regression fixture") {
    const auto c = generate_synthetic_case(7, {32, 32, 32});
    std::array<std::size_t, 5> hist{};
    for (auto l : c.seg->labels) ++hist[l];
    MESSAGE("histogram ", hist[0], " ", hist[1], " ", hist[2], " ", hist[4]);
    CHECK(hist == std::array<std::size_t, 5>{30885, 252, 1606, 0, 25});
}

TEST_CASE("synthetic regions differ per modality") {
    const auto c = generate_synthetic_case(9, {24, 24, 24});
    std::array<std::array<double, 4>, 5> sum{};
    std::array<std::size_t, 5> cnt{};
    for (std::size_t i = 0; i < c.seg->labels.size(); ++i) {
        const auto l = c.seg->labels[i];
        ++cnt[l];
        for (std::size_t m = 0; m < 4; ++m) sum[l][m] += c.image.channels[m][i];
    }
    // ET is brightest on T1c, necrosis on T2, edema on FLAIR.
    CHECK(sum[4][2] / cnt[4] > 200.0);
    CHECK(sum[1][3] / cnt[1] > 230.0);
    CHECK(sum[2][0] / cnt[2] > 180.0);
    CHECK(sum[1][1] / cnt[1] < 70.0);
}

TEST_CASE("one epoch over two cases logs two steps") {
    TempDir tmp;
    auto state = TrainState<double>::fresh(small_net(), small_train(1));
    const auto data = small_data(2);
    const auto recs = train(state, data, {tmp.path / "ck.bin", std::nullopt, tmp.path / "log.jsonl"});
    CHECK(recs.size() == 2);
    CHECK(state.step == 2);
    const auto lines = read_lines(tmp.path / "log.jsonl");
    REQUIRE(lines.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto r = StepRecord::from_json_line(lines[i]);
        CHECK(r.step == i + 1);
        CHECK(r.epoch == 0);
        CHECK(std::isfinite(r.loss));
        CHECK(std::isfinite(r.grad_norm));
        CHECK(r.lr == cosine_lr(i, 2, 1e-2));
    }
    CHECK(fs::exists(tmp.path / "ck.bin"));
}

TEST_CASE("training is reproducible bit for bit") {
    TempDir tmp;
    const auto data = small_data(2);
    for (int run = 0; run < 2; ++run) {
        auto state = TrainState<double>::fresh(small_net(), small_train(2));
        train(state, data, {tmp.path / ("ck" + std::to_string(run)), std::nullopt,
                            tmp.path / ("log" + std::to_string(run))});
    }
    CHECK(read_bytes(tmp.path / "log0") == read_bytes(tmp.path / "log1"));
    CHECK(read_bytes(tmp.path / "ck0") == read_bytes(tmp.path / "ck1"));
}

TEST_CASE("checkpoints: byte-identical re-save and exact resume") {
    TempDir tmp;
    const auto data = small_data(2, {12, 8, 8});
    auto straight = TrainState<double>::fresh(small_net(), small_train(3));
    const auto all = train(straight, data);

    auto first = TrainState<double>::fresh(small_net(), small_train(3));
    train(first, data, {tmp.path / "a.ck", std::nullopt, std::nullopt}, {}, 2);
    auto loaded = load_checkpoint<double>(tmp.path / "a.ck");
    save_checkpoint(loaded, tmp.path / "b.ck");
    CHECK(read_bytes(tmp.path / "a.ck") == read_bytes(tmp.path / "b.ck"));
    CHECK(loaded.step == 2);

    const auto rest = train(loaded, data);
    REQUIRE(rest.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(rest[i].step == all[i + 2].step);
        CHECK(rest[i].loss == all[i + 2].loss);
        CHECK(rest[i].grad_norm == all[i + 2].grad_norm);
    }
    CHECK(encode_checkpoint(loaded) == encode_checkpoint(straight));

    // Float round trip of a double checkpoint keeps the layout.
    const auto as_float = load_checkpoint<float>(tmp.path / "a.ck");
    CHECK(as_float.params.total_size() == loaded.params.total_size());
}

TEST_CASE("malformed checkpoints") {
    auto state = TrainState<float>::fresh(small_net(), small_train(1));
    const auto good = encode_checkpoint(state);
    CHECK_NOTHROW(decode_checkpoint<float>(good));
    auto bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint<float>(bad), CheckpointError);
    bad = good;
    bad.resize(bad.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint<float>(bad), CheckpointError);
    bad = good;
    bad[8] = 9;  // version
    CHECK_THROWS_AS(decode_checkpoint<float>(bad), CheckpointError);
    bad = good;
    bad[8 + 4 + 16 + 4 + 5] ^= 1;  // inside the config text
    CHECK_THROWS_AS(decode_checkpoint<float>(bad), CheckpointError);
    bad = good;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint<float>(bad), CheckpointError);
}

TEST_CASE("numeric abort keeps the last good state") {
    TempDir tmp;
    auto state = TrainState<double>::fresh(small_net(), small_train(2));
    const auto data = small_data(1);
    auto& w = state.params.entries()[3].tensor;
    w.mutable_data()[0] = NAN;
    CHECK_THROWS_AS(train(state, data, {std::nullopt, tmp.path / "last_good.ck", std::nullopt}), NumericError);
    REQUIRE(fs::exists(tmp.path / "last_good.ck"));
    const auto back = load_checkpoint<double>(tmp.path / "last_good.ck");
    CHECK(back.step == 0);
    CHECK(std::isnan(back.params.entries()[3].tensor.data()[0]));
}

TEST_CASE("loss decreases over 50 steps with the default config") {
    // Default optimiser settings and the desk network on one 16^3 case.
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.patch = {16, 16, 16};
    cfg.record_wall_time = false;
    auto state = TrainState<float>::fresh(UNetConfig::desk(), cfg);
    const auto data = std::vector<Case>{prepare_case(generate_synthetic_case(11, {16, 16, 16}))};
    const auto recs = train(state, data);
    REQUIRE(recs.size() == 50);
    const double after = evaluate_loss(state.params, state.net, data[0], cfg.loss);
    MESSAGE("step-1 loss ", recs.front().loss, ", after 50 steps ", after);
    CHECK(after < recs.front().loss);
    for (const auto& r : recs) CHECK(std::isfinite(r.grad_norm));
}
