#include "cotseg/verify/suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cotseg/cot.hpp"
#include "cotseg/errors.hpp"
#include "cotseg/inference.hpp"
#include "cotseg/losses.hpp"
#include "cotseg/metrics.hpp"
#include "cotseg/nifti.hpp"
#include "cotseg/ops.hpp"
#include "cotseg/trainer.hpp"
#include "cotseg/unet.hpp"
#include "cotseg/verify/gradcheck.hpp"
#include "cotseg/verify/oracles.hpp"

namespace cotseg::verify {

namespace {

using Clock = std::chrono::steady_clock;
using TD = Tensor<double>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <class T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from_data(std::move(shape), std::move(v), grad);
}

TD one_hot_target(Shape shape, Rng& rng) {
    const std::size_t n = shape[0], c = shape[1], vox = shape_numel(shape) / (n * c);
    std::vector<double> v(shape_numel(shape), 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < vox; ++i) v[(b * c + rng.below(c)) * vox + i] = 1.0;
    return TD::from_data(std::move(shape), std::move(v), true);
}

void say(const SuiteOptions& o, const std::string& s) {
    if (o.log) *o.log << "  " << s << std::endl;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// ---- gradient oracle -----------------------------------------------------

template <class T>
Tensor<T> widen(const TD& t) {
    return Tensor<T>::from_data(t.shape(), {t.data().begin(), t.data().end()}, true);
}

CriterionResult gradient_oracle(const SuiteOptions& o) {
    const auto t0 = Clock::now();
    Rng rng(40);
    struct Check {
        std::string label;
        std::function<GradCheckReport()> run;
    };
    std::vector<Check> checks;
    // `f` is generic over the scalar type: analytic gradients in double,
    // finite differences on a long double copy of the same inputs.
    auto enqueue = [&](std::string label, auto f, std::vector<NamedTensor> wrt) {
        checks.push_back({std::move(label), [f, wrt] {
                              std::vector<TD> in;
                              std::vector<Tensor<long double>> in_e;
                              for (const auto& [name, t] : wrt) {
                                  in.push_back(t);
                                  in_e.push_back(widen<long double>(t));
                              }
                              return check_gradients_extended([&] { return f(in); }, wrt,
                                                              [&] { return f(in_e); }, in_e);
                          }});
    };

    {
        auto x = random_tensor({1, 2, 5, 4, 5}, rng), w = random_tensor({2, 2, 3, 3, 3}, rng),
             b = random_tensor({2}, rng);
        enqueue("conv3d", [](const auto& v) { return conv3d(v[0], v[1], v[2], {2, 1}); },
                {{"x", x}, {"w", w}, {"b", b}});
        auto x2 = random_tensor({1, 2, 4, 4, 4}, rng), w2 = random_tensor({3, 2, 3, 3, 3}, rng);
        enqueue("conv3d",
                [](const auto& v) {
                    using T = typename std::decay_t<decltype(v[0])>::value_type;
                    return conv3d(v[0], v[1], Tensor<T>{}, {1, 1});
                },
                {{"x", x2}, {"w", w2}});
    }
    {
        auto x = random_tensor({1, 3, 3, 3, 3}, rng), w = random_tensor({2, 3, 1, 1, 1}, rng),
             b = random_tensor({2}, rng);
        enqueue("pointwise_conv", [](const auto& v) { return pointwise_conv(v[0], v[1], v[2]); },
                {{"x", x}, {"w", w}, {"b", b}});
    }
    {
        auto x = random_tensor({1, 2, 2, 3, 2}, rng);
        enqueue("upsample_nearest3d", [](const auto& v) { return upsample_nearest3d(v[0], 2); }, {{"x", x}});
    }
    {
        auto a = random_tensor({1, 2, 3, 3, 3}, rng), b = random_tensor({1, 2, 3, 3, 3}, rng);
        enqueue("add", [](const auto& v) { return add(v[0], v[1]); }, {{"a", a}, {"b", b}});
        enqueue("mul", [](const auto& v) { return mul(v[0], v[1]); }, {{"a", a}, {"b", b}});
        enqueue("scale",
                [](const auto& v) {
                    using T = typename std::decay_t<decltype(v[0])>::value_type;
                    return scale(v[0], T(1.5));
                },
                {{"a", a}});
        enqueue("sum", [](const auto& v) { return sum(v[0]); }, {{"b", b}});
    }
    {
        auto x = random_tensor({1, 2, 3, 3, 3}, rng);
        for (auto& v : x.mutable_data()) v += v >= 0 ? 0.1 : -0.1;
        enqueue("relu", [](const auto& v) { return relu(v[0]); }, {{"x", x}});
    }
    {
        auto a = random_tensor({2, 1, 2, 2, 3}, rng), b = random_tensor({2, 2, 2, 2, 3}, rng);
        enqueue("concat_channels",
                [](const auto& v) {
                    using T = typename std::decay_t<decltype(v[0])>::value_type;
                    return concat_channels<T>({v[0], v[1]});
                },
                {{"a", a}, {"b", b}});
    }
    {
        auto x = random_tensor({1, 4, 3, 3, 3}, rng, true, -3.0, 3.0);
        enqueue("softmax_channels", [](const auto& v) { return softmax_channels(v[0]); }, {{"x", x}});
    }
    {
        auto x = random_tensor({2, 3, 3, 3, 3}, rng, true, -2.0, 2.0), g = random_tensor({3}, rng, true, 0.5, 1.5),
             b = random_tensor({3}, rng);
        enqueue("instance_norm", [](const auto& v) { return instance_norm(v[0], v[1], v[2]); },
                {{"x", x}, {"gamma", g}, {"beta", b}});
    }
    {
        auto p = random_tensor({2, 4, 3, 2, 3}, rng, true, 0.05, 1.0);
        auto y = one_hot_target({2, 4, 3, 2, 3}, rng);
        LossConfig lc;
        enqueue("dice_loss", [lc](const auto& v) { return dice_loss(v[0], v[1], lc); },
                {{"pred", p}, {"target", y}});
        enqueue("cross_entropy_loss", [lc](const auto& v) { return cross_entropy_loss(v[0], v[1], lc); },
                {{"pred", p}, {"target", y}});
        LossConfig mixed = lc;
        mixed.alpha = 0.3;
        enqueue("combined_loss", [mixed](const auto& v) { return combined_loss(v[0], v[1], mixed); },
                {{"pred", p}, {"target", y}});
    }
    for (bool normalize : {false, true}) {
        auto cfg = CoTConfig::for_channels(3);
        cfg.attention_hidden = 2;
        cfg.apply_attention_normalization = normalize;
        ParamStore<double> store;
        register_cot_params(store, "cot", cfg, rng);
        auto x = random_tensor({1, 3, 4, 3, 4}, rng);
        std::vector<NamedTensor> wrt{{"x", x}};
        for (const auto& e : store.entries()) wrt.emplace_back(e.name, e.tensor);
        // Inputs arrive in the order x, w_key, w_value, w_query, w_context, w_theta, w_delta.
        enqueue(normalize ? "cot_block(normalized)" : "cot_block",
                [cfg](const auto& v) {
                    using T = typename std::decay_t<decltype(v[0])>::value_type;
                    CoTParams<T> p{v[1], v[2], v[3], v[4], v[5], v[6]};
                    return cot_forward(v[0], p, cfg);
                },
                wrt);
    }

    std::vector<std::string> failed;
    double worst = 0.0;
    std::size_t coords = 0, skipped = 0;
    for (const auto& c : checks) {
        const auto r = c.run();
        coords += r.checked;
        skipped += r.skipped;
        worst = std::max(worst, r.max_rel_error);
        if (!r.passed) {
            if (std::find(failed.begin(), failed.end(), c.label) == failed.end()) failed.push_back(c.label);
            say(o, "gradient check failed: " + c.label + " worst " + r.worst + " rel " + fmt(r.max_rel_error));
        }
    }
    say(o, "ops and CoT: " + std::to_string(checks.size()) + " checks, " + std::to_string(coords) + " coordinates");

    // Depth-2 U-Net, every coordinate of the input and all parameters.
    // Skipped once an op has failed; the composite adds nothing then.
    if (failed.empty()) {
        UNetConfig cfg;
        cfg.depth = 2;
        cfg.base_channels = 2;
        cfg.cot_placement = {0, 1};
        const auto p = init_unet_params<double>(cfg, 21);
        const auto pe = init_unet_params<long double>(cfg, 21);
        Rng xr(15);
        const auto x = random_tensor({1, 4, 8, 8, 8}, xr);
        const auto xe = Tensor<long double>::from_data(x.shape(), {x.data().begin(), x.data().end()}, true);
        std::vector<NamedTensor> wrt{{"x", x}};
        std::vector<Tensor<long double>> wrt_e{xe};
        for (const auto& e : p.entries()) wrt.emplace_back(e.name, e.tensor);
        for (const auto& e : pe.entries()) wrt_e.push_back(e.tensor);
        GradCheckOptions opts;
        opts.order = 4;
        const auto r = check_gradients_extended([&] { return unet_forward(x, p, cfg); }, wrt,
                                                [&] { return unet_forward(xe, pe, cfg); }, wrt_e, opts);
        say(o, "unet depth 2: " + std::to_string(r.checked) + " coordinates, " + std::to_string(r.skipped) +
                   " kink-skipped, max rel " + fmt(r.max_rel_error));
        coords += r.checked;
        skipped += r.skipped;
        worst = std::max(worst, r.max_rel_error);
        if (!r.passed) failed.push_back("unet(" + r.worst + ")");
    } else {
        say(o, "unet depth 2: skipped after op failures");
    }

    const double secs = seconds_since(t0);
    CriterionResult res;
    res.passed = failed.empty() && secs < 300.0;
    std::ostringstream d;
    if (!failed.empty()) {
        d << "failed:";
        for (const auto& f : failed) d << ' ' << f;
        d << "; ";
    }
    d << coords << " coordinates (" << skipped << " kink-skipped), max rel err " << fmt(worst) << " (< 1e-6), "
      << fmt(secs) << " s (< 300 s)";
    res.detail = d.str();
    return res;
}

// ---- CoT reduction law ----------------------------------------------------

CriterionResult cot_reduction(const SuiteOptions&) {
    // The law holds for the default block; softmax over a zero A is 1/C, not 0.
    Rng rng(77);
    std::size_t exact_delta = 0, exact_theta = 0;
    const std::size_t kernels[] = {1, 3, 5};
    auto reduces = [](const TD& x, const CoTParams<double>& p, const CoTConfig& cfg) {
        CoTTrace<double> trace;
        const auto y = cot_forward(x, p, cfg, &trace);
        return y.shape() == trace.static_context.shape() &&
               std::memcmp(y.data().data(), trace.static_context.data().data(), y.numel() * sizeof(double)) == 0;
    };
    for (int i = 0; i < 20; ++i) {
        CoTConfig cfg;
        cfg.channels = 1 + rng.below(6);
        cfg.context_kernel = kernels[rng.below(3)];
        cfg.attention_hidden = 1 + rng.below(4);
        ParamStore<double> store;
        auto params = register_cot_params(store, "c", cfg, rng);
        const auto x = random_tensor({1 + rng.below(2), cfg.channels, 2 + rng.below(4), 2 + rng.below(4),
                                      2 + rng.below(4)},
                                     rng, false, -2.0, 2.0);
        const std::vector<double> theta(params.w_theta.data().begin(), params.w_theta.data().end());
        for (auto& v : params.w_theta.mutable_data()) v = 0.0;
        exact_theta += reduces(x, params, cfg);
        std::copy(theta.begin(), theta.end(), params.w_theta.mutable_data().begin());
        for (auto& v : params.w_delta.mutable_data()) v = 0.0;
        exact_delta += reduces(x, params, cfg);
    }
    return {"", exact_delta == 20 && exact_theta == 20,
            "Y == K1 bit for bit on " + std::to_string(exact_delta) + "/20 random configs with W_delta = 0 (" +
                std::to_string(exact_theta) + "/20 with W_theta = 0)",
            0.0};
}

// ---- metric oracles --------------------------------------------------------

BinaryMask random_blobs(const Dims3& dims, Rng& rng) {
    BinaryMask m{dims, std::vector<std::uint8_t>(dims_numel(dims), 0)};
    const std::size_t blobs = rng.below(4);  // 0 gives an empty mask
    for (std::size_t b = 0; b < blobs; ++b) {
        const double cx = rng.uniform(0, 12), cy = rng.uniform(0, 12), cz = rng.uniform(0, 12);
        const double r = rng.uniform(0.8, 4.5);
        for (std::size_t x = 0; x < dims[0]; ++x)
            for (std::size_t y = 0; y < dims[1]; ++y)
                for (std::size_t z = 0; z < dims[2]; ++z) {
                    const double dx = x - cx, dy = y - cy, dz = z - cz;
                    if (dx * dx + dy * dy + dz * dz <= r * r) m.data[(x * dims[1] + y) * dims[2] + z] = 1;
                }
    }
    for (auto& v : m.data)
        if (rng.uniform() < 0.01) v ^= 1;
    return m;
}

CriterionResult metric_oracles(const SuiteOptions&) {
    Rng rng(2019);
    const Dims3 dims{12, 12, 12};
    std::size_t dice_exact = 0, hd_match = 0;
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const auto a = random_blobs(dims, rng), b = random_blobs(dims, rng);
        const Spacing3 sp = i % 3 == 0 ? Spacing3{1.0, 1.0, 1.0}
                                       : Spacing3{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
        if (dice_score(a, b) == oracle::dice_score(a.data, b.data)) ++dice_exact;
        const double got = hd95(a, b, sp);
        const double want = oracle::surface_distances(a.data, b.data, dims, sp).hd95;
        const bool same = (std::isinf(got) && std::isinf(want)) || std::abs(got - want) <= 1e-9;
        if (!std::isinf(want)) worst = std::max(worst, std::abs(got - want));
        if (same) ++hd_match;
    }
    BinaryMask p{dims, std::vector<std::uint8_t>(1728, 0)}, t = p;
    p.data[0] = 1;
    t.data[(3 * 12 + 4) * 12 + 0] = 1;
    const double d345 = hd95(p, t);
    CriterionResult r;
    r.passed = dice_exact == 200 && hd_match == 200 && d345 == 5.0;
    r.detail = "dice exact " + std::to_string(dice_exact) + "/200, hd95 within 1e-9 " + std::to_string(hd_match) +
               "/200 (max diff " + fmt(worst) + "), 3-4-5 case = " + fmt(d345);
    return r;
}

// ---- loss anchors ----------------------------------------------------------

CriterionResult loss_anchors(const SuiteOptions&) {
    Rng rng(5);
    const Shape s{1, 4, 4, 4, 4};
    const auto y = one_hot_target(s, rng);
    const auto uniform = TD::full(s, 0.25);
    const double ce = cross_entropy_loss(uniform, y).item();
    const bool ce_ok = std::abs(ce - std::log(4.0)) <= 1e-9;

    const double dice_perfect = dice_loss(y, y).item();
    const bool dice_ok = dice_perfect <= 1e-4;

    double lin = 0.0;
    for (int i = 0; i < 10; ++i) {
        const auto p = softmax_channels(random_tensor(s, rng, false, -3.0, 3.0));
        LossConfig lc;
        lc.alpha = rng.uniform();
        const double d = dice_loss(p, y, lc).item(), c = cross_entropy_loss(p, y, lc).item();
        lin = std::max(lin, std::abs(combined_loss(p, y, lc).item() - (lc.alpha * d + (1.0 - lc.alpha) * c)));
        // Affine in alpha: L(a) = L(0) + a (L(1) - L(0)).
        LossConfig l0 = lc, l1 = lc;
        l0.alpha = 0.0;
        l1.alpha = 1.0;
        const double L0 = combined_loss(p, y, l0).item(), L1 = combined_loss(p, y, l1).item();
        lin = std::max(lin, std::abs(combined_loss(p, y, lc).item() - (L0 + lc.alpha * (L1 - L0))));
    }
    const bool lin_ok = lin <= 1e-9;
    CriterionResult r;
    r.passed = ce_ok && dice_ok && lin_ok;
    r.detail = "uniform CE - ln4 = " + fmt(ce - std::log(4.0)) + ", perfect Dice loss " + fmt(dice_perfect) +
               ", alpha linearity err " + fmt(lin);
    return r;
}

// ---- scheduler anchors -----------------------------------------------------

CriterionResult scheduler_anchors(const SuiteOptions&) {
    bool ok = true;
    std::ostringstream d;
    for (std::size_t T : {2, 100, 300, 1000}) {
        const double a = cosine_lr(0, T, 3e-4), b = cosine_lr(T / 2, T, 3e-4), c = cosine_lr(T, T, 3e-4);
        ok = ok && a == 3e-4 && b == 1.5e-4 && c == 0.0;
        if (T == 300) d << "T=300: lr(0)=" << a << " lr(T/2)=" << b << " lr(T)=" << c;
    }
    return {"", ok, d.str() + (ok ? " (exact for T in {2,100,300,1000})" : " (mismatch)"), 0.0};
}

// ---- synthetic overfit -----------------------------------------------------

double wt_dice(const ParamStore<float>& params, const UNetConfig& net, const Case& c) {
    const SlidingWindowConfig sw{c.image.dims, 0.5};
    const auto probs = predict_volume<float>(c.image, unet_model(params, net), sw, net.spatial_multiple());
    return evaluate_case(decode_prediction(probs), *c.seg, c.image.spacing).regions[2].dice;
}

CriterionResult synthetic_overfit(const SuiteOptions& o) {
    const auto t0 = Clock::now();
    UNetConfig net;
    net.depth = 2;
    net.base_channels = 8;
    net.cot_placement = {0, 1};
    TrainConfig tc;
    tc.epochs = 300;
    tc.lr0 = 3e-3;
    tc.seed = 1;
    tc.patch = {32, 32, 32};
    const auto c = prepare_case(generate_synthetic_case(7, {32, 32, 32}));
    auto state = TrainState<float>::fresh(net, tc);
    const auto recs = train(state, {c}, {}, [&](const StepRecord& r) {
        if (r.step % 50 == 0) say(o, "overfit step " + std::to_string(r.step) + " loss " + fmt(r.loss));
    });
    const double first = recs.front().loss;
    const double final_loss = evaluate_loss(state.params, net, c, tc.loss);
    const double dice = wt_dice(state.params, net, c);
    const double secs = seconds_since(t0);
    CriterionResult r;
    r.passed = dice >= 0.90 && final_loss < first && secs < 1800.0;
    r.detail = "WT Dice " + fmt(dice) + " (>= 0.90), loss " + fmt(first) + " -> " + fmt(final_loss) + ", " +
               fmt(secs) + " s (< 1800 s)";
    return r;
}

// ---- baseline vs CoT -------------------------------------------------------

CriterionResult baseline_vs_cot(const SuiteOptions& o) {
    std::vector<Case> cases;
    for (std::uint64_t s = 0; s < 4; ++s)
        cases.push_back(prepare_case(generate_synthetic_case(500 + s, {32, 32, 32}, "synthetic_" + std::to_string(s))));
    const std::vector<Case> train_set(cases.begin(), cases.begin() + 3);
    const Case& held = cases[3];

    UNetConfig cot;
    cot.depth = 2;
    cot.base_channels = 8;
    cot.cot_placement = {0, 1};
    const UNetConfig base = UNetConfig::baseline(cot);
    TrainConfig tc;
    tc.epochs = 40;
    tc.lr0 = 3e-3;
    tc.seed = 4;
    tc.patch = {32, 32, 32};

    std::vector<EvalReport> reports;
    bool finite = true;
    for (const auto& [tag, net] : {std::pair{std::string("U-Net"), base}, std::pair{std::string("U-Net+CoT"), cot}}) {
        auto state = TrainState<float>::fresh(net, tc);
        const auto recs = train(state, train_set);
        for (const auto& r : recs) finite = finite && std::isfinite(r.loss);
        const SlidingWindowConfig sw{{32, 32, 32}, 0.5};
        const auto probs = predict_volume<float>(held.image, unet_model(state.params, net), sw, net.spatial_multiple());
        EvalReport rep;
        rep.tag = tag;
        rep.cases.push_back(evaluate_case(decode_prediction(probs), *held.seg, held.image.spacing, held.image.case_id));
        rep.finalize();
        say(o, tag + ": " + std::to_string(unet_param_count(net)) + " parameters, held-out mean Dice " +
                   fmt(rep.dice[3].mean) + ", final loss " + fmt(recs.back().loss));
        reports.push_back(std::move(rep));
    }
    const auto table = comparison_table(reports);
    if (o.table) *o.table << table;
    if (!o.work_dir.empty()) std::ofstream(o.work_dir / "baseline_vs_cot.txt") << table;
    const double gap = reports[1].dice[3].mean - reports[0].dice[3].mean;
    CriterionResult r;
    r.passed = finite && reports.size() == 2 && !table.empty();
    r.detail = "held-out mean Dice baseline " + fmt(reports[0].dice[3].mean) + ", CoT " + fmt(reports[1].dice[3].mean) +
               " (gap " + fmt(gap) + ", reported only); comparison table emitted";
    return r;
}

// ---- sliding window --------------------------------------------------------

CriterionResult sliding_window(const SuiteOptions&) {
    UNetConfig net;
    net.depth = 2;
    net.base_channels = 4;
    net.cot_placement = {0, 1};
    const auto params = init_unet_params<double>(net, 9);
    Rng rng(3);
    Volume v;
    v.dims = {16, 16, 16};
    for (auto& ch : v.channels) {
        ch.resize(4096);
        for (auto& x : ch) x = rng.normal();
    }
    const auto probs = predict_volume<double>(v, unet_model(params, net), {{16, 16, 16}, 0.5}, 2);
    const auto direct =
        without_batch(softmax_channels(unet_forward(with_batch(volume_tensor<double>(v)), params, net)));
    const bool identical = probs.shape() == direct.shape() &&
                           std::memcmp(probs.data().data(), direct.data().data(), probs.numel() * sizeof(double)) == 0;

    std::size_t configs = 0, covered = 0;
    for (int i = 0; i < 100; ++i) {
        const Dims3 patch{2 + 2 * rng.below(8), 2 + 2 * rng.below(8), 2 + 2 * rng.below(8)};
        const Dims3 dims{patch[0] + rng.below(40), patch[1] + rng.below(40), patch[2] + rng.below(40)};
        const double overlap = static_cast<double>(rng.below(10)) / 10.0;
        const auto cov = coverage_counts(dims, {patch, overlap});
        const auto want = oracle::window_coverage(dims, patch, overlap);
        ++configs;
        if (cov == want && *std::min_element(cov.begin(), cov.end()) >= 1) ++covered;
    }
    // 1.5x patch per axis at overlap 0.5: counts in 1..8.
    const auto cov = coverage_counts({24, 24, 24}, {{16, 16, 16}, 0.5});
    const int lo = *std::min_element(cov.begin(), cov.end()), hi = *std::max_element(cov.begin(), cov.end());
    CriterionResult r;
    r.passed = identical && covered == configs && lo == 1 && hi == 8;
    r.detail = std::string("single window ") + (identical ? "bit-identical" : "DIFFERS") + " to direct forward; coverage oracle " +
               std::to_string(covered) + "/" + std::to_string(configs) + " configs, 24^3/16^3 counts in [" +
               std::to_string(lo) + "," + std::to_string(hi) + "]";
    return r;
}

// ---- NIfTI -----------------------------------------------------------------

CriterionResult nifti_round_trip(const SuiteOptions& o) {
    const NiftiType types[] = {NiftiType::UInt8,   NiftiType::Int16, NiftiType::Int32,  NiftiType::Float32,
                               NiftiType::Float64, NiftiType::Int8,  NiftiType::UInt16, NiftiType::UInt32};
    Rng rng(1234);
    const auto dir = o.work_dir.empty() ? std::filesystem::temp_directory_path() : o.work_dir;
    std::size_t exact = 0;
    for (int i = 0; i < 50; ++i) {
        NiftiVolume v;
        v.dtype = types[i % 8];
        v.dims = {1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9)};
        v.spacing = {static_cast<float>(rng.uniform(0.3, 4.0)), static_cast<float>(rng.uniform(0.3, 4.0)),
                     static_cast<float>(rng.uniform(0.3, 4.0))};
        v.data.resize(dims_numel(v.dims));
        for (auto& x : v.data) {
            switch (v.dtype) {
                case NiftiType::UInt8: x = static_cast<double>(rng.below(256)); break;
                case NiftiType::Int8: x = static_cast<double>(rng.below(256)) - 128; break;
                case NiftiType::Int16: x = static_cast<double>(rng.below(65536)) - 32768; break;
                case NiftiType::UInt16: x = static_cast<double>(rng.below(65536)); break;
                case NiftiType::Int32: x = static_cast<double>(static_cast<std::int32_t>(rng.next())); break;
                case NiftiType::UInt32: x = static_cast<double>(static_cast<std::uint32_t>(rng.next())); break;
                case NiftiType::Float32: x = static_cast<float>(rng.normal() * 100); break;
                case NiftiType::Float64: x = rng.normal() * 1e5; break;
            }
        }
        const auto path = dir / (i % 2 ? "roundtrip.nii.gz" : "roundtrip.nii");
        write_nifti(v, path);
        const auto back = read_nifti(path);
        std::filesystem::remove(path);
        if (back.dtype == v.dtype && back.dims == v.dims && back.spacing == v.spacing &&
            back.data.size() == v.data.size() &&
            std::memcmp(back.data.data(), v.data.data(), v.data.size() * sizeof(double)) == 0)
            ++exact;
    }

    NiftiVolume v;
    v.dtype = NiftiType::Int16;
    v.dims = {4, 4, 4};
    v.data.assign(64, 3.0);
    const auto good = encode_nifti(v);
    auto field = [](const std::vector<std::uint8_t>& b) -> std::string {
        try {
            parse_nifti(b);
        } catch (const NiftiError& e) {
            return e.field();
        }
        return "none";
    };
    auto bad_magic = good;
    std::memcpy(bad_magic.data() + 344, "xyz\0", 4);
    auto bad_type = good;
    const std::int16_t code = 128;  // RGB24
    std::memcpy(bad_type.data() + 70, &code, 2);
    auto truncated = good;
    truncated.resize(truncated.size() - 10);
    const std::string f1 = field(bad_magic), f2 = field(bad_type), f3 = field(truncated);
    CriterionResult r;
    r.passed = exact == 50 && f1 == "magic" && f2 == "datatype" && f3 == "truncated";
    r.detail = std::to_string(exact) + "/50 volumes bit-exact (8 dtypes, gzip on/off); errors: " + f1 + ", " + f2 +
               ", " + f3;
    return r;
}

// ---- determinism -----------------------------------------------------------

CriterionResult determinism(const SuiteOptions& o) {
    const auto dir = o.work_dir.empty() ? std::filesystem::temp_directory_path() / "cotseg_determinism" : o.work_dir;
    std::filesystem::create_directories(dir);
    UNetConfig net;
    net.depth = 2;
    net.base_channels = 8;
    net.cot_placement = {0, 1};
    TrainConfig tc;
    tc.epochs = 3;
    tc.lr0 = 3e-3;
    tc.seed = 99;
    tc.patch = {16, 16, 16};
    tc.record_wall_time = false;
    std::vector<Case> data;
    for (std::uint64_t s = 0; s < 2; ++s) data.push_back(prepare_case(generate_synthetic_case(40 + s, {20, 18, 16})));
    const Case probe = prepare_case(generate_synthetic_case(60, {24, 16, 16}));

    auto read = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    std::vector<std::vector<char>> logs, cks;
    std::vector<std::vector<double>> preds;
    for (int run = 0; run < 2; ++run) {
        const auto log = dir / ("determinism_" + std::to_string(run) + ".jsonl");
        const auto ck = dir / ("determinism_" + std::to_string(run) + ".ckpt");
        std::filesystem::remove(log);
        auto state = TrainState<double>::fresh(net, tc);
        train(state, data, {ck, std::nullopt, log});
        const auto probs =
            predict_volume<double>(probe.image, unet_model(state.params, net), {{16, 16, 16}, 0.5}, 2);
        logs.push_back(read(log));
        cks.push_back(read(ck));
        preds.emplace_back(probs.data().begin(), probs.data().end());
        std::filesystem::remove(log);
        std::filesystem::remove(ck);
    }
    const bool same_log = !logs[0].empty() && logs[0] == logs[1];
    const bool same_ck = cks[0] == cks[1];
    const bool same_pred =
        std::memcmp(preds[0].data(), preds[1].data(), preds[0].size() * sizeof(double)) == 0;
    CriterionResult r;
    r.passed = same_log && same_ck && same_pred;
    r.detail = std::string("two 64-bit runs: log ") + (same_log ? "identical" : "DIFFERS") + " (" +
               std::to_string(logs[0].size()) + " bytes), checkpoint " + (same_ck ? "identical" : "DIFFERS") +
               ", prediction " + (same_pred ? "identical" : "DIFFERS");
    return r;
}

// ---- parameter accounting --------------------------------------------------

CriterionResult parameter_accounting(const SuiteOptions&) {
    Rng rng(31);
    std::size_t cot_ok = 0, unet_ok = 0;
    const std::size_t kernels[] = {1, 3, 5, 7};
    for (int i = 0; i < 50; ++i) {
        CoTConfig c;
        c.channels = 1 + rng.below(64);
        c.context_kernel = kernels[rng.below(4)];
        c.attention_hidden = 1 + rng.below(c.channels);
        ParamStore<float> store;
        register_cot_params(store, "c", c, rng);
        if (store.total_size() == cot_param_count(c)) ++cot_ok;

        UNetConfig u;
        u.depth = 2 + rng.below(3);
        u.base_channels = 1 + rng.below(6);
        u.in_channels = 1 + rng.below(4);
        u.num_classes = 1 + rng.below(4);
        u.cot_placement.clear();
        for (std::size_t l = 0; l < u.depth; ++l)
            if (rng.below(2)) u.cot_placement.push_back(l);
        u.cot_context_kernel = kernels[rng.below(3)];
        u.cot_hidden_divisor = 1 + rng.below(2);
        u.replace_conv_with_cot = rng.below(4) == 0;
        if (init_unet_params<float>(u, i).total_size() == unet_param_count(u)) ++unet_ok;
    }
    const auto large = unet_param_count(UNetConfig::full_scale());
    const auto large_base = unet_param_count(UNetConfig::baseline(UNetConfig::full_scale()));
    const bool allocated = init_unet_params<float>(UNetConfig::full_scale(), 0).total_size() == large;
    CriterionResult r;
    r.passed = cot_ok == 50 && unet_ok == 50 && allocated && large >= 1'000'000 && large <= 3'000'000;
    r.detail = "CoT " + std::to_string(cot_ok) + "/50, U-Net " + std::to_string(unet_ok) +
               "/50 exact; larger preset " + std::to_string(large) + " parameters (baseline " +
               std::to_string(large_base) + "), in [1.0M, 3.0M]";
    return r;
}

}  // namespace

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> all{
        {"gradient-oracle", "finite-difference checks of ops, CoT block and depth-2 U-Net", false, gradient_oracle},
        {"cot-reduction", "zero W_delta gives Y == K1", false, cot_reduction},
        {"metric-oracles", "Dice and HD95 against counting and all-pairs oracles", false, metric_oracles},
        {"loss-anchors", "CE, Dice and alpha-mixing anchors", false, loss_anchors},
        {"scheduler-anchors", "cosine schedule anchors", false, scheduler_anchors},
        {"synthetic-overfit", "300-step overfit of one synthetic case", true, synthetic_overfit},
        {"baseline-vs-cot", "baseline vs CoT on held-out synthetic data", true, baseline_vs_cot},
        {"sliding-window", "single-window equivalence and coverage", false, sliding_window},
        {"nifti-round-trip", "NIfTI round trip and malformed-file errors", false, nifti_round_trip},
        {"determinism", "bit-identical training logs and predictions", true, determinism},
        {"parameter-accounting", "closed-form parameter counts", false, parameter_accounting},
    };
    return all;
}

CriterionResult run_criterion(const Criterion& c, const SuiteOptions& opts) {
    if (!opts.work_dir.empty()) std::filesystem::create_directories(opts.work_dir);
    const auto t0 = Clock::now();
    CriterionResult r;
    try {
        r = c.run(opts);
    } catch (const std::exception& e) {
        r.passed = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.id = c.id;
    r.seconds = seconds_since(t0);
    return r;
}

std::string format_result(const CriterionResult& r) {
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.1f", r.seconds);
    return std::string(r.passed ? "PASS " : "FAIL ") + r.id + ": " + r.detail + " (" + secs + " s)";
}

}  // namespace cotseg::verify
