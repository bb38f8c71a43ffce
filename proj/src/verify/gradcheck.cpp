#include "cotseg/verify/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cotseg/errors.hpp"
#include "cotseg/ops.hpp"
#include "cotseg/rng.hpp"

namespace cotseg::verify {

double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace {

// Analytic gradients come from `forward` in double; numeric derivatives
// from `numeric_forward` evaluated on `numeric_params` of type E.
template <class E>
GradCheckReport run_check(const std::function<Tensor<double>()>& forward, const std::vector<NamedTensor>& wrt,
                          const std::function<Tensor<E>()>& numeric_forward, std::vector<Tensor<E>> numeric_params,
                          const GradCheckOptions& opts) {
    if (opts.order != 2 && opts.order != 4) throw ParameterError("gradcheck: order must be 2 or 4");
    GradCheckReport report;
    Rng rng(opts.seed);

    Tensor<double> out = forward();
    std::vector<double> proj(out.numel());
    for (auto& w : proj) w = rng.uniform(-1.0, 1.0);
    const auto proj_t = Tensor<double>::from_data(out.shape(), proj);

    std::vector<Tensor<double>> params;
    for (const auto& [name, t] : wrt) {
        params.push_back(t);
        params.back().zero_grad();
    }
    sum(mul(out, proj_t)).backward();
    out = Tensor<double>();
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

    auto evaluate = [&](std::uint64_t& signature) {
        NoGradGuard guard;
        debug::reset_kink_signature();
        debug::set_kink_tracking(true);
        auto y = numeric_forward();
        debug::set_kink_tracking(false);
        signature = debug::kink_signature();
        return std::vector<E>(y.data().begin(), y.data().end());
    };
    auto project = [&](const std::vector<E>& a, const std::vector<E>& b) {
        E acc = 0;
        for (std::size_t j = 0; j < a.size(); ++j) acc += static_cast<E>(proj[j]) * (a[j] - b[j]);
        return acc;
    };

    for (std::size_t t = 0; t < params.size(); ++t) {
        auto values = numeric_params[t].mutable_data();
        std::vector<std::size_t> coords(values.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (opts.max_coords_per_tensor && coords.size() > opts.max_coords_per_tensor) {
            for (std::size_t i = 0; i < opts.max_coords_per_tensor; ++i)
                std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
            coords.resize(opts.max_coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t c : coords) {
            const E saved = values[c];
            // Central stencil over offsets +-h (order 2) or +-h, +-2h (order 4).
            // The realised perturbations are used in place of the nominal h.
            auto probe = [&](double offset, std::uint64_t& sig, E& at) {
                values[c] = saved + static_cast<E>(offset);
                at = values[c];
                return evaluate(sig);
            };
            std::uint64_t sig_plus = 0, sig_minus = 0, sig_plus2 = 0, sig_minus2 = 0;
            E hi = 0, lo = 0, hi2 = 0, lo2 = 0;
            const auto plus = probe(opts.step, sig_plus, hi);
            const auto minus = probe(-opts.step, sig_minus, lo);
            std::vector<E> plus2, minus2;
            if (opts.order == 4) {
                plus2 = probe(2 * opts.step, sig_plus2, hi2);
                minus2 = probe(-2 * opts.step, sig_minus2, lo2);
            }
            values[c] = saved;
            if (sig_plus != sig_minus || (opts.order == 4 && (sig_plus2 != sig_plus || sig_minus2 != sig_plus))) {
                ++report.skipped;
                continue;
            }
            E numeric = project(plus, minus) / (hi - lo);
            if (opts.order == 4) numeric = (4 * numeric - project(plus2, minus2) / (hi2 - lo2)) / 3;
            const double err = relative_error(analytic[t][c], static_cast<double>(numeric));
            ++report.checked;
            if (err > report.max_rel_error || report.worst.empty()) {
                report.max_rel_error = std::max(report.max_rel_error, err);
                report.worst = wrt[t].first + "[" + std::to_string(c) + "]";
                report.worst_analytic = analytic[t][c];
                report.worst_numeric = static_cast<double>(numeric);
            }
        }
    }
    const double total = static_cast<double>(report.checked + report.skipped);
    report.passed = report.checked > 0 && report.max_rel_error < opts.tolerance &&
                    static_cast<double>(report.skipped) <= opts.max_skip_fraction * total;
    return report;
}

}  // namespace

GradCheckReport check_gradients(const std::function<Tensor<double>()>& forward, const std::vector<NamedTensor>& wrt,
                                const GradCheckOptions& opts) {
    std::vector<Tensor<double>> params;
    for (const auto& nt : wrt) params.push_back(nt.second);
    return run_check<double>(forward, wrt, forward, params, opts);
}

GradCheckReport check_gradients_extended(const std::function<Tensor<double>()>& forward,
                                         const std::vector<NamedTensor>& wrt,
                                         const std::function<Tensor<long double>()>& extended_forward,
                                         const std::vector<Tensor<long double>>& extended_wrt,
                                         const GradCheckOptions& opts) {
    if (extended_wrt.size() != wrt.size()) throw ParameterError("gradcheck: tensor lists differ in length");
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        if (extended_wrt[i].shape() != wrt[i].second.shape())
            throw ParameterError("gradcheck: shape mismatch for " + wrt[i].first);
        for (std::size_t j = 0; j < extended_wrt[i].numel(); ++j)
            if (static_cast<double>(extended_wrt[i].data()[j]) != wrt[i].second.data()[j])
                throw ParameterError("gradcheck: extended copy of " + wrt[i].first + " differs");
    }
    return run_check<long double>(forward, wrt, extended_forward, extended_wrt, opts);
}

}  // namespace cotseg::verify
