#include "cotseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "cotseg/errors.hpp"

namespace cotseg {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_dims(const char* op, const Dims3& a, const Dims3& b) {
    if (a != b) throw DimensionError(std::string(op) + ": grid " + dims_str(a) + " vs " + dims_str(b));
}
}  // namespace

const std::array<RegionSpec, 3>& brats_regions() {
    static const std::array<RegionSpec, 3> regions{{
        {Region::ET, "ET", {4}},
        {Region::TC, "TC", {1, 4}},
        {Region::WT, "WT", {1, 2, 4}},
    }};
    return regions;
}

const RegionSpec& region_spec(Region r) { return brats_regions()[static_cast<std::size_t>(r)]; }

BinaryMask binarize_region(const LabelMask& mask, const RegionSpec& region) {
    mask.validate();
    BinaryMask out{mask.dims, std::vector<std::uint8_t>(mask.labels.size(), 0)};
    for (std::size_t i = 0; i < mask.labels.size(); ++i)
        out.data[i] = std::find(region.labels.begin(), region.labels.end(), mask.labels[i]) != region.labels.end();
    return out;
}

double dice_score(const BinaryMask& pred, const BinaryMask& truth) {
    require_same_dims("dice_score", pred.dims, truth.dims);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, t = truth.data[i] != 0;
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
    }
    if (tp + fp + fn == 0) return 1.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(fn + fp + 2 * tp);
}

std::vector<std::size_t> surface_voxels(const BinaryMask& m) {
    const std::size_t nx = m.dims[0], ny = m.dims[1], nz = m.dims[2];
    auto in = [&](std::size_t x, std::size_t y, std::size_t z) { return m.data[(x * ny + y) * nz + z] != 0; };
    std::vector<std::size_t> out;
    for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t z = 0; z < nz; ++z) {
                if (!in(x, y, z)) continue;
                const bool border = x == 0 || x + 1 == nx || y == 0 || y + 1 == ny || z == 0 || z + 1 == nz ||
                                    !in(x - 1, y, z) || !in(x + 1, y, z) || !in(x, y - 1, z) ||
                                    !in(x, y + 1, z) || !in(x, y, z - 1) || !in(x, y, z + 1);
                if (border) out.push_back((x * ny + y) * nz + z);
            }
    return out;
}

namespace {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line
// of `n` samples `stride` apart, positions scaled by `step` mm.
struct LineEdt {
    std::vector<double> f, z;
    std::vector<std::size_t> v;

    void run(double* data, std::size_t n, std::size_t stride, double step) {
        f.resize(n);
        v.resize(n);
        z.resize(n + 1);
        for (std::size_t i = 0; i < n; ++i) f[i] = data[i * stride];
        long k = -1;
        for (std::size_t q = 0; q < n; ++q) {
            if (f[q] == kInf) continue;
            const double xq = static_cast<double>(q) * step;
            double s = -kInf;
            while (k >= 0) {
                const double xv = static_cast<double>(v[k]) * step;
                s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
                if (s > z[k]) break;
                --k;
            }
            if (k < 0) s = -kInf;
            ++k;
            v[k] = q;
            z[k] = s;
            z[k + 1] = kInf;
        }
        if (k < 0) return;  // no sites on this line
        long j = 0;
        for (std::size_t p = 0; p < n; ++p) {
            const double xp = static_cast<double>(p) * step;
            while (z[j + 1] < xp) ++j;
            const double d = (static_cast<double>(p) - static_cast<double>(v[j])) * step;
            data[p * stride] = d * d + f[v[j]];
        }
    }
};

}  // namespace

std::vector<double> squared_distance_transform(const BinaryMask& sites, const Spacing3& spacing) {
    const std::size_t nx = sites.dims[0], ny = sites.dims[1], nz = sites.dims[2];
    std::vector<double> d(sites.data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = sites.data[i] ? 0.0 : kInf;
    LineEdt line;
    for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t y = 0; y < ny; ++y) line.run(d.data() + (x * ny + y) * nz, nz, 1, spacing[2]);
    for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t z = 0; z < nz; ++z) line.run(d.data() + x * ny * nz + z, ny, nz, spacing[1]);
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t z = 0; z < nz; ++z) line.run(d.data() + y * nz + z, nx, ny * nz, spacing[0]);
    return d;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ContractError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

SurfaceDistance surface_distance(const BinaryMask& pred, const BinaryMask& truth, const Spacing3& spacing) {
    require_same_dims("surface_distance", pred.dims, truth.dims);
    for (double s : spacing)
        if (!(s > 0.0)) throw ParameterError("surface_distance: spacing must be positive");
    const auto sp = surface_voxels(pred);
    const auto st = surface_voxels(truth);
    SurfaceDistance r;
    if (sp.empty() && st.empty()) return r;
    if (sp.empty() || st.empty()) {
        r.one_empty = true;
        r.hd95 = r.hd100 = kInf;
        return r;
    }
    auto as_sites = [&](const std::vector<std::size_t>& idx) {
        BinaryMask m{pred.dims, std::vector<std::uint8_t>(pred.data.size(), 0)};
        for (auto i : idx) m.data[i] = 1;
        return m;
    };
    const auto to_truth = squared_distance_transform(as_sites(st), spacing);
    const auto to_pred = squared_distance_transform(as_sites(sp), spacing);
    std::vector<double> pooled;
    pooled.reserve(sp.size() + st.size());
    for (auto i : st) pooled.push_back(std::sqrt(to_pred[i]));
    for (auto i : sp) pooled.push_back(std::sqrt(to_truth[i]));
    r.hd100 = *std::max_element(pooled.begin(), pooled.end());
    r.hd95 = percentile(std::move(pooled), 95.0);
    return r;
}

double hd95(const BinaryMask& pred, const BinaryMask& truth, const Spacing3& spacing) {
    return surface_distance(pred, truth, spacing).hd95;
}

CaseEval evaluate_case(const LabelMask& pred, const LabelMask& truth, const Spacing3& spacing, std::string case_id) {
    require_same_dims("evaluate_case", pred.dims, truth.dims);
    CaseEval e;
    e.case_id = std::move(case_id);
    double dice_sum = 0.0, hd_sum = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
        const auto& spec = brats_regions()[r];
        const auto p = binarize_region(pred, spec);
        const auto t = binarize_region(truth, spec);
        auto& score = e.regions[r];
        score.dice = dice_score(p, t);
        const auto sd = surface_distance(p, t, spacing);
        score.hd95 = sd.hd95;
        score.hd100 = sd.hd100;
        score.hd95_undefined = sd.one_empty;
        dice_sum += score.dice;
        hd_sum += score.hd95;
    }
    e.avg_dice = dice_sum / 3.0;
    e.avg_hd95 = hd_sum / 3.0;
    return e;
}

Aggregate aggregate(const std::vector<double>& values) {
    Aggregate a;
    double sum = 0.0;
    for (double v : values) {
        if (!std::isfinite(v)) {
            ++a.excluded;
            continue;
        }
        sum += v;
        ++a.count;
    }
    if (a.count == 0) {
        a.mean = a.std = std::numeric_limits<double>::quiet_NaN();
        return a;
    }
    a.mean = sum / static_cast<double>(a.count);
    double ss = 0.0;
    for (double v : values)
        if (std::isfinite(v)) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(a.count));
    return a;
}

void EvalReport::finalize() {
    for (std::size_t col = 0; col < 4; ++col) {
        std::vector<double> d, h;
        for (const auto& c : cases) {
            d.push_back(col < 3 ? c.regions[col].dice : c.avg_dice);
            h.push_back(col < 3 ? c.regions[col].hd95 : c.avg_hd95);
        }
        dice[col] = aggregate(d);
        hd95[col] = aggregate(h);
    }
}

namespace {

const char* const kColumns[4] = {"ET", "TC", "WT", "Avg"};

std::string num(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

nlohmann::json json_num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::string pm(const Aggregate& a, double scale) {
    if (a.count == 0) return "n/a";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f±%.2f", a.mean * scale, a.std * scale);
    std::string s = buf;
    if (a.excluded) s += "*";
    return s;
}

}  // namespace

std::string EvalReport::to_tsv() const {
    std::ostringstream os;
    os << "case";
    for (const char* k : {"dice", "hd95"})
        for (const char* c : kColumns) os << '\t' << k << '_' << c;
    os << '\n';
    for (const auto& c : cases) {
        os << c.case_id;
        for (const auto& r : c.regions) os << '\t' << num(r.dice);
        os << '\t' << num(c.avg_dice);
        for (const auto& r : c.regions) os << '\t' << num(r.hd95);
        os << '\t' << num(c.avg_hd95) << '\n';
    }
    for (const char* stat : {"mean", "std"}) {
        os << stat;
        const bool mean = stat[0] == 'm';
        for (const auto& a : dice) os << '\t' << num(mean ? a.mean : a.std);
        for (const auto& a : hd95) os << '\t' << num(mean ? a.mean : a.std);
        os << '\n';
    }
    return os.str();
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["tag"] = tag;
    j["cases"] = nlohmann::json::array();
    for (const auto& c : cases) {
        nlohmann::json row;
        row["case_id"] = c.case_id;
        for (std::size_t r = 0; r < 3; ++r) {
            const auto& s = c.regions[r];
            row[kColumns[r]] = {{"dice", s.dice},
                                {"hd95", json_num(s.hd95)},
                                {"hd100", json_num(s.hd100)},
                                {"hd95_undefined", s.hd95_undefined}};
        }
        row["Avg"] = {{"dice", c.avg_dice}, {"hd95", json_num(c.avg_hd95)}};
        j["cases"].push_back(row);
    }
    for (std::size_t col = 0; col < 4; ++col) {
        auto agg = [](const Aggregate& a) {
            return nlohmann::json{{"mean", json_num(a.mean)},
                                  {"std", json_num(a.std)},
                                  {"count", a.count},
                                  {"excluded", a.excluded}};
        };
        j["summary"][kColumns[col]] = {{"dice", agg(dice[col])}, {"hd95", agg(hd95[col])}};
    }
    return j.dump(2) + "\n";
}

std::string comparison_table(const std::vector<EvalReport>& reports) {
    std::size_t width = 5;
    for (const auto& r : reports) width = std::max(width, r.tag.size());
    std::ostringstream os;
    auto cell = [&](const std::string& s, std::size_t w) {
        os << s;
        // "±" is two bytes but one column.
        const std::size_t shown = s.size() - (s.find("±") != std::string::npos ? 1 : 0);
        for (std::size_t i = shown; i < w; ++i) os << ' ';
    };
    cell("Model", width + 2);
    os << "| Dice score (%)";
    for (int i = 0; i < 3 * 14 - 1; ++i) os << ' ';
    os << "| HD95 (mm)\n";
    cell("", width + 2);
    for (int block = 0; block < 2; ++block) {
        os << "| ";
        for (const char* c : kColumns) cell(c, 14);
    }
    os << '\n';
    for (const auto& r : reports) {
        cell(r.tag, width + 2);
        os << "| ";
        for (const auto& a : r.dice) cell(pm(a, 100.0), 14);
        os << "| ";
        for (const auto& a : r.hd95) cell(pm(a, 1.0), 14);
        os << '\n';
    }
    bool any_excluded = false;
    for (const auto& r : reports)
        for (const auto& a : r.hd95) any_excluded = any_excluded || a.excluded;
    if (any_excluded) os << "* some cases had an empty region on one side; their HD95 is excluded\n";
    return os.str();
}

}  // namespace cotseg
