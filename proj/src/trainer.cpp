#include "cotseg/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "json.hpp"

#include "cotseg/config.hpp"
#include "cotseg/errors.hpp"
#include "cotseg/ops.hpp"

namespace cotseg {

void TrainConfig::validate() const {
    if (!(lr0 > 0.0)) throw ParameterError("train: lr0 must be > 0");
    if (!(weight_decay >= 0.0)) throw ParameterError("train: weight_decay must be >= 0");
    if (epochs < 1) throw ParameterError("train: epochs must be >= 1");
    if (batch_size != 1) throw ParameterError("train: only batch_size 1 is supported");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ParameterError("train: beta1 and beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ParameterError("train: adam_eps must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("train: momentum must lie in [0, 1)");
    if (!(grad_clip >= 0.0)) throw ParameterError("train: grad_clip must be >= 0");
    for (auto p : patch)
        if (p == 0) throw ParameterError("train: patch extents must be positive");
    loss.validate();
}

double cosine_lr(std::size_t step, std::size_t total, double lr0) {
    if (total < 1) throw ParameterError("cosine_lr: total_steps must be >= 1");
    if (step > total)
        throw ParameterError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
    return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

template <class T>
Optimizer<T>::Optimizer(const ParamStore<T>& params, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& e : params.entries()) {
        m_.emplace_back(e.tensor.numel(), T(0));
        if (cfg.optimizer == OptimizerKind::Adam) v_.emplace_back(e.tensor.numel(), T(0));
    }
}

template <class T>
void Optimizer<T>::step(ParamStore<T>& params, double lr) {
    auto& entries = params.entries();
    if (entries.size() != m_.size()) throw ContractError("optimizer state does not match the parameter store");
    for (const auto& e : entries) {
        if (!e.tensor.has_grad()) continue;
        for (T g : e.tensor.grad())
            if (!std::isfinite(static_cast<double>(g)))
                throw NumericError("non-finite gradient in parameter " + e.name);
    }
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2, wd = cfg_.weight_decay;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const bool coupled = cfg_.decay == DecayMode::CoupledL2;
    const double shrink = coupled ? 1.0 : 1.0 - lr * wd;
    for (std::size_t k = 0; k < entries.size(); ++k) {
        auto& t = entries[k].tensor;
        auto p = t.mutable_data();
        const bool has = t.has_grad();
        const auto g = t.grad();
        auto& m = m_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            double gi = has ? static_cast<double>(g[i]) : 0.0;
            double pi = static_cast<double>(p[i]);
            if (coupled) gi += wd * pi;
            if (cfg_.optimizer == OptimizerKind::Adam) {
                auto& v = v_[k];
                const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
                const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.adam_eps);
            } else {
                const double bi = cfg_.momentum * static_cast<double>(m[i]) + gi;
                m[i] = static_cast<T>(bi);
                pi -= lr * bi;
            }
            p[i] = static_cast<T>(pi * shrink);
        }
    }
}

template <class T>
double grad_norm(const ParamStore<T>& params) {
    double ss = 0.0;
    for (const auto& e : params.entries())
        if (e.tensor.has_grad())
            for (T g : e.tensor.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(ss);
}

std::string StepRecord::to_json_line() const {
    nlohmann::json j{{"step", step}, {"epoch", epoch}, {"loss", loss}, {"lr", lr}, {"grad_norm", grad_norm},
                     {"wall_ms", wall_ms}};
    return j.dump();
}

StepRecord StepRecord::from_json_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    StepRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.epoch = j.at("epoch").get<std::size_t>();
    r.loss = j.at("loss").is_null() ? NAN : j.at("loss").get<double>();
    r.lr = j.at("lr").get<double>();
    r.grad_norm = j.at("grad_norm").is_null() ? NAN : j.at("grad_norm").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    return r;
}

template <class T>
TrainState<T> TrainState<T>::fresh(const UNetConfig& net, const TrainConfig& train) {
    net.validate();
    train.validate();
    TrainState s;
    s.net = net;
    s.train = train;
    s.params = init_unet_params<T>(net, train.seed);
    s.optimizer = Optimizer<T>(s.params, train);
    return s;
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix(seed, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> training_pair(const Case& c, const TrainConfig& cfg, std::size_t step) {
    if (!c.seg) throw ValidationError("case " + c.image.case_id + " has no segmentation");
    const Case patch = c.image.dims == cfg.patch
                           ? c
                           : crop_or_pad(c, cfg.patch, cfg.random_crop ? CropMode::Random : CropMode::Centered,
                                         mix(cfg.seed ^ 0x5eed, step));
    return {with_batch(volume_tensor<T>(patch.image)), with_batch(one_hot_labels<T>(*patch.seg))};
}

}  // namespace

template <class T>
std::vector<StepRecord> train(TrainState<T>& state, const std::vector<Case>& data, const TrainOutputs& out,
                              const std::function<void(const StepRecord&)>& on_step, std::size_t stop_at) {
    if (data.empty()) throw ParameterError("train: the dataset is empty");
    state.net.validate();
    state.train.validate();
    const auto& cfg = state.train;
    const std::size_t n = data.size();
    const std::size_t total = cfg.epochs * n;

    std::ofstream log;
    if (out.log) {
        log.open(*out.log, std::ios::app);
        if (!log) throw Error("cannot open log " + out.log->string());
    }
    std::vector<StepRecord> records;
    std::vector<std::size_t> order;
    std::size_t order_epoch = static_cast<std::size_t>(-1);

    for (std::size_t s = state.step; s < std::min(total, stop_at); ++s) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t epoch = s / n;
        if (epoch != order_epoch) {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        const auto [x, y] = training_pair<T>(data[order[s % n]], cfg, s);
        const double lr = cosine_lr(s, total, cfg.lr0);

        auto abort = [&](const std::string& why) {
            if (out.last_good) save_checkpoint(state, *out.last_good);
            throw NumericError("step " + std::to_string(s + 1) + ": " + why);
        };
        state.params.zero_grad();
        Tensor<T> loss;
        try {
            loss = combined_loss(softmax_channels(unet_forward(x, state.params, state.net)), y, cfg.loss);
        } catch (const NumericError& e) {
            abort(e.what());  // ops that refuse non-finite input
        }
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv)) abort("loss is not finite");
        loss.backward();
        const double gn = grad_norm(state.params);
        if (!std::isfinite(gn)) {
            for (const auto& e : state.params.entries())
                for (T g : e.tensor.grad())
                    if (!std::isfinite(static_cast<double>(g))) abort("non-finite gradient in parameter " + e.name);
        }
        if (cfg.grad_clip > 0.0 && gn > cfg.grad_clip) {
            const T f = static_cast<T>(cfg.grad_clip / gn);
            for (auto& e : state.params.entries())
                for (T& g : e.tensor.mutable_grad()) g *= f;
        }
        state.optimizer.step(state.params, lr);
        state.step = s + 1;

        StepRecord r{s + 1, epoch, lv, lr, gn, 0.0};
        if (cfg.record_wall_time)
            r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (log) {
            log << r.to_json_line() << '\n';
            log.flush();
        }
        records.push_back(r);
        if (on_step) on_step(r);
        const bool epoch_end = state.step % n == 0;
        if (out.checkpoint && cfg.checkpoint_every > 0 && epoch_end && (state.step / n) % cfg.checkpoint_every == 0)
            save_checkpoint(state, *out.checkpoint);
    }
    if (out.checkpoint) save_checkpoint(state, *out.checkpoint);
    return records;
}

template <class T>
double evaluate_loss(const ParamStore<T>& params, const UNetConfig& net, const Case& c, const LossConfig& loss) {
    NoGradGuard no_grad;
    if (!c.seg) throw ValidationError("case " + c.image.case_id + " has no segmentation");
    const auto x = with_batch(volume_tensor<T>(c.image));
    const auto y = with_batch(one_hot_labels<T>(*c.seg));
    return static_cast<double>(combined_loss(softmax_channels(unet_forward(x, params, net)), y, loss).item());
}

// ---- checkpoints ---------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kCkMagic[8] = {'C', 'O', 'T', 'S', 'E', 'G', 'C', 'K'};

class Writer {
public:
    template <class V>
    void put(V v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf.insert(buf.end(), p, p + sizeof(V));
    }
    void put_bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t> buf;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
    template <class V>
    V get() {
        need(sizeof(V));
        V v;
        std::memcpy(&v, b_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    const std::uint8_t* take(std::size_t n) {
        need(n);
        const auto* p = b_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (b_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated");
    }
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

template <class T>
void put_buffer(Writer& w, const std::string& name, const Shape& shape, std::span<const T> data) {
    w.put_string(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(sizeof(T)));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) w.put<std::uint64_t>(e);
    w.put_bytes(data.data(), data.size() * sizeof(T));
}

std::string checkpoint_config(const UNetConfig& net, const TrainConfig& train) {
    return nlohmann::json{{"model", to_json(net)}, {"loss", to_json(train.loss)}, {"train", to_json(train)}}.dump();
}

}  // namespace

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const TrainState<T>& state) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    Writer w;
    w.put_bytes(kCkMagic, 8);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint64_t>(state.step);
    w.put<std::uint64_t>(state.optimizer.steps_taken());
    const std::string cfg = checkpoint_config(state.net, state.train);
    w.put_string(cfg);
    w.put<std::uint64_t>(fnv1a(cfg));

    const auto& entries = state.params.entries();
    const auto& m = state.optimizer.first();
    const auto& v = state.optimizer.second();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size() + m.size() + v.size()));
    for (const auto& e : entries) put_buffer<T>(w, "param/" + e.name, e.tensor.shape(), e.tensor.data());
    for (std::size_t k = 0; k < m.size(); ++k)
        put_buffer<T>(w, "opt.m/" + entries[k].name, entries[k].tensor.shape(), std::span<const T>(m[k]));
    for (std::size_t k = 0; k < v.size(); ++k)
        put_buffer<T>(w, "opt.v/" + entries[k].name, entries[k].tensor.shape(), std::span<const T>(v[k]));
    return std::move(w.buf);
}

template <class T>
TrainState<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (std::memcmp(r.take(8), kCkMagic, 8) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto step = r.get<std::uint64_t>();
    const auto opt_steps = r.get<std::uint64_t>();
    const std::string cfg_text = r.get_string();
    if (r.get<std::uint64_t>() != fnv1a(cfg_text)) throw CheckpointError("config digest mismatch");

    TrainState<T> state;
    try {
        const auto j = nlohmann::json::parse(cfg_text);
        TrainConfig train = train_config_from_json(j.at("train"));
        train.loss = loss_config_from_json(j.at("loss"));
        state = TrainState<T>::fresh(unet_config_from_json(j.at("model")), train);
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("embedded config is invalid: ") + e.what());
    }
    state.step = step;
    state.optimizer.set_steps_taken(opt_steps);

    auto& entries = state.params.entries();
    auto& m = state.optimizer.first();
    auto& v = state.optimizer.second();
    const std::size_t expected = entries.size() + m.size() + v.size();
    const auto count = r.get<std::uint32_t>();
    if (count != expected)
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " buffers, config implies " +
                              std::to_string(expected));
    auto target = [&](const std::string& name) -> std::pair<std::span<T>, const Shape*> {
        for (std::size_t k = 0; k < entries.size(); ++k) {
            const auto& pname = entries[k].name;
            if (name == "param/" + pname) return {entries[k].tensor.mutable_data(), &entries[k].tensor.shape()};
            if (name == "opt.m/" + pname && k < m.size()) return {std::span<T>(m[k]), &entries[k].tensor.shape()};
            if (name == "opt.v/" + pname && k < v.size()) return {std::span<T>(v[k]), &entries[k].tensor.shape()};
        }
        throw CheckpointError("unexpected buffer " + name);
    };
    for (std::uint32_t b = 0; b < count; ++b) {
        const std::string name = r.get_string();
        const auto width = r.get<std::uint8_t>();
        if (width != 4 && width != 8) throw CheckpointError("buffer " + name + ": unsupported scalar width");
        Shape shape(r.get<std::uint32_t>());
        for (auto& e : shape) e = r.get<std::uint64_t>();
        auto [dst, expect_shape] = target(name);
        if (shape != *expect_shape)
            throw CheckpointError("buffer " + name + " has shape " + shape_str(shape) + ", config implies " +
                                  shape_str(*expect_shape));
        const auto* src = r.take(dst.size() * width);
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (width == 4) {
                float f;
                std::memcpy(&f, src + 4 * i, 4);
                dst[i] = static_cast<T>(f);
            } else {
                double d;
                std::memcpy(&d, src + 8 * i, 8);
                dst[i] = static_cast<T>(d);
            }
        }
    }
    if (!r.done()) throw CheckpointError("trailing bytes after the last buffer");
    return state;
}

template <class T>
void save_checkpoint(const TrainState<T>& state, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(state);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + tmp.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint<T>(bytes);
}

// ---- synthetic data ------------------------------------------------------

Case generate_synthetic_case(std::uint64_t seed, const Dims3& extents, const std::string& case_id) {
    for (auto e : extents)
        if (e < 8) throw ParameterError("synthetic case extents must be >= 8, got " + dims_str(extents));
    Rng rng(seed);
    // Radii grow by at least one voxel per nesting level, so the voxel at
    // the centre is ET and those at offsets floor(r_TC), floor(r_WT) along
    // an axis are NCR and ED. The WT ellipsoid stays inside the grid.
    std::array<double, 3> r_et, r_tc, r_wt;
    std::array<long, 3> centre;
    for (int a = 0; a < 3; ++a) {
        const double slack = std::floor((static_cast<double>(extents[a]) - 1.0) / 2.0) - 3.0;
        r_et[a] = 1.0 + rng.uniform() * 0.2 * slack;
        r_tc[a] = r_et[a] + 1.0 + rng.uniform() * 0.2 * slack;
        r_wt[a] = r_tc[a] + 1.0 + rng.uniform() * 0.35 * slack;
        const long reach = static_cast<long>(std::ceil(r_wt[a]));
        const long lo = reach, hi = static_cast<long>(extents[a]) - 1 - reach;
        centre[a] = lo + static_cast<long>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
    }
    auto inside = [](const std::array<double, 3>& d, const std::array<double, 3>& r) {
        double s = 0.0;
        for (int a = 0; a < 3; ++a) s += (d[a] / r[a]) * (d[a] / r[a]);
        return s <= 1.0;
    };

    // Region intensity per modality [FLAIR, T1, T1c, T2].
    static constexpr double kHealthy[4] = {1.0, 1.0, 1.0, 1.0};
    static constexpr double kEdema[4] = {2.0, 0.8, 0.9, 2.0};
    static constexpr double kNecrotic[4] = {1.2, 0.5, 0.6, 2.6};
    static constexpr double kEnhancing[4] = {1.6, 0.9, 2.4, 1.6};

    Case c;
    c.image.case_id = case_id.empty() ? "synthetic_" + std::to_string(seed) : case_id;
    c.image.dims = extents;
    const std::size_t n = dims_numel(extents);
    for (auto& ch : c.image.channels) ch.assign(n, 0.0);
    c.seg = LabelMask{extents, {1.0, 1.0, 1.0}, std::vector<std::uint8_t>(n, 0)};
    for (std::size_t x = 0; x < extents[0]; ++x)
        for (std::size_t y = 0; y < extents[1]; ++y)
            for (std::size_t z = 0; z < extents[2]; ++z) {
                const std::size_t i = (x * extents[1] + y) * extents[2] + z;
                const std::array<double, 3> d{static_cast<double>(static_cast<long>(x) - centre[0]),
                                              static_cast<double>(static_cast<long>(y) - centre[1]),
                                              static_cast<double>(static_cast<long>(z) - centre[2])};
                std::array<double, 3> b;
                const std::size_t p[3] = {x, y, z};
                for (int a = 0; a < 3; ++a) {
                    const double mid = (static_cast<double>(extents[a]) - 1.0) / 2.0;
                    b[a] = static_cast<double>(p[a]) - mid;
                }
                const double* base = nullptr;
                std::uint8_t label = 0;
                if (inside(d, r_et)) {
                    base = kEnhancing;
                    label = 4;
                } else if (inside(d, r_tc)) {
                    base = kNecrotic;
                    label = 1;
                } else if (inside(d, r_wt)) {
                    base = kEdema;
                    label = 2;
                } else if (inside(b, {0.45 * static_cast<double>(extents[0]), 0.45 * static_cast<double>(extents[1]),
                                      0.45 * static_cast<double>(extents[2])})) {
                    base = kHealthy;
                }
                c.seg->labels[i] = label;
                if (!base) continue;
                for (std::size_t m = 0; m < kNumModalities; ++m)
                    c.image.channels[m][i] = std::max(1.0, 100.0 * base[m] + 5.0 * rng.normal());
            }
    return c;
}

Case prepare_case(const Case& c, const std::optional<Dims3>& extents) {
    Case out;
    out.image = zscore_normalize(c.image);
    out.seg = c.seg;
    if (extents && *extents != out.image.dims) out = crop_or_pad(out, *extents, CropMode::Centered);
    return out;
}

#define COTSEG_TRAINER(T)                                                                                       \
    template class Optimizer<T>;                                                                                \
    template double grad_norm(const ParamStore<T>&);                                                            \
    template struct TrainState<T>;                                                                              \
    template std::vector<StepRecord> train(TrainState<T>&, const std::vector<Case>&, const TrainOutputs&,       \
                                           const std::function<void(const StepRecord&)>&, std::size_t);         \
    template double evaluate_loss(const ParamStore<T>&, const UNetConfig&, const Case&, const LossConfig&);     \
    template std::vector<std::uint8_t> encode_checkpoint(const TrainState<T>&);                                 \
    template TrainState<T> decode_checkpoint(const std::vector<std::uint8_t>&);                                 \
    template void save_checkpoint(const TrainState<T>&, const std::filesystem::path&);                          \
    template TrainState<T> load_checkpoint(const std::filesystem::path&);

COTSEG_TRAINER(float)
COTSEG_TRAINER(double)

}  // namespace cotseg
