#include "cotseg/config.hpp"

#include <fstream>
#include <set>

#include "cotseg/errors.hpp"

namespace cotseg {

using nlohmann::json;

namespace {

// Reads the keys of one object, remembering which were consumed so the
// rest can be reported as unknown.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_, "expected an object");
    }

    template <class V>
    void read(const char* key, V& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<V>();
        } catch (const json::exception& e) {
            throw ConfigError(name(key), std::string("wrong type (") + it->type_name() + ")");
        }
    }

    void read_dims(const char* key, Dims3& out) {
        std::vector<long long> v;
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        if (it->is_number_integer()) {
            const auto n = it->get<long long>();
            v = {n, n, n};
        } else {
            read(key, v);
        }
        if (v.size() != 3) throw ConfigError(name(key), "expected an integer or a list of 3 integers");
        for (int a = 0; a < 3; ++a) {
            if (v[a] < 1) throw ConfigError(name(key), "extents must be positive");
            out[a] = static_cast<std::size_t>(v[a]);
        }
    }

    template <class E>
    void read_enum(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
        std::string s;
        bool present = j_.contains(key);
        read(key, s);
        if (!present) return;
        for (const auto& [n, v] : names)
            if (s == n) {
                out = v;
                return;
            }
        std::string allowed;
        for (const auto& [n, v] : names) allowed += (allowed.empty() ? "" : ", ") + std::string(n);
        throw ConfigError(name(key), "'" + s + "' is not one of " + allowed);
    }

    const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(name(it.key()), "unknown key");
    }

    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

json dims_json(const Dims3& d) { return json::array({d[0], d[1], d[2]}); }

template <class F>
void as_config_error(const std::string& key, F&& check) {
    try {
        check();
    } catch (const ParameterError& e) {
        throw ConfigError(key, e.what());
    }
}

}  // namespace

ModalitySet DataConfig::keep_set() const {
    ModalitySet keep{false, false, false, false};
    for (const auto& m : keep_modalities) keep[static_cast<std::size_t>(parse_modality(m))] = true;
    return keep;
}

std::string precision_name(Precision p) { return p == Precision::Float32 ? "float32" : "float64"; }

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

json to_json(const UNetConfig& c) {
    return {{"in_channels", c.in_channels},
            {"num_classes", c.num_classes},
            {"depth", c.depth},
            {"base_channels", c.base_channels},
            {"cot_placement", c.cot_placement},
            {"cot_context_kernel", c.cot_context_kernel},
            {"cot_hidden_divisor", c.cot_hidden_divisor},
            {"cot_attention_normalization", c.cot_attention_normalization},
            {"cot_fusion", c.cot_fusion == CoTFusion::Sum ? "sum" : "bypass"},
            {"replace_conv_with_cot", c.replace_conv_with_cot},
            {"norm_eps", c.norm_eps}};
}

json to_json(const LossConfig& c) { return {{"alpha", c.alpha}, {"epsilon", c.epsilon}}; }

json to_json(const TrainConfig& c) {
    return {{"lr0", c.lr0},
            {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"fold", c.fold},
            {"checkpoint_every", c.checkpoint_every},
            {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
            {"decay", c.decay == DecayMode::Decoupled ? "decoupled" : "coupled_l2"},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"momentum", c.momentum},
            {"grad_clip", c.grad_clip},
            {"patch", dims_json(c.patch)},
            {"random_crop", c.random_crop},
            {"record_wall_time", c.record_wall_time}};
}

json to_json(const SlidingWindowConfig& c) { return {{"patch", dims_json(c.patch)}, {"overlap", c.overlap}}; }

json to_json(const DataConfig& c) {
    return {{"root", c.root},
            {"synthetic", c.synthetic},
            {"synthetic_extent", dims_json(c.synthetic_extent)},
            {"synthetic_seed", c.synthetic_seed},
            {"folds", c.folds},
            {"keep_modalities", c.keep_modalities}};
}

json to_json(const RunConfig& c) {
    return {{"tag", c.tag},
            {"precision", precision_name(c.precision)},
            {"model", to_json(c.model)},
            {"loss", to_json(c.train.loss)},
            {"train", to_json(c.train)},
            {"inference", to_json(c.inference)},
            {"data", to_json(c.data)}};
}

UNetConfig unet_config_from_json(const json& j, UNetConfig c, const std::string& path) {
    Section s(j, path);
    s.read("in_channels", c.in_channels);
    s.read("num_classes", c.num_classes);
    s.read("depth", c.depth);
    s.read("base_channels", c.base_channels);
    s.read("cot_placement", c.cot_placement);
    s.read("cot_context_kernel", c.cot_context_kernel);
    s.read("cot_hidden_divisor", c.cot_hidden_divisor);
    s.read("cot_attention_normalization", c.cot_attention_normalization);
    s.read_enum("cot_fusion", c.cot_fusion, {{"sum", CoTFusion::Sum}, {"bypass", CoTFusion::Bypass}});
    s.read("replace_conv_with_cot", c.replace_conv_with_cot);
    s.read("norm_eps", c.norm_eps);
    s.finish();
    return c;
}

LossConfig loss_config_from_json(const json& j, LossConfig c, const std::string& path) {
    Section s(j, path);
    s.read("alpha", c.alpha);
    s.read("epsilon", c.epsilon);
    s.finish();
    return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c, const std::string& path) {
    Section s(j, path);
    s.read("lr0", c.lr0);
    s.read("weight_decay", c.weight_decay);
    s.read("epochs", c.epochs);
    s.read("batch_size", c.batch_size);
    s.read("seed", c.seed);
    s.read("fold", c.fold);
    s.read("checkpoint_every", c.checkpoint_every);
    s.read_enum("optimizer", c.optimizer, {{"adam", OptimizerKind::Adam}, {"sgd", OptimizerKind::Sgd}});
    s.read_enum("decay", c.decay, {{"decoupled", DecayMode::Decoupled}, {"coupled_l2", DecayMode::CoupledL2}});
    s.read("beta1", c.beta1);
    s.read("beta2", c.beta2);
    s.read("adam_eps", c.adam_eps);
    s.read("momentum", c.momentum);
    s.read("grad_clip", c.grad_clip);
    s.read_dims("patch", c.patch);
    s.read("random_crop", c.random_crop);
    s.read("record_wall_time", c.record_wall_time);
    s.finish();
    return c;
}

SlidingWindowConfig window_config_from_json(const json& j, SlidingWindowConfig c, const std::string& path) {
    Section s(j, path);
    s.read_dims("patch", c.patch);
    s.read("overlap", c.overlap);
    s.finish();
    return c;
}

DataConfig data_config_from_json(const json& j, DataConfig c, const std::string& path) {
    Section s(j, path);
    s.read("root", c.root);
    s.read("synthetic", c.synthetic);
    s.read_dims("synthetic_extent", c.synthetic_extent);
    s.read("synthetic_seed", c.synthetic_seed);
    s.read("folds", c.folds);
    s.read("keep_modalities", c.keep_modalities);
    s.finish();
    return c;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
    Section s(j, "");
    s.read("tag", c.tag);
    s.read_enum("precision", c.precision, {{"float32", Precision::Float32}, {"float64", Precision::Float64}});
    if (const auto* m = s.child("model")) c.model = unet_config_from_json(*m, c.model);
    if (const auto* l = s.child("loss")) c.train.loss = loss_config_from_json(*l, c.train.loss);
    if (const auto* t = s.child("train")) c.train = train_config_from_json(*t, c.train);
    if (const auto* i = s.child("inference")) c.inference = window_config_from_json(*i, c.inference);
    if (const auto* d = s.child("data")) c.data = data_config_from_json(*d, c.data);
    s.finish();
    return c;
}

void RunConfig::validate() const {
    if (tag.empty() || tag.find_first_of("/\\ ") != std::string::npos)
        throw ConfigError("tag", "must be non-empty without slashes or spaces");
    const auto& l = train.loss;
    if (!(l.alpha >= 0.0 && l.alpha <= 1.0))
        throw ConfigError("loss.alpha", "must lie in [0, 1], got " + std::to_string(l.alpha));
    if (!(l.epsilon > 0.0)) throw ConfigError("loss.epsilon", "must be > 0");
    if (!(train.lr0 > 0.0)) throw ConfigError("train.lr0", "must be > 0");
    if (!(train.weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
    if (train.epochs < 1) throw ConfigError("train.epochs", "must be >= 1");
    if (train.batch_size != 1) throw ConfigError("train.batch_size", "only batch size 1 is supported");
    if (model.in_channels != kNumModalities) throw ConfigError("model.in_channels", "must be 4 (one per modality)");
    if (model.num_classes != 4) throw ConfigError("model.num_classes", "must be 4");
    as_config_error("model", [&] { model.validate(); });
    as_config_error("train", [&] { train.validate(); });
    for (auto p : train.patch)
        if (p % model.spatial_multiple() != 0)
            throw ConfigError("train.patch", "extents must be multiples of " + std::to_string(model.spatial_multiple()));
    as_config_error("inference", [&] { inference.validate(model.spatial_multiple()); });
    if (data.folds < 2) throw ConfigError("data.folds", "must be >= 2");
    for (auto e : data.synthetic_extent)
        if (e < 8) throw ConfigError("data.synthetic_extent", "extents must be >= 8");
    if (data.keep_modalities.empty()) throw ConfigError("data.keep_modalities", "keep at least one modality");
    try {
        (void)data.keep_set();
    } catch (const ParameterError& e) {
        throw ConfigError("data.keep_modalities", e.what());
    }
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("file", "cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("file", path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace cotseg
