// cotseg command-line tool.
//
// Exit codes: 0 ok, 1 configuration, 2 data, 3 numeric abort,
// 4 checkpoint, 5 verification failure.
#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "cotseg/config.hpp"
#include "cotseg/errors.hpp"
#include "cotseg/inference.hpp"
#include "cotseg/metrics.hpp"
#include "cotseg/nifti.hpp"
#include "cotseg/preprocess.hpp"
#include "cotseg/tensor.hpp"
#include "cotseg/trainer.hpp"
#include "cotseg/unet.hpp"
#include "cotseg/verify/suite.hpp"

namespace fs = std::filesystem;
using namespace cotseg;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kConfig = 1, kData = 2, kNumeric = 3, kCheckpoint = 4, kVerify = 5 };

struct Failure : std::runtime_error {
    int code;
    Failure(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
    if (!out) throw Failure(kData, "cannot write " + p.string());
}

fs::path make_run_dir(const fs::path& root, const std::string& tag) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream name;
    name << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << tag;
    fs::path dir = root / name.str();
    for (int i = 2; fs::exists(dir); ++i) dir = root / (name.str() + "-" + std::to_string(i));
    fs::create_directories(dir);
    return dir;
}

std::string synthetic_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synthetic_%03zu", i);
    return buf;
}

std::vector<Case> load_cases(const DataConfig& d) {
    std::vector<Case> cases;
    if (d.synthetic > 0) {
        for (std::size_t i = 0; i < d.synthetic; ++i)
            cases.push_back(generate_synthetic_case(d.synthetic_seed + i, d.synthetic_extent, synthetic_id(i)));
        return cases;
    }
    if (d.root.empty()) throw ConfigError("data.root", "no data root and no synthetic cases requested");
    if (!fs::is_directory(d.root)) throw Failure(kData, "data root " + d.root + " is not a directory");
    for (const auto& id : list_cases(d.root)) cases.push_back(read_case(d.root, id));
    if (cases.empty()) throw Failure(kData, "no cases under " + d.root);
    return cases;
}

// (root, ids) for either a tree of case directories or a single case directory.
std::pair<fs::path, std::vector<std::string>> resolve_cases(fs::path input) {
    if (fs::is_regular_file(input)) input = input.parent_path();
    if (!fs::is_directory(input)) throw Failure(kData, "no such case directory: " + input.string());
    auto ids = list_cases(input);
    if (!ids.empty()) return {input, ids};
    input = fs::absolute(input).lexically_normal();
    if (input.filename().empty()) input = input.parent_path();
    const auto id = input.filename().string();
    const auto siblings = list_cases(input.parent_path());
    if (!std::binary_search(siblings.begin(), siblings.end(), id))
        throw Failure(kData, "no cases found under " + input.string());
    return {input.parent_path(), {id}};
}

// Ids of sub-directories holding `<id>/<id>_seg.nii[.gz]`.
std::vector<std::string> list_segmentations(const fs::path& root) {
    std::vector<std::string> ids;
    if (!fs::is_directory(root)) throw Failure(kData, "not a directory: " + root.string());
    for (const auto& e : fs::directory_iterator(root)) {
        if (!e.is_directory()) continue;
        const auto id = e.path().filename().string();
        if (fs::exists(e.path() / (id + "_seg.nii.gz")) || fs::exists(e.path() / (id + "_seg.nii"))) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

LabelMask read_segmentation(const fs::path& root, const std::string& id) {
    const auto gz = root / id / (id + "_seg.nii.gz");
    return to_label_mask(read_nifti(fs::exists(gz) ? gz : root / id / (id + "_seg.nii")));
}

void write_segmentation(const fs::path& root, const std::string& id, const LabelMask& m) {
    fs::create_directories(root / id);
    write_nifti(from_label_mask(m), root / id / (id + "_seg.nii.gz"));
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
    std::string config, run_dir, runs_root = "runs", tag;
    std::optional<std::size_t> synthetic, epochs, fold;
    std::optional<std::uint64_t> seed;
};

template <class T>
void run_training(const RunConfig& cfg, const std::vector<Case>& data, const fs::path& dir) {
    auto state = TrainState<T>::fresh(cfg.model, cfg.train);
    const auto records = train(state, data, {dir / "checkpoint.ckpt", dir / "last_good.ckpt", dir / "log.jsonl"},
                               [](const StepRecord& r) {
                                   if (r.step % 10 == 0 || r.step == 1)
                                       std::cerr << "step " << r.step << " epoch " << r.epoch << " loss " << r.loss
                                                 << " lr " << r.lr << '\n';
                               });
    if (!records.empty())
        std::cout << "final loss " << records.back().loss << " after " << records.size() << " steps\n";
}

int cmd_train(const TrainArgs& a) {
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    if (a.synthetic) cfg.data.synthetic = *a.synthetic;
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.fold) cfg.train.fold = *a.fold;
    if (a.seed) cfg.train.seed = *a.seed;
    if (!a.tag.empty()) cfg.tag = a.tag;
    cfg.validate();

    auto cases = load_cases(cfg.data);
    std::vector<std::string> ids;
    for (const auto& c : cases) ids.push_back(c.image.case_id);
    std::vector<std::string> validation;
    if (cfg.data.folds >= 2 && ids.size() >= cfg.data.folds) {
        if (cfg.train.fold >= cfg.data.folds)
            throw ConfigError("train.fold", "fold " + std::to_string(cfg.train.fold) + " with only " +
                                                std::to_string(cfg.data.folds) + " folds");
        validation = split_folds(ids, cfg.data.folds, cfg.train.seed)[cfg.train.fold];
    }
    std::vector<Case> train_set;
    const auto keep = cfg.data.keep_set();
    for (auto& c : cases) {
        if (std::find(validation.begin(), validation.end(), c.image.case_id) != validation.end()) continue;
        if (!c.seg) throw Failure(kData, "training case " + c.image.case_id + " has no segmentation");
        c.image = mask_modalities(c.image, keep);
        train_set.push_back(prepare_case(c));
    }

    const fs::path dir = a.run_dir.empty() ? make_run_dir(a.runs_root, cfg.tag) : fs::path(a.run_dir);
    fs::create_directories(dir);
    write_text(dir / "resolved_config.json", to_json(cfg).dump(2) + "\n");
    std::cout << "run directory " << dir.string() << "\n";
    std::cout << "training on " << train_set.size() << " cases\n";
    std::cout << "validation:";
    for (std::size_t i = 0; i < validation.size(); ++i) std::cout << (i ? "," : " ") << validation[i];
    std::cout << "\n";
    if (cfg.precision == Precision::Float64)
        run_training<double>(cfg, train_set, dir);
    else
        run_training<float>(cfg, train_set, dir);
    return kOk;
}

// ---- predict / ablate ------------------------------------------------------

struct Model {
    Precision precision = Precision::Float32;
    UNetConfig net;
    std::optional<TrainState<float>> f32;
    std::optional<TrainState<double>> f64;

    LabelMask predict(const Volume& vol, const SlidingWindowConfig& sw) const {
        if (f64)
            return decode_prediction(
                predict_volume<double>(vol, unet_model(f64->params, net), sw, net.spatial_multiple()), vol.spacing);
        return decode_prediction(predict_volume<float>(vol, unet_model(f32->params, net), sw, net.spatial_multiple()),
                                 vol.spacing);
    }
};

Model load_model(const std::string& checkpoint, const std::string& config_path, SlidingWindowConfig& sw) {
    std::optional<RunConfig> cfg;
    if (!config_path.empty()) {
        cfg = load_run_config(config_path);
        cfg->validate();
        sw = cfg->inference;
    }
    Model m;
    m.precision = cfg ? cfg->precision : Precision::Float32;
    if (m.precision == Precision::Float64) {
        m.f64 = load_checkpoint<double>(checkpoint);
        m.net = m.f64->net;
    } else {
        m.f32 = load_checkpoint<float>(checkpoint);
        m.net = m.f32->net;
    }
    if (cfg && to_json(cfg->model) != to_json(m.net))
        throw CheckpointError("checkpoint model " + to_json(m.net).dump() + " does not match configured model " +
                              to_json(cfg->model).dump());
    sw.validate(m.net.spatial_multiple());
    return m;
}

struct PredictArgs {
    std::string checkpoint, input, out, config;
    std::optional<double> overlap;
    std::string drop;
};

int cmd_predict(const PredictArgs& a) {
    SlidingWindowConfig sw;
    auto model = load_model(a.checkpoint, a.config, sw);
    if (a.overlap) sw.overlap = *a.overlap;
    sw.validate(model.net.spatial_multiple());
    const auto [root, ids] = resolve_cases(a.input);
    for (const auto& id : ids) {
        const auto c = read_case(root, id);
        const auto pred = model.predict(zscore_normalize(c.image), sw);
        write_segmentation(a.out, id, pred);
        std::cout << "predicted " << id << " " << dims_str(pred.dims) << "\n";
    }
    return kOk;
}

void write_report(const EvalReport& r, const fs::path& out, const std::string& stem) {
    fs::create_directories(out);
    write_text(out / (stem + ".tsv"), r.to_tsv());
    write_text(out / (stem + ".json"), r.to_json());
}

int cmd_ablate(const PredictArgs& a) {
    SlidingWindowConfig sw;
    auto model = load_model(a.checkpoint, a.config, sw);
    if (a.overlap) sw.overlap = *a.overlap;
    sw.validate(model.net.spatial_multiple());
    ModalitySet keep = kAllModalities;
    if (!a.drop.empty() && a.drop != "none") keep[static_cast<std::size_t>(parse_modality(a.drop))] = false;
    const auto [root, ids] = resolve_cases(a.input);
    EvalReport report;
    report.tag = keep_set_tag(keep);
    for (const auto& id : ids) {
        const auto c = read_case(root, id);
        if (!c.seg) throw Failure(kData, "case " + id + " has no segmentation to evaluate against");
        const auto pred = model.predict(mask_modalities(zscore_normalize(c.image), keep), sw);
        report.cases.push_back(evaluate_case(pred, *c.seg, c.image.spacing, id));
    }
    report.finalize();
    write_report(report, a.out, "report");
    std::cout << comparison_table({report});
    return kOk;
}

// ---- evaluate --------------------------------------------------------------

int cmd_evaluate(const std::string& pred_dir, const std::string& truth_dir, std::string out, const std::string& tag) {
    const auto preds = list_segmentations(pred_dir), truths = list_segmentations(truth_dir);
    std::vector<std::string> missing;
    for (const auto& id : truths)
        if (!std::binary_search(preds.begin(), preds.end(), id)) missing.push_back(id + " (no prediction)");
    for (const auto& id : preds)
        if (!std::binary_search(truths.begin(), truths.end(), id)) missing.push_back(id + " (no ground truth)");
    if (!missing.empty()) {
        std::cerr << "unmatched cases:\n";
        for (const auto& m : missing) std::cerr << "  " << m << "\n";
        return kData;
    }
    if (truths.empty()) throw Failure(kData, "no segmentations under " + truth_dir);
    EvalReport report;
    report.tag = tag;
    for (const auto& id : truths) {
        const auto truth = read_segmentation(truth_dir, id);
        const auto pred = read_segmentation(pred_dir, id);
        if (pred.dims != truth.dims)
            throw ValidationError("case " + id + ": prediction grid " + dims_str(pred.dims) + " vs truth " +
                                  dims_str(truth.dims));
        report.cases.push_back(evaluate_case(pred, truth, truth.spacing, id));
    }
    report.finalize();
    if (out.empty()) out = pred_dir;
    write_report(report, out, "report");
    std::cout << report.to_tsv();
    return kOk;
}

// ---- inspect / synth / verify ----------------------------------------------

int cmd_inspect(const std::string& path) {
    const bool nifti = path.ends_with(".nii") || path.ends_with(".nii.gz");
    json j;
    if (nifti) {
        const auto v = read_nifti(path);
        j["kind"] = "nifti";
        j["dims"] = v.dims;
        j["spacing"] = v.spacing;
        j["datatype"] = nifti_type_name(v.dtype);
        const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
        j["min"] = *lo;
        j["max"] = *hi;
    } else {
        const auto s = load_checkpoint<double>(path);
        j["kind"] = "checkpoint";
        j["step"] = s.step;
        j["optimizer_steps"] = s.optimizer.steps_taken();
        j["model"] = to_json(s.net);
        j["train"] = to_json(s.train);
        j["loss"] = to_json(s.train.loss);
        j["parameters"] = s.params.total_size();
        json tensors = json::array();
        for (const auto& e : s.params.entries()) tensors.push_back({{"name", e.name}, {"shape", e.tensor.shape()}});
        j["tensors"] = tensors;
    }
    std::cout << j.dump(2) << "\n";
    return kOk;
}

int cmd_synth(std::size_t count, std::size_t extent, std::uint64_t seed, const std::string& out) {
    for (std::size_t i = 0; i < count; ++i) {
        const auto c = generate_synthetic_case(seed + i, {extent, extent, extent}, synthetic_id(i));
        write_case(out, c);
        std::cout << "wrote " << (fs::path(out) / c.image.case_id).string() << "\n";
    }
    return kOk;
}

int cmd_verify(bool full, const std::vector<std::string>& faults, const std::vector<std::string>& only,
               const std::string& work_dir) {
    for (const auto& f : faults) {
        if (f != "conv3d") throw ParameterError("unknown fault hook " + f + " (supported: conv3d)");
        debug::set_fault(f, true);
    }
    verify::SuiteOptions opts;
    opts.work_dir = work_dir.empty() ? fs::temp_directory_path() / "cotseg_verify" : fs::path(work_dir);
    opts.table = &std::cout;
    bool ok = true;
    for (const auto& c : verify::criteria()) {
        if (!only.empty() ? std::find(only.begin(), only.end(), c.id) == only.end() : (c.long_running && !full))
            continue;
        const auto r = verify::run_criterion(c, opts);
        std::cout << verify::format_result(r) << std::endl;
        ok = ok && r.passed;
    }
    return ok ? kOk : kVerify;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3D U-Net with contextual transformer blocks for brain tumour segmentation"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a model; writes checkpoint, log and resolved config");
    train_cmd->add_option("--config", ta.config, "run configuration (JSON)");
    train_cmd->add_option("--synthetic", ta.synthetic, "train on N generated cases");
    train_cmd->add_option("--epochs", ta.epochs);
    train_cmd->add_option("--fold", ta.fold, "held-out fold index");
    train_cmd->add_option("--seed", ta.seed);
    train_cmd->add_option("--tag", ta.tag, "run tag (default from config)");
    train_cmd->add_option("--runs-root", ta.runs_root, "parent of timestamped run directories");
    train_cmd->add_option("--run-dir", ta.run_dir, "explicit run directory");

    PredictArgs pa;
    auto* predict_cmd = app.add_subcommand("predict", "sliding-window prediction of one case or a tree of cases");
    predict_cmd->add_option("checkpoint", pa.checkpoint)->required();
    predict_cmd->add_option("input", pa.input, "case directory or directory of cases")->required();
    predict_cmd->add_option("out", pa.out, "output directory")->required();
    predict_cmd->add_option("--config", pa.config, "run configuration; its model must match the checkpoint");
    predict_cmd->add_option("--overlap", pa.overlap);

    PredictArgs aa;
    auto* ablate_cmd = app.add_subcommand("ablate", "predict and evaluate with one modality zeroed");
    ablate_cmd->add_option("checkpoint", aa.checkpoint)->required();
    ablate_cmd->add_option("input", aa.input, "directory of cases with segmentations")->required();
    ablate_cmd->add_option("out", aa.out, "report directory")->required();
    ablate_cmd->add_option("--drop", aa.drop, "modality to drop (flair, t1, t1ce, t2 or none)");
    ablate_cmd->add_option("--config", aa.config);
    ablate_cmd->add_option("--overlap", aa.overlap);

    std::string pred_dir, truth_dir, eval_out, eval_tag = "model";
    auto* eval_cmd = app.add_subcommand("evaluate", "score predictions against ground truth");
    eval_cmd->add_option("pred", pred_dir)->required();
    eval_cmd->add_option("truth", truth_dir)->required();
    eval_cmd->add_option("--out", eval_out, "report directory (default: the prediction directory)");
    eval_cmd->add_option("--tag", eval_tag);

    std::string inspect_path;
    auto* inspect_cmd = app.add_subcommand("inspect", "describe a checkpoint or NIfTI file");
    inspect_cmd->add_option("path", inspect_path)->required();

    std::size_t synth_count = 4, synth_extent = 32;
    std::uint64_t synth_seed = 1;
    std::string synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "write generated cases as NIfTI case directories");
    synth_cmd->add_option("out", synth_out)->required();
    synth_cmd->add_option("--count", synth_count);
    synth_cmd->add_option("--extent", synth_extent);
    synth_cmd->add_option("--seed", synth_seed);

    bool full = false;
    std::vector<std::string> faults, only;
    std::string work_dir;
    auto* verify_cmd = app.add_subcommand("verify", "run the oracle suites; exit 5 on any failure");
    verify_cmd->add_flag("--full", full, "include the training-based criteria");
    verify_cmd->add_option("--inject-fault", faults, "corrupt an op's backward rule (conv3d)");
    verify_cmd->add_option("--only", only, "criterion ids to run");
    verify_cmd->add_option("--work-dir", work_dir);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(ta);
        if (predict_cmd->parsed()) return cmd_predict(pa);
        if (ablate_cmd->parsed()) return cmd_ablate(aa);
        if (eval_cmd->parsed()) return cmd_evaluate(pred_dir, truth_dir, eval_out, eval_tag);
        if (inspect_cmd->parsed()) return cmd_inspect(inspect_path);
        if (synth_cmd->parsed()) return cmd_synth(synth_count, synth_extent, synth_seed, synth_out);
        if (verify_cmd->parsed()) return cmd_verify(full, faults, only, work_dir);
    } catch (const Failure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code;
    } catch (const ConfigError& e) {
        std::cerr << "config error [" << e.key() << "]: " << e.what() << "\n";
        return kConfig;
    } catch (const ParameterError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kCheckpoint;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kNumeric;
    } catch (const NiftiError& e) {
        std::cerr << "data error [" << e.field() << "]: " << e.what() << "\n";
        return kData;
    } catch (const ValidationError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kOk;
}
