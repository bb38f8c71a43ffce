#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <regex>
#include <set>
#include <sstream>

#include "cotseg/config.hpp"
#include "cotseg/nifti.hpp"
#include "cotseg/preprocess.hpp"

namespace fs = std::filesystem;
using namespace cotseg;
using nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "cotseg_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Result run(const std::string& args, const fs::path& cwd) {
    const auto out = cwd / "stdout.txt", err = cwd / "stderr.txt";
    const std::string cmd = "cd '" + cwd.string() + "' && '" COTSEG_CLI_PATH "' " + args + " > '" + out.string() +
                            "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

// Small, fast run configuration; depth 2 so 16^3 patches work.
json small_config(const std::string& precision = "float32") {
    return json{{"tag", "small"},
                {"precision", precision},
                {"model", {{"depth", 2}, {"base_channels", 4}, {"cot_placement", {0, 1}}}},
                {"train", {{"epochs", 2}, {"patch", 16}, {"lr0", 3e-3}, {"record_wall_time", false}}},
                {"inference", {{"patch", 16}, {"overlap", 0.5}}},
                {"data", {{"synthetic", 3}, {"synthetic_extent", 16}}}};
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(item);
    return out;
}

std::vector<std::string> validation_ids(const std::string& stdout_text) {
    std::smatch m;
    static const std::regex re("validation: ?([^\\n]*)");
    REQUIRE(std::regex_search(stdout_text, m, re));
    return split_csv(m[1].str());
}

// A trained checkpoint and a small case tree shared by the predict/evaluate cases.
struct Fixture {
    fs::path dir, checkpoint, cases;
    Fixture() {
        dir = scratch("fixture");
        write_json(dir / "config.json", small_config());
        const auto r = run("train --config config.json --epochs 6 --run-dir run", dir);
        REQUIRE(r.code == 0);
        checkpoint = dir / "run" / "checkpoint.ckpt";
        cases = dir / "cases";
        REQUIRE(run("synth cases --count 2 --extent 16 --seed 50", dir).code == 0);
    }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

}  // namespace

TEST_CASE("train on synthetic data writes three artifacts in a timestamped run directory") {
    const auto dir = scratch("train");
    const auto r = run("train --synthetic 4 --epochs 2 --tag desk", dir);
    REQUIRE(r.code == 0);
    std::vector<fs::path> runs(fs::directory_iterator(dir / "runs"), fs::directory_iterator{});
    REQUIRE(runs.size() == 1);
    CHECK(std::regex_match(runs[0].filename().string(), std::regex("\\d{8}-\\d{6}-desk")));
    std::set<std::string> files;
    for (const auto& e : fs::directory_iterator(runs[0])) files.insert(e.path().filename().string());
    CHECK(files == std::set<std::string>{"checkpoint.ckpt", "log.jsonl", "resolved_config.json"});
    // The resolved config parses back and echoes the overrides.
    const auto cfg = load_run_config(runs[0] / "resolved_config.json");
    CHECK(cfg.train.epochs == 2);
    CHECK(cfg.data.synthetic == 4);
}

TEST_CASE("invalid alpha exits 1 naming the key") {
    const auto dir = scratch("bad_alpha");
    auto cfg = small_config();
    cfg["loss"] = {{"alpha", 1.5}};
    write_json(dir / "config.json", cfg);
    const auto r = run("train --config config.json", dir);
    CHECK(r.code == 1);
    CHECK(r.err.find("loss.alpha") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "runs"));

    write_json(dir / "unknown.json", json{{"train", {{"learning_rate", 0.1}}}});
    const auto u = run("train --config unknown.json", dir);
    CHECK(u.code == 1);
    CHECK(u.err.find("train.learning_rate") != std::string::npos);
}

TEST_CASE("folds 0..2 give disjoint validation sets matching split_folds") {
    const auto dir = scratch("folds");
    auto cfg = small_config();
    cfg["data"]["synthetic"] = 6;
    cfg["train"]["epochs"] = 1;
    write_json(dir / "config.json", cfg);
    std::set<std::string> seen;
    std::vector<std::string> ids;
    for (int i = 0; i < 6; ++i) ids.push_back("synthetic_00" + std::to_string(i));
    const auto expected = split_folds(ids, 3, 0);
    for (int fold = 0; fold < 3; ++fold) {
        const auto r = run("train --config config.json --fold " + std::to_string(fold) + " --run-dir f" +
                               std::to_string(fold),
                           dir);
        REQUIRE(r.code == 0);
        const auto v = validation_ids(r.out);
        CHECK(v == expected[fold]);
        for (const auto& id : v) CHECK(seen.insert(id).second);
    }
    CHECK(seen.size() == 6);
    CHECK(run("train --config config.json --fold 3 --run-dir f3", dir).code == 1);
}

TEST_CASE("re-running from the resolved config reproduces a 64-bit run bit for bit") {
    const auto dir = scratch("rerun");
    write_json(dir / "config.json", small_config("float64"));
    REQUIRE(run("train --config config.json --seed 5 --run-dir a", dir).code == 0);
    REQUIRE(run("train --config a/resolved_config.json --run-dir b", dir).code == 0);
    CHECK(slurp(dir / "a" / "log.jsonl") == slurp(dir / "b" / "log.jsonl"));
    CHECK(slurp(dir / "a" / "checkpoint.ckpt") == slurp(dir / "b" / "checkpoint.ckpt"));
    CHECK(slurp(dir / "a" / "resolved_config.json") == slurp(dir / "b" / "resolved_config.json"));
}

TEST_CASE("missing data root exits 2; diverging training exits 3") {
    const auto dir = scratch("data_errors");
    auto cfg = small_config();
    cfg["data"] = {{"root", (dir / "nowhere").string()}};
    write_json(dir / "config.json", cfg);
    CHECK(run("train --config config.json --run-dir r", dir).code == 2);

    auto wild = small_config();
    wild["train"]["lr0"] = 1e30;
    wild["train"]["epochs"] = 3;
    write_json(dir / "wild.json", wild);
    const auto r = run("train --config wild.json --run-dir w", dir);
    CHECK(r.code == 3);
    CHECK(fs::exists(dir / "w" / "last_good.ckpt"));
}

TEST_CASE("predict writes label masks on the input grid, deterministically") {
    const auto& f = fixture();
    const auto out = f.dir / "pred_a";
    REQUIRE(run("predict run/checkpoint.ckpt cases pred_a", f.dir).code == 0);
    for (const auto& id : list_cases(f.cases)) {
        const auto pred = read_nifti(out / id / (id + "_seg.nii.gz"));
        const auto flair = read_nifti(f.cases / id / (id + "_flair.nii.gz"));
        CHECK(pred.dims == flair.dims);
        CHECK(pred.spacing == flair.spacing);
        for (double v : pred.data) CHECK((v == 0 || v == 1 || v == 2 || v == 4));
    }
    // One case directory alone, and a rerun, give identical bytes.
    REQUIRE(run("predict run/checkpoint.ckpt cases/synthetic_000 pred_b", f.dir).code == 0);
    CHECK(slurp(out / "synthetic_000" / "synthetic_000_seg.nii.gz") ==
          slurp(f.dir / "pred_b" / "synthetic_000" / "synthetic_000_seg.nii.gz"));
}

TEST_CASE("predict error codes") {
    const auto& f = fixture();
    // Config whose model disagrees with the checkpoint.
    auto other = small_config();
    other["model"]["base_channels"] = 6;
    write_json(f.dir / "other.json", other);
    const auto mismatch = run("predict run/checkpoint.ckpt cases p_mismatch --config other.json", f.dir);
    CHECK(mismatch.code == 4);

    std::ofstream(f.dir / "garbage.ckpt") << "not a checkpoint";
    CHECK(run("predict garbage.ckpt cases p_garbage", f.dir).code == 4);

    // Corrupt FLAIR file.
    const auto bad = f.dir / "bad_cases";
    fs::remove_all(bad);
    fs::create_directories(bad);
    fs::copy(f.cases / "synthetic_000", bad / "synthetic_000", fs::copy_options::recursive);
    std::ofstream(bad / "synthetic_000" / "synthetic_000_flair.nii.gz", std::ios::trunc) << "junk";
    CHECK(run("predict run/checkpoint.ckpt bad_cases p_bad", f.dir).code == 2);
    CHECK(run("predict run/checkpoint.ckpt no_such_dir p_none", f.dir).code == 2);
}

TEST_CASE("evaluate: identical directories score perfectly and the report re-parses") {
    const auto& f = fixture();
    const auto r = run("evaluate cases cases --out self_report", f.dir);
    REQUIRE(r.code == 0);
    const auto j = json::parse(slurp(f.dir / "self_report" / "report.json"));
    for (const auto& c : j["cases"])
        for (const char* region : {"ET", "TC", "WT"}) {
            CHECK(c[region]["dice"].get<double>() == 1.0);
            CHECK(c[region]["hd95"].get<double>() == 0.0);
        }
    CHECK(fs::exists(f.dir / "self_report" / "report.tsv"));

    REQUIRE(run("predict run/checkpoint.ckpt cases pred_eval", f.dir).code == 0);
    REQUIRE(run("evaluate pred_eval cases --out eval_report", f.dir).code == 0);
    const auto e = json::parse(slurp(f.dir / "eval_report" / "report.json"));
    for (const char* region : {"ET", "TC", "WT", "Avg"}) {
        double sum = 0.0, n = 0.0;
        for (const auto& c : e["cases"]) {
            sum += c[region]["dice"].get<double>();
            n += 1.0;
        }
        CHECK(std::abs(sum / n - e["summary"][region]["dice"]["mean"].get<double>()) <= 1e-9);
    }
}

TEST_CASE("evaluate lists missing counterparts and exits 2") {
    const auto& f = fixture();
    const auto partial = f.dir / "partial";
    fs::remove_all(partial);
    fs::create_directories(partial);
    fs::copy(f.cases / "synthetic_000", partial / "synthetic_000", fs::copy_options::recursive);
    const auto r = run("evaluate partial cases --out partial_report", f.dir);
    CHECK(r.code == 2);
    CHECK(r.err.find("synthetic_001") != std::string::npos);
}

TEST_CASE("ablate labels the kept modalities and drop none matches evaluate") {
    const auto& f = fixture();
    const auto r = run("ablate run/checkpoint.ckpt cases abl_t1ce --drop t1ce", f.dir);
    REQUIRE(r.code == 0);
    const auto dropped = json::parse(slurp(f.dir / "abl_t1ce" / "report.json"));
    CHECK(dropped["tag"] == "Flair,T1,T2");

    REQUIRE(run("ablate run/checkpoint.ckpt cases abl_none --drop none", f.dir).code == 0);
    REQUIRE(run("predict run/checkpoint.ckpt cases pred_plain", f.dir).code == 0);
    REQUIRE(run("evaluate pred_plain cases --out plain_report", f.dir).code == 0);
    const auto none = json::parse(slurp(f.dir / "abl_none" / "report.json"));
    const auto plain = json::parse(slurp(f.dir / "plain_report" / "report.json"));
    CHECK(none["tag"] == "Flair,T1,T1c,T2");
    CHECK(none["cases"] == plain["cases"]);
    CHECK(none["summary"] == plain["summary"]);

    // Zeroing the contrast channel moves at least one score of the trained model.
    CHECK(dropped["cases"] != plain["cases"]);
    CHECK(run("ablate run/checkpoint.ckpt cases abl_bad --drop dwi", f.dir).code == 1);
}

TEST_CASE("inspect describes checkpoints and NIfTI files") {
    const auto& f = fixture();
    const auto ck = run("inspect run/checkpoint.ckpt", f.dir);
    REQUIRE(ck.code == 0);
    const auto j = json::parse(ck.out);
    CHECK(j["kind"] == "checkpoint");
    CHECK(j["model"]["base_channels"] == 4);
    const auto nii = run("inspect cases/synthetic_000/synthetic_000_seg.nii.gz", f.dir);
    REQUIRE(nii.code == 0);
    CHECK(json::parse(nii.out)["dims"] == json::array({16, 16, 16}));
}

TEST_CASE("verify passes on a clean build and exits 5 naming conv3d under fault injection") {
    const auto dir = scratch("verify");
    const auto ok = run("verify --only cot-reduction --only loss-anchors --work-dir w", dir);
    CHECK(ok.code == 0);
    CHECK(ok.out.find("PASS cot-reduction") != std::string::npos);

    const auto bad = run("verify --inject-fault conv3d --only gradient-oracle --work-dir w", dir);
    CHECK(bad.code == 5);
    CHECK(bad.out.find("FAIL gradient-oracle") != std::string::npos);
    CHECK(bad.out.find("conv3d") != std::string::npos);
}
