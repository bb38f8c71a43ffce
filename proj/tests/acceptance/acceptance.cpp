// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "cotseg/verify/suite.hpp"

int main(int argc, char** argv) {
    CLI::App app{"cotseg acceptance suite"};
    std::vector<std::string> only;
    bool skip_long = false, verbose = false;
    std::string work_dir = (std::filesystem::temp_directory_path() / "cotseg_acceptance").string();
    app.add_option("--only", only, "run only these criterion ids");
    app.add_flag("--skip-long", skip_long, "skip the training-based criteria");
    app.add_flag("-v,--verbose", verbose, "progress output on stderr");
    app.add_option("--work-dir", work_dir, "scratch directory");
    CLI11_PARSE(app, argc, argv);

    cotseg::verify::SuiteOptions opts;
    opts.work_dir = work_dir;
    opts.log = verbose ? &std::cerr : nullptr;
    opts.table = &std::cout;

    int failed = 0, ran = 0;
    for (const auto& c : cotseg::verify::criteria()) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        if (skip_long && c.long_running) continue;
        const auto r = cotseg::verify::run_criterion(c, opts);
        std::cout << cotseg::verify::format_result(r) << std::endl;
        ++ran;
        failed += r.passed ? 0 : 1;
    }
    std::cout << (failed ? "FAIL" : "PASS") << " summary: " << ran - failed << "/" << ran << " criteria passed"
              << std::endl;
    return failed ? 1 : 0;
}
