#pragma once

// End-to-end verification criteria, shared by `cotseg verify` and the
// acceptance binary. Each criterion reports pass/fail with a short detail.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace cotseg::verify {

struct SuiteOptions {
    /// Scratch space for files; created if missing.
    std::filesystem::path work_dir;
    /// Progress lines go here when set.
    std::ostream* log = nullptr;
    /// Comparison table of the differential run goes here when set.
    std::ostream* table = nullptr;
};

struct CriterionResult {
    std::string id;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct Criterion {
    std::string id;
    std::string title;
    /// Needs training runs of several minutes.
    bool long_running = false;
    std::function<CriterionResult(const SuiteOptions&)> run;
};

const std::vector<Criterion>& criteria();

/// Runs one criterion, timing it and converting exceptions into failures.
CriterionResult run_criterion(const Criterion& c, const SuiteOptions& opts);

/// "PASS <id>: <detail> (<seconds> s)".
std::string format_result(const CriterionResult& r);

}  // namespace cotseg::verify
