#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parco/autodiff.hpp"

// Finite-difference verification suite shared by the CLI and the acceptance
// runner. Each case builds a small seeded function and compares reverse-mode
// gradients with central differences.
namespace parco::gradcheck {

inline constexpr double kTolerance = 1e-3;
inline constexpr double kStep = 1e-4;

struct CaseReport {
    std::string module;  // autodiff | dual | encoder | sdfnet | loss
    std::string name;    // op class or case name
    ad::GradReport report;
    std::size_t requested = 0;  // probes asked for

    bool passed() const { return report.max_rel_err < kTolerance && report.probe_count > 0 && report.probe_count >= requested; }
};

struct SuiteOptions {
    std::string module = "all";
    std::size_t probes = 100;  // per case
    std::uint64_t seed = 0;
};

inline const std::vector<std::string>& module_names() {
    static const std::vector<std::string> names{"autodiff", "dual", "encoder", "sdfnet", "loss"};
    return names;
}

/// Throws std::invalid_argument for an unknown module name.
std::vector<CaseReport> run_suite(const SuiteOptions& options);

void to_json(nlohmann::json& j, const CaseReport& c);

}  // namespace parco::gradcheck
