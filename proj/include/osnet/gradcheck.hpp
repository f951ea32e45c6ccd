#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "osnet/tensor.hpp"

namespace osnet::gradcheck {

struct CheckResult {
    std::string name;
    double rel_err;
    double tolerance;
    bool passed() const { return rel_err < tolerance; }
};

struct SuiteReport {
    std::vector<CheckResult> checks;
    bool all_passed() const {
        for (const auto& c : checks) {
            if (!c.passed()) return false;
        }
        return true;
    }
};

// Finite-difference suites behind `gradcheck`. Primitive ops run at step
// 1e-4 / tolerance 1e-4; composite networks at step 1e-5 / tolerance 1e-3
// (the smaller step stays inside one linear piece of the ReLUs).
SuiteReport check_ops(std::uint64_t seed);
SuiteReport check_block(std::uint64_t seed);
SuiteReport check_model(std::uint64_t seed);
SuiteReport check_supernet(std::uint64_t seed);

SuiteReport run_scope(const std::string& scope, std::uint64_t seed);

}  // namespace osnet::gradcheck
