#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace edlab {

struct GradCheckOptions {
    std::size_t seeds = 25;
    double eps = 1e-3;        // central-difference step
    double tolerance = 1e-3;  // max relative error
    std::size_t max_coords = 256;  // sampled coordinates per end-to-end check
};

struct GradCheckResult {
    std::string name;
    std::uint64_t seed = 0;
    double rel_error = 0.0;
    std::size_t coords = 0;
    std::size_t skipped = 0;  // stencils straddling an L1 kink
    bool pass = false;
};

// Relative error ||a - n|| / max(||a||, ||n||) between analytic and
// central-difference gradients, per op and per seed. Op checks perturb the
// float32 inputs directly; the end-to-end check compares the float32
// training gradient against differences of a double-precision reference
// forward.
std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options = {},
                                                 const std::function<void(const GradCheckResult&)>& on_result = {});

std::vector<std::string> gradcheck_names();

}  // namespace edlab
