#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace gshdl {

struct OptimizerOptions {
    std::size_t max_iterations = 100;
    double gradient_tolerance = 1e-6;
    std::size_t history_size = 8;
    std::size_t line_search_max_steps = 40;

    void validate() const;
};

/// Returns f(x) and writes the gradient into `grad` (same length as x).
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct OptimizeResult {
    std::vector<double> argmin;
    double value = 0.0;
    /// Objective at the start point followed by the value after each accepted step.
    std::vector<double> trace;
    std::size_t iterations = 0;
    std::size_t evaluations = 0;
    bool converged = false;
};

/// Limited-memory BFGS with Armijo backtracking (c1 = 1e-4, step halving).
/// Stops once the infinity norm of the gradient drops to the tolerance, the
/// iteration budget is spent, or no step along the search direction decreases
/// the objective.
[[nodiscard]] OptimizeResult lbfgs_minimize(const Objective& objective, std::vector<double> start,
                                            const OptimizerOptions& opts);

} // namespace gshdl
