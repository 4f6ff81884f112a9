// SPDX-License-Identifier: Apache-2.0
//
// Exact rule selection. Every head takes one rule; a layer may use at most
// `layer_rule_limit` distinct rules. The solver enumerates per-layer options
// (a rule subset plus a head assignment), drops options dominated inside their
// layer, and runs depth-first branch-and-bound over layers. The bound is the
// exact minimum of the remaining layers' objective under each density budget
// alone (a knapsack over integer token counts), which never overestimates.

#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/datasets.hpp"
#include "moa/elastic_masks.hpp"
#include "moa/influence.hpp"
#include "moa/toy_model.hpp"

namespace moa {

/// Profiled loss at `length` must fall in [lo, hi), or [lo, hi] when closed.
struct LossInterval {
    int length = 0;
    double lo = 0.0;
    double hi = 0.0;
    bool closed = false;
};

struct OptimizationInstance {
    RuleLossTable table;
    /// Mean density budget per constrained length.
    std::vector<std::pair<int, double>> density_constraints;
    int layer_rule_limit = 2;
    std::vector<LossInterval> intervals;

    /// Throws InputError on out-of-range budgets, unknown lengths or bad intervals.
    void validate() const;
};

/// Raised when no plan satisfies the constraints; names the binding one.
class InfeasibleError : public std::runtime_error {
public:
    InfeasibleError(const std::string& what, std::string constraint)
        : std::runtime_error(what), constraint_(std::move(constraint)) {}
    const std::string& constraint() const { return constraint_; }

private:
    std::string constraint_;
};

struct SolverStats {
    long long nodes = 0;
    long long layer_options = 0;  // after in-layer dominance pruning
    double seconds = 0.0;
};

struct Solution {
    std::vector<int> rule_ids;          // per head, indices into table.rules
    std::vector<double> losses;         // per table length
    std::vector<double> densities;      // per table length
    SolverStats stats;
};

struct SolveOptions {
    /// Ties on the objective are broken by the summed loss at these lengths,
    /// then by mean density at the longest profiled length, then by rule ids.
    std::vector<int> refine_lengths;
    /// Use the sorted-difference assignment for two-rule layer subsets when
    /// every constraint depends on rule counts only. Off forces enumeration.
    bool exchange_argument = true;
};

Solution solve_single(const OptimizationInstance& instance, int objective_length, const SolveOptions& options = {});

/// Exhaustive reference: every assignment, constraints checked directly.
/// Throws InputError beyond `max_assignments`.
std::optional<Solution> solve_by_enumeration(const OptimizationInstance& instance, int objective_length,
                                             long long max_assignments = 1'000'000);

MoAPlan solution_plan(const OptimizationInstance& instance, const Solution& solution, const std::string& fingerprint);

/// Indices of the non-dominated vectors, in input order; duplicates keep the first.
std::vector<std::size_t> dominance_filter(const std::vector<std::vector<double>>& points);

struct ParetoStats {
    int subproblems = 0;
    int infeasible = 0;
    long long nodes = 0;
    double seconds = 0.0;
};

struct ParetoSet {
    std::vector<Solution> members;
    /// Loss ranges per table length from the single-objective phase.
    std::vector<std::pair<double, double>> ranges;
    ParetoStats stats;
};

/// Epsilon-constraint enumeration with `intervals` slices per other objective.
/// Throws InfeasibleError when every sub-problem is infeasible.
ParetoSet pareto_front(const OptimizationInstance& instance, int intervals = 5, int threads = 0);

nlohmann::json front_to_json(const OptimizationInstance& instance, const ParetoSet& front,
                             const std::string& fingerprint);

struct ValidationChoice {
    std::size_t index = 0;
    std::vector<double> losses;  // per front member
};

/// Mean supervised cross-entropy of each plan on `items`; lowest wins, ties
/// toward lower mean density at the validation length.
ValidationChoice select_by_validation(const std::vector<MoAPlan>& plans, const Model& model,
                                      const std::vector<CalibrationItem>& items, int validation_length,
                                      int threads = 0);

}  // namespace moa
