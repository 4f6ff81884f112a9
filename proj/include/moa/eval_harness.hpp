// SPDX-License-Identifier: Apache-2.0
//
// Retrieval accuracy through the decode cache, perplexity, effective context
// length and the matched-density uniform comparison.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/datasets.hpp"
#include "moa/elastic_masks.hpp"
#include "moa/plan_optimizer.hpp"
#include "moa/toy_model.hpp"

namespace moa {

/// Two plans are not comparable (density mismatch, geometry mismatch).
class ComparabilityError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Fraction {
    int correct = 0;
    int total = 0;
    double value() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

struct RetrievalSetup {
    DatasetSpec data;
    MaskGeometry geometry;     // used for the dense (all-visible) plan
    int n_pairs = 0;           // 0: default_pair_count(length)
    std::uint64_t seed = 2024;
    bool grow_spans = false;
    int threads = 0;
};

/// Plan in which every head keeps the whole sequence.
MoAPlan dense_plan(const Model& model, const MaskGeometry& geometry);

/// Greedy answer decoded through prefill + decode_step; exact match on every answer token.
/// `plan` null means dense.
Fraction retrieval_accuracy(const Model& model, const MoAPlan* plan, int length, PositionBucket bucket, int n_items,
                            const RetrievalSetup& setup);

struct AccuracyGrid {
    std::vector<int> lengths;
    std::vector<PositionBucket> buckets;
    std::vector<std::vector<Fraction>> cells;  // [length][bucket]

    Fraction row(std::size_t length_index) const;
    std::vector<std::pair<int, double>> curve() const;  // per length, all buckets pooled
};

AccuracyGrid accuracy_grid(const Model& model, const MoAPlan* plan, const std::vector<int>& lengths,
                           const std::vector<PositionBucket>& buckets, int items_per_cell, const RetrievalSetup& setup);

/// Largest length whose accuracy reaches `threshold`; 0 when none does.
int effective_context_length(const std::vector<std::pair<int, double>>& curve, double threshold = 0.9);

/// exp of the token-weighted mean supervised cross-entropy.
double perplexity(const Model& model, const MoAPlan* plan, const std::vector<CalibrationItem>& items, int threads = 0);

/// Every head gets (alpha 0, beta = budget), so span = budget * n rounded up to a block.
MoAPlan uniform_baseline(const Model& model, const MaskGeometry& geometry, double budget);

struct MethodReport {
    std::string name;
    AccuracyGrid grid;
    std::vector<std::pair<int, double>> densities;  // plan_density per grid length
    int effective_length = 0;
    double ppl = 0.0;
};

struct ComparisonReport {
    double budget = 0.0;
    std::vector<MethodReport> methods;  // dense, moa, uniform
};

struct CompareSetup {
    std::vector<int> lengths;
    std::vector<PositionBucket> buckets;
    int items_per_cell = 20;
    std::vector<int> density_check_lengths;  // lengths where densities must agree within 1%
    double threshold = 0.9;
};

/// Throws ComparabilityError when the two plans' densities differ by more than
/// 0.01 at any check length, or their geometries differ.
ComparisonReport compare_uniform(const Model& model, const MoAPlan& moa, double budget, const CompareSetup& compare,
                                 const RetrievalSetup& setup, const std::vector<CalibrationItem>& ppl_items);

nlohmann::json grid_to_json(const AccuracyGrid& grid);
std::string grid_to_csv(const AccuracyGrid& grid, const std::string& method);
nlohmann::json comparison_to_json(const ComparisonReport& report);
/// method,length,bucket,correct,total,accuracy,density
std::string comparison_to_csv(const ComparisonReport& report);

/// Configurations of the heterogeneity ladder, all solved on one rule table.
enum class LadderStep { kUniform, kHeteroLayers, kHeteroHeads, kElastic };

std::string ladder_name(LadderStep step);

/// kUniform: one static rule (beta 0) for every head; kHeteroLayers: static
/// rules, one per layer; kHeteroHeads: static rules, per-layer limit as given;
/// kElastic: the unrestricted instance.
Solution solve_ladder_step(const OptimizationInstance& base, LadderStep step, int objective_length);

}  // namespace moa
