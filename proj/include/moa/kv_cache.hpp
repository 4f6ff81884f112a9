// SPDX-License-Identifier: Apache-2.0
//
// Decode-time KV cache with a per-head budget: the first sink_tokens positions
// stay resident forever, later positions go through a ring of `window`
// entries. A decoded token is appended (evicting the oldest ring entry when
// full) before it attends, so it always sees itself unless its window is 0.
//
// The window is fixed at the prompt length by default. With grow_spans the
// capacity follows the rule at the current total length; entries evicted
// earlier do not come back.

#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/elastic_masks.hpp"
#include "moa/toy_model.hpp"

namespace moa {

struct HeadCache {
    int capacity = 0;  // ring slots
    MatrixXd sink_keys, sink_values;  // rows [0, sink_count)
    int sink_count = 0;
    std::vector<int> sink_positions;
    std::vector<char> sink_hidden;     // pad entries stay resident but are never attended
    MatrixXd ring_keys, ring_values;  // capacity rows
    std::vector<int> ring_positions;  // -1 for empty slots
    std::vector<char> ring_hidden;
    int ring_next = 0;  // slot written next
    int ring_count = 0;
    int peak = 0;
    long long score_ops = 0;  // entries attended during decode steps

    int resident() const { return sink_count + ring_count; }
};

struct HeteroKVCache {
    MoAPlan plan;
    int prompt_length = 0;
    int next_position = 0;
    bool grow_spans = false;
    std::vector<HeadCache> heads;  // layer-major
    int decode_steps = 0;
};

struct PrefillResult {
    HeteroKVCache cache;
    MatrixXd logits;  // 1 x vocab, final prompt position
};

/// Throws PlanError when the plan's fingerprint is not the model's.
PrefillResult prefill(const Model& model, std::span<const int> tokens, const MoAPlan& plan, bool grow_spans = false);

/// Appends `token` at cache.next_position and returns its 1 x vocab logits.
MatrixXd decode_step(const Model& model, HeteroKVCache& cache, int token);

/// Ring capacity of a rule when the sequence holds `total` tokens.
int decode_capacity(const ElasticRule& rule, int prompt_length, int total, const MaskGeometry& geometry,
                     bool grow_spans);

/// Per-head masks reproducing prefill + decode over `tokens` (prompt rows use
/// the block masks at prompt_length, decoded rows the ring contents).
HeadMasks decode_reference_masks(const ModelConfig& config, const MoAPlan& plan, std::span<const int> tokens,
                                 int prompt_length, bool grow_spans);

struct HeadCost {
    int resident = 0;          // entries held when the run ended
    int peak = 0;
    int prefill_resident = 0;  // entries held right after prefill
    double score_ops_per_token = 0.0;
    double dense_score_ops_per_token = 0.0;
};

struct CostReport {
    int prompt_length = 0;
    int decode_steps = 0;
    std::vector<HeadCost> analytic;
    std::vector<HeadCost> instrumented;
    int total_prefill_resident = 0;
    double realized_density = 0.0;  // prefill-resident entries / (H * N)
    double plan_density = 0.0;
    double total_score_ops_per_token = 0.0;
    double dense_score_ops_per_token = 0.0;
    bool counters_match = false;
};

/// Recomputes the counts from the plan and compares them with the cache's counters.
CostReport cost_report(const HeteroKVCache& cache);

nlohmann::json cost_report_to_json(const CostReport& r);
/// One row per head (instrumented counters).
std::string cost_report_to_csv(const CostReport& r);

}  // namespace moa
