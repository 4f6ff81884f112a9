// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/numerics/tape.hpp"

namespace moa {

/// Span of a head as a linear function of input length: alpha + beta * n.
struct ElasticRule {
    double alpha = 0.0;
    double beta = 1.0;

    friend bool operator==(const ElasticRule&, const ElasticRule&) = default;
    friend auto operator<=>(const ElasticRule&, const ElasticRule&) = default;
};

/// Candidate (alpha, beta) values; rules() enumerates alpha-major.
struct RuleGrid {
    std::vector<double> alpha_options;
    std::vector<double> beta_options;

    /// 6 alphas over [-2048, 8192] and 9 betas over [0, 1], alphas scaled by
    /// reference_length / 8192.
    static RuleGrid scaled_default(int reference_length);

    std::vector<ElasticRule> rules() const;
};

struct MaskGeometry {
    int block_size = 8;
    int sink_blocks = 1;

    int sink_tokens() const { return block_size * sink_blocks; }
    friend bool operator==(const MaskGeometry&, const MaskGeometry&) = default;
};

/// clamp(alpha + beta * n, 0, n), rounded up to a whole block and capped at n.
int span_of(const ElasticRule& rule, int n, int block_size);

/// Sliding-window length once the sink is carved out of the span.
int window_of(const ElasticRule& rule, int n, const MaskGeometry& geometry);

/// Resident KV entries at decode time, divided by n.
double density_of(const ElasticRule& rule, int n, const MaskGeometry& geometry);

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

/// Block-granular sliding-window-with-sink visibility pattern.
struct BlockMask {
    int n = 0;
    int block_size = 1;
    int n_blocks = 0;
    int sink_blocks = 0;
    int window_blocks = 0;

    /// Query block i sees key block j.
    bool visible(int i, int j) const {
        return j <= i && (j < sink_blocks || i - j < window_blocks);
    }
    /// Token-level visibility (causal inside the diagonal block).
    bool token_visible(int q, int k) const {
        return k <= q && visible(q / block_size, k / block_size);
    }
    /// Additive n x n mask: 0 where visible, kMaskSentinel elsewhere.
    MatrixXd additive() const;
};

BlockMask build_mask(const ElasticRule& rule, int n, const MaskGeometry& geometry);

/// Fully visible causal pattern at length n.
BlockMask causal_block_mask(int n, int block_size);

/// One elastic rule per head, grouped by layer.
struct MoAPlan {
    std::string fingerprint;
    MaskGeometry geometry;
    std::vector<std::vector<ElasticRule>> layers;

    int head_count() const;
    const ElasticRule& rule(int layer, int head) const { return layers.at(layer).at(head); }

    /// Largest number of distinct rules within any layer.
    int max_distinct_rules_per_layer() const;

    /// Throws ContractError when some layer exceeds `limit` distinct rules.
    void validate(int rule_limit) const;

    friend bool operator==(const MoAPlan&, const MoAPlan&) = default;
};

/// Mean of density_of over every head.
double plan_density(const MoAPlan& plan, int n);

/// Every head gets `rule`.
MoAPlan uniform_plan(std::string fingerprint, const MaskGeometry& geometry, int n_layers, int n_heads,
                     const ElasticRule& rule);

nlohmann::json plan_to_json(const MoAPlan& plan);
MoAPlan plan_from_json(const nlohmann::json& j);
void save_plan(const MoAPlan& plan, const std::string& path);
MoAPlan load_plan(const std::string& path);

}  // namespace moa
