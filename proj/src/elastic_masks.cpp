// SPDX-License-Identifier: Apache-2.0

#include "moa/elastic_masks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace moa {

RuleGrid RuleGrid::scaled_default(int reference_length) {
    RuleGrid grid;
    const double s = static_cast<double>(reference_length) / 8192.0;
    for (int i = 0; i < 6; ++i) grid.alpha_options.push_back((-2048.0 + 2048.0 * i) * s);
    for (int i = 0; i < 9; ++i) grid.beta_options.push_back(i / 8.0);
    return grid;
}

std::vector<ElasticRule> RuleGrid::rules() const {
    std::vector<ElasticRule> out;
    out.reserve(alpha_options.size() * beta_options.size());
    for (double a : alpha_options) {
        for (double b : beta_options) out.push_back({a, b});
    }
    return out;
}

int span_of(const ElasticRule& rule, int n, int block_size) {
    // clip first, then round up to a block
    const double raw = std::clamp(rule.alpha + rule.beta * n, 0.0, static_cast<double>(n));
    const int tokens = static_cast<int>(std::ceil(raw - 1e-9));
    const int rounded = ceil_div(tokens, block_size) * block_size;
    return std::min(rounded, n);
}

int window_of(const ElasticRule& rule, int n, const MaskGeometry& geometry) {
    const int sink = geometry.sink_tokens();
    if (n <= sink) return n;
    return std::clamp(span_of(rule, n, geometry.block_size) - sink, 0, n - sink);
}

double density_of(const ElasticRule& rule, int n, const MaskGeometry& geometry) {
    const int kv = std::min(n, geometry.sink_tokens() + window_of(rule, n, geometry));
    return static_cast<double>(kv) / n;
}

MatrixXd BlockMask::additive() const {
    MatrixXd m(n, n);
    for (int q = 0; q < n; ++q) {
        for (int k = 0; k < n; ++k) m(q, k) = token_visible(q, k) ? 0.0 : kMaskSentinel;
    }
    return m;
}

BlockMask build_mask(const ElasticRule& rule, int n, const MaskGeometry& geometry) {
    if (n <= 0) throw InputError("build_mask: n must be positive");
    BlockMask m;
    m.n = n;
    m.block_size = geometry.block_size;
    m.n_blocks = ceil_div(n, geometry.block_size);
    m.sink_blocks = geometry.sink_blocks;
    m.window_blocks = ceil_div(window_of(rule, n, geometry), geometry.block_size);
    return m;
}

BlockMask causal_block_mask(int n, int block_size) {
    BlockMask m;
    m.n = n;
    m.block_size = block_size;
    m.n_blocks = ceil_div(n, block_size);
    m.sink_blocks = 0;
    m.window_blocks = m.n_blocks;
    return m;
}

int MoAPlan::head_count() const {
    int h = 0;
    for (const auto& l : layers) h += static_cast<int>(l.size());
    return h;
}

int MoAPlan::max_distinct_rules_per_layer() const {
    int best = 0;
    for (const auto& l : layers) {
        std::set<ElasticRule> distinct(l.begin(), l.end());
        best = std::max(best, static_cast<int>(distinct.size()));
    }
    return best;
}

void MoAPlan::validate(int rule_limit) const {
    if (layers.empty()) throw ContractError("plan has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].empty()) throw ContractError("plan layer " + std::to_string(i) + " has no heads");
        std::set<ElasticRule> distinct(layers[i].begin(), layers[i].end());
        if (static_cast<int>(distinct.size()) > rule_limit) {
            throw ContractError("plan layer " + std::to_string(i) + " uses " + std::to_string(distinct.size()) +
                                " distinct rules (limit " + std::to_string(rule_limit) + ")");
        }
        for (const auto& r : layers[i]) {
            if (r.beta < 0.0 || r.beta > 1.0) throw ContractError("plan rule beta outside [0,1]");
        }
    }
}

double plan_density(const MoAPlan& plan, int n) {
    double sum = 0.0;
    for (const auto& l : plan.layers) {
        for (const auto& r : l) sum += density_of(r, n, plan.geometry);
    }
    return sum / plan.head_count();
}

MoAPlan uniform_plan(std::string fingerprint, const MaskGeometry& geometry, int n_layers, int n_heads,
                     const ElasticRule& rule) {
    MoAPlan p;
    p.fingerprint = std::move(fingerprint);
    p.geometry = geometry;
    p.layers.assign(n_layers, std::vector<ElasticRule>(n_heads, rule));
    return p;
}

nlohmann::json plan_to_json(const MoAPlan& plan) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : plan.layers) {
        nlohmann::json heads = nlohmann::json::array();
        for (const auto& r : l) heads.push_back({{"alpha", r.alpha}, {"beta", r.beta}});
        layers.push_back(std::move(heads));
    }
    return {{"fingerprint", plan.fingerprint},
            {"block_size", plan.geometry.block_size},
            {"sink_blocks", plan.geometry.sink_blocks},
            {"layers", std::move(layers)}};
}

MoAPlan plan_from_json(const nlohmann::json& j) {
    MoAPlan p;
    try {
        p.fingerprint = j.at("fingerprint").get<std::string>();
        p.geometry.block_size = j.at("block_size").get<int>();
        p.geometry.sink_blocks = j.at("sink_blocks").get<int>();
        for (const auto& l : j.at("layers")) {
            std::vector<ElasticRule> heads;
            for (const auto& r : l) heads.push_back({r.at("alpha").get<double>(), r.at("beta").get<double>()});
            p.layers.push_back(std::move(heads));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed plan json: ") + e.what());
    }
    if (p.geometry.block_size < 1 || p.geometry.sink_blocks < 0) throw InputError("plan has invalid geometry");
    return p;
}

void save_plan(const MoAPlan& plan, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path);
    out << plan_to_json(plan).dump(2) << '\n';
}

MoAPlan load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path);
    return plan_from_json(nlohmann::json::parse(in));
}

}  // namespace moa
