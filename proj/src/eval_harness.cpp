// SPDX-License-Identifier: Apache-2.0

#include "moa/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "moa/kv_cache.hpp"

namespace moa {

MoAPlan dense_plan(const Model& model, const MaskGeometry& geometry) {
    return uniform_plan(model_fingerprint(model), geometry, model.config.n_layers, model.config.n_heads_per_layer,
                        ElasticRule{0.0, 1.0});
}

Fraction retrieval_accuracy(const Model& model, const MoAPlan* plan, int length, PositionBucket bucket, int n_items,
                            const RetrievalSetup& setup) {
    const MoAPlan chosen = plan ? *plan : dense_plan(model, setup.geometry);
    const int n_pairs = setup.n_pairs > 0 ? setup.n_pairs : default_pair_count(length);
    const std::uint64_t stream = static_cast<std::uint64_t>(length) * 8 + static_cast<std::uint64_t>(bucket) + 1;
    auto hits = parallel_map<char>(
        static_cast<std::size_t>(n_items),
        [&](std::size_t i) -> char {
            const RetrievalInstance inst =
                gen_retrieval_instance(setup.data, n_pairs, bucket, mix_seed(mix_seed(setup.seed, stream), i), length);
            PrefillResult pre = prefill(model, inst.prompt, chosen, setup.grow_spans);
            MatrixXd logits = pre.logits;
            for (std::size_t a = 0; a < inst.answer.size(); ++a) {
                Eigen::Index best;
                logits.row(0).maxCoeff(&best);
                if (static_cast<int>(best) != inst.answer[a]) return 0;
                if (a + 1 < inst.answer.size()) logits = decode_step(model, pre.cache, static_cast<int>(best));
            }
            return 1;
        },
        setup.threads);
    Fraction f;
    f.total = n_items;
    for (char h : hits) f.correct += h;
    return f;
}

Fraction AccuracyGrid::row(std::size_t length_index) const {
    Fraction f;
    for (const auto& c : cells.at(length_index)) {
        f.correct += c.correct;
        f.total += c.total;
    }
    return f;
}

std::vector<std::pair<int, double>> AccuracyGrid::curve() const {
    std::vector<std::pair<int, double>> out;
    for (std::size_t l = 0; l < lengths.size(); ++l) out.push_back({lengths[l], row(l).value()});
    return out;
}

AccuracyGrid accuracy_grid(const Model& model, const MoAPlan* plan, const std::vector<int>& lengths,
                           const std::vector<PositionBucket>& buckets, int items_per_cell, const RetrievalSetup& setup) {
    AccuracyGrid g;
    g.lengths = lengths;
    std::sort(g.lengths.begin(), g.lengths.end());
    g.buckets = buckets;
    for (int n : g.lengths) {
        std::vector<Fraction> row;
        for (PositionBucket b : buckets) row.push_back(retrieval_accuracy(model, plan, n, b, items_per_cell, setup));
        g.cells.push_back(std::move(row));
    }
    return g;
}

int effective_context_length(const std::vector<std::pair<int, double>>& curve, double threshold) {
    int best = 0;
    for (const auto& [n, acc] : curve) {
        if (acc >= threshold) best = std::max(best, n);
    }
    return best;
}

double perplexity(const Model& model, const MoAPlan* plan, const std::vector<CalibrationItem>& items, int threads) {
    if (items.empty()) throw ContractError("perplexity: empty dataset");
    auto per_item = parallel_map<std::pair<double, int>>(
        items.size(),
        [&](std::size_t i) {
            const auto& it = items[i];
            int count = 0;
            for (std::size_t t = 1; t < it.supervision.size(); ++t) count += it.supervision[t] ? 1 : 0;
            const double mean =
                supervised_loss(model, it.tokens, it.supervision, masks_for(model.config, plan, it.tokens));
            return std::make_pair(mean * count, count);
        },
        threads);
    double sum = 0.0;
    long long count = 0;
    for (const auto& [s, c] : per_item) {
        sum += s;
        count += c;
    }
    return std::exp(sum / static_cast<double>(count));
}

MoAPlan uniform_baseline(const Model& model, const MaskGeometry& geometry, double budget) {
    return uniform_plan(model_fingerprint(model), geometry, model.config.n_layers, model.config.n_heads_per_layer,
                        ElasticRule{0.0, budget});
}

namespace {

MethodReport evaluate_method(const std::string& name, const Model& model, const MoAPlan* plan,
                             const CompareSetup& compare, const RetrievalSetup& setup,
                             const std::vector<CalibrationItem>& ppl_items) {
    MethodReport m;
    m.name = name;
    m.grid = accuracy_grid(model, plan, compare.lengths, compare.buckets, compare.items_per_cell, setup);
    for (int n : m.grid.lengths) m.densities.push_back({n, plan ? plan_density(*plan, n) : 1.0});
    m.effective_length = effective_context_length(m.grid.curve(), compare.threshold);
    if (!ppl_items.empty()) m.ppl = perplexity(model, plan, ppl_items, setup.threads);
    return m;
}

}  // namespace

ComparisonReport compare_uniform(const Model& model, const MoAPlan& moa, double budget, const CompareSetup& compare,
                                 const RetrievalSetup& setup, const std::vector<CalibrationItem>& ppl_items) {
    const MoAPlan uniform = uniform_baseline(model, moa.geometry, budget);
    for (int n : compare.density_check_lengths) {
        const double a = plan_density(moa, n), b = plan_density(uniform, n);
        if (std::abs(a - b) > 0.01) {
            std::ostringstream msg;
            msg << "plans not comparable at length " << n << ": density " << a << " vs uniform " << b;
            throw ComparabilityError(msg.str());
        }
    }
    ComparisonReport r;
    r.budget = budget;
    r.methods.push_back(evaluate_method("dense", model, nullptr, compare, setup, ppl_items));
    r.methods.push_back(evaluate_method("moa", model, &moa, compare, setup, ppl_items));
    r.methods.push_back(evaluate_method("uniform", model, &uniform, compare, setup, ppl_items));
    return r;
}

nlohmann::json grid_to_json(const AccuracyGrid& grid) {
    nlohmann::json cells = nlohmann::json::array();
    for (std::size_t l = 0; l < grid.lengths.size(); ++l) {
        for (std::size_t b = 0; b < grid.buckets.size(); ++b) {
            const Fraction& f = grid.cells[l][b];
            cells.push_back({{"length", grid.lengths[l]},
                             {"bucket", bucket_name(grid.buckets[b])},
                             {"correct", f.correct},
                             {"total", f.total},
                             {"accuracy", f.value()}});
        }
    }
    return {{"lengths", grid.lengths}, {"cells", cells}};
}

std::string grid_to_csv(const AccuracyGrid& grid, const std::string& method) {
    std::ostringstream out;
    out << "method,length,bucket,correct,total,accuracy\n";
    for (std::size_t l = 0; l < grid.lengths.size(); ++l) {
        for (std::size_t b = 0; b < grid.buckets.size(); ++b) {
            const Fraction& f = grid.cells[l][b];
            out << method << ',' << grid.lengths[l] << ',' << bucket_name(grid.buckets[b]) << ',' << f.correct << ','
                << f.total << ',' << f.value() << '\n';
        }
    }
    return out.str();
}

nlohmann::json comparison_to_json(const ComparisonReport& report) {
    nlohmann::json methods = nlohmann::json::array();
    for (const auto& m : report.methods) {
        nlohmann::json dens;
        for (const auto& [n, d] : m.densities) dens[std::to_string(n)] = d;
        methods.push_back({{"name", m.name},
                           {"grid", grid_to_json(m.grid)},
                           {"densities", dens},
                           {"effective_context_length", m.effective_length},
                           {"perplexity", m.ppl}});
    }
    return {{"budget", report.budget}, {"methods", methods}};
}

std::string comparison_to_csv(const ComparisonReport& report) {
    std::ostringstream out;
    out << "method,length,bucket,correct,total,accuracy,density\n";
    for (const auto& m : report.methods) {
        for (std::size_t l = 0; l < m.grid.lengths.size(); ++l) {
            for (std::size_t b = 0; b < m.grid.buckets.size(); ++b) {
                const Fraction& f = m.grid.cells[l][b];
                out << m.name << ',' << m.grid.lengths[l] << ',' << bucket_name(m.grid.buckets[b]) << ',' << f.correct
                    << ',' << f.total << ',' << f.value() << ',' << m.densities[l].second << '\n';
            }
        }
    }
    return out.str();
}

std::string ladder_name(LadderStep step) {
    switch (step) {
        case LadderStep::kUniform: return "uniform";
        case LadderStep::kHeteroLayers: return "hetero-layers";
        case LadderStep::kHeteroHeads: return "hetero-heads";
        case LadderStep::kElastic: return "elastic";
    }
    return "?";
}

namespace {

/// Copy of `table` restricted to the rules in `keep` (original ids).
RuleLossTable restrict_rules(const RuleLossTable& table, const std::vector<int>& keep) {
    RuleLossTable t = table;
    t.rules.clear();
    for (int r : keep) t.rules.push_back(table.rules[r]);
    for (std::size_t l = 0; l < table.lengths.size(); ++l) {
        t.density[l].clear();
        for (int r : keep) t.density[l].push_back(table.density[l][r]);
        for (std::size_t h = 0; h < table.loss[l].size(); ++h) {
            t.loss[l][h].clear();
            for (int r : keep) t.loss[l][h].push_back(table.loss[l][h][r]);
        }
    }
    return t;
}

bool uniform_feasible(const OptimizationInstance& inst, int r) {
    const RuleLossTable& t = inst.table;
    for (const auto& [n, d] : inst.density_constraints) {
        if (t.density[t.length_index(n)][r] > d + 1e-12) return false;
    }
    for (const auto& iv : inst.intervals) {
        double loss = 0.0;
        const int l = t.length_index(iv.length);
        for (int h = 0; h < t.head_count(); ++h) loss += t.loss[l][h][r];
        if (loss < iv.lo || (iv.closed ? loss > iv.hi : loss >= iv.hi)) return false;
    }
    return true;
}

}  // namespace

Solution solve_ladder_step(const OptimizationInstance& base, LadderStep step, int objective_length) {
    if (step == LadderStep::kElastic) return solve_single(base, objective_length);
    std::vector<int> keep;
    for (int r = 0; r < static_cast<int>(base.table.rules.size()); ++r) {
        if (base.table.rules[r].beta == 0.0) keep.push_back(r);
    }
    if (keep.empty()) throw InputError("ladder: rule grid has no static (beta 0) rule");
    OptimizationInstance inst = base;
    inst.table = restrict_rules(base.table, keep);
    Solution s;
    if (step == LadderStep::kUniform) {
        const RuleLossTable& t = inst.table;
        const int obj = t.length_index(objective_length);
        int best = -1;
        double best_loss = 0.0;
        for (int r = 0; r < static_cast<int>(t.rules.size()); ++r) {
            if (!uniform_feasible(inst, r)) continue;
            double loss = 0.0;
            for (int h = 0; h < t.head_count(); ++h) loss += t.loss[obj][h][r];
            if (best < 0 || loss < best_loss) {
                best = r;
                best_loss = loss;
            }
        }
        if (best < 0) throw InfeasibleError("ladder: no single static rule meets the constraints", "uniform");
        s.rule_ids.assign(t.head_count(), best);
        for (std::size_t l = 0; l < t.lengths.size(); ++l) {
            double loss = 0.0;
            for (int h = 0; h < t.head_count(); ++h) loss += t.loss[l][h][best];
            s.losses.push_back(loss);
            s.densities.push_back(t.density[l][best]);
        }
    } else {
        if (step == LadderStep::kHeteroLayers) inst.layer_rule_limit = 1;
        s = solve_single(inst, objective_length);
    }
    for (int& id : s.rule_ids) id = keep[id];
    return s;
}

}  // namespace moa
