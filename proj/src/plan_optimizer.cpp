// SPDX-License-Identifier: Apache-2.0

#include "moa/plan_optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace moa {

void OptimizationInstance::validate() const {
    if (table.rules.empty()) throw InputError("optimizer: rule table has no rules");
    if (table.head_count() < 1) throw InputError("optimizer: rule table has no heads");
    if (layer_rule_limit < 1) throw InputError("optimizer: layer rule limit must be at least 1");
    for (const auto& [n, d] : density_constraints) {
        table.length_index(n);
        if (!(d > 0.0 && d <= 1.0)) throw InputError("optimizer: density budget must lie in (0, 1]");
    }
    for (const auto& iv : intervals) {
        table.length_index(iv.length);
        if (!(iv.lo <= iv.hi)) throw InputError("optimizer: loss interval bounds out of order");
    }
}

namespace {

using Clock = std::chrono::steady_clock;

enum class Sense { kLe, kLt, kGe };

struct Row {
    std::string name;
    Sense sense = Sense::kLe;
    double rhs = 0.0;
    std::vector<std::vector<double>> coeff;  // [head][rule]
    bool count_only = false;                 // coefficient depends on the rule alone
    bool tokens = false;                     // integral coefficients (density rows)
};

bool satisfied(Sense s, double value, double rhs) {
    switch (s) {
        case Sense::kLe: return value <= rhs;
        case Sense::kLt: return value < rhs;
        case Sense::kGe: return value >= rhs;
    }
    return false;
}

/// Lexicographic objective: (primary, refine sum, density tokens at the longest length).
using Key = std::array<double, 3>;

Key add_keys(const Key& a, const Key& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }

struct Option {
    std::vector<int> ids;  // per head of the layer, indices into table.rules
    Key key{};
    std::vector<double> values;  // per row
};

struct Problem {
    const RuleLossTable* table = nullptr;
    int heads_per_layer = 0;
    int n_layers = 0;
    int limit = 2;
    std::vector<int> rules;  // candidate rule ids after deduplication
    std::vector<Row> rows;
    std::vector<std::vector<Key>> head_key;  // [head][rule]
};

/// Drops rules whose table entries repeat an earlier rule's at every length.
std::vector<int> distinct_rules(const RuleLossTable& t) {
    std::vector<int> keep;
    for (int r = 0; r < static_cast<int>(t.rules.size()); ++r) {
        bool duplicate = false;
        for (int k : keep) {
            bool same = true;
            for (std::size_t l = 0; l < t.lengths.size() && same; ++l) {
                same = t.density[l][r] == t.density[l][k];
                for (int h = 0; h < t.head_count() && same; ++h) same = t.loss[l][h][r] == t.loss[l][h][k];
            }
            if (same) {
                duplicate = true;
                break;
            }
        }
        if (!duplicate) keep.push_back(r);
    }
    return keep;
}

int longest_index(const RuleLossTable& t) {
    return static_cast<int>(std::max_element(t.lengths.begin(), t.lengths.end()) - t.lengths.begin());
}

Problem build_problem(const OptimizationInstance& inst, int objective_length, const SolveOptions& opt) {
    inst.validate();
    const RuleLossTable& t = inst.table;
    Problem p;
    p.table = &t;
    p.heads_per_layer = t.heads_per_layer;
    p.n_layers = t.n_layers;
    p.limit = inst.layer_rule_limit;
    p.rules = distinct_rules(t);
    const int heads = t.head_count();
    const int nr = static_cast<int>(t.rules.size());
    const int obj = t.length_index(objective_length);
    const int longest = longest_index(t);

    p.head_key.assign(heads, std::vector<Key>(nr));
    for (int h = 0; h < heads; ++h) {
        for (int r = 0; r < nr; ++r) {
            double refine = 0.0;
            for (int n : opt.refine_lengths) refine += t.loss[t.length_index(n)][h][r];
            p.head_key[h][r] = {t.loss[obj][h][r], refine,
                                std::round(t.density[longest][r] * t.lengths[longest])};
        }
    }

    for (const auto& [n, d] : inst.density_constraints) {
        const int l = t.length_index(n);
        Row row;
        std::ostringstream name;
        name << "density@" << n << "<=" << d;
        row.name = name.str();
        row.sense = Sense::kLe;
        // mean density <= d  <=>  resident tokens summed over heads <= d * H * n
        row.rhs = std::floor(d * heads * n + 1e-9);
        row.coeff.assign(heads, std::vector<double>(nr));
        for (int h = 0; h < heads; ++h) {
            for (int r = 0; r < nr; ++r) row.coeff[h][r] = std::round(t.density[l][r] * n);
        }
        row.count_only = true;
        row.tokens = true;
        p.rows.push_back(std::move(row));
    }
    for (const auto& iv : inst.intervals) {
        const int l = t.length_index(iv.length);
        Row lo, hi;
        lo.name = "loss@" + std::to_string(iv.length) + ">=" + std::to_string(iv.lo);
        hi.name = "loss@" + std::to_string(iv.length) + (iv.closed ? "<=" : "<") + std::to_string(iv.hi);
        lo.sense = Sense::kGe;
        hi.sense = iv.closed ? Sense::kLe : Sense::kLt;
        lo.rhs = iv.lo;
        hi.rhs = iv.hi;
        lo.coeff.assign(heads, std::vector<double>(nr));
        for (int h = 0; h < heads; ++h) {
            for (int r = 0; r < nr; ++r) lo.coeff[h][r] = t.loss[l][h][r];
        }
        hi.coeff = lo.coeff;
        if (std::isfinite(iv.lo)) p.rows.push_back(std::move(lo));
        p.rows.push_back(std::move(hi));
    }
    return p;
}

bool key_less(const Key& a, const Key& b) { return a < b; }

/// a is at least as good as b on every row.
bool rows_no_worse(const Problem& p, const Option& a, const Option& b) {
    for (std::size_t i = 0; i < p.rows.size(); ++i) {
        if (p.rows[i].sense == Sense::kGe) {
            if (a.values[i] < b.values[i]) return false;
        } else if (a.values[i] > b.values[i]) {
            return false;
        }
    }
    return true;
}

Option make_option(const Problem& p, int layer, std::vector<int> ids) {
    Option o;
    o.values.assign(p.rows.size(), 0.0);
    for (int k = 0; k < p.heads_per_layer; ++k) {
        const int h = layer * p.heads_per_layer + k;
        o.key = add_keys(o.key, p.head_key[h][ids[k]]);
        for (std::size_t i = 0; i < p.rows.size(); ++i) o.values[i] += p.rows[i].coeff[h][ids[k]];
    }
    o.ids = std::move(ids);
    return o;
}

/// Calls fn(subset) for every subset of `items` of size k, in lexicographic order.
template <typename Fn>
void for_each_subset(const std::vector<int>& items, int k, Fn&& fn) {
    std::vector<int> idx(k);
    std::iota(idx.begin(), idx.end(), 0);
    const int n = static_cast<int>(items.size());
    if (k > n) return;
    std::vector<int> subset(k);
    while (true) {
        for (int i = 0; i < k; ++i) subset[i] = items[idx[i]];
        fn(subset);
        int i = k - 1;
        while (i >= 0 && idx[i] == n - k + i) --i;
        if (i < 0) return;
        ++idx[i];
        for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
}

std::vector<Option> layer_options(const Problem& p, int layer, bool exchange) {
    const int m = p.heads_per_layer;
    std::vector<Option> out;
    for (int r : p.rules) out.push_back(make_option(p, layer, std::vector<int>(m, r)));

    bool count_only = true;
    for (const auto& row : p.rows) count_only = count_only && row.count_only;
    const int max_k = std::min(p.limit, m);
    for (int k = 2; k <= max_k; ++k) {
        for_each_subset(p.rules, k, [&](const std::vector<int>& subset) {
            if (k == 2 && exchange && count_only) {
                // With count-only rows, the best assignment using rule b on c heads
                // gives b to the c heads where switching from a costs least.
                const int a = subset[0], b = subset[1];
                std::vector<std::pair<Key, int>> diff;
                for (int j = 0; j < m; ++j) {
                    const int h = layer * m + j;
                    const Key& ka = p.head_key[h][a];
                    const Key& kb = p.head_key[h][b];
                    diff.push_back({{kb[0] - ka[0], kb[1] - ka[1], kb[2] - ka[2]}, -j});
                }
                std::sort(diff.begin(), diff.end());
                for (int c = 1; c < m; ++c) {
                    std::vector<int> ids(m, a);
                    for (int i = 0; i < c; ++i) ids[-diff[i].second] = b;
                    out.push_back(make_option(p, layer, std::move(ids)));
                }
                return;
            }
            // every surjective assignment of the subset onto the layer's heads
            std::vector<int> digits(m, 0);
            while (true) {
                std::vector<bool> used(k, false);
                for (int d : digits) used[d] = true;
                if (std::all_of(used.begin(), used.end(), [](bool u) { return u; })) {
                    std::vector<int> ids(m);
                    for (int j = 0; j < m; ++j) ids[j] = subset[digits[j]];
                    out.push_back(make_option(p, layer, std::move(ids)));
                }
                int j = m - 1;
                while (j >= 0 && digits[j] == k - 1) digits[j--] = 0;
                if (j < 0) break;
                ++digits[j];
            }
        });
    }

    // in-layer dominance: sorted by (key, ids), an option survives unless an
    // earlier survivor is no worse on the key and every row
    std::sort(out.begin(), out.end(), [](const Option& x, const Option& y) {
        if (x.key != y.key) return key_less(x.key, y.key);
        return x.ids < y.ids;
    });
    std::vector<Option> kept;
    for (auto& o : out) {
        bool dominated = false;
        for (const auto& k : kept) {
            if (rows_no_worse(p, k, o)) {
                dominated = true;
                break;
            }
        }
        if (!dominated) kept.push_back(std::move(o));
    }
    return kept;
}

struct Candidate {
    Key key{};
    std::vector<int> ids;
};

bool better(const Candidate& a, const Candidate& b) {
    if (a.key != b.key) return key_less(a.key, b.key);
    return a.ids < b.ids;
}

class Search {
public:
    Search(const Problem& p, std::vector<std::vector<Option>> options) : p_(p), options_(std::move(options)) {
        const int L = p.n_layers;
        const std::size_t nrows = p.rows.size();
        suffix_min_key_.assign(L + 1, Key{0, 0, 0});
        suffix_min_.assign(L + 1, std::vector<double>(nrows, 0.0));
        suffix_max_.assign(L + 1, std::vector<double>(nrows, 0.0));
        for (int l = L - 1; l >= 0; --l) {
            Key mk{inf(), inf(), inf()};
            std::vector<double> mn(nrows, inf()), mx(nrows, -inf());
            for (const auto& o : options_[l]) {
                for (int c = 0; c < 3; ++c) mk[c] = std::min(mk[c], o.key[c]);
                for (std::size_t i = 0; i < nrows; ++i) {
                    mn[i] = std::min(mn[i], o.values[i]);
                    mx[i] = std::max(mx[i], o.values[i]);
                }
            }
            suffix_min_key_[l] = add_keys(suffix_min_key_[l + 1], mk);
            for (std::size_t i = 0; i < nrows; ++i) {
                suffix_min_[l][i] = suffix_min_[l + 1][i] + mn[i];
                suffix_max_[l][i] = suffix_max_[l + 1][i] + mx[i];
            }
        }
        build_knapsack_bounds();
    }

    /// Name of a row that no assignment can satisfy on its own, or "".
    std::string hopeless_row() const {
        for (std::size_t i = 0; i < p_.rows.size(); ++i) {
            const Row& r = p_.rows[i];
            const double best = r.sense == Sense::kGe ? suffix_max_[0][i] : suffix_min_[0][i];
            if (!satisfied(r.sense, best, r.rhs)) return r.name;
        }
        return "";
    }

    std::optional<Candidate> run() {
        std::vector<int> ids;
        Key key{0, 0, 0};
        std::vector<double> values(p_.rows.size(), 0.0);
        dfs(0, key, values, ids);
        return best_;
    }

    long long nodes() const { return nodes_; }

private:
    static double inf() { return std::numeric_limits<double>::infinity(); }

    void build_knapsack_bounds() {
        const int L = p_.n_layers;
        for (std::size_t i = 0; i < p_.rows.size(); ++i) {
            const Row& row = p_.rows[i];
            if (!row.tokens) continue;
            const int budget = static_cast<int>(row.rhs);
            if (budget < 0) continue;
            // f[l][b]: least primary objective of layers l.. using at most b tokens
            std::vector<std::vector<double>> f(L + 1, std::vector<double>(budget + 1, 0.0));
            for (int l = L - 1; l >= 0; --l) {
                std::fill(f[l].begin(), f[l].end(), inf());
                for (const auto& o : options_[l]) {
                    const int w = static_cast<int>(o.values[i]);
                    for (int b = w; b <= budget; ++b) f[l][b] = std::min(f[l][b], o.key[0] + f[l + 1][b - w]);
                }
            }
            knapsack_.push_back({i, std::move(f)});
        }
    }

    double primary_bound(int layer, const std::vector<double>& values) const {
        double bound = suffix_min_key_[layer][0];
        for (const auto& [i, f] : knapsack_) {
            const double left = p_.rows[i].rhs - values[i];
            if (left < 0) return inf();
            const int b = std::min(static_cast<int>(left + 1e-9), static_cast<int>(f[layer].size()) - 1);
            bound = std::max(bound, f[layer][b]);
        }
        return bound;
    }

    bool can_finish(int layer, const std::vector<double>& values) const {
        for (std::size_t i = 0; i < p_.rows.size(); ++i) {
            const Row& r = p_.rows[i];
            const double reach = values[i] + (r.sense == Sense::kGe ? suffix_max_[layer][i] : suffix_min_[layer][i]);
            if (!satisfied(r.sense, reach, r.rhs)) return false;
        }
        return true;
    }

    static double tol(double x) { return 1e-9 * (1.0 + std::abs(x)); }

    /// True when no completion from this node can beat the incumbent.
    bool bounded_out(const Key& lb) const {
        if (!best_) return false;
        const Key& b = best_->key;
        for (int c = 0; c < 3; ++c) {
            if (lb[c] > b[c] + tol(b[c])) return true;
            if (lb[c] < b[c] - tol(b[c])) return false;
        }
        return false;
    }

    void leaf(const std::vector<int>& ids) {
        // recompute from per-head coefficients in head order so comparisons do
        // not depend on the path that reached this plan
        Candidate c;
        c.ids = ids;
        std::vector<double> values(p_.rows.size(), 0.0);
        for (std::size_t h = 0; h < ids.size(); ++h) {
            c.key = add_keys(c.key, p_.head_key[h][ids[h]]);
            for (std::size_t i = 0; i < p_.rows.size(); ++i) values[i] += p_.rows[i].coeff[h][ids[h]];
        }
        for (std::size_t i = 0; i < p_.rows.size(); ++i) {
            if (!satisfied(p_.rows[i].sense, values[i], p_.rows[i].rhs)) return;
        }
        if (!best_ || better(c, *best_)) best_ = std::move(c);
    }

    void dfs(int layer, const Key& key, const std::vector<double>& values, std::vector<int>& ids) {
        ++nodes_;
        if (layer == p_.n_layers) {
            leaf(ids);
            return;
        }
        const Key& rest = suffix_min_key_[layer + 1];
        for (const auto& o : options_[layer]) {
            const Key next = add_keys(key, o.key);
            // options are sorted by primary objective, so the simple bound only grows
            if (best_ && next[0] + rest[0] > best_->key[0] + tol(best_->key[0])) break;
            std::vector<double> v(values);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += o.values[i];
            if (!can_finish(layer + 1, v)) continue;
            Key lb = add_keys(next, rest);
            lb[0] = next[0] + primary_bound(layer + 1, v);
            if (bounded_out(lb)) continue;
            const std::size_t mark = ids.size();
            ids.insert(ids.end(), o.ids.begin(), o.ids.end());
            dfs(layer + 1, next, v, ids);
            ids.resize(mark);
        }
    }

    const Problem& p_;
    std::vector<std::vector<Option>> options_;
    std::vector<Key> suffix_min_key_;
    std::vector<std::vector<double>> suffix_min_, suffix_max_;
    std::vector<std::pair<std::size_t, std::vector<std::vector<double>>>> knapsack_;
    std::optional<Candidate> best_;
    long long nodes_ = 0;
};

Solution finish(const RuleLossTable& t, std::vector<int> ids) {
    Solution s;
    for (std::size_t l = 0; l < t.lengths.size(); ++l) {
        double loss = 0.0, dens = 0.0;
        for (std::size_t h = 0; h < ids.size(); ++h) {
            loss += t.loss[l][h][ids[h]];
            dens += t.density[l][ids[h]];
        }
        s.losses.push_back(loss);
        s.densities.push_back(dens / static_cast<double>(ids.size()));
    }
    s.rule_ids = std::move(ids);
    return s;
}

}  // namespace

Solution solve_single(const OptimizationInstance& instance, int objective_length, const SolveOptions& options) {
    const auto t0 = Clock::now();
    const Problem p = build_problem(instance, objective_length, options);
    std::vector<std::vector<Option>> opts;
    long long count = 0;
    for (int l = 0; l < p.n_layers; ++l) {
        opts.push_back(layer_options(p, l, options.exchange_argument));
        count += static_cast<long long>(opts.back().size());
    }
    Search search(p, std::move(opts));
    if (const std::string row = search.hopeless_row(); !row.empty()) {
        throw InfeasibleError("infeasible: constraint " + row + " cannot be met by any plan", row);
    }
    std::optional<Candidate> best = search.run();
    if (!best) {
        std::string names;
        for (const auto& r : p.rows) names += (names.empty() ? "" : ", ") + r.name;
        throw InfeasibleError("infeasible: constraints {" + names + "} cannot hold together", names);
    }
    Solution s = finish(instance.table, best->ids);
    s.stats.nodes = search.nodes();
    s.stats.layer_options = count;
    s.stats.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return s;
}

std::optional<Solution> solve_by_enumeration(const OptimizationInstance& instance, int objective_length,
                                             long long max_assignments) {
    instance.validate();
    const RuleLossTable& t = instance.table;
    const int heads = t.head_count();
    const int nr = static_cast<int>(t.rules.size());
    long long total = 1;
    for (int h = 0; h < heads; ++h) {
        total *= nr;
        if (total > max_assignments) throw InputError("enumeration: too many assignments");
    }
    const int obj = t.length_index(objective_length);
    const int longest = longest_index(t);
    std::optional<std::pair<std::pair<double, double>, std::vector<int>>> best;
    std::vector<int> ids(heads, 0);
    for (long long a = 0; a < total; ++a) {
        long long x = a;
        for (int h = heads - 1; h >= 0; --h) {
            ids[h] = static_cast<int>(x % nr);
            x /= nr;
        }
        bool ok = true;
        for (int l = 0; l < t.n_layers && ok; ++l) {
            std::vector<int> used(ids.begin() + l * t.heads_per_layer, ids.begin() + (l + 1) * t.heads_per_layer);
            std::sort(used.begin(), used.end());
            ok = std::unique(used.begin(), used.end()) - used.begin() <= instance.layer_rule_limit;
        }
        for (const auto& [n, d] : instance.density_constraints) {
            if (!ok) break;
            const int l = t.length_index(n);
            double sum = 0.0;
            for (int h = 0; h < heads; ++h) sum += t.density[l][ids[h]];
            ok = sum / heads <= d + 1e-12;
        }
        for (const auto& iv : instance.intervals) {
            if (!ok) break;
            const int l = t.length_index(iv.length);
            double sum = 0.0;
            for (int h = 0; h < heads; ++h) sum += t.loss[l][h][ids[h]];
            ok = sum >= iv.lo && (iv.closed ? sum <= iv.hi : sum < iv.hi);
        }
        if (!ok) continue;
        double loss = 0.0, dens = 0.0;
        for (int h = 0; h < heads; ++h) {
            loss += t.loss[obj][h][ids[h]];
            dens += t.density[longest][ids[h]];
        }
        auto cand = std::make_pair(std::make_pair(loss, dens), ids);
        if (!best || cand < *best) best = cand;
    }
    if (!best) return std::nullopt;
    return finish(t, best->second);
}

MoAPlan solution_plan(const OptimizationInstance& instance, const Solution& solution, const std::string& fingerprint) {
    const RuleLossTable& t = instance.table;
    MoAPlan plan;
    plan.fingerprint = fingerprint;
    plan.geometry = t.geometry;
    for (int l = 0; l < t.n_layers; ++l) {
        std::vector<ElasticRule> layer;
        for (int k = 0; k < t.heads_per_layer; ++k) layer.push_back(t.rules[solution.rule_ids[l * t.heads_per_layer + k]]);
        plan.layers.push_back(std::move(layer));
    }
    return plan;
}

std::vector<std::size_t> dominance_filter(const std::vector<std::vector<double>>& points) {
    auto dominates = [](const std::vector<double>& a, const std::vector<double>& b) {
        bool strict = false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i] > b[i]) return false;
            strict = strict || a[i] < b[i];
        }
        return strict;
    };
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (points[i].size() != points.front().size()) throw DimensionError("dominance_filter: vector lengths differ");
        bool drop = false;
        for (std::size_t j = 0; j < points.size() && !drop; ++j) {
            if (j == i) continue;
            drop = dominates(points[j], points[i]) || (j < i && points[j] == points[i]);
        }
        if (!drop) keep.push_back(i);
    }
    return keep;
}

ParetoSet pareto_front(const OptimizationInstance& instance, int intervals, int threads) {
    const auto t0 = Clock::now();
    if (intervals < 1) throw InputError("pareto_front: need at least one interval");
    instance.validate();
    const std::vector<int>& lengths = instance.table.lengths;
    const std::size_t nl = lengths.size();
    ParetoSet front;
    std::vector<Solution> collected;

    auto others = [&](std::size_t j) {
        std::vector<int> out;
        for (std::size_t k = 0; k < nl; ++k) {
            if (k != j) out.push_back(lengths[k]);
        }
        return out;
    };

    // (a/b) each length alone; refining ties by the other lengths keeps every
    // single-objective optimum non-dominated
    auto singles = parallel_map<std::optional<Solution>>(
        nl,
        [&](std::size_t j) -> std::optional<Solution> {
            SolveOptions o;
            o.refine_lengths = others(j);
            try {
                return solve_single(instance, lengths[j], o);
            } catch (const InfeasibleError&) {
                return std::nullopt;
            }
        },
        threads);
    front.stats.subproblems += static_cast<int>(nl);
    for (auto& s : singles) {
        if (!s) {
            ++front.stats.infeasible;
            continue;
        }
        front.stats.nodes += s->stats.nodes;
        collected.push_back(*s);
    }
    if (collected.empty()) {
        // re-raise the first single-objective failure with its binding constraint
        solve_single(instance, lengths[0]);
    }
    front.ranges.assign(nl, {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
    for (const auto& s : collected) {
        for (std::size_t k = 0; k < nl; ++k) {
            front.ranges[k].first = std::min(front.ranges[k].first, s.losses[k]);
            front.ranges[k].second = std::max(front.ranges[k].second, s.losses[k]);
        }
    }

    // (c/d) every combination of slice upper edges on the other objectives
    struct Task {
        std::size_t objective;
        std::vector<LossInterval> slices;
    };
    std::vector<Task> tasks;
    if (nl > 1) {
        for (std::size_t j = 0; j < nl; ++j) {
            std::vector<std::size_t> rest;
            for (std::size_t k = 0; k < nl; ++k) {
                if (k != j) rest.push_back(k);
            }
            std::vector<int> digit(rest.size(), 0);
            while (true) {
                Task task{j, {}};
                for (std::size_t q = 0; q < rest.size(); ++q) {
                    const auto [lo, hi] = front.ranges[rest[q]];
                    const double width = (hi - lo) / intervals;
                    LossInterval iv;
                    iv.length = lengths[rest[q]];
                    // upper bounds only: a lower bound would block dominance pruning
                    iv.lo = -std::numeric_limits<double>::infinity();
                    iv.closed = digit[q] == intervals - 1;
                    iv.hi = iv.closed ? hi + 1e-9 * (1.0 + std::abs(hi)) : lo + width * (digit[q] + 1);
                    task.slices.push_back(iv);
                }
                tasks.push_back(std::move(task));
                std::size_t q = 0;
                while (q < digit.size() && ++digit[q] == intervals) digit[q++] = 0;
                if (q == digit.size()) break;
            }
        }
    }
    auto solved = parallel_map<std::optional<Solution>>(
        tasks.size(),
        [&](std::size_t i) -> std::optional<Solution> {
            OptimizationInstance sub = instance;
            sub.intervals.insert(sub.intervals.end(), tasks[i].slices.begin(), tasks[i].slices.end());
            SolveOptions o;
            o.refine_lengths = others(tasks[i].objective);
            try {
                return solve_single(sub, lengths[tasks[i].objective], o);
            } catch (const InfeasibleError&) {
                return std::nullopt;
            }
        },
        threads);
    front.stats.subproblems += static_cast<int>(tasks.size());
    for (auto& s : solved) {
        if (!s) {
            ++front.stats.infeasible;
            continue;
        }
        front.stats.nodes += s->stats.nodes;
        collected.push_back(std::move(*s));
    }

    std::vector<Solution> unique;
    for (auto& s : collected) {
        const bool seen = std::any_of(unique.begin(), unique.end(),
                                      [&](const Solution& u) { return u.rule_ids == s.rule_ids; });
        if (!seen) unique.push_back(std::move(s));
    }
    std::vector<std::vector<double>> points;
    for (const auto& s : unique) points.push_back(s.losses);
    for (std::size_t i : dominance_filter(points)) front.members.push_back(unique[i]);
    front.stats.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return front;
}

nlohmann::json front_to_json(const OptimizationInstance& instance, const ParetoSet& front,
                             const std::string& fingerprint) {
    nlohmann::json out = nlohmann::json::array();
    const auto& lengths = instance.table.lengths;
    for (const auto& s : front.members) {
        nlohmann::json losses, dens;
        for (std::size_t l = 0; l < lengths.size(); ++l) {
            losses[std::to_string(lengths[l])] = s.losses[l];
            dens[std::to_string(lengths[l])] = s.densities[l];
        }
        out.push_back({{"plan", plan_to_json(solution_plan(instance, s, fingerprint))},
                       {"rule_ids", s.rule_ids},
                       {"losses", losses},
                       {"densities", dens},
                       {"solver_stats",
                        {{"nodes", s.stats.nodes}, {"layer_options", s.stats.layer_options},
                         {"wall_seconds", s.stats.seconds}}}});
    }
    return out;
}

ValidationChoice select_by_validation(const std::vector<MoAPlan>& plans, const Model& model,
                                      const std::vector<CalibrationItem>& items, int validation_length,
                                      int threads) {
    if (plans.empty()) throw ContractError("select_by_validation: empty front");
    ValidationChoice choice;
    if (plans.size() == 1) {
        choice.losses.push_back(std::numeric_limits<double>::quiet_NaN());
        return choice;
    }
    if (items.empty()) throw ContractError("select_by_validation: no validation items");
    for (const auto& item : items) {
        if (static_cast<int>(item.tokens.size()) != validation_length) {
            throw ContractError("select_by_validation: item length differs from the validation length");
        }
    }
    for (const auto& plan : plans) {
        auto per_item = parallel_map<double>(
            items.size(),
            [&](std::size_t i) {
                return supervised_loss(model, items[i].tokens, items[i].supervision,
                                       plan_masks(model.config, plan, items[i].tokens));
            },
            threads);
        double sum = 0.0;
        for (double v : per_item) sum += v;
        choice.losses.push_back(sum / static_cast<double>(items.size()));
    }
    for (std::size_t i = 1; i < plans.size(); ++i) {
        const double a = choice.losses[i], b = choice.losses[choice.index];
        if (a < b || (a == b && plan_density(plans[i], validation_length) <
                                    plan_density(plans[choice.index], validation_length))) {
            choice.index = i;
        }
    }
    return choice;
}

}  // namespace moa
