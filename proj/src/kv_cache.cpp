// SPDX-License-Identifier: Apache-2.0

#include "moa/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace moa {

namespace {

MatrixXd rms_row(const MatrixXd& x, const MatrixXd& gain) {
    const double d = static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(x.array().square().sum() / d + 1e-6);
    return (x * inv).array() * gain.array();
}

const ElasticRule& head_rule(const MoAPlan& plan, int head, int heads_per_layer) {
    return plan.rule(head / heads_per_layer, head % heads_per_layer);
}

void check_plan(const Model& model, const MoAPlan& plan) {
    const std::string fp = model_fingerprint(model);
    if (plan.fingerprint != fp) {
        throw PlanError("plan fingerprint " + plan.fingerprint + " does not match model " + fp);
    }
    if (static_cast<int>(plan.layers.size()) != model.config.n_layers || plan.head_count() != model.config.total_heads()) {
        throw PlanError("plan shape does not match the model");
    }
}

/// Moves ring contents into slot order oldest..newest inside a larger ring.
void grow_ring(HeadCache& h, int capacity, int head_dim) {
    MatrixXd k(capacity, head_dim), v(capacity, head_dim);
    std::vector<int> pos(capacity, -1);
    std::vector<char> hid(capacity, 0);
    const int start = h.ring_count == h.capacity ? h.ring_next : 0;
    for (int i = 0; i < h.ring_count; ++i) {
        const int s = (start + i) % std::max(1, h.capacity);
        k.row(i) = h.ring_keys.row(s);
        v.row(i) = h.ring_values.row(s);
        pos[i] = h.ring_positions[s];
        hid[i] = h.ring_hidden[s];
    }
    h.ring_keys = std::move(k);
    h.ring_values = std::move(v);
    h.ring_positions = std::move(pos);
    h.ring_hidden = std::move(hid);
    h.capacity = capacity;
    h.ring_next = h.ring_count % capacity;
}

void push(HeadCache& h, const MatrixXd& key, const MatrixXd& value, int position, bool hidden, int sink_tokens) {
    if (position < sink_tokens) {
        h.sink_keys.row(h.sink_count) = key;
        h.sink_values.row(h.sink_count) = value;
        h.sink_positions.push_back(position);
        h.sink_hidden.push_back(hidden);
        ++h.sink_count;
    } else if (h.capacity > 0) {
        h.ring_keys.row(h.ring_next) = key;
        h.ring_values.row(h.ring_next) = value;
        h.ring_positions[h.ring_next] = position;
        h.ring_hidden[h.ring_next] = hidden;
        h.ring_next = (h.ring_next + 1) % h.capacity;
        h.ring_count = std::min(h.ring_count + 1, h.capacity);
    }
    h.peak = std::max(h.peak, h.resident());
    if (h.ring_count > h.capacity || h.sink_count > sink_tokens) {
        throw ContractError("kv cache exceeded its budget");
    }
}

HeadCache empty_head(int sink_tokens, int capacity, int head_dim) {
    HeadCache h;
    h.sink_keys.resize(sink_tokens, head_dim);
    h.sink_values.resize(sink_tokens, head_dim);
    h.capacity = capacity;
    h.ring_keys.resize(capacity, head_dim);
    h.ring_values.resize(capacity, head_dim);
    h.ring_positions.assign(capacity, -1);
    h.ring_hidden.assign(capacity, 0);
    return h;
}

/// r_p: ring entries after position p, following the append-then-evict recurrence.
std::vector<int> ring_counts(const ElasticRule& rule, int prompt_length, int total, const MaskGeometry& g, bool grow) {
    const int sink = g.sink_tokens();
    std::vector<int> r(total, 0);
    int count = std::min(window_of(rule, prompt_length, g), std::max(0, prompt_length - sink));
    for (int p = prompt_length; p < total; ++p) {
        if (p >= sink) count = std::min(decode_capacity(rule, prompt_length, p + 1, g, grow), count + 1);
        r[p] = count;
    }
    return r;
}

}  // namespace

int decode_capacity(const ElasticRule& rule, int prompt_length, int total, const MaskGeometry& geometry,
                    bool grow_spans) {
    return window_of(rule, grow_spans ? total : prompt_length, geometry);
}

PrefillResult prefill(const Model& model, std::span<const int> tokens, const MoAPlan& plan, bool grow_spans) {
    check_plan(model, plan);
    const ModelConfig& c = model.config;
    const int n = static_cast<int>(tokens.size());
    ForwardTrace tr = trace_forward(model, tokens, plan_masks(c, plan, tokens), GradMode::kNone);
    const int sink = plan.geometry.sink_tokens();

    PrefillResult out;
    HeteroKVCache& cache = out.cache;
    cache.plan = plan;
    cache.prompt_length = n;
    cache.next_position = n;
    cache.grow_spans = grow_spans;
    for (int head = 0; head < c.total_heads(); ++head) {
        const ElasticRule& rule = head_rule(plan, head, c.n_heads_per_layer);
        HeadCache h = empty_head(sink, window_of(rule, n, plan.geometry), c.head_dim);
        const MatrixXd& keys = tr.tape.value(tr.keys[head]);
        const MatrixXd& values = tr.tape.value(tr.values[head]);
        const int first_ring = std::max(sink, n - h.capacity);
        for (int p = 0; p < n; ++p) {
            if (p >= sink && p < first_ring) continue;
            push(h, keys.row(p), values.row(p), p, tokens[p] == c.pad_token, sink);
        }
        cache.heads.push_back(std::move(h));
    }
    out.logits = tr.tape.value(tr.logits).bottomRows(1);
    return out;
}

MatrixXd decode_step(const Model& model, HeteroKVCache& cache, int token) {
    const ModelConfig& c = model.config;
    if (token < 0 || token >= c.vocab_size) throw InputError("decode: token out of vocabulary");
    const int p = cache.next_position;
    if (c.positions == PositionEncoding::kAbsolute && p >= c.max_context) {
        throw InputError("decode: position beyond max_context");
    }
    const ModelParams& w = model.params;
    const int sink = cache.plan.geometry.sink_tokens();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c.head_dim));
    const int pos[] = {p};
    auto [cos_t, sin_t] = rotary_tables<double>(std::span<const int>(pos), c.head_dim, c.rope_base);

    MatrixXd x = w.embed.row(token);
    if (c.positions == PositionEncoding::kAbsolute) x += w.pos_embed.row(p);
    int head = 0;
    for (int l = 0; l < c.n_layers; ++l) {
        const LayerParams& L = w.layers[l];
        const MatrixXd h = rms_row(x, L.attn_norm);
        MatrixXd attn = MatrixXd::Zero(1, c.d_model);
        for (int hh = 0; hh < c.n_heads_per_layer; ++hh, ++head) {
            HeadCache& hc = cache.heads[head];
            MatrixXd q = h * L.wq[hh];
            MatrixXd k = h * L.wk[hh];
            const MatrixXd v = h * L.wv[hh];
            if (c.positions == PositionEncoding::kRotary) {
                q = apply_rotary<double>(q, cos_t, sin_t);
                k = apply_rotary<double>(k, cos_t, sin_t);
            }
            if (p >= sink) {
                const ElasticRule& rule = head_rule(cache.plan, head, c.n_heads_per_layer);
                const int cap = decode_capacity(rule, cache.prompt_length, p + 1, cache.plan.geometry, cache.grow_spans);
                if (cap > hc.capacity) grow_ring(hc, cap, c.head_dim);
            }
            push(hc, k, v, p, token == c.pad_token, sink);

            const int m = hc.resident();
            MatrixXd keys(m, c.head_dim), values(m, c.head_dim), mask = MatrixXd::Zero(1, m);
            int row = 0;
            for (int i = 0; i < hc.sink_count; ++i, ++row) {
                keys.row(row) = hc.sink_keys.row(i);
                values.row(row) = hc.sink_values.row(i);
                if (hc.sink_hidden[i]) mask(0, row) = kMaskSentinel;
            }
            const int start = hc.ring_count == hc.capacity ? hc.ring_next : 0;
            for (int i = 0; i < hc.ring_count; ++i, ++row) {
                const int s = (start + i) % hc.capacity;
                keys.row(row) = hc.ring_keys.row(s);
                values.row(row) = hc.ring_values.row(s);
                if (hc.ring_hidden[s]) mask(0, row) = kMaskSentinel;
            }
            hc.score_ops += m;
            const MatrixXd a = softmax_rows_value<double>(MatrixXd((q * inv_sqrt) * keys.transpose()), mask);
            attn += (a * values) * L.wo[hh];
        }
        x += attn;
        const MatrixXd h2 = rms_row(x, L.mlp_norm);
        const MatrixXd gated = (h2 * L.w_gate).cwiseProduct(h2 * L.w_up);
        x += gated * L.w_down;
    }
    ++cache.next_position;
    ++cache.decode_steps;
    return rms_row(x, w.final_norm) * w.unembed;
}

HeadMasks decode_reference_masks(const ModelConfig& config, const MoAPlan& plan, std::span<const int> tokens,
                                 int prompt_length, bool grow_spans) {
    const int total = static_cast<int>(tokens.size());
    if (prompt_length < 1 || prompt_length > total) throw InputError("decode_reference_masks: bad prompt length");
    const HeadMasks prompt = plan_masks(config, plan, tokens.subspan(0, prompt_length));
    const int sink = plan.geometry.sink_tokens();
    HeadMasks out;
    out.n = total;
    for (int head = 0; head < config.total_heads(); ++head) {
        MatrixXd m = MatrixXd::Constant(total, total, kMaskSentinel);
        m.topLeftCorner(prompt_length, prompt_length) = *prompt.per_head[head];
        const std::vector<int> r =
            ring_counts(head_rule(plan, head, config.n_heads_per_layer), prompt_length, total, plan.geometry, grow_spans);
        for (int p = prompt_length; p < total; ++p) {
            for (int j = 0; j < std::min(sink, p + 1); ++j) m(p, j) = 0.0;
            for (int j = std::max(sink, p - r[p] + 1); j <= p; ++j) m(p, j) = 0.0;
            for (int j = 0; j <= p; ++j) {
                if (tokens[j] == config.pad_token) m(p, j) = kMaskSentinel;
            }
        }
        out.per_head.push_back(std::make_shared<const MatrixXd>(std::move(m)));
    }
    return out;
}

CostReport cost_report(const HeteroKVCache& cache) {
    const MoAPlan& plan = cache.plan;
    const int n = cache.prompt_length;
    const int total = cache.next_position;
    const int steps = cache.decode_steps;
    const int sink = plan.geometry.sink_tokens();
    int heads_per_layer = static_cast<int>(plan.layers.front().size());
    CostReport r;
    r.prompt_length = n;
    r.decode_steps = steps;
    double dense_ops = 0.0;
    for (int p = n; p < total; ++p) dense_ops += p + 1;
    for (int head = 0; head < plan.head_count(); ++head) {
        const ElasticRule& rule = head_rule(plan, head, heads_per_layer);
        const std::vector<int> rc = ring_counts(rule, n, total, plan.geometry, cache.grow_spans);
        HeadCost a;
        const int ring0 = std::min(window_of(rule, n, plan.geometry), std::max(0, n - sink));
        a.prefill_resident = std::min(n, sink) + ring0;
        a.peak = a.prefill_resident;
        a.resident = a.prefill_resident;
        double ops = 0.0;
        for (int p = n; p < total; ++p) {
            const int resident = std::min(p + 1, sink) + rc[p];
            ops += resident;
            a.peak = std::max(a.peak, resident);
            a.resident = resident;
        }
        a.score_ops_per_token = steps > 0 ? ops / steps : 0.0;
        a.dense_score_ops_per_token = steps > 0 ? dense_ops / steps : 0.0;
        r.analytic.push_back(a);

        const HeadCache& hc = cache.heads[head];
        HeadCost m;
        m.resident = hc.resident();
        m.peak = hc.peak;
        m.prefill_resident = a.prefill_resident;
        m.score_ops_per_token = steps > 0 ? static_cast<double>(hc.score_ops) / steps : 0.0;
        m.dense_score_ops_per_token = a.dense_score_ops_per_token;
        r.instrumented.push_back(m);

        r.total_prefill_resident += a.prefill_resident;
        r.total_score_ops_per_token += m.score_ops_per_token;
        r.dense_score_ops_per_token += a.dense_score_ops_per_token;
    }
    r.realized_density = static_cast<double>(r.total_prefill_resident) / (plan.head_count() * static_cast<double>(n));
    r.plan_density = plan_density(plan, n);
    r.counters_match = true;
    for (std::size_t h = 0; h < r.analytic.size(); ++h) {
        const HeadCost& a = r.analytic[h];
        const HeadCost& m = r.instrumented[h];
        r.counters_match = r.counters_match && a.resident == m.resident && a.peak == m.peak &&
                           a.score_ops_per_token == m.score_ops_per_token;
    }
    return r;
}

nlohmann::json cost_report_to_json(const CostReport& r) {
    auto head_json = [](const HeadCost& h) {
        return nlohmann::json{{"resident", h.resident},
                              {"peak", h.peak},
                              {"prefill_resident", h.prefill_resident},
                              {"score_ops_per_token", h.score_ops_per_token},
                              {"dense_score_ops_per_token", h.dense_score_ops_per_token}};
    };
    nlohmann::json analytic = nlohmann::json::array(), instrumented = nlohmann::json::array();
    for (const auto& h : r.analytic) analytic.push_back(head_json(h));
    for (const auto& h : r.instrumented) instrumented.push_back(head_json(h));
    return {{"prompt_length", r.prompt_length},
            {"decode_steps", r.decode_steps},
            {"total_prefill_resident", r.total_prefill_resident},
            {"realized_density", r.realized_density},
            {"plan_density", r.plan_density},
            {"total_score_ops_per_token", r.total_score_ops_per_token},
            {"dense_score_ops_per_token", r.dense_score_ops_per_token},
            {"counters_match", r.counters_match},
            {"analytic", analytic},
            {"instrumented", instrumented}};
}

std::string cost_report_to_csv(const CostReport& r) {
    std::ostringstream out;
    out << "head,resident,peak,prefill_resident,score_ops_per_token,dense_score_ops_per_token\n";
    for (std::size_t h = 0; h < r.instrumented.size(); ++h) {
        const HeadCost& c = r.instrumented[h];
        out << h << ',' << c.resident << ',' << c.peak << ',' << c.prefill_resident << ',' << c.score_ops_per_token
            << ',' << c.dense_score_ops_per_token << '\n';
    }
    return out.str();
}

}  // namespace moa
