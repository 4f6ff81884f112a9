// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "moa/kv_cache.hpp"
#include "support.hpp"

namespace moa {
namespace {

using test::random_tokens;
using test::small_config;

class KvCache : public ::testing::Test {
protected:
    Model model = init_model(small_config(2, 2, 4, 16));
    MaskGeometry geometry{4, 1};

    MoAPlan uniform(ElasticRule r) const {
        return uniform_plan(model_fingerprint(model), geometry, 2, 2, r);
    }

    MoAPlan mixed() const {
        MoAPlan p = uniform({0, 1.0});
        p.layers[0] = {ElasticRule{8, 0.0}, ElasticRule{0, 0.5}};
        p.layers[1] = {ElasticRule{-100, 0.0}, ElasticRule{0, 1.0}};
        return p;
    }

    /// Greedy decode of `steps` tokens; returns the max abs logit gap to masked recomputation.
    double decode_gap(const MoAPlan& plan, std::vector<int> tokens, int steps, bool grow) {
        const int n = static_cast<int>(tokens.size());
        PrefillResult pre = prefill(model, tokens, plan, grow);
        MatrixXd logits = pre.logits;
        double worst = 0.0;
        for (int s = 0; s < steps; ++s) {
            Eigen::Index next;
            logits.row(0).maxCoeff(&next);
            tokens.push_back(1 + static_cast<int>(next) % (model.config.vocab_size - 1));
            logits = decode_step(model, pre.cache, tokens.back());
            const HeadMasks ref = decode_reference_masks(model.config, plan, tokens, n, grow);
            const MatrixXd full = forward_logits(model, tokens, ref);
            worst = std::max(worst, (full.bottomRows(1) - logits).cwiseAbs().maxCoeff());
        }
        return worst;
    }
};

TEST_F(KvCache, AllVisiblePlanHoldsEverythingAndMatchesDense) {
    Rng rng(1);
    const auto tokens = random_tokens(rng, 30, 16);
    const PrefillResult pre = prefill(model, tokens, uniform({0, 1.0}));
    for (const auto& h : pre.cache.heads) EXPECT_EQ(h.resident(), 30);
    const MatrixXd dense = forward(model, tokens).logits;
    EXPECT_LT((dense.bottomRows(1) - pre.logits).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(KvCache, WindowZeroHeadsKeepOnlyTheSink) {
    Rng rng(2);
    const auto tokens = random_tokens(rng, 30, 16);
    const PrefillResult pre = prefill(model, tokens, uniform({-100, 0.0}));
    for (const auto& h : pre.cache.heads) {
        EXPECT_EQ(h.resident(), geometry.sink_tokens());
        EXPECT_EQ(h.ring_count, 0);
    }
}

TEST_F(KvCache, PrefillResidentCountsMatchDensity) {
    Rng rng(3);
    const auto tokens = random_tokens(rng, 48, 16);
    const MoAPlan plan = mixed();
    const PrefillResult pre = prefill(model, tokens, plan);
    for (int h = 0; h < 4; ++h) {
        const ElasticRule& r = plan.rule(h / 2, h % 2);
        EXPECT_EQ(pre.cache.heads[h].resident(),
                  std::min(48, geometry.sink_tokens() + window_of(r, 48, geometry)));
    }
}

TEST_F(KvCache, FingerprintMismatchIsAPlanError) {
    MoAPlan p = uniform({0, 1.0});
    p.fingerprint = "other";
    const int tok[] = {1, 2, 3};
    EXPECT_THROW(prefill(model, std::span<const int>(tok), p), PlanError);
}

TEST_F(KvCache, RingHoldsTheMostRecentPositions) {
    Rng rng(4);
    const auto tokens = random_tokens(rng, 20, 16);
    const MoAPlan plan = uniform({8, 0.0});  // span 8: sink 4 + window 4
    PrefillResult pre = prefill(model, tokens, plan);
    const int w = pre.cache.heads[0].capacity;
    ASSERT_EQ(w, 4);
    for (int k = 0; k < w + 3; ++k) decode_step(model, pre.cache, 5);
    const int last = pre.cache.next_position - 1;
    for (const auto& h : pre.cache.heads) {
        std::vector<int> pos(h.ring_positions.begin(), h.ring_positions.end());
        std::sort(pos.begin(), pos.end());
        EXPECT_EQ(pos, (std::vector<int>{last - 3, last - 2, last - 1, last}));
        EXPECT_EQ(h.sink_positions, (std::vector<int>{0, 1, 2, 3}));
    }
}

TEST_F(KvCache, DecodeMatchesMaskedRecomputation) {
    Rng rng(5);
    EXPECT_LT(decode_gap(mixed(), random_tokens(rng, 37, 16), 16, false), 1e-9);
}

TEST_F(KvCache, DecodeMatchesMaskedRecomputationWhenSpansGrow) {
    Rng rng(6);
    EXPECT_LT(decode_gap(mixed(), random_tokens(rng, 29, 16), 24, true), 1e-9);
}

TEST_F(KvCache, AllVisibleGrowingPlanEqualsDenseIncrementalDecoding) {
    Rng rng(7);
    auto tokens = random_tokens(rng, 21, 16);
    PrefillResult pre = prefill(model, tokens, uniform({0, 1.0}), true);
    for (int s = 0; s < 12; ++s) {
        tokens.push_back(1 + s % 15);
        const MatrixXd step = decode_step(model, pre.cache, tokens.back());
        const MatrixXd dense = forward(model, tokens).logits;
        EXPECT_LT((dense.bottomRows(1) - step).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST_F(KvCache, ResidentEntriesStayBoundedAndSinkStable) {
    Rng rng(8);
    const auto tokens = random_tokens(rng, 33, 16);
    const MoAPlan plan = mixed();
    PrefillResult pre = prefill(model, tokens, plan);
    const auto sinks = pre.cache.heads[0].sink_positions;
    for (int s = 0; s < 40; ++s) {
        decode_step(model, pre.cache, 2 + s % 13);
        for (std::size_t h = 0; h < pre.cache.heads.size(); ++h) {
            const HeadCache& hc = pre.cache.heads[h];
            EXPECT_LE(hc.ring_count, hc.capacity);
            EXPECT_LE(hc.resident(), geometry.sink_tokens() + hc.capacity);
            EXPECT_EQ(hc.sink_positions, sinks);
        }
    }
}

TEST_F(KvCache, HalfDensityPlanCostMatchesArithmetic) {
    Rng rng(9);
    const int n = 64;
    const auto tokens = random_tokens(rng, n, 16);
    const MoAPlan plan = uniform({0, 0.5});
    PrefillResult pre = prefill(model, tokens, plan);
    for (int s = 0; s < 8; ++s) decode_step(model, pre.cache, 3);
    const CostReport r = cost_report(pre.cache);
    EXPECT_LE(std::abs(r.total_prefill_resident - 0.5 * 4 * n), 4.0 * geometry.block_size);
    EXPECT_LE(std::abs(r.realized_density - r.plan_density), static_cast<double>(geometry.block_size) / n);
    EXPECT_TRUE(r.counters_match);
}

TEST_F(KvCache, DensePlanScoreOpsFollowTheSpanMode) {
    Rng rng(10);
    const int n = 40;
    const auto tokens = random_tokens(rng, n, 16);
    // frozen spans keep the prompt-length budget, so the oldest ring entry is evicted
    PrefillResult frozen = prefill(model, tokens, uniform({0, 1.0}));
    decode_step(model, frozen.cache, 3);
    const CostReport f = cost_report(frozen.cache);
    EXPECT_DOUBLE_EQ(f.total_score_ops_per_token, 4.0 * n);
    EXPECT_DOUBLE_EQ(f.dense_score_ops_per_token, 4.0 * (n + 1));
    PrefillResult grown = prefill(model, tokens, uniform({0, 1.0}), true);
    decode_step(model, grown.cache, 3);
    const CostReport g = cost_report(grown.cache);
    EXPECT_DOUBLE_EQ(g.total_score_ops_per_token, 4.0 * (n + 1));
    EXPECT_DOUBLE_EQ(g.dense_score_ops_per_token, 4.0 * (n + 1));
}

TEST_F(KvCache, MixedPlanAnalyticCountsEqualCounters) {
    Rng rng(11);
    for (bool grow : {false, true}) {
        PrefillResult pre = prefill(model, random_tokens(rng, 45, 16), mixed(), grow);
        for (int s = 0; s < 30; ++s) decode_step(model, pre.cache, 4);
        const CostReport r = cost_report(pre.cache);
        EXPECT_TRUE(r.counters_match);
        for (std::size_t h = 0; h < r.analytic.size(); ++h) {
            EXPECT_EQ(r.analytic[h].resident, r.instrumented[h].resident);
            EXPECT_EQ(r.analytic[h].peak, r.instrumented[h].peak);
            EXPECT_EQ(r.analytic[h].score_ops_per_token, r.instrumented[h].score_ops_per_token);
        }
    }
}

TEST_F(KvCache, ReportsSerialize) {
    Rng rng(12);
    PrefillResult pre = prefill(model, random_tokens(rng, 24, 16), mixed());
    decode_step(model, pre.cache, 3);
    const CostReport r = cost_report(pre.cache);
    const nlohmann::json j = cost_report_to_json(r);
    EXPECT_EQ(j.at("prompt_length"), 24);
    const std::string csv = cost_report_to_csv(r);
    EXPECT_EQ(csv.rfind("head,resident,peak,prefill_resident,score_ops_per_token,dense_score_ops_per_token", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST_F(KvCache, PaddedPromptStillMatchesRecomputation) {
    Rng rng(13);
    auto tokens = random_tokens(rng, 30, 16);
    tokens[7] = model.config.pad_token;
    tokens[20] = model.config.pad_token;
    EXPECT_LT(decode_gap(mixed(), tokens, 10, false), 1e-9);
}

}  // namespace
}  // namespace moa
