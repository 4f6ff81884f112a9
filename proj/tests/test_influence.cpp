// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>

#include "moa/influence.hpp"
#include "support.hpp"

namespace moa {
namespace {

using test::random_matrix;
using test::random_row;
using test::random_tokens;
using test::small_config;

MatrixXd row_matrix(std::vector<double> v) {
    MatrixXd m(1, static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
    return m;
}

/// Influence of masking (i, j) in a single-row matrix placed at row 0.
double row_influence(const std::vector<double>& a, const std::vector<double>& g, int j) {
    return attention_influence(row_matrix(a), row_matrix(g))(0, j);
}

TEST(RenormalizationDelta, TwoEqualEntries) {
    const double row[] = {0.5, 0.5};
    const auto d = renormalization_delta(std::span<const double>(row), 0);
    EXPECT_DOUBLE_EQ(d[0], -0.5);
    EXPECT_DOUBLE_EQ(d[1], 0.5);
}

TEST(RenormalizationDelta, MatchesResoftmaxOracle) {
    const double row[] = {0.75, 0.25};
    const auto d = renormalization_delta(std::span<const double>(row), 1);
    // renormalizing [0.75, 0] gives [1, 0]
    EXPECT_DOUBLE_EQ(d[0], 1.0 - 0.75);
    EXPECT_DOUBLE_EQ(d[1], -0.25);
}

TEST(RenormalizationDelta, SumsToZeroAndMatchesRenormalizedRow) {
    Rng rng(1);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(40));
        const auto a = random_row(rng, n);
        const int j = static_cast<int>(rng.below(n));
        const auto d = renormalization_delta(std::span<const double>(a), j);
        double sum = 0.0;
        for (double x : d) sum += x;
        EXPECT_NEAR(sum, 0.0, 1e-12);
        for (int k = 0; k < n; ++k) {
            const double renorm = k == j ? 0.0 : a[k] / (1.0 - a[j]);
            EXPECT_NEAR(a[k] + d[k], renorm, 1e-12);
        }
    }
}

TEST(RenormalizationDelta, FullRowIsDegenerate) {
    const double row[] = {1.0, 0.0};
    EXPECT_THROW(renormalization_delta(std::span<const double>(row), 0), DegenerateRowError);
}

TEST(AttentionInfluence, WorkedExample) { EXPECT_DOUBLE_EQ(row_influence({0.75, 0.25}, {1.0, 2.0}, 1), -0.25); }

TEST(AttentionInfluence, ZeroGradientGivesZero) {
    Rng rng(2);
    MatrixXd a(4, 4);
    for (int i = 0; i < 4; ++i) {
        const auto r = random_row(rng, 4);
        for (int j = 0; j < 4; ++j) a(i, j) = r[j];
    }
    EXPECT_EQ(attention_influence(a, MatrixXd::Zero(4, 4)), MatrixXd::Zero(4, 4));
}

TEST(AttentionInfluence, SingleEntryRowIsZero) { EXPECT_EQ(row_influence({1.0}, {3.0}, 0), 0.0); }

TEST(AttentionInfluence, MaskedEntriesContributeNothing) {
    EXPECT_EQ(row_influence({0.6, 0.0, 0.4}, {1.0, 5.0, -2.0}, 1), 0.0);
}

TEST(AttentionInfluence, EqualsSumOverRenormalizationDelta) {
    Rng rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(63));
        const auto a = random_row(rng, n);
        std::vector<double> g(static_cast<std::size_t>(n));
        for (double& x : g) x = rng.normal();
        const MatrixXd e = attention_influence(row_matrix(a), row_matrix(g));
        for (int j = 0; j < n; ++j) {
            const auto d = renormalization_delta(std::span<const double>(a), j);
            double direct = 0.0;
            for (int k = 0; k < n; ++k) direct += g[k] * d[k];
            worst = std::max(worst, std::abs(direct - e(0, j)));
        }
    }
    EXPECT_LT(worst, 1e-12);
}

TEST(AttentionInfluence, NearDegenerateEntryStaysFinite) {
    const double tiny = 1e-14;
    const double e = row_influence({1.0 - tiny, tiny}, {1.0, 2.0}, 0);
    EXPECT_TRUE(std::isfinite(e));
}

TEST(BlockAverage, BlockSizeOneIsIdentity) {
    Rng rng(4);
    const MatrixXd m = random_matrix(rng, 7, 7);
    EXPECT_EQ(block_average(m, 1), m);
}

TEST(BlockAverage, EqualsDirectSummation) {
    Rng rng(5);
    for (int n : {8, 10, 13}) {
        const MatrixXd m = random_matrix(rng, n, n);
        const MatrixXd b = block_average(m, 4);
        ASSERT_EQ(b.rows(), (n + 3) / 4);
        for (int bi = 0; bi < b.rows(); ++bi) {
            for (int bj = 0; bj < b.cols(); ++bj) {
                double s = 0.0;
                int c = 0;
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < n; ++j) {
                        if (i / 4 == bi && j / 4 == bj) {
                            s += m(i, j);
                            ++c;
                        }
                    }
                }
                EXPECT_NEAR(b(bi, bj), s / c, 1e-14);
                EXPECT_EQ(block_pair_count(n, 4, bi, bj), c);
            }
        }
    }
}

std::vector<CalibrationItem> items_for(const Model& m, int count, int level, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<CalibrationItem> items;
    for (int i = 0; i < count; ++i) {
        CalibrationItem it;
        it.level = level;
        it.tokens = random_tokens(rng, level, m.config.vocab_size);
        it.supervision.assign(level, false);
        it.supervision[level - 1] = true;
        it.supervision[level - 2] = true;
        items.push_back(std::move(it));
    }
    return items;
}

TEST(Profile, BlockSizeOneSingleItemIsRawInfluence) {
    const Model m = init_model(small_config(2, 2));
    const auto items = items_for(m, 1, 12, 6);
    const InfluenceTensor t = profile_level(m, items, 12, 1);
    const LossResult r = loss_and_attention_grads(m, items[0].tokens, items[0].supervision);
    ASSERT_EQ(t.head_count(), 4);
    for (int h = 0; h < 4; ++h) {
        EXPECT_EQ(t.heads[h], attention_influence(r.record.attention[h], r.record.grads[h]));
    }
}

TEST(Profile, DuplicateItemsAverageToSingleResult) {
    const Model m = init_model(small_config(2, 2));
    const auto one = items_for(m, 1, 16, 7);
    const auto two = std::vector<CalibrationItem>{one[0], one[0]};
    const InfluenceTensor a = profile_level(m, one, 16, 4);
    const InfluenceTensor b = profile_level(m, two, 16, 4);
    EXPECT_EQ(b.item_count, 2);
    for (int h = 0; h < 4; ++h) EXPECT_LT((a.heads[h] - b.heads[h]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Profile, EightTokenBlocksEqualIndependentSummation) {
    const Model m = init_model(small_config(1, 2));
    const auto items = items_for(m, 3, 8, 8);
    const InfluenceTensor t = profile_level(m, items, 8, 4);
    for (int h = 0; h < 2; ++h) {
        MatrixXd sum = MatrixXd::Zero(2, 2);
        for (const auto& it : items) {
            const LossResult r = loss_and_attention_grads(m, it.tokens, it.supervision);
            const MatrixXd e = attention_influence(r.record.attention[h], r.record.grads[h]);
            for (int i = 0; i < 8; ++i) {
                for (int j = 0; j < 8; ++j) sum(i / 4, j / 4) += e(i, j) / 16.0;
            }
        }
        EXPECT_LT((t.heads[h] - sum / 3.0).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(Profile, EmptyLevelIsAContractError) {
    const Model m = init_model(small_config());
    EXPECT_THROW(profile_level(m, {}, 16, 4), ContractError);
    const auto items = items_for(m, 2, 16, 9);
    EXPECT_THROW(profile(m, items, {16, 32}, 4), ContractError);
}

TEST(Profile, IsBitwiseDeterministicAcrossThreadCounts) {
    const Model m = init_model(small_config(2, 2));
    const auto items = items_for(m, 5, 24, 10);
    const auto dir = test::temp_dir("influence");
    const std::string a = (dir / "a.bin").string(), b = (dir / "b.bin").string();
    save_influence(profile_level(m, items, 24, 8, 1), a);
    save_influence(profile_level(m, items, 24, 8, 3), b);
    EXPECT_EQ(sha256_file(a), sha256_file(b));
    const InfluenceTensor back = load_influence(a);
    EXPECT_EQ(back.length_level, 24);
    EXPECT_EQ(back.block_size, 8);
    EXPECT_EQ(back.item_count, 5);
    EXPECT_EQ(back.heads, profile_level(m, items, 24, 8, 1).heads);
}

TEST(Profile, CorruptInfluenceFileIsRejected) {
    const auto dir = test::temp_dir("influence_bad");
    const std::string p = (dir / "x.bin").string();
    std::ofstream(p) << "{\"length_level\": 3}";
    EXPECT_THROW(load_influence(p), InputError);
}

InfluenceTensor random_tensor(Rng& rng, int n, int bs, int heads, bool nonnegative = false) {
    InfluenceTensor t;
    t.length_level = n;
    t.block_size = bs;
    t.item_count = 1;
    const int nb = (n + bs - 1) / bs;
    for (int h = 0; h < heads; ++h) {
        MatrixXd m = random_matrix(rng, nb, nb);
        if (nonnegative) m = m.cwiseAbs();
        t.heads.push_back(m);
    }
    return t;
}

TEST(RuleLossTable, FullAttentionRuleCostsNothing) {
    Rng rng(11);
    const std::vector<InfluenceTensor> inf{random_tensor(rng, 64, 8, 4), random_tensor(rng, 128, 8, 4)};
    const RuleLossTable t = rule_loss_table(inf, {ElasticRule{0, 1.0}, ElasticRule{0, 0.5}}, {8, 1}, 2);
    EXPECT_EQ(t.head_count(), 4);
    for (std::size_t l = 0; l < 2; ++l) {
        for (int h = 0; h < 4; ++h) EXPECT_EQ(t.loss[l][h][0], 0.0);
        EXPECT_EQ(t.density[l][0], 1.0);
        EXPECT_DOUBLE_EQ(t.density[l][1], 0.5);
    }
}

TEST(RuleLossTable, SinkOnlyRuleEqualsDirectSummation) {
    Rng rng(12);
    const int n = 60, bs = 8;
    const auto inf = random_tensor(rng, n, bs, 1);
    const RuleLossTable t = rule_loss_table({inf}, {ElasticRule{-1000, 0.0}}, {bs, 1}, 1);
    // sink-only: window 0, so everything outside the sink column with j <= i is masked
    double expected = 0.0;
    const int nb = 8;
    for (int bi = 0; bi < nb; ++bi) {
        for (int bj = 1; bj <= bi; ++bj) {
            const int rows = std::min(n, (bi + 1) * bs) - bi * bs;
            const int cols = std::min(n, (bj + 1) * bs) - bj * bs;
            expected += inf.heads[0](bi, bj) * rows * cols;
        }
    }
    EXPECT_NEAR(t.loss[0][0][0], expected, 1e-12);
}

TEST(RuleLossTable, WiderRuleNeverCostsMoreUnderNonnegativeInfluence) {
    Rng rng(13);
    const auto inf = random_tensor(rng, 128, 8, 3, true);
    const auto rules = RuleGrid::scaled_default(128).rules();
    const RuleLossTable t = rule_loss_table({inf}, rules, {8, 1}, 3);
    for (std::size_t a = 0; a < rules.size(); ++a) {
        for (std::size_t b = 0; b < rules.size(); ++b) {
            const BlockMask ma = build_mask(rules[a], 128, {8, 1}), mb = build_mask(rules[b], 128, {8, 1});
            if (ma.window_blocks > mb.window_blocks) continue;
            // b is at least as wide as a
            for (int h = 0; h < 3; ++h) EXPECT_LE(t.loss[0][h][b], t.loss[0][h][a] + 1e-12);
        }
    }
}

TEST(RuleLossTable, BlockMismatchIsAContractError) {
    Rng rng(14);
    EXPECT_THROW(rule_loss_table({random_tensor(rng, 64, 4, 2)}, {ElasticRule{}}, {8, 1}, 2), ContractError);
}

TEST(RuleLossTable, JsonRoundTrip) {
    Rng rng(15);
    const RuleLossTable t = rule_loss_table({random_tensor(rng, 64, 8, 4), random_tensor(rng, 96, 8, 4)},
                                            RuleGrid::scaled_default(96).rules(), {8, 1}, 2);
    const RuleLossTable back = rule_table_from_json(rule_table_to_json(t));
    EXPECT_EQ(back.lengths, t.lengths);
    EXPECT_EQ(back.rules, t.rules);
    EXPECT_EQ(back.loss, t.loss);
    EXPECT_EQ(back.density, t.density);
    EXPECT_EQ(back.length_index(96), 1);
    EXPECT_THROW(back.length_index(100), InputError);
}

TEST(Soe, UniformCausalThreeByThree) {
    MatrixXd a = MatrixXd::Zero(3, 3);
    a << 1, 0, 0, 0.5, 0.5, 0, 1.0 / 3, 1.0 / 3, 1.0 / 3;
    EXPECT_NEAR(soe_of({a, a}), 1.0 / std::sqrt(162.0), 1e-15);
}

TEST(Soe, FlatMatrixHasZeroSoe) { EXPECT_NEAR(soe_of({MatrixXd::Constant(5, 5, 0.2)}), 0.0, 1e-15); }

TEST(Soe, InvariantToSentenceOrder) {
    const Model m = init_model(small_config(2, 2));
    Rng rng(16);
    std::vector<std::vector<int>> s;
    for (int i = 0; i < 4; ++i) s.push_back(random_tokens(rng, 20, m.config.vocab_size));
    const auto a = soe(m, s);
    std::reverse(s.begin(), s.end());
    const auto b = soe(m, s);
    ASSERT_EQ(a.size(), 4u);
    for (std::size_t h = 0; h < a.size(); ++h) EXPECT_NEAR(a[h], b[h], 1e-15);
}

TEST(Soe, DegenerateInputsAreRejected) {
    EXPECT_THROW(soe_of({MatrixXd::Ones(1, 1)}), ContractError);
    const Model m = init_model(small_config());
    EXPECT_THROW(soe(m, {{1, 2, 3}}), ContractError);
}

}  // namespace
}  // namespace moa
