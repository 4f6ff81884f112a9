// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "moa/numerics/tape.hpp"
#include "support.hpp"

namespace moa {
namespace {

using test::fd_max_rel_error;
using test::random_matrix;
using test::sum_all;
using test::weighted_sum;

MatrixXd mat(std::initializer_list<std::initializer_list<double>> rows) {
    MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (double v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

TEST(Matmul, IdentityTimesMatrix) {
    Tape<double> t;
    const NodeId out = matmul(t, t.constant(mat({{1, 0}, {0, 1}})), t.constant(mat({{3, 4}, {5, 6}})));
    EXPECT_EQ(t.value(out), mat({{3, 4}, {5, 6}}));
}

TEST(Matmul, RowTimesColumn) {
    Tape<double> t;
    const NodeId out = matmul(t, t.constant(mat({{1, 2}})), t.constant(mat({{3}, {4}})));
    EXPECT_EQ(t.value(out), mat({{11}}));
}

TEST(Matmul, InnerDimensionMismatchThrows) {
    Tape<double> t;
    EXPECT_THROW(matmul(t, t.constant(MatrixXd::Ones(2, 3)), t.constant(MatrixXd::Ones(2, 3))), DimensionError);
}

TEST(Matmul, GradientOfSumIsReplicatedRowSumsOfB) {
    Rng rng(3);
    const MatrixXd a0 = random_matrix(rng, 4, 4), b0 = random_matrix(rng, 4, 4);
    Tape<double> t;
    const NodeId a = t.leaf(a0, true);
    t.backward(sum_all(t, matmul(t, a, t.constant(b0))));
    // d/dA sum(A B) = 1 * B^T: every row equals the row sums of B
    const MatrixXd expected = MatrixXd::Ones(4, 4) * b0.transpose();
    EXPECT_LT((t.grad(a) - expected).cwiseAbs().maxCoeff(), 1e-12);
    const double err = fd_max_rel_error(a0, [&](Tape<double>& u, NodeId x) {
        return sum_all(u, matmul(u, x, u.constant(b0)));
    });
    EXPECT_LT(err, 1e-5);
}

TEST(Matmul, TransposedRightOperandGradient) {
    Rng rng(4);
    const MatrixXd b0 = random_matrix(rng, 5, 3), w = random_matrix(rng, 4, 5);
    const MatrixXd a0 = random_matrix(rng, 4, 3);
    EXPECT_LT(fd_max_rel_error(b0,
                               [&](Tape<double>& u, NodeId x) {
                                   return weighted_sum(u, matmul(u, u.constant(a0), x, Transpose::kRight), w);
                               }),
              1e-5);
}

TEST(Softmax, EqualScoresSplitEvenly) {
    const MatrixXd p = softmax_rows_value<double>(mat({{0, 0}}), MatrixXd::Zero(1, 2));
    EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(p(0, 1), 0.5);
}

TEST(Softmax, SingleUnmaskedEntryGetsEverything) {
    const MatrixXd p = softmax_rows_value<double>(mat({{3.7, -1.2}}), mat({{0, kMaskSentinel}}));
    EXPECT_EQ(p(0, 0), 1.0);
    EXPECT_EQ(p(0, 1), 0.0);
}

TEST(Softmax, MatchesDirectExponentiation) {
    const MatrixXd p = softmax_rows_value<double>(mat({{1, 2, 3}}), MatrixXd::Zero(1, 3));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    EXPECT_NEAR(p(0, 0), std::exp(1.0) / z, 1e-15);
    EXPECT_NEAR(p(0, 0), 0.09003, 1e-5);
    EXPECT_NEAR(p(0, 1), 0.24473, 1e-5);
    EXPECT_NEAR(p(0, 2), 0.66524, 1e-5);
}

TEST(Softmax, FullyMaskedRowIsDegenerate) {
    EXPECT_THROW(softmax_rows_value<double>(mat({{1, 2}}), mat({{kMaskSentinel, kMaskSentinel}})), DegenerateRowError);
}

TEST(Softmax, ShapeMismatchThrows) {
    EXPECT_THROW(softmax_rows_value<double>(MatrixXd::Zero(2, 2), MatrixXd::Zero(2, 3)), DimensionError);
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesAreExactZero) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(20));
        const MatrixXd x = random_matrix(rng, n, n, 5.0);
        MatrixXd mask = MatrixXd::Zero(n, n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (j != i && rng.uniform() < 0.4) mask(i, j) = kMaskSentinel;
            }
        }
        const MatrixXd p = softmax_rows_value<double>(x, mask);
        for (int i = 0; i < n; ++i) {
            EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
            for (int j = 0; j < n; ++j) {
                if (is_masked(mask(i, j))) {
                    EXPECT_EQ(p(i, j), 0.0);
                }
            }
        }
    }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
    Rng rng(6);
    const int n = 6;
    MatrixXd mask = MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) mask(i, j) = kMaskSentinel;
    }
    const MatrixXd w = random_matrix(rng, n, n);
    EXPECT_LT(fd_max_rel_error(random_matrix(rng, n, n),
                               [&](Tape<double>& u, NodeId x) { return weighted_sum(u, softmax_rows(u, x, mask), w); }),
              1e-5);
}

TEST(Backward, SumOfMatrixHasAllOnesGradient) {
    Tape<double> t;
    const NodeId x = t.leaf(mat({{1, 2}, {3, 4}}), true);
    t.backward(sum_all(t, x));
    EXPECT_EQ(t.grad(x), MatrixXd::Ones(2, 2));
}

TEST(Backward, NonScalarLossIsAContractError) {
    Tape<double> t;
    const NodeId x = t.leaf(MatrixXd::Ones(2, 2), true);
    EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, SoftmaxCrossEntropyGradientIsProbsMinusOneHot) {
    const MatrixXd logits = mat({{0.3, -1.0, 2.0, 0.5}});
    Tape<double> t;
    const NodeId x = t.leaf(logits, true);
    const int target[] = {2};
    const bool active[] = {true};
    t.backward(cross_entropy(t, x, std::span<const int>(target), std::span<const bool>(active)));
    MatrixXd expected = softmax_rows_value<double>(logits, MatrixXd::Zero(1, 4));
    expected(0, 2) -= 1.0;
    EXPECT_LT((t.grad(x) - expected).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT(fd_max_rel_error(logits,
                               [&](Tape<double>& u, NodeId y) {
                                   return cross_entropy(u, y, std::span<const int>(target),
                                                        std::span<const bool>(active));
                               }),
              1e-5);
}

TEST(Backward, UnreachableNodeHasZeroGradient) {
    Tape<double> t;
    const NodeId x = t.leaf(MatrixXd::Ones(2, 2), true);
    const NodeId y = t.leaf(MatrixXd::Ones(2, 2), true);
    t.backward(sum_all(t, x));
    EXPECT_FALSE(t.has_grad(y));
    EXPECT_EQ(t.grad(y), MatrixXd::Zero(2, 2));
}

TEST(Ops, ElementwiseOpsMatchFiniteDifferences) {
    Rng rng(7);
    const MatrixXd b = random_matrix(rng, 3, 4), w = random_matrix(rng, 3, 4);
    const MatrixXd x0 = random_matrix(rng, 3, 4);
    EXPECT_LT(fd_max_rel_error(x0, [&](Tape<double>& u, NodeId x) { return weighted_sum(u, add(u, x, u.constant(b)), w); }),
              1e-5);
    EXPECT_LT(fd_max_rel_error(x0, [&](Tape<double>& u, NodeId x) { return weighted_sum(u, scale(u, x, -2.5), w); }),
              1e-5);
    EXPECT_LT(fd_max_rel_error(x0, [&](Tape<double>& u, NodeId x) { return weighted_sum(u, hadamard(u, x, x), w); }),
              1e-5);
}

TEST(Ops, RmsNormMatchesFiniteDifferences) {
    Rng rng(8);
    const MatrixXd gain = random_matrix(rng, 1, 6), w = random_matrix(rng, 4, 6);
    const MatrixXd x0 = random_matrix(rng, 4, 6);
    EXPECT_LT(fd_max_rel_error(x0,
                               [&](Tape<double>& u, NodeId x) {
                                   return weighted_sum(u, rms_norm(u, x, u.constant(gain)), w);
                               }),
              1e-5);
    EXPECT_LT(fd_max_rel_error(gain,
                               [&](Tape<double>& u, NodeId g) {
                                   return weighted_sum(u, rms_norm(u, u.constant(x0), g), w);
                               }),
              1e-5);
}

TEST(Ops, EmbeddingGathersRowsAndScattersGradients) {
    Rng rng(9);
    const MatrixXd table = random_matrix(rng, 5, 3);
    const int tokens[] = {4, 1, 4};
    Tape<double> t;
    const NodeId e = embedding(t, t.leaf(table, true), std::span<const int>(tokens));
    EXPECT_EQ(t.value(e).row(0), table.row(4));
    EXPECT_EQ(t.value(e).row(1), table.row(1));
    const MatrixXd w = random_matrix(rng, 3, 3);
    EXPECT_LT(fd_max_rel_error(table,
                               [&](Tape<double>& u, NodeId x) {
                                   return weighted_sum(u, embedding(u, x, std::span<const int>(tokens)), w);
                               }),
              1e-5);
}

TEST(Ops, EmbeddingRejectsOutOfRangeToken) {
    Tape<double> t;
    const int tokens[] = {7};
    EXPECT_THROW(embedding(t, t.constant(MatrixXd::Zero(5, 2)), std::span<const int>(tokens)), InputError);
}

TEST(Ops, CrossEntropyAveragesOnlyActiveRows) {
    const MatrixXd logits = mat({{0, 0}, {5, -5}, {1, 2}});
    const int targets[] = {0, 1, 1};
    const bool active[] = {true, false, true};
    Tape<double> t;
    const NodeId l = cross_entropy(t, t.constant(logits), std::span<const int>(targets), std::span<const bool>(active));
    const double expected = 0.5 * (std::log(2.0) + std::log(1.0 + std::exp(-1.0)));
    EXPECT_NEAR(t.value(l)(0, 0), expected, 1e-15);
    const bool none[] = {false, false, false};
    EXPECT_THROW(cross_entropy(t, t.constant(logits), std::span<const int>(targets), std::span<const bool>(none)),
                 ContractError);
}

TEST(Ops, RotaryIsAnIsometryAndDifferentiable) {
    Rng rng(10);
    const MatrixXd x0 = random_matrix(rng, 5, 8);
    const int pos[] = {0, 3, 7, 100, 1000};
    Tape<double> t;
    const NodeId y = rotary(t, t.constant(x0), std::span<const int>(pos), 10000.0);
    EXPECT_LT((t.value(y).rowwise().norm() - x0.rowwise().norm()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(t.value(y).row(0), x0.row(0));
    const MatrixXd w = random_matrix(rng, 5, 8);
    EXPECT_LT(fd_max_rel_error(x0,
                               [&](Tape<double>& u, NodeId x) {
                                   return weighted_sum(u, rotary(u, x, std::span<const int>(pos), 10000.0), w);
                               }),
              1e-5);
}

TEST(Ops, RotaryScoresDependOnlyOnRelativeOffset) {
    Rng rng(11);
    const MatrixXd q = random_matrix(rng, 1, 8), k = random_matrix(rng, 1, 8);
    auto score = [&](int pq, int pk) {
        const int a[] = {pq}, b[] = {pk};
        auto [cq, sq] = rotary_tables<double>(std::span<const int>(a), 8, 10000.0);
        auto [ck, sk] = rotary_tables<double>(std::span<const int>(b), 8, 10000.0);
        return (apply_rotary<double>(q, cq, sq) * apply_rotary<double>(k, ck, sk).transpose())(0, 0);
    };
    EXPECT_NEAR(score(10, 4), score(106, 100), 1e-12);
}

TEST(Tape, NonFiniteValuesAreRejected) {
    Tape<double> t;
    const NodeId x = t.leaf(mat({{std::numeric_limits<double>::infinity()}}), true);
    EXPECT_THROW(scale(t, x, 1.0), NonFiniteError);
}

TEST(Tape, ForwardIsBitwiseDeterministic) {
    Rng rng(12);
    const MatrixXd a = random_matrix(rng, 16, 16), b = random_matrix(rng, 16, 16);
    auto run = [&] {
        Tape<double> t;
        const NodeId s = softmax_rows(t, matmul(t, t.constant(a), t.constant(b), Transpose::kRight),
                                      MatrixXd(MatrixXd::Zero(16, 16)));
        return MatrixXd(t.value(s));
    };
    EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace moa
