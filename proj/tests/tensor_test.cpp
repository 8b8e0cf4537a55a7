#include <gtest/gtest.h>

#include <cmath>

#include "metfa/rng.hpp"
#include "metfa/tape.hpp"
#include "metfa/tensor.hpp"

using namespace metfa;

TEST(Tensor, ShapeDataInvariant) {
    EXPECT_THROW(Tensor({2, 3}, {1.0, 2.0}), ShapeError);
    EXPECT_THROW(Tensor({0, 3}, {}), ShapeError);
    Tensor t({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.at(1, 0), 3.0);
}

TEST(Tensor, ScalarIsRankZero) {
    Tensor s = Tensor::scalar(2.5);
    EXPECT_TRUE(s.is_scalar());
    EXPECT_EQ(s.value(), 2.5);
}

TEST(Forward, MatmulHandExample) {
    Tape tape;
    Var a = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
    Var b = tape.leaf(Tensor::matrix({{1}, {1}}));
    Tensor c = matmul(a, b).value();
    EXPECT_EQ(c, Tensor::matrix({{3}, {7}}));
}

TEST(Forward, MatmulTransposedSecondOperand) {
    Tape tape;
    Var a = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
    Var b = tape.leaf(Tensor::matrix({{1, 1}}));
    Tensor c = matmul(a, b, true).value();
    EXPECT_EQ(c, Tensor::matrix({{3}, {7}}));
}

TEST(Forward, MatmulShapeMismatch) {
    Tape tape;
    Var a = tape.leaf(Tensor::matrix({{1, 2, 3}}));
    Var b = tape.leaf(Tensor::matrix({{1}, {1}}));
    EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Forward, SoftmaxUniformOnEqualInputs) {
    Tape tape;
    Var x = tape.leaf(Tensor({3}, {0, 0, 0}));
    Tensor p = softmax_rows(x).value();
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(p[i], 1.0 / 3.0);
}

TEST(Forward, SoftmaxRowsSumToOne) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor x = Tensor::zeros({4, 6});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal(0.0, 5.0);
        Tape tape;
        Tensor p = softmax_rows(tape.leaf(x)).value();
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                EXPECT_GT(p.at(r, c), 0.0);
                EXPECT_LT(p.at(r, c), 1.0);
                s += p.at(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Forward, SoftmaxOverflowSafe) {
    Tape tape;
    Var x = tape.leaf(Tensor::matrix({{1e9, 1e9 - 1, 0.0}}));
    Tensor p = softmax_rows(x).value();
    EXPECT_TRUE(p.all_finite());
    EXPECT_NEAR(p.at(0, 0) + p.at(0, 1) + p.at(0, 2), 1.0, 1e-12);
    EXPECT_GT(p.at(0, 0), p.at(0, 1));
    Tensor ls = log_softmax_rows(tape.leaf(Tensor::matrix({{1e9, 1e9 - 1, 0.0}}))).value();
    EXPECT_TRUE(ls.all_finite());
}

TEST(Forward, PairwiseSqdistHandExample) {
    Tape tape;
    Var q = tape.leaf(Tensor::matrix({{0, 0}}));
    Var s = tape.leaf(Tensor::matrix({{1, 0}, {3, 0}}));
    EXPECT_EQ(pairwise_sqdist(q, s).value(), Tensor::matrix({{1, 9}}));
}

TEST(Forward, PairwiseSqdistMatchesBruteForce) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor a = Tensor::zeros({5, 3}), b = Tensor::zeros({4, 3});
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
        for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.normal();
        Tape tape;
        Tensor d = pairwise_sqdist(tape.leaf(a), tape.leaf(b)).value();
        for (std::size_t i = 0; i < 5; ++i) {
            for (std::size_t j = 0; j < 4; ++j) {
                double expect = 0.0;
                for (std::size_t c = 0; c < 3; ++c) {
                    expect += (a.at(i, c) - b.at(j, c)) * (a.at(i, c) - b.at(j, c));
                }
                EXPECT_NEAR(d.at(i, j), expect, 1e-12);
            }
        }
    }
}

TEST(Forward, LogRejectsNonPositive) {
    Tape tape;
    EXPECT_THROW(log(tape.leaf(Tensor({2}, {1.0, 0.0}))), DomainError);
    EXPECT_THROW(log(tape.leaf(Tensor({1}, {-3.0}))), DomainError);
}

TEST(Forward, ElementwiseAndBroadcast) {
    Tape tape;
    Var a = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
    Var bias = tape.leaf(Tensor::matrix({{10, 20}}));
    EXPECT_EQ(add(a, bias).value(), Tensor::matrix({{11, 22}, {13, 24}}));
    Var col = tape.leaf(Tensor::matrix({{2}, {3}}));
    EXPECT_EQ(mul(a, col).value(), Tensor::matrix({{2, 4}, {9, 12}}));
    Var wrong = tape.leaf(Tensor::matrix({{1, 2, 3}}));
    EXPECT_THROW(add(a, wrong), ShapeError);
}

TEST(Forward, ReduceTiesGoToFirstIndex) {
    Tape tape;
    Var x = tape.leaf(Tensor::matrix({{2, 2, 1}, {0, -1, -1}}), true);
    Var mx = max_reduce(x);
    EXPECT_EQ(mx.value(), Tensor::matrix({{2}, {0}}));
    Gradients g = tape.backward(sum(mx));
    EXPECT_EQ(g.of(x), Tensor::matrix({{1, 0, 0}, {1, 0, 0}}));

    Tape tape2;
    Var y = tape2.leaf(Tensor::matrix({{5, 5}}), true);
    Var mn = min_reduce(y);
    Gradients g2 = tape2.backward(sum(mn));
    EXPECT_EQ(g2.of(y), Tensor::matrix({{1, 0}}));
}

TEST(Forward, ConcatAndGatherRows) {
    Tape tape;
    Var a = tape.leaf(Tensor::matrix({{1, 2}}));
    Var b = tape.leaf(Tensor::matrix({{3, 4}, {5, 6}}));
    Var cat = concat_rows(a, b);
    EXPECT_EQ(cat.value(), Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
    EXPECT_EQ(gather_rows(cat, {2, 0}).value(), Tensor::matrix({{5, 6}, {1, 2}}));
    EXPECT_THROW(gather_rows(cat, {3}), ShapeError);
    EXPECT_THROW(gather_rows(cat, {}), ShapeError);
}

TEST(Forward, L2NormRowsClampsAndWarns) {
    Tape tape;
    Var x = tape.leaf(Tensor::matrix({{3, 4}, {0, 0}}));
    Tensor norms = l2_norm_rows(x, 1e-12).value();
    EXPECT_DOUBLE_EQ(norms.at(0, 0), 5.0);
    EXPECT_DOUBLE_EQ(norms.at(1, 0), 1e-12);
    EXPECT_EQ(tape.numeric_warnings(), 1);
}

TEST(Forward, MeanAndSum) {
    Tape tape;
    Var x = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
    EXPECT_DOUBLE_EQ(sum(x).value().value(), 10.0);
    EXPECT_DOUBLE_EQ(mean(x).value().value(), 2.5);
}
