#include <gtest/gtest.h>

#include <cmath>

#include "aquakv/error.hpp"
#include "aquakv/linalg.hpp"
#include "support.hpp"

using namespace aquakv;
using fixtures::random_matrix;

TEST(Ridge, HandSolvedExample) {
    const Matrix x = Matrix::from_rows({{1}, {2}, {3}});
    const Matrix y = Matrix::from_rows({{2}, {4}, {6}});
    const LinearMap m = ridge_fit(x, y, 0.0);
    EXPECT_NEAR(m.weight(0, 0), 2.0f, 1e-6);
    EXPECT_NEAR(m.bias[0], 0.0f, 1e-6);
}

TEST(Ridge, IdentityFit) {
    const Matrix x = random_matrix(64, 6, 1);
    const LinearMap m = ridge_fit(x, x, 0.0);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            EXPECT_NEAR(m.weight(i, j), i == j ? 1.0f : 0.0f, 1e-5);
        }
        EXPECT_NEAR(m.bias[i], 0.0f, 1e-5);
    }
}

TEST(Ridge, SingularSystemNeedsLambda) {
    Matrix x(10, 2);
    for (std::size_t r = 0; r < 10; ++r) {
        x(r, 0) = static_cast<float>(r);
        x(r, 1) = static_cast<float>(2 * r);
    }
    const Matrix y = random_matrix(10, 1, 2);
    try {
        ridge_fit(x, y, 0.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::singular);
        EXPECT_NE(std::string(e.what()).find("lambda > 0"), std::string::npos);
    }
    EXPECT_NO_THROW(ridge_fit(x, y, 1e-3));
}

TEST(Ridge, BiasIsNotShrunk) {
    Matrix x(100, 1);
    Matrix y(100, 1, 5.0f);
    const LinearMap m = ridge_fit(x, y, 1e6);
    EXPECT_NEAR(m.bias[0], 5.0f, 1e-5);
}

TEST(Ridge, ShrinksWeightsTowardZero) {
    const Matrix x = random_matrix(50, 4, 3);
    const Matrix y = random_matrix(50, 2, 4);
    const double w0 = fixtures::frobenius(ridge_fit(x, y, 0.0).weight);
    const double w1 = fixtures::frobenius(ridge_fit(x, y, 100.0).weight);
    EXPECT_LT(w1, w0);
}

TEST(NormalEquations, BatchedAndSequentialAgreeBitwise) {
    const Matrix x = random_matrix(700, 12, 5);
    const Matrix y = random_matrix(700, 3, 6);
    NormalEquations seq(12, 3), batch(12, 3), a(12, 3), b(12, 3);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        seq.add_row(x.row(r), y.row(r));
    }
    batch.add_rows(x, y);
    const LinearMap m1 = seq.solve(1e-3);
    const LinearMap m2 = batch.solve(1e-3);
    EXPECT_TRUE(bitwise_equal(m1.weight, m2.weight));
    EXPECT_EQ(m1.bias, m2.bias);

    a.add_rows(x.slice_rows(0, 300), y.slice_rows(0, 300));
    b.add_rows(x.slice_rows(300, 700), y.slice_rows(300, 700));
    a.merge(b);
    EXPECT_EQ(a.rows_seen(), 700u);
    const LinearMap m3 = a.solve(1e-3);
    EXPECT_LT(fixtures::frobenius_diff(m3.weight, m1.weight), 1e-5);
}

TEST(NormalEquations, SplitInputMatchesConcatenation) {
    const Matrix head = random_matrix(200, 4, 7);
    const Matrix tail = random_matrix(200, 3, 8);
    const Matrix y = random_matrix(200, 2, 9);
    NormalEquations split(7, 2), joined(7, 2);
    std::vector<std::size_t> rows = {0, 5, 9, 100, 150, 199};
    split.add_selected(head, &tail, y, rows);
    const Matrix x = hconcat(head, tail);
    for (std::size_t r : rows) {
        joined.add_row(x.row(r), y.row(r));
    }
    EXPECT_TRUE(bitwise_equal(split.solve(1e-3).weight, joined.solve(1e-3).weight));
}

TEST(Evr, PerfectAndMeanPredictors) {
    const Matrix y = random_matrix(100, 5, 10);
    EXPECT_DOUBLE_EQ(explained_variance_ratio(y, y), 1.0);
    Matrix mean(100, 5);
    for (std::size_t c = 0; c < 5; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < 100; ++r) {
            s += y(r, c);
        }
        for (std::size_t r = 0; r < 100; ++r) {
            mean(r, c) = static_cast<float>(s / 100.0);
        }
    }
    EXPECT_NEAR(explained_variance_ratio(y, mean), 0.0, 1e-6);
}

TEST(Evr, ScaledResidualExample) {
    const Matrix z = random_matrix(2000, 4, 11);
    Matrix y = z;
    Matrix y_hat = z;
    for (auto& v : y.values()) {
        v *= 2.0f;
    }
    // residual y - y_hat = z, var(y) = 4 var(z)
    EXPECT_NEAR(explained_variance_ratio(y, y_hat), 0.75, 1e-6);
}

TEST(Evr, ChannelMeanDiffersFromPooled) {
    Matrix y(4, 2), y_hat(4, 2);
    const float a[4] = {1, -1, 1, -1};
    for (std::size_t r = 0; r < 4; ++r) {
        y(r, 0) = 10.0f * a[r];
        y(r, 1) = a[r];
        y_hat(r, 0) = 10.0f * a[r];
        y_hat(r, 1) = 0.0f;
    }
    // pooled: 1 - 1/101; channel mean: (1 + 0) / 2
    EXPECT_NEAR(explained_variance_ratio(y, y_hat), 1.0 - 1.0 / 101.0, 1e-9);
    EXPECT_NEAR(explained_variance_ratio(y, y_hat, EvrAggregation::channel_mean), 0.5, 1e-9);
}

TEST(Evr, DegenerateTargetThrows) {
    const Matrix y(5, 3, 2.0f);
    try {
        explained_variance_ratio(y, y);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::degenerate);
    }
}

TEST(Evr, MomentsMergeMatchesSinglePass) {
    const Matrix y = random_matrix(300, 6, 12);
    const Matrix y_hat = random_matrix(300, 6, 13, 0.3);
    ChannelMoments all(6), a(6), b(6);
    all.add(y, y_hat);
    a.add(y.slice_rows(0, 120), y_hat.slice_rows(0, 120));
    b.add(y.slice_rows(120, 300), y_hat.slice_rows(120, 300));
    a.merge(b);
    EXPECT_NEAR(a.evr(), all.evr(), 1e-12);
    EXPECT_NEAR(a.evr(), explained_variance_ratio(y, y_hat), 1e-9);
}
