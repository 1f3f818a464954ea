#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "aquakv/matrix.hpp"

namespace aquakv {

inline constexpr double kDefaultRidgeLambda = 1e-3;

// Accumulates the bias-augmented normal equations [X 1]^T [X 1] and
// [X 1]^T Y in double precision, one row at a time. Rows are added in call
// order; the result depends only on the sequence of rows.
class NormalEquations {
public:
    NormalEquations(std::size_t in_dim, std::size_t out_dim);

    std::size_t in_dim() const noexcept { return in_dim_; }
    std::size_t out_dim() const noexcept { return out_dim_; }
    std::size_t rows_seen() const noexcept { return rows_; }

    void add_row(std::span<const float> x, std::span<const float> y);
    // Row whose input is the concatenation [x_head | x_tail].
    void add_row(std::span<const float> x_head, std::span<const float> x_tail, std::span<const float> y);
    void add_rows(const Matrix& x, const Matrix& y);
    // Adds the listed rows of [x_head | x_tail] -> y (x_tail may be null), in
    // list order. Bit-identical to calling add_row for each row in turn; the
    // work is spread over threads by output row of the Gram matrix.
    void add_selected(const Matrix& x_head, const Matrix* x_tail, const Matrix& y,
                      std::span<const std::size_t> rows);
    // Adds another accumulator's sums; merging shards in a fixed order gives
    // results independent of how rows were distributed over threads.
    void merge(const NormalEquations& other);

    // Minimizer of ||XW + b - Y||^2 + lambda ||W||^2, bias unregularized.
    LinearMap solve(double lambda) const;

private:
    void accumulate(std::span<const double> a, std::span<const float> y);

    std::size_t in_dim_;
    std::size_t out_dim_;
    std::size_t rows_ = 0;
    std::vector<double> gram_;   // (in+1)^2, upper triangle filled
    std::vector<double> cross_;  // (in+1) x out
    std::vector<double> scratch_;
};

LinearMap ridge_fit(const Matrix& x, const Matrix& y, double lambda = kDefaultRidgeLambda);

// In-place Cholesky solve of the SPD system A X = B; A is n x n (row-major,
// upper triangle read), B is n x m. Throws ErrorKind::singular on a
// non-positive pivot.
void cholesky_solve(std::vector<double>& a, std::vector<double>& b, std::size_t n, std::size_t m);

enum class EvrAggregation {
    pooled,        // 1 - sum_c Var(res_c) / sum_c Var(y_c)
    channel_mean,  // mean over channels with Var(y_c) > 0 of 1 - Var(res_c)/Var(y_c)
};

// Per-channel population variance sums of a target and its residual; the
// building block for pooling explained variance across layers or blocks.
struct VarianceSums {
    double target = 0.0;
    double residual = 0.0;
    double sq_error = 0.0;   // sum of squared residuals
    double max_abs = 0.0;    // max |residual|
    std::size_t count = 0;   // number of scalar values

    void merge(const VarianceSums& other);
    double evr() const;
    double mse() const { return count == 0 ? 0.0 : sq_error / static_cast<double>(count); }
};

// Streams rows of (target, estimate) pairs and yields per-channel variance
// sums over all rows seen, so statistics can span several blocks.
class ChannelMoments {
public:
    explicit ChannelMoments(std::size_t channels = 0);

    void add(const Matrix& y, const Matrix& y_hat);
    void add_row(std::span<const float> y, std::span<const float> y_hat);
    void merge(const ChannelMoments& other);

    std::size_t rows() const noexcept { return rows_; }
    VarianceSums sums() const;
    double evr(EvrAggregation aggregation = EvrAggregation::pooled) const;

private:
    std::size_t channels_;
    std::size_t rows_ = 0;
    std::vector<double> sum_y_, sum_y2_, sum_r_, sum_r2_;
    double max_abs_ = 0.0;
};

VarianceSums variance_sums(const Matrix& y, const Matrix& y_hat);

double explained_variance_ratio(const Matrix& y, const Matrix& y_hat,
                                EvrAggregation aggregation = EvrAggregation::pooled);

}  // namespace aquakv
