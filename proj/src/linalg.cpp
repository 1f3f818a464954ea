#include "aquakv/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "aquakv/parallel.hpp"

namespace aquakv {

NormalEquations::NormalEquations(std::size_t in_dim, std::size_t out_dim)
    : in_dim_(in_dim),
      out_dim_(out_dim),
      gram_((in_dim + 1) * (in_dim + 1), 0.0),
      cross_((in_dim + 1) * out_dim, 0.0),
      scratch_(in_dim + 1, 0.0) {}

void NormalEquations::accumulate(std::span<const double> a, std::span<const float> y) {
    const std::size_t p = in_dim_ + 1;
    for (std::size_t i = 0; i < p; ++i) {
        const double ai = a[i];
        if (ai == 0.0) {
            continue;
        }
        double* g = gram_.data() + i * p;
        for (std::size_t j = i; j < p; ++j) {
            g[j] += ai * a[j];
        }
        double* c = cross_.data() + i * out_dim_;
        for (std::size_t j = 0; j < out_dim_; ++j) {
            c[j] += ai * static_cast<double>(y[j]);
        }
    }
    ++rows_;
}

void NormalEquations::add_row(std::span<const float> x, std::span<const float> y) {
    require(x.size() == in_dim_ && y.size() == out_dim_, ErrorKind::shape, "normal equations row width mismatch");
    std::copy(x.begin(), x.end(), scratch_.begin());
    scratch_[in_dim_] = 1.0;
    accumulate(scratch_, y);
}

void NormalEquations::add_row(std::span<const float> x_head, std::span<const float> x_tail,
                              std::span<const float> y) {
    require(x_head.size() + x_tail.size() == in_dim_ && y.size() == out_dim_, ErrorKind::shape,
            "normal equations row width mismatch");
    std::copy(x_head.begin(), x_head.end(), scratch_.begin());
    std::copy(x_tail.begin(), x_tail.end(), scratch_.begin() + static_cast<std::ptrdiff_t>(x_head.size()));
    scratch_[in_dim_] = 1.0;
    accumulate(scratch_, y);
}

void NormalEquations::add_rows(const Matrix& x, const Matrix& y) {
    require(x.rows() == y.rows(), ErrorKind::shape, "ridge inputs have different row counts");
    std::vector<std::size_t> rows(x.rows());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    add_selected(x, nullptr, y, rows);
}

void NormalEquations::add_selected(const Matrix& x_head, const Matrix* x_tail, const Matrix& y,
                                   std::span<const std::size_t> rows) {
    const std::size_t head = x_head.cols();
    const std::size_t tail = x_tail == nullptr ? 0 : x_tail->cols();
    require(head + tail == in_dim_ && y.cols() == out_dim_, ErrorKind::shape, "normal equations row width mismatch");
    require(x_head.rows() == y.rows() && (x_tail == nullptr || x_tail->rows() == y.rows()), ErrorKind::shape,
            "ridge inputs have different row counts");
    const std::size_t p = in_dim_ + 1;
    constexpr std::size_t kBatch = 256;
    std::vector<double> a(kBatch * p);
    for (std::size_t start = 0; start < rows.size(); start += kBatch) {
        const std::size_t count = std::min(kBatch, rows.size() - start);
        for (std::size_t b = 0; b < count; ++b) {
            const std::size_t r = rows[start + b];
            require(r < y.rows(), ErrorKind::shape, "selected row out of range");
            double* dst = a.data() + b * p;
            std::copy(x_head.row(r).begin(), x_head.row(r).end(), dst);
            if (x_tail != nullptr) {
                std::copy(x_tail->row(r).begin(), x_tail->row(r).end(), dst + head);
            }
            dst[in_dim_] = 1.0;
        }
        parallel_for(p, 4, [&](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) {
                double* g = gram_.data() + i * p;
                double* c = cross_.data() + i * out_dim_;
                for (std::size_t b = 0; b < count; ++b) {
                    const double* ab = a.data() + b * p;
                    const double ai = ab[i];
                    if (ai == 0.0) {
                        continue;
                    }
                    for (std::size_t j = i; j < p; ++j) {
                        g[j] += ai * ab[j];
                    }
                    const auto yr = y.row(rows[start + b]);
                    for (std::size_t j = 0; j < out_dim_; ++j) {
                        c[j] += ai * static_cast<double>(yr[j]);
                    }
                }
            }
        });
    }
    rows_ += rows.size();
}

void NormalEquations::merge(const NormalEquations& other) {
    require(other.in_dim_ == in_dim_ && other.out_dim_ == out_dim_, ErrorKind::shape,
            "cannot merge normal equations of different sizes");
    for (std::size_t i = 0; i < gram_.size(); ++i) {
        gram_[i] += other.gram_[i];
    }
    for (std::size_t i = 0; i < cross_.size(); ++i) {
        cross_[i] += other.cross_[i];
    }
    rows_ += other.rows_;
}

void cholesky_solve(std::vector<double>& a, std::vector<double>& b, std::size_t n, std::size_t m) {
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        max_diag = std::max(max_diag, std::abs(a[i * n + i]));
    }
    const double tol = std::max(max_diag, 1.0) * 1e-12;
    // Factor A = U^T U in place, U upper triangular.
    for (std::size_t i = 0; i < n; ++i) {
        double d = a[i * n + i];
        for (std::size_t k = 0; k < i; ++k) {
            d -= a[k * n + i] * a[k * n + i];
        }
        if (!(d > tol)) {
            fail(ErrorKind::singular,
                 "singular system: normal matrix is not positive definite at pivot " + std::to_string(i) +
                     "; use lambda > 0");
        }
        const double u = std::sqrt(d);
        a[i * n + i] = u;
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < i; ++k) {
                s -= a[k * n + i] * a[k * n + j];
            }
            a[i * n + j] = s / u;
        }
    }
    // Forward substitution U^T Z = B, then back substitution U X = Z.
    for (std::size_t i = 0; i < n; ++i) {
        double* bi = b.data() + i * m;
        for (std::size_t k = 0; k < i; ++k) {
            const double u = a[k * n + i];
            const double* bk = b.data() + k * m;
            for (std::size_t j = 0; j < m; ++j) {
                bi[j] -= u * bk[j];
            }
        }
        const double inv = 1.0 / a[i * n + i];
        for (std::size_t j = 0; j < m; ++j) {
            bi[j] *= inv;
        }
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double* bi = b.data() + ii * m;
        for (std::size_t k = ii + 1; k < n; ++k) {
            const double u = a[ii * n + k];
            const double* bk = b.data() + k * m;
            for (std::size_t j = 0; j < m; ++j) {
                bi[j] -= u * bk[j];
            }
        }
        const double inv = 1.0 / a[ii * n + ii];
        for (std::size_t j = 0; j < m; ++j) {
            bi[j] *= inv;
        }
    }
}

LinearMap NormalEquations::solve(double lambda) const {
    require(lambda >= 0.0 && std::isfinite(lambda), ErrorKind::config, "ridge lambda must be finite and >= 0");
    require(rows_ >= 1, ErrorKind::shape, "ridge fit needs at least one row");
    const std::size_t p = in_dim_ + 1;
    std::vector<double> a(p * p);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = i; j < p; ++j) {
            a[i * p + j] = gram_[i * p + j];
            a[j * p + i] = gram_[i * p + j];
        }
    }
    for (std::size_t i = 0; i < in_dim_; ++i) {
        a[i * p + i] += lambda;
    }
    std::vector<double> b = cross_;
    cholesky_solve(a, b, p, out_dim_);

    LinearMap map = LinearMap::zeros(in_dim_, out_dim_);
    for (std::size_t i = 0; i < in_dim_; ++i) {
        for (std::size_t j = 0; j < out_dim_; ++j) {
            map.weight(i, j) = static_cast<float>(b[i * out_dim_ + j]);
        }
    }
    for (std::size_t j = 0; j < out_dim_; ++j) {
        map.bias[j] = static_cast<float>(b[in_dim_ * out_dim_ + j]);
    }
    return map;
}

LinearMap ridge_fit(const Matrix& x, const Matrix& y, double lambda) {
    require(x.rows() == y.rows(), ErrorKind::shape, "ridge inputs have different row counts");
    require(x.rows() >= 1, ErrorKind::shape, "ridge fit needs at least one row");
    NormalEquations ne(x.cols(), y.cols());
    ne.add_rows(x, y);
    return ne.solve(lambda);
}

void VarianceSums::merge(const VarianceSums& other) {
    target += other.target;
    residual += other.residual;
    sq_error += other.sq_error;
    max_abs = std::max(max_abs, other.max_abs);
    count += other.count;
}

double VarianceSums::evr() const {
    require(target > 0.0, ErrorKind::degenerate, "degenerate target: every channel has zero variance");
    return 1.0 - residual / target;
}

ChannelMoments::ChannelMoments(std::size_t channels)
    : channels_(channels), sum_y_(channels), sum_y2_(channels), sum_r_(channels), sum_r2_(channels) {}

void ChannelMoments::add_row(std::span<const float> y, std::span<const float> y_hat) {
    require(y.size() == channels_ && y_hat.size() == channels_, ErrorKind::shape, "moment row width mismatch");
    for (std::size_t c = 0; c < channels_; ++c) {
        const double t = y[c];
        const double r = t - static_cast<double>(y_hat[c]);
        sum_y_[c] += t;
        sum_y2_[c] += t * t;
        sum_r_[c] += r;
        sum_r2_[c] += r * r;
        max_abs_ = std::max(max_abs_, std::abs(r));
    }
    ++rows_;
}

void ChannelMoments::add(const Matrix& y, const Matrix& y_hat) {
    require(y.rows() == y_hat.rows() && y.cols() == y_hat.cols(), ErrorKind::shape, "target/estimate shape mismatch");
    if (channels_ == 0 && rows_ == 0) {
        *this = ChannelMoments(y.cols());
    }
    for (std::size_t r = 0; r < y.rows(); ++r) {
        add_row(y.row(r), y_hat.row(r));
    }
}

void ChannelMoments::merge(const ChannelMoments& other) {
    if (other.rows_ == 0) {
        return;
    }
    if (rows_ == 0 && channels_ != other.channels_) {
        *this = other;
        return;
    }
    require(channels_ == other.channels_, ErrorKind::shape, "moment channel mismatch");
    for (std::size_t c = 0; c < channels_; ++c) {
        sum_y_[c] += other.sum_y_[c];
        sum_y2_[c] += other.sum_y2_[c];
        sum_r_[c] += other.sum_r_[c];
        sum_r2_[c] += other.sum_r2_[c];
    }
    rows_ += other.rows_;
    max_abs_ = std::max(max_abs_, other.max_abs_);
}

namespace {
double population_variance(double sum, double sum_sq, double n) {
    const double mean = sum / n;
    return std::max(0.0, sum_sq / n - mean * mean);
}
}  // namespace

VarianceSums ChannelMoments::sums() const {
    VarianceSums out;
    if (rows_ == 0) {
        return out;
    }
    const double n = static_cast<double>(rows_);
    for (std::size_t c = 0; c < channels_; ++c) {
        out.target += population_variance(sum_y_[c], sum_y2_[c], n);
        out.residual += population_variance(sum_r_[c], sum_r2_[c], n);
        out.sq_error += sum_r2_[c];
    }
    out.max_abs = max_abs_;
    out.count = rows_ * channels_;
    return out;
}

double ChannelMoments::evr(EvrAggregation aggregation) const {
    require(rows_ >= 2, ErrorKind::shape, "explained variance needs at least 2 rows");
    if (aggregation == EvrAggregation::pooled) {
        return sums().evr();
    }
    const double n = static_cast<double>(rows_);
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < channels_; ++c) {
        const double vy = population_variance(sum_y_[c], sum_y2_[c], n);
        if (vy > 0.0) {
            total += 1.0 - population_variance(sum_r_[c], sum_r2_[c], n) / vy;
            ++used;
        }
    }
    require(used > 0, ErrorKind::degenerate, "degenerate target: every channel has zero variance");
    return total / static_cast<double>(used);
}

VarianceSums variance_sums(const Matrix& y, const Matrix& y_hat) {
    ChannelMoments m(y.cols());
    m.add(y, y_hat);
    return m.sums();
}

double explained_variance_ratio(const Matrix& y, const Matrix& y_hat, EvrAggregation aggregation) {
    require(y.rows() == y_hat.rows() && y.cols() == y_hat.cols(), ErrorKind::shape, "target/estimate shape mismatch");
    ChannelMoments m(y.cols());
    m.add(y, y_hat);
    return m.evr(aggregation);
}

}  // namespace aquakv
