#include "aquakv/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace aquakv {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::shape: return "shape";
        case ErrorKind::format: return "format";
        case ErrorKind::io: return "io";
        case ErrorKind::singular: return "singular";
        case ErrorKind::incompatible: return "incompatible";
        case ErrorKind::contract: return "contract";
        case ErrorKind::degenerate: return "degenerate";
    }
    return "unknown";
}

namespace memory {
namespace {
std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

std::size_t live_bytes() { return g_live.load(); }
std::size_t peak_bytes() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_live.load()); }

void on_allocate(std::size_t bytes) {
    const std::size_t now = g_live.fetch_add(bytes) + bytes;
    std::size_t prev = g_peak.load();
    while (now > prev && !g_peak.compare_exchange_weak(prev, now)) {
    }
}

void on_deallocate(std::size_t bytes) { g_live.fetch_sub(bytes); }

}  // namespace memory

Matrix::Matrix(std::size_t rows, std::size_t cols, std::span<const float> values)
    : rows_(rows), cols_(cols), data_(values.begin(), values.end()) {
    require(values.size() == rows * cols, ErrorKind::shape, "matrix data length does not equal rows x cols");
}

Matrix Matrix::from_rows(const std::vector<std::vector<float>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.front().size();
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        require(rows[i].size() == c, ErrorKind::shape, "ragged rows");
        std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
    require(begin <= end && end <= rows_, ErrorKind::shape, "row slice out of range");
    Matrix out(end - begin, cols_);
    std::copy(data_.begin() + begin * cols_, data_.begin() + end * cols_, out.data_.begin());
    return out;
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] < rows_, ErrorKind::shape, "row index out of range");
        auto src = row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

void Matrix::set_rows(std::size_t begin, const Matrix& src) {
    require(src.cols_ == cols_ && begin + src.rows_ <= rows_, ErrorKind::shape, "set_rows out of range");
    std::copy(src.data_.begin(), src.data_.end(), data_.begin() + begin * cols_);
}

void Matrix::append_rows(const Matrix& src) {
    if (src.rows_ == 0) {
        return;
    }
    if (rows_ == 0 && cols_ == 0) {
        cols_ = src.cols_;
    }
    require(src.cols_ == cols_, ErrorKind::shape, "append_rows column mismatch");
    data_.insert(data_.end(), src.data_.begin(), src.data_.end());
    rows_ += src.rows_;
}

Matrix Matrix::transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            out(c, r) = (*this)(r, c);
        }
    }
    return out;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Matrix hconcat(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows(), ErrorKind::shape, "hconcat row mismatch");
    Matrix out(a.rows(), a.cols() + b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        auto dst = out.row(r);
        std::copy(a.row(r).begin(), a.row(r).end(), dst.begin());
        std::copy(b.row(r).begin(), b.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return out;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

namespace {

void accumulate_row(std::span<const float> src, const Matrix& weight, std::size_t k0, float* dst) {
    const std::size_t n_out = weight.cols();
    for (std::size_t k = 0; k < src.size(); ++k) {
        const float xk = src[k];
        if (xk == 0.0f) {
            continue;
        }
        const float* w = weight.row(k0 + k).data();
        for (std::size_t j = 0; j < n_out; ++j) {
            dst[j] += xk * w[j];
        }
    }
}

}  // namespace

Matrix LinearMap::apply(const Matrix& x) const {
    require(x.cols() == in_dim(), ErrorKind::shape, "linear map input width mismatch");
    require(bias.size() == out_dim(), ErrorKind::shape, "linear map bias length mismatch");
    Matrix out(x.rows(), out_dim());
    // Each output row depends only on its input row, accumulated over k in
    // ascending order, so results do not depend on how rows are batched.
    for (std::size_t r = 0; r < x.rows(); ++r) {
        float* dst = out.row(r).data();
        std::copy(bias.begin(), bias.end(), dst);
        accumulate_row(x.row(r), weight, 0, dst);
    }
    return out;
}

Matrix LinearMap::apply(const Matrix& head, const Matrix& tail) const {
    require(head.rows() == tail.rows(), ErrorKind::shape, "concatenated inputs differ in row count");
    require(head.cols() + tail.cols() == in_dim(), ErrorKind::shape, "linear map input width mismatch");
    require(bias.size() == out_dim(), ErrorKind::shape, "linear map bias length mismatch");
    Matrix out(head.rows(), out_dim());
    for (std::size_t r = 0; r < head.rows(); ++r) {
        float* dst = out.row(r).data();
        std::copy(bias.begin(), bias.end(), dst);
        accumulate_row(head.row(r), weight, 0, dst);
        accumulate_row(tail.row(r), weight, head.cols(), dst);
    }
    return out;
}

LinearMap LinearMap::zeros(std::size_t in_dim, std::size_t out_dim) {
    return LinearMap{Matrix(in_dim, out_dim), std::vector<float>(out_dim, 0.0f)};
}

}  // namespace aquakv
