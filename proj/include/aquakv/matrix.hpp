#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <vector>

#include "aquakv/error.hpp"

namespace aquakv {

// Process-wide accounting of bytes held by Matrix storage. Used by tests to
// bound the working set of streaming algorithms.
namespace memory {

std::size_t live_bytes();
std::size_t peak_bytes();
// Resets the peak to the current live value.
void reset_peak();

void on_allocate(std::size_t bytes);
void on_deallocate(std::size_t bytes);

template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
        on_allocate(n * sizeof(T));
        return p;
    }
    void deallocate(T* p, std::size_t n) noexcept {
        on_deallocate(n * sizeof(T));
        ::operator delete(p);
    }

    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const noexcept {
        return true;
    }
};

}  // namespace memory

// Dense row-major float32 matrix, [rows x cols].
class Matrix {
public:
    using Storage = std::vector<float, memory::TrackingAllocator<float>>;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::span<const float> values);

    static Matrix from_rows(const std::vector<std::vector<float>>& rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<float> values() noexcept { return {data_.data(), data_.size()}; }
    std::span<const float> values() const noexcept { return {data_.data(), data_.size()}; }
    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }

    // Copy of rows [begin, end).
    Matrix slice_rows(std::size_t begin, std::size_t end) const;
    // Copy of the listed rows, in the given order.
    Matrix gather_rows(std::span<const std::size_t> indices) const;
    void set_rows(std::size_t begin, const Matrix& src);
    void append_rows(const Matrix& src);
    Matrix transposed() const;

    bool all_finite() const noexcept;

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Storage data_;
};

// Horizontal concatenation [a | b]; both must have the same row count.
Matrix hconcat(const Matrix& a, const Matrix& b);

// Bitwise equality, treating +0/-0 and NaN payloads as distinct.
bool bitwise_equal(const Matrix& a, const Matrix& b);

// Affine map y = x W + b, with W stored [in_dim x out_dim].
struct LinearMap {
    Matrix weight;
    std::vector<float> bias;

    std::size_t in_dim() const noexcept { return weight.rows(); }
    std::size_t out_dim() const noexcept { return weight.cols(); }

    Matrix apply(const Matrix& x) const;
    // apply(hconcat(head, tail)) without materializing the concatenation;
    // bit-identical to it.
    Matrix apply(const Matrix& head, const Matrix& tail) const;

    static LinearMap zeros(std::size_t in_dim, std::size_t out_dim);
};

}  // namespace aquakv
