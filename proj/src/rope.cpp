#include "aquakv/rope.hpp"

#include <cmath>
#include <vector>

#include "aquakv/error.hpp"

namespace aquakv {

void apply_rope(Matrix& k, std::span<const std::size_t> positions, int head_dim, double theta, bool inverse) {
    require(head_dim > 0 && head_dim % 2 == 0, ErrorKind::shape, "RoPE needs an even head dimension");
    require(k.cols() % static_cast<std::size_t>(head_dim) == 0, ErrorKind::shape,
            "key width is not a multiple of the head dimension");
    require(positions.size() == k.rows(), ErrorKind::shape, "one position per key row is required");
    const std::size_t half = static_cast<std::size_t>(head_dim) / 2;
    std::vector<double> inv_freq(half);
    for (std::size_t j = 0; j < half; ++j) {
        inv_freq[j] = std::pow(theta, -2.0 * static_cast<double>(j) / head_dim);
    }
    const double sign = inverse ? -1.0 : 1.0;
    for (std::size_t r = 0; r < k.rows(); ++r) {
        auto row = k.row(r);
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t j = 0; j < half; ++j) {
            const double angle = sign * pos * inv_freq[j];
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            for (std::size_t h = 0; h < row.size(); h += static_cast<std::size_t>(head_dim)) {
                const double a = row[h + 2 * j];
                const double b = row[h + 2 * j + 1];
                row[h + 2 * j] = static_cast<float>(a * c - b * s);
                row[h + 2 * j + 1] = static_cast<float>(a * s + b * c);
            }
        }
    }
}

Matrix rope(const Matrix& k, std::span<const std::size_t> positions, int head_dim, double theta) {
    Matrix out = k;
    apply_rope(out, positions, head_dim, theta, false);
    return out;
}

Matrix inverse_rope(const Matrix& k, std::span<const std::size_t> positions, int head_dim, double theta) {
    Matrix out = k;
    apply_rope(out, positions, head_dim, theta, true);
    return out;
}

}  // namespace aquakv
