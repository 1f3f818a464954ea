#pragma once

#include <cstddef>
#include <span>

#include "aquakv/matrix.hpp"

namespace aquakv {

// Rotary embedding over head-major key rows: within each head, channel pair
// (2j, 2j+1) is rotated by pos * theta^(-2j / head_dim). `inverse` rotates by
// the negated angle. positions.size() must equal k.rows().
void apply_rope(Matrix& k, std::span<const std::size_t> positions, int head_dim, double theta, bool inverse = false);

Matrix rope(const Matrix& k, std::span<const std::size_t> positions, int head_dim, double theta);
Matrix inverse_rope(const Matrix& k, std::span<const std::size_t> positions, int head_dim, double theta);

}  // namespace aquakv
