#pragma once

#include <cstdint>
#include <span>

namespace aquakv {

// Orthonormal fast Walsh-Hadamard transform, length must be a power of two.
void fwht(std::span<float> x);

// Randomized Hadamard transform y = H (D x) / sqrt(g) with a seeded +/-1
// diagonal. The sign of element j is a pure function of (seed, offset + j),
// so a group's rotation does not depend on where its row sits in a batch.
//
// Lengths that are not powers of two are split into descending power-of-two
// chunks (the binary expansion of the length), each rotated on its own; the
// transform stays an isometry and the stored length is unchanged.
void rht_forward(std::span<float> x, std::uint64_t seed, std::uint64_t offset = 0);
void rht_inverse(std::span<float> x, std::uint64_t seed, std::uint64_t offset = 0);

bool rht_sign_negative(std::uint64_t seed, std::uint64_t index) noexcept;

}  // namespace aquakv
