#pragma once

#include <bit>
#include <cstdint>

namespace aquakv {

// IEEE-754 binary16 conversions with round-to-nearest-even.
std::uint16_t float_to_half(float value) noexcept;
float half_to_float(std::uint16_t bits) noexcept;

inline float round_to_half(float value) noexcept { return half_to_float(float_to_half(value)); }

}  // namespace aquakv
