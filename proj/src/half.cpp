#include "aquakv/half.hpp"

namespace aquakv {

std::uint16_t float_to_half(float value) noexcept {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    const std::uint32_t abs = x & 0x7fffffffu;

    if (abs >= 0x7f800000u) {
        // Inf stays Inf, NaN keeps a quiet payload bit.
        return static_cast<std::uint16_t>(sign | 0x7c00u | (abs > 0x7f800000u ? 0x0200u : 0u));
    }
    if (abs >= 0x477ff000u) {
        // Rounds to a magnitude above 65504.
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (abs < 0x38800000u) {
        // Subnormal or zero in half precision.
        if (abs < 0x33000000u) {
            return static_cast<std::uint16_t>(sign);
        }
        // value = mant * 2^(exp - 150) and the half subnormal unit is 2^-24.
        const std::uint32_t exp = abs >> 23;
        const std::uint32_t mant = (abs & 0x7fffffu) | 0x800000u;
        const std::uint32_t shift = 126u - exp;
        std::uint32_t h = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t half_way = 1u << (shift - 1u);
        if (rem > half_way || (rem == half_way && (h & 1u))) {
            ++h;
        }
        return static_cast<std::uint16_t>(sign | h);
    }
    // Normal: rebias exponent and round 13 dropped mantissa bits.
    std::uint32_t h = ((abs >> 13) - ((127u - 15u) << 10));
    const std::uint32_t rem = abs & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) {
        ++h;
    }
    return static_cast<std::uint16_t>(sign | h);
}

float half_to_float(std::uint16_t bits) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
    const std::uint32_t exp = (bits >> 10) & 0x1fu;
    std::uint32_t mant = bits & 0x3ffu;
    std::uint32_t out;
    if (exp == 0) {
        if (mant == 0) {
            out = sign;
        } else {
            // Normalize the subnormal.
            int e = -1;
            do {
                ++e;
                mant <<= 1;
            } while ((mant & 0x400u) == 0);
            out = sign | ((127u - 15u - static_cast<std::uint32_t>(e)) << 23) | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 0x1f) {
        out = sign | 0x7f800000u | (mant << 13);
    } else {
        out = sign | ((exp + 127u - 15u) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(out);
}

}  // namespace aquakv
