#include "aquakv/hadamard.hpp"

#include <bit>
#include <cmath>

#include "aquakv/error.hpp"
#include "aquakv/random.hpp"

namespace aquakv {

void fwht(std::span<float> x) {
    const std::size_t n = x.size();
    require(n > 0 && std::has_single_bit(n), ErrorKind::shape, "Walsh-Hadamard length must be a power of two");
    for (std::size_t h = 1; h < n; h <<= 1) {
        for (std::size_t i = 0; i < n; i += h << 1) {
            for (std::size_t j = i; j < i + h; ++j) {
                const float a = x[j];
                const float b = x[j + h];
                x[j] = a + b;
                x[j + h] = a - b;
            }
        }
    }
    const float norm = static_cast<float>(1.0 / std::sqrt(static_cast<double>(n)));
    for (auto& v : x) {
        v *= norm;
    }
}

bool rht_sign_negative(std::uint64_t seed, std::uint64_t index) noexcept {
    return (splitmix64(seed ^ splitmix64(index)) >> 63) != 0;
}

namespace {

template <typename Fn>
void for_each_chunk(std::size_t n, Fn&& fn) {
    std::size_t begin = 0;
    while (begin < n) {
        const std::size_t len = std::bit_floor(n - begin);
        fn(begin, len);
        begin += len;
    }
}

void apply_signs(std::span<float> x, std::uint64_t seed, std::uint64_t offset) {
    for (std::size_t j = 0; j < x.size(); ++j) {
        if (rht_sign_negative(seed, offset + j)) {
            x[j] = -x[j];
        }
    }
}

}  // namespace

void rht_forward(std::span<float> x, std::uint64_t seed, std::uint64_t offset) {
    apply_signs(x, seed, offset);
    for_each_chunk(x.size(), [&](std::size_t begin, std::size_t len) { fwht(x.subspan(begin, len)); });
}

void rht_inverse(std::span<float> x, std::uint64_t seed, std::uint64_t offset) {
    for_each_chunk(x.size(), [&](std::size_t begin, std::size_t len) { fwht(x.subspan(begin, len)); });
    apply_signs(x, seed, offset);
}

}  // namespace aquakv
