#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace aquakv {

// LSB-first packing of fixed-width codes into a byte stream.
class BitWriter {
public:
    void put(std::uint32_t code, unsigned width);
    std::uint64_t bit_length() const noexcept { return bits_; }
    std::vector<std::uint8_t> finish() &&;

private:
    std::vector<std::uint8_t> bytes_;
    std::uint64_t bits_ = 0;
};

class BitReader {
public:
    BitReader(std::span<const std::uint8_t> bytes, std::uint64_t bit_offset = 0) : bytes_(bytes), pos_(bit_offset) {}

    std::uint32_t get(unsigned width);
    std::uint64_t position() const noexcept { return pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::uint64_t pos_;
};

std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, unsigned width);
std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count, unsigned width);

}  // namespace aquakv
