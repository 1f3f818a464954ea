#include "aquakv/bitpack.hpp"

#include "aquakv/error.hpp"

namespace aquakv {

void BitWriter::put(std::uint32_t code, unsigned width) {
    for (unsigned b = 0; b < width; ++b) {
        if ((bits_ & 7u) == 0) {
            bytes_.push_back(0);
        }
        if ((code >> b) & 1u) {
            bytes_.back() |= static_cast<std::uint8_t>(1u << (bits_ & 7u));
        }
        ++bits_;
    }
}

std::vector<std::uint8_t> BitWriter::finish() && { return std::move(bytes_); }

std::uint32_t BitReader::get(unsigned width) {
    require(pos_ + width <= bytes_.size() * 8u, ErrorKind::format, "bit payload exhausted");
    std::uint32_t code = 0;
    for (unsigned b = 0; b < width; ++b, ++pos_) {
        code |= static_cast<std::uint32_t>((bytes_[pos_ >> 3] >> (pos_ & 7u)) & 1u) << b;
    }
    return code;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, unsigned width) {
    require(width >= 1 && width <= 32, ErrorKind::config, "code width must be in [1, 32]");
    BitWriter w;
    for (auto c : codes) {
        w.put(c, width);
    }
    return std::move(w).finish();
}

std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count, unsigned width) {
    BitReader r(bytes);
    std::vector<std::uint32_t> out(count);
    for (auto& c : out) {
        c = r.get(width);
    }
    return out;
}

}  // namespace aquakv
