#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aquakv/error.hpp"

namespace aquakv {

// Little-endian encoders used by every on-disk format in this project.
class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v) { put_le(v, 2); }
    void u32(std::uint32_t v) { put_le(v, 4); }
    void u64(std::uint64_t v) { put_le(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
    void text(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    void f32s(std::span<const float> values) {
        const std::size_t at = bytes_.size();
        bytes_.resize(at + values.size() * 4);
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(bytes_.data() + at, values.data(), values.size() * 4);
        } else {
            for (std::size_t i = 0; i < values.size(); ++i) {
                const auto b = std::bit_cast<std::uint32_t>(values[i]);
                for (int k = 0; k < 4; ++k) {
                    bytes_[at + i * 4 + k] = static_cast<std::uint8_t>(b >> (8 * k));
                }
            }
        }
    }
    void u16s(std::span<const std::uint16_t> values) {
        for (auto v : values) {
            u16(v);
        }
    }

    std::size_t size() const noexcept { return bytes_.size(); }
    const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
    std::vector<std::uint8_t> take() && { return std::move(bytes_); }

private:
    void put_le(std::uint64_t v, int n) {
        for (int k = 0; k < n; ++k) {
            bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
        }
    }

    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, std::string context)
        : bytes_(bytes), context_(std::move(context)) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
    std::uint64_t u64() { return get_le(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::span<const std::uint8_t> raw(std::size_t n) {
        need(n);
        auto out = bytes_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    std::string text(std::size_t n) {
        auto r = raw(n);
        return {r.begin(), r.end()};
    }
    void f32s(std::span<float> out) {
        auto r = raw(out.size() * 4);
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(out.data(), r.data(), r.size());
        } else {
            for (std::size_t i = 0; i < out.size(); ++i) {
                std::uint32_t b = 0;
                for (int k = 0; k < 4; ++k) {
                    b |= static_cast<std::uint32_t>(r[i * 4 + k]) << (8 * k);
                }
                out[i] = std::bit_cast<float>(b);
            }
        }
    }
    void u16s(std::span<std::uint16_t> out) {
        for (auto& v : out) {
            v = u16();
        }
    }

    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            fail(ErrorKind::format, context_ + ": truncated payload");
        }
    }
    std::uint64_t get_le(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int k = 0; k < n; ++k) {
            v |= static_cast<std::uint64_t>(bytes_[pos_ + k]) << (8 * k);
        }
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    std::string context_;
};

// FNV-1a, 64-bit. Used as the trailing integrity checksum of every file.
class Fnv1a64 {
public:
    void update(std::span<const std::uint8_t> data) noexcept {
        for (auto b : data) {
            state_ ^= b;
            state_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t digest() const noexcept { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> data) {
    Fnv1a64 h;
    h.update(data);
    return h.digest();
}

inline std::uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

// Appends the checksum of everything written so far.
void append_checksum(ByteWriter& w);
// Validates and strips the trailing checksum; returns the covered payload.
std::span<const std::uint8_t> verify_checksum(std::span<const std::uint8_t> file, const std::string& context);

}  // namespace aquakv
