#include "aquakv/binary_io.hpp"

#include <cerrno>
#include <cstdio>
#include <fstream>

namespace aquakv {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open '" + path + "' for reading");
    }
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
        fail(ErrorKind::io, "failed reading '" + path + "'");
    }
    return bytes;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        fail(ErrorKind::io, "failed writing '" + path + "'");
    }
}

void append_checksum(ByteWriter& w) { w.u64(fnv1a64(w.bytes())); }

std::span<const std::uint8_t> verify_checksum(std::span<const std::uint8_t> file, const std::string& context) {
    if (file.size() < 8) {
        fail(ErrorKind::format, context + ": truncated payload (no checksum)");
    }
    auto body = file.first(file.size() - 8);
    ByteReader tail(file.last(8), context);
    if (tail.u64() != fnv1a64(body)) {
        fail(ErrorKind::format, context + ": checksum mismatch");
    }
    return body;
}

}  // namespace aquakv
