#include "aquakv/trace.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include <json.hpp>

#include "aquakv/binary_io.hpp"
#include "aquakv/rope.hpp"

namespace aquakv {

namespace {
constexpr char kMagic[4] = {'K', 'V', 'T', '1'};
constexpr std::size_t kPreambleBytes = 4 + 2 + 4;  // magic, version, json length
}  // namespace

std::string to_string(RopeMode mode) { return mode == RopeMode::pre_rope ? "pre_rope" : "post_rope"; }

RopeMode parse_rope_mode(const std::string& text) {
    if (text == "pre" || text == "pre_rope") {
        return RopeMode::pre_rope;
    }
    if (text == "post" || text == "post_rope") {
        return RopeMode::post_rope;
    }
    fail(ErrorKind::config, "unknown rope mode '" + text + "' (expected pre or post)");
}

std::size_t TraceMeta::n_tokens() const {
    return std::accumulate(sequence_lengths.begin(), sequence_lengths.end(), std::size_t{0});
}

std::vector<std::size_t> TraceMeta::sequence_offsets() const {
    std::vector<std::size_t> out(sequence_lengths.size() + 1, 0);
    for (std::size_t i = 0; i < sequence_lengths.size(); ++i) {
        out[i + 1] = out[i] + sequence_lengths[i];
    }
    return out;
}

std::pair<std::size_t, std::size_t> TraceMeta::sequence_rows(std::size_t seq_begin, std::size_t seq_end) const {
    require(seq_begin <= seq_end && seq_end <= sequence_lengths.size(), ErrorKind::shape,
            "sequence range out of bounds");
    const auto off = sequence_offsets();
    return {off[seq_begin], off[seq_end]};
}

void TraceMeta::validate() const {
    require(n_layers >= 1 && n_kv_heads >= 1 && head_dim >= 1, ErrorKind::format,
            "trace geometry dimensions must be >= 1");
    require(!sequence_lengths.empty(), ErrorKind::format, "trace has no sequences");
    for (auto len : sequence_lengths) {
        require(len >= 1, ErrorKind::format, "trace sequence lengths must be >= 1");
    }
    require(rope_theta > 0.0, ErrorKind::format, "rope_theta must be positive");
}

std::string TraceMeta::to_json() const {
    nlohmann::json j;
    j["n_layers"] = n_layers;
    j["n_kv_heads"] = n_kv_heads;
    j["head_dim"] = head_dim;
    j["n_tokens"] = n_tokens();
    j["n_sequences"] = n_sequences();
    j["sequence_lengths"] = sequence_lengths;
    j["rope_mode"] = to_string(rope_mode);
    j["rope_theta"] = rope_theta;
    j["has_attention_stats"] = has_attention_stats;
    j["source"] = source;
    return j.dump();
}

TraceMeta TraceMeta::from_json(const std::string& text) {
    TraceMeta m;
    try {
        const auto j = nlohmann::json::parse(text);
        m.n_layers = j.at("n_layers").get<int>();
        m.n_kv_heads = j.at("n_kv_heads").get<int>();
        m.head_dim = j.at("head_dim").get<int>();
        m.sequence_lengths = j.at("sequence_lengths").get<std::vector<std::size_t>>();
        m.rope_mode = parse_rope_mode(j.value("rope_mode", std::string("pre_rope")));
        m.rope_theta = j.value("rope_theta", 10000.0);
        m.has_attention_stats = j.value("has_attention_stats", false);
        m.source = j.value("source", std::string());
        if (j.contains("n_tokens")) {
            require(j.at("n_tokens").get<std::size_t>() == m.n_tokens(), ErrorKind::format,
                    "trace header n_tokens disagrees with the sequence lengths");
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("malformed trace header: ") + e.what());
    }
    m.validate();
    return m;
}

LayerData KVTrace::load_layer(int layer, std::size_t row_begin, std::size_t row_end) const {
    require(layer >= 0 && layer < info.n_layers, ErrorKind::shape, "layer index out of range");
    return {keys[static_cast<std::size_t>(layer)].slice_rows(row_begin, row_end),
            values[static_cast<std::size_t>(layer)].slice_rows(row_begin, row_end)};
}

void KVTrace::validate() const {
    info.validate();
    const auto layers = static_cast<std::size_t>(info.n_layers);
    require(keys.size() == layers && values.size() == layers, ErrorKind::shape,
            "trace layer count does not match its metadata");
    for (std::size_t l = 0; l < layers; ++l) {
        for (const Matrix* m : {&keys[l], &values[l]}) {
            require(m->rows() == info.n_tokens() && m->cols() == info.kv_channels(), ErrorKind::shape,
                    "trace layer " + std::to_string(l) + " has the wrong shape");
            require(m->all_finite(), ErrorKind::format, "non-finite value in trace layer " + std::to_string(l));
        }
    }
    if (info.has_attention_stats) {
        require(attention.size() == layers, ErrorKind::shape, "attention stats layer count mismatch");
        for (const auto& a : attention) {
            require(a.size() == info.n_tokens(), ErrorKind::shape, "attention stats length mismatch");
            for (float v : a) {
                require(std::isfinite(v) && v >= 0.0f, ErrorKind::format,
                        "attention scores must be finite and non-negative");
            }
        }
    } else {
        require(attention.empty(), ErrorKind::shape, "attention stats present but not declared");
    }
}

KVTrace KVTrace::sequences(std::size_t seq_begin, std::size_t seq_end) const {
    const auto [r0, r1] = info.sequence_rows(seq_begin, seq_end);
    KVTrace out;
    out.info = info;
    out.info.sequence_lengths.assign(info.sequence_lengths.begin() + static_cast<std::ptrdiff_t>(seq_begin),
                                     info.sequence_lengths.begin() + static_cast<std::ptrdiff_t>(seq_end));
    for (std::size_t l = 0; l < keys.size(); ++l) {
        out.keys.push_back(keys[l].slice_rows(r0, r1));
        out.values.push_back(values[l].slice_rows(r0, r1));
        if (!attention.empty()) {
            out.attention.emplace_back(attention[l].begin() + static_cast<std::ptrdiff_t>(r0),
                                       attention[l].begin() + static_cast<std::ptrdiff_t>(r1));
        }
    }
    return out;
}

bool operator==(const KVTrace& a, const KVTrace& b) {
    if (a.info.to_json() != b.info.to_json() || a.keys.size() != b.keys.size() ||
        a.values.size() != b.values.size() || a.attention != b.attention) {
        return false;
    }
    for (std::size_t l = 0; l < a.keys.size(); ++l) {
        if (!bitwise_equal(a.keys[l], b.keys[l]) || !bitwise_equal(a.values[l], b.values[l])) {
            return false;
        }
    }
    return true;
}

namespace {

class ChecksummedFile {
public:
    explicit ChecksummedFile(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
        if (!out_) {
            fail(ErrorKind::io, "cannot open '" + path + "' for writing");
        }
    }

    void write(std::span<const std::uint8_t> bytes) {
        hash_.update(bytes);
        out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }

    void write_floats(std::span<const float> values) {
        ByteWriter w;
        w.f32s(values);
        write(w.bytes());
    }

    void finish() {
        ByteWriter w;
        w.u64(hash_.digest());
        out_.write(reinterpret_cast<const char*>(w.bytes().data()), 8);
        out_.flush();
        if (!out_) {
            fail(ErrorKind::io, "failed writing '" + path_ + "'");
        }
    }

private:
    std::ofstream out_;
    std::string path_;
    Fnv1a64 hash_;
};

}  // namespace

void write_trace(const KVTrace& trace, const std::string& path) {
    trace.validate();
    ChecksummedFile file(path);
    const std::string header = trace.info.to_json();
    ByteWriter pre;
    pre.raw({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
    pre.u16(kTraceVersion);
    pre.u32(static_cast<std::uint32_t>(header.size()));
    pre.text(header);
    file.write(pre.bytes());
    for (std::size_t l = 0; l < trace.keys.size(); ++l) {
        file.write_floats(trace.keys[l].values());
        file.write_floats(trace.values[l].values());
    }
    for (const auto& a : trace.attention) {
        file.write_floats(a);
    }
    file.finish();
}

TraceReader::TraceReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) {
        fail(ErrorKind::io, "cannot open '" + path + "' for reading");
    }
    file_size_ = static_cast<std::size_t>(std::filesystem::file_size(path));
    const std::string ctx = "trace '" + path + "'";
    require(file_size_ >= kPreambleBytes, ErrorKind::format, ctx + ": truncated header");

    std::vector<std::uint8_t> pre(kPreambleBytes);
    in_.read(reinterpret_cast<char*>(pre.data()), static_cast<std::streamsize>(pre.size()));
    require(std::memcmp(pre.data(), kMagic, 4) == 0, ErrorKind::format, ctx + ": bad magic (expected KVT1)");
    ByteReader r(pre, ctx);
    r.raw(4);
    version_ = r.u16();
    require(version_ == kTraceVersion, ErrorKind::format,
            ctx + ": unsupported version " + std::to_string(version_));
    const std::uint32_t json_len = r.u32();
    require(file_size_ >= kPreambleBytes + json_len, ErrorKind::format, ctx + ": truncated header");
    std::string header(json_len, '\0');
    in_.read(header.data(), static_cast<std::streamsize>(json_len));
    meta_ = TraceMeta::from_json(header);
    data_offset_ = kPreambleBytes + json_len;

    const std::uint64_t layer_bytes = static_cast<std::uint64_t>(meta_.n_tokens()) * meta_.kv_channels() * 4;
    std::uint64_t end = data_offset_;
    for (int l = 0; l < meta_.n_layers; ++l) {
        end += 2 * layer_bytes;
        if (end > file_size_) {
            fail(ErrorKind::format, ctx + ": truncated payload at layer " + std::to_string(l));
        }
    }
    if (meta_.has_attention_stats) {
        end += static_cast<std::uint64_t>(meta_.n_layers) * meta_.n_tokens() * 4;
        require(end <= file_size_, ErrorKind::format, ctx + ": truncated payload in attention stats");
    }
    require(end + 8 <= file_size_, ErrorKind::format, ctx + ": truncated payload (checksum missing)");
    require(end + 8 == file_size_, ErrorKind::format, ctx + ": trailing bytes after checksum");

    // Stream the whole body once for the checksum.
    Fnv1a64 hash;
    in_.seekg(0);
    std::vector<std::uint8_t> buf(1 << 20);
    std::uint64_t left = end;
    while (left > 0) {
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(left, buf.size()));
        in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
        require(static_cast<std::size_t>(in_.gcount()) == n, ErrorKind::io, ctx + ": read failed");
        hash.update({buf.data(), n});
        left -= n;
    }
    std::uint8_t tail[8];
    in_.read(reinterpret_cast<char*>(tail), 8);
    ByteReader tr({tail, 8}, ctx);
    checksum_ = tr.u64();
    require(checksum_ == hash.digest(), ErrorKind::format, ctx + ": checksum mismatch");
}

void TraceReader::read_at(std::uint64_t offset, float* out, std::size_t count, const std::string& what) const {
    std::vector<std::uint8_t> buf(count * 4);
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(offset));
    in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    require(static_cast<std::size_t>(in_.gcount()) == buf.size(), ErrorKind::format,
            "trace '" + path_ + "': truncated payload at " + what);
    ByteReader r(buf, path_);
    r.f32s({out, count});
    for (std::size_t i = 0; i < count; ++i) {
        require(std::isfinite(out[i]), ErrorKind::format, "trace '" + path_ + "': non-finite value at " + what);
    }
}

LayerData TraceReader::load_layer(int layer, std::size_t row_begin, std::size_t row_end) const {
    require(layer >= 0 && layer < meta_.n_layers, ErrorKind::shape, "layer index out of range");
    require(row_begin <= row_end && row_end <= meta_.n_tokens(), ErrorKind::shape, "row range out of bounds");
    const std::size_t c = meta_.kv_channels();
    const std::uint64_t layer_bytes = static_cast<std::uint64_t>(meta_.n_tokens()) * c * 4;
    const std::uint64_t k_off = data_offset_ + 2 * layer_bytes * static_cast<std::uint64_t>(layer);
    const std::uint64_t row_off = static_cast<std::uint64_t>(row_begin) * c * 4;
    LayerData out{Matrix(row_end - row_begin, c), Matrix(row_end - row_begin, c)};
    const std::string where = "layer " + std::to_string(layer);
    read_at(k_off + row_off, out.keys.data(), out.keys.size(), where);
    read_at(k_off + layer_bytes + row_off, out.values.data(), out.values.size(), where);
    return out;
}

std::vector<float> TraceReader::load_attention(int layer) const {
    require(meta_.has_attention_stats, ErrorKind::shape, "trace has no attention stats");
    require(layer >= 0 && layer < meta_.n_layers, ErrorKind::shape, "layer index out of range");
    const std::size_t t = meta_.n_tokens();
    const std::uint64_t layer_bytes = static_cast<std::uint64_t>(t) * meta_.kv_channels() * 4;
    const std::uint64_t off = data_offset_ + 2 * layer_bytes * static_cast<std::uint64_t>(meta_.n_layers) +
                              static_cast<std::uint64_t>(layer) * t * 4;
    std::vector<float> out(t);
    read_at(off, out.data(), t, "attention stats of layer " + std::to_string(layer));
    return out;
}

KVTrace read_trace(const std::string& path) {
    TraceReader reader(path);
    KVTrace trace;
    trace.info = reader.meta();
    for (int l = 0; l < trace.info.n_layers; ++l) {
        auto data = reader.load_layer(l);
        trace.keys.push_back(std::move(data.keys));
        trace.values.push_back(std::move(data.values));
    }
    if (trace.info.has_attention_stats) {
        for (int l = 0; l < trace.info.n_layers; ++l) {
            trace.attention.push_back(reader.load_attention(l));
        }
    }
    trace.validate();
    return trace;
}

KVTrace convert_rope(const KVTrace& trace, RopeMode target) {
    KVTrace out = trace;
    if (trace.info.rope_mode == target) {
        return out;
    }
    std::vector<std::size_t> positions;
    positions.reserve(trace.info.n_tokens());
    for (auto len : trace.info.sequence_lengths) {
        for (std::size_t p = 0; p < len; ++p) {
            positions.push_back(p);
        }
    }
    const bool inverse = target == RopeMode::pre_rope;
    for (auto& k : out.keys) {
        apply_rope(k, positions, trace.info.head_dim, trace.info.rope_theta, inverse);
    }
    out.info.rope_mode = target;
    return out;
}

}  // namespace aquakv
