#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "aquakv/matrix.hpp"

namespace aquakv {

enum class RopeMode { pre_rope, post_rope };

std::string to_string(RopeMode mode);
RopeMode parse_rope_mode(const std::string& text);  // "pre", "post", "pre_rope", "post_rope"

struct TraceMeta {
    int n_layers = 0;
    int n_kv_heads = 0;
    int head_dim = 0;
    std::vector<std::size_t> sequence_lengths;
    RopeMode rope_mode = RopeMode::pre_rope;
    double rope_theta = 10000.0;
    bool has_attention_stats = false;
    std::string source;

    std::size_t kv_channels() const { return static_cast<std::size_t>(n_kv_heads) * head_dim; }
    std::size_t n_tokens() const;
    std::size_t n_sequences() const { return sequence_lengths.size(); }
    // First row of each sequence plus a final end marker.
    std::vector<std::size_t> sequence_offsets() const;
    // Row range covering sequences [seq_begin, seq_end).
    std::pair<std::size_t, std::size_t> sequence_rows(std::size_t seq_begin, std::size_t seq_end) const;

    void validate() const;
    std::string to_json() const;
    static TraceMeta from_json(const std::string& text);

    bool same_geometry(const TraceMeta& other) const {
        return n_layers == other.n_layers && n_kv_heads == other.n_kv_heads && head_dim == other.head_dim;
    }
};

struct LayerData {
    Matrix keys;
    Matrix values;
};

// Anything that can hand out one layer of a trace at a time.
class LayerSource {
public:
    virtual ~LayerSource() = default;
    virtual const TraceMeta& meta() const = 0;
    // Rows [row_begin, row_end) of layer `layer`.
    virtual LayerData load_layer(int layer, std::size_t row_begin, std::size_t row_end) const = 0;
    LayerData load_layer(int layer) const { return load_layer(layer, 0, meta().n_tokens()); }
};

// Per-layer key/value matrices [n_tokens x kv_channels] plus optional
// accumulated attention scores per layer and token.
struct KVTrace : LayerSource {
    TraceMeta info;
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    std::vector<std::vector<float>> attention;  // empty unless has_attention_stats

    const TraceMeta& meta() const override { return info; }
    LayerData load_layer(int layer, std::size_t row_begin, std::size_t row_end) const override;
    using LayerSource::load_layer;

    void validate() const;
    // Sub-trace holding sequences [seq_begin, seq_end).
    KVTrace sequences(std::size_t seq_begin, std::size_t seq_end) const;

    friend bool operator==(const KVTrace& a, const KVTrace& b);
};

inline constexpr std::uint16_t kTraceVersion = 1;

void write_trace(const KVTrace& trace, const std::string& path);
KVTrace read_trace(const std::string& path);

// Streaming reader: validates header, size and checksum on open, then serves
// layers straight from the file without holding the whole trace.
class TraceReader : public LayerSource {
public:
    explicit TraceReader(const std::string& path);

    const TraceMeta& meta() const override { return meta_; }
    LayerData load_layer(int layer, std::size_t row_begin, std::size_t row_end) const override;
    using LayerSource::load_layer;
    std::vector<float> load_attention(int layer) const;

    std::uint64_t checksum() const noexcept { return checksum_; }
    std::uint16_t version() const noexcept { return version_; }
    std::size_t file_size() const noexcept { return file_size_; }

private:
    void read_at(std::uint64_t offset, float* out, std::size_t count, const std::string& what) const;

    std::string path_;
    mutable std::ifstream in_;
    TraceMeta meta_;
    std::uint16_t version_ = 0;
    std::uint64_t data_offset_ = 0;
    std::uint64_t checksum_ = 0;
    std::size_t file_size_ = 0;
};

// Keys rotated into (or out of) the requested mode; values are untouched.
KVTrace convert_rope(const KVTrace& trace, RopeMode target);

}  // namespace aquakv
