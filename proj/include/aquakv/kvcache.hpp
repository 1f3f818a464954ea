#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "aquakv/codec.hpp"
#include "aquakv/footprint.hpp"
#include "aquakv/linalg.hpp"
#include "aquakv/trace.hpp"

namespace aquakv {

struct CacheConfig {
    int sink_tokens = 4;
    std::size_t buffer_tokens = 128;
    Backbone backbone = Backbone::vq(VQConfig::preset(2));
    int first_layer_bits = 4;
    // Null runs the no-predictor baseline.
    std::shared_ptr<const PredictorSet> predictors;

    void validate() const;
    LayerCodec codec() const { return LayerCodec::make(backbone, first_layer_bits); }
};

struct Segment {
    std::size_t begin = 0;  // token positions [begin, end)
    std::size_t end = 0;
    EncodedBlock block;

    friend bool operator==(const Segment&, const Segment&) = default;
};

struct LayerStore {
    Matrix sink_keys;
    Matrix sink_values;
    std::vector<Segment> segments;
};

class CompressedKVCache;

// Decodes layers of a cache in ascending order; each layer's segments need
// the previous layer's decoded segments, which the pass keeps.
class ReconstructionPass {
public:
    explicit ReconstructionPass(const CompressedKVCache& cache) : cache_(&cache) {}

    // All stored tokens of `layer` in token order. Throws ErrorKind::contract
    // unless layer is the next one in sequence.
    DecodedBlock layer(int layer);
    int next_layer() const noexcept { return next_; }

private:
    const CompressedKVCache* cache_;
    int next_ = 0;
    std::vector<DecodedBlock> previous_;  // decoded segments of layer next_ - 1
};

// Streaming cache: the first sink_tokens positions stay exact, later tokens
// wait in a recent buffer shared by all layers, and every time the buffer
// holds buffer_tokens tokens it is encoded layer by layer into one segment
// per layer.
class CompressedKVCache {
public:
    CompressedKVCache(int n_layers, std::size_t kv_channels, CacheConfig cfg);

    // keys[l], values[l]: [t x C] for the same t new tokens on every layer.
    void append(const std::vector<Matrix>& keys, const std::vector<Matrix>& values);
    // Flushes a non-empty buffer as a short final segment.
    void finish();

    int n_layers() const noexcept { return n_layers_; }
    std::size_t kv_channels() const noexcept { return channels_; }
    std::size_t tokens() const noexcept { return tokens_; }
    std::size_t buffered() const noexcept { return buffer_keys_.empty() ? 0 : buffer_keys_[0].rows(); }
    std::size_t sink_count() const noexcept { return stores_.empty() ? 0 : stores_[0].sink_keys.rows(); }
    std::size_t flushes() const noexcept { return stores_.empty() ? 0 : stores_[0].segments.size(); }
    const CacheConfig& config() const noexcept { return cfg_; }
    const LayerStore& store(int layer) const { return stores_.at(static_cast<std::size_t>(layer)); }
    const Matrix& buffer_keys(int layer) const { return buffer_keys_.at(static_cast<std::size_t>(layer)); }
    const Matrix& buffer_values(int layer) const { return buffer_values_.at(static_cast<std::size_t>(layer)); }

    ReconstructionPass reconstruction() const { return ReconstructionPass(*this); }
    std::vector<DecodedBlock> reconstruct_all() const;

    // Codes, scales and zero points of all segments plus 16 bits per value for
    // sink and buffered tokens.
    std::uint64_t stored_bits() const;
    double values() const { return 2.0 * n_layers_ * static_cast<double>(tokens_) * static_cast<double>(channels_); }

    std::vector<std::uint8_t> serialize() const;
    // cfg must carry the same backbone and predictors the cache was built with.
    static CompressedKVCache deserialize(std::span<const std::uint8_t> file, CacheConfig cfg,
                                         const std::string& context = "cache");

private:
    void flush();
    void check_layers(const std::vector<Matrix>& keys, const std::vector<Matrix>& values) const;

    int n_layers_;
    std::size_t channels_;
    CacheConfig cfg_;
    LayerCodec codec_;
    std::size_t tokens_ = 0;
    std::vector<LayerStore> stores_;
    std::vector<Matrix> buffer_keys_;
    std::vector<Matrix> buffer_values_;
};

struct ReplayConfig {
    CacheConfig cache;
    std::size_t chunk_tokens = 128;
    // Sequences sharing one predictor set in the bits accounting.
    std::int64_t predictor_amortization = 1;
};

using ReplayObserver =
    std::function<void(std::size_t sequence, int layer, const Matrix& keys, const Matrix& values)>;

struct LayerReplay {
    int layer = 0;
    VarianceSums keys, values;
};

struct ReplayReport {
    bool baseline = false;  // no predictors
    std::size_t sequences = 0;
    std::size_t tokens = 0;
    std::size_t flushes = 0;
    std::vector<LayerReplay> layers;
    VarianceSums keys, values;
    double stored_bits = 0;
    double cache_values = 0;
    double bits_per_value = 0;                  // measured, without predictor storage
    double predictor_bits_per_value = 0;        // predictor storage / amortization / values
    Footprint footprint;                        // analytic accounting for the same setting
    double encode_seconds = 0, decode_seconds = 0;

    double key_evr() const;
    double value_evr() const;
    nlohmann::json to_json() const;         // deterministic content
    nlohmann::json timing_json() const;     // wall-clock throughput
};

// Streams each sequence of the trace through its own cache in chunks of
// chunk_tokens, finishes it, decodes every layer and compares with the trace.
ReplayReport replay_trace(const KVTrace& trace, const ReplayConfig& cfg, const ReplayObserver& observer = {},
                          std::vector<CompressedKVCache>* caches = nullptr);

// Header fields and segment counts of a serialized cache, after validating
// its checksum and structure; needs no backbone or predictors.
nlohmann::json inspect_cache(std::span<const std::uint8_t> file, const std::string& context);

StorageRule storage_rule(const Backbone& backbone);

FootprintSpec replay_footprint(const TraceMeta& meta, const ReplayConfig& cfg);

}  // namespace aquakv
