#include "aquakv/kvcache.hpp"

#include <chrono>
#include <cstring>

#include "aquakv/binary_io.hpp"

namespace aquakv {

namespace {
constexpr char kMagic[4] = {'A', 'Q', 'K', 'C'};
constexpr std::uint16_t kCacheVersion = 1;

Matrix take_rows(const Matrix& m, std::size_t begin, std::size_t end) { return m.slice_rows(begin, end); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace

void CacheConfig::validate() const {
    require(sink_tokens >= 0, ErrorKind::config, "sink_tokens must be >= 0");
    require(buffer_tokens >= 1, ErrorKind::config, "buffer_tokens must be >= 1");
    require(first_layer_bits >= 0, ErrorKind::config, "first_layer_bits must be >= 0");
}

CompressedKVCache::CompressedKVCache(int n_layers, std::size_t kv_channels, CacheConfig cfg)
    : n_layers_(n_layers), channels_(kv_channels), cfg_(std::move(cfg)), codec_(cfg_.codec()) {
    cfg_.validate();
    require(n_layers >= 1 && kv_channels >= 1, ErrorKind::config, "cache geometry must be >= 1");
    if (cfg_.predictors) {
        require(cfg_.predictors->n_layers == n_layers && cfg_.predictors->kv_channels() == kv_channels,
                ErrorKind::incompatible, "incompatible predictor set: geometry differs from the cache");
    }
    stores_.resize(static_cast<std::size_t>(n_layers));
    for (auto& s : stores_) {
        s.sink_keys = Matrix(0, kv_channels);
        s.sink_values = Matrix(0, kv_channels);
    }
    buffer_keys_.assign(static_cast<std::size_t>(n_layers), Matrix(0, kv_channels));
    buffer_values_.assign(static_cast<std::size_t>(n_layers), Matrix(0, kv_channels));
}

void CompressedKVCache::check_layers(const std::vector<Matrix>& keys, const std::vector<Matrix>& values) const {
    require(keys.size() == static_cast<std::size_t>(n_layers_) && values.size() == keys.size(), ErrorKind::shape,
            "append needs keys and values for every layer");
    const std::size_t t = keys[0].rows();
    for (std::size_t l = 0; l < keys.size(); ++l) {
        require(keys[l].rows() == t && values[l].rows() == t, ErrorKind::shape,
                "append needs the same token count on every layer");
        require(keys[l].cols() == channels_ && values[l].cols() == channels_, ErrorKind::shape,
                "appended tokens do not match the cache's kv_channels");
    }
}

void CompressedKVCache::append(const std::vector<Matrix>& keys, const std::vector<Matrix>& values) {
    check_layers(keys, values);
    const std::size_t t = keys[0].rows();
    require(t >= 1, ErrorKind::shape, "append needs at least one token");
    std::size_t pos = 0;
    const std::size_t sinks = static_cast<std::size_t>(cfg_.sink_tokens);
    if (tokens_ < sinks) {
        const std::size_t n = std::min(t, sinks - tokens_);
        for (std::size_t l = 0; l < stores_.size(); ++l) {
            stores_[l].sink_keys.append_rows(take_rows(keys[l], 0, n));
            stores_[l].sink_values.append_rows(take_rows(values[l], 0, n));
        }
        pos = n;
        tokens_ += n;
    }
    while (pos < t) {
        const std::size_t room = cfg_.buffer_tokens - buffered();
        const std::size_t n = std::min(room, t - pos);
        for (std::size_t l = 0; l < stores_.size(); ++l) {
            buffer_keys_[l].append_rows(take_rows(keys[l], pos, pos + n));
            buffer_values_[l].append_rows(take_rows(values[l], pos, pos + n));
        }
        pos += n;
        tokens_ += n;
        if (buffered() == cfg_.buffer_tokens) {
            flush();
        }
    }
}

void CompressedKVCache::finish() {
    if (buffered() > 0) {
        flush();
    }
}

void CompressedKVCache::flush() {
    const std::size_t n = buffered();
    const std::size_t begin = tokens_ - n;
    const PredictorSet* ps = cfg_.predictors.get();
    DecodedBlock prev;
    for (int layer = 0; layer < n_layers_; ++layer) {
        const auto l = static_cast<std::size_t>(layer);
        EncodeResult enc = encode_block(layer, buffer_keys_[l], buffer_values_[l], {&prev.keys, &prev.values}, ps,
                                        codec_);
        stores_[l].segments.push_back({begin, tokens_, std::move(enc.block)});
        prev = std::move(enc.reconstruction);
        buffer_keys_[l] = Matrix(0, channels_);
        buffer_values_[l] = Matrix(0, channels_);
    }
}

DecodedBlock ReconstructionPass::layer(int layer) {
    require(layer == next_, ErrorKind::contract,
            "reconstruction pass expected layer " + std::to_string(next_) + " but got " + std::to_string(layer));
    require(layer < cache_->n_layers(), ErrorKind::contract, "reconstruction pass is already complete");
    const LayerStore& store = cache_->store(layer);
    const PredictorSet* ps = cache_->config().predictors.get();
    const LayerCodec codec = cache_->config().codec();
    std::vector<DecodedBlock> decoded;
    decoded.reserve(store.segments.size());
    for (std::size_t i = 0; i < store.segments.size(); ++i) {
        PreviousLayer prev;
        if (layer > 0) {
            prev = {&previous_[i].keys, &previous_[i].values};
        }
        decoded.push_back(decode_block(layer, store.segments[i].block, prev, ps, codec));
    }
    DecodedBlock out{store.sink_keys, store.sink_values};
    for (const auto& d : decoded) {
        out.keys.append_rows(d.keys);
        out.values.append_rows(d.values);
    }
    out.keys.append_rows(cache_->buffer_keys(layer));
    out.values.append_rows(cache_->buffer_values(layer));
    previous_ = std::move(decoded);
    ++next_;
    return out;
}

std::vector<DecodedBlock> CompressedKVCache::reconstruct_all() const {
    ReconstructionPass pass = reconstruction();
    std::vector<DecodedBlock> out;
    for (int l = 0; l < n_layers_; ++l) {
        out.push_back(pass.layer(l));
    }
    return out;
}

std::uint64_t CompressedKVCache::stored_bits() const {
    std::uint64_t bits = 0;
    for (std::size_t l = 0; l < stores_.size(); ++l) {
        for (const auto& seg : stores_[l].segments) {
            bits += seg.block.keys.stored_bits() + seg.block.values.stored_bits();
        }
        bits += 16u * (stores_[l].sink_keys.size() + stores_[l].sink_values.size());
        bits += 16u * (buffer_keys_[l].size() + buffer_values_[l].size());
    }
    return bits;
}

std::vector<std::uint8_t> CompressedKVCache::serialize() const {
    ByteWriter w;
    w.raw({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
    w.u16(kCacheVersion);
    w.u32(static_cast<std::uint32_t>(n_layers_));
    w.u32(static_cast<std::uint32_t>(channels_));
    w.u32(static_cast<std::uint32_t>(cfg_.sink_tokens));
    w.u32(static_cast<std::uint32_t>(cfg_.buffer_tokens));
    w.u8(static_cast<std::uint8_t>(cfg_.first_layer_bits));
    w.u64(cfg_.backbone.hash());
    w.u8(cfg_.predictors ? 1 : 0);
    w.u64(tokens_);
    for (std::size_t l = 0; l < stores_.size(); ++l) {
        const LayerStore& s = stores_[l];
        w.u32(static_cast<std::uint32_t>(s.sink_keys.rows()));
        w.f32s(s.sink_keys.values());
        w.f32s(s.sink_values.values());
        w.u32(static_cast<std::uint32_t>(s.segments.size()));
        for (const auto& seg : s.segments) {
            w.u64(seg.begin);
            w.u64(seg.end);
            seg.block.keys.serialize(w);
            seg.block.values.serialize(w);
        }
        w.u32(static_cast<std::uint32_t>(buffer_keys_[l].rows()));
        w.f32s(buffer_keys_[l].values());
        w.f32s(buffer_values_[l].values());
    }
    append_checksum(w);
    return std::move(w).take();
}

CompressedKVCache CompressedKVCache::deserialize(std::span<const std::uint8_t> file, CacheConfig cfg,
                                                 const std::string& context) {
    require(file.size() >= 4 && std::memcmp(file.data(), kMagic, 4) == 0, ErrorKind::format,
            context + ": bad magic (expected AQKC)");
    const auto body = verify_checksum(file, context);
    ByteReader r(body, context);
    r.raw(4);
    require(r.u16() == kCacheVersion, ErrorKind::format, context + ": unsupported version");
    const int layers = static_cast<int>(r.u32());
    const std::size_t channels = r.u32();
    cfg.sink_tokens = static_cast<int>(r.u32());
    cfg.buffer_tokens = r.u32();
    cfg.first_layer_bits = r.u8();
    require(r.u64() == cfg.backbone.hash(), ErrorKind::incompatible,
            context + ": cache was written with a different backbone");
    require((r.u8() != 0) == static_cast<bool>(cfg.predictors), ErrorKind::incompatible,
            context + ": predictor presence differs from the cache");
    CompressedKVCache cache(layers, channels, cfg);
    cache.tokens_ = r.u64();
    for (std::size_t l = 0; l < cache.stores_.size(); ++l) {
        LayerStore& s = cache.stores_[l];
        const std::size_t n_sink = r.u32();
        s.sink_keys = Matrix(n_sink, channels);
        s.sink_values = Matrix(n_sink, channels);
        r.f32s(s.sink_keys.values());
        r.f32s(s.sink_values.values());
        const std::size_t n_seg = r.u32();
        for (std::size_t i = 0; i < n_seg; ++i) {
            Segment seg;
            seg.begin = r.u64();
            seg.end = r.u64();
            seg.block.keys = QuantizedBlock::deserialize(r);
            seg.block.values = QuantizedBlock::deserialize(r);
            s.segments.push_back(std::move(seg));
        }
        const std::size_t n_buf = r.u32();
        cache.buffer_keys_[l] = Matrix(n_buf, channels);
        cache.buffer_values_[l] = Matrix(n_buf, channels);
        r.f32s(cache.buffer_keys_[l].values());
        r.f32s(cache.buffer_values_[l].values());
    }
    require(r.remaining() == 0, ErrorKind::format, context + ": trailing bytes");
    return cache;
}

nlohmann::json inspect_cache(std::span<const std::uint8_t> file, const std::string& context) {
    require(file.size() >= 4 && std::memcmp(file.data(), kMagic, 4) == 0, ErrorKind::format,
            context + ": bad magic (expected AQKC)");
    const auto body = verify_checksum(file, context);
    ByteReader r(body, context);
    r.raw(4);
    nlohmann::json j;
    j["format"] = "AQKC";
    j["version"] = r.u16();
    const std::size_t layers = r.u32();
    const std::size_t channels = r.u32();
    j["n_layers"] = layers;
    j["kv_channels"] = channels;
    j["sink_tokens"] = r.u32();
    j["buffer_tokens"] = r.u32();
    j["first_layer_bits"] = r.u8();
    j["backbone_hash"] = r.u64();
    j["has_predictors"] = r.u8() != 0;
    j["tokens"] = r.u64();
    std::uint64_t stored = 0;
    std::size_t segments = 0, buffered = 0, sinks = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t n_sink = r.u32();
        r.raw(n_sink * channels * 8);
        sinks = n_sink;
        stored += 16u * 2u * n_sink * channels;
        const std::size_t n_seg = r.u32();
        segments = n_seg;
        for (std::size_t i = 0; i < n_seg; ++i) {
            r.u64();
            r.u64();
            stored += QuantizedBlock::deserialize(r).stored_bits();
            stored += QuantizedBlock::deserialize(r).stored_bits();
        }
        const std::size_t n_buf = r.u32();
        buffered = n_buf;
        r.raw(n_buf * channels * 8);
        stored += 16u * 2u * n_buf * channels;
    }
    require(r.remaining() == 0, ErrorKind::format, context + ": trailing bytes");
    j["sink_count"] = sinks;
    j["segments_per_layer"] = segments;
    j["buffered_tokens"] = buffered;
    j["stored_bits"] = stored;
    j["valid"] = true;
    return j;
}

StorageRule storage_rule(const Backbone& backbone) {
    StorageRule rule;
    rule.code_bits = backbone.code_bits_per_value();
    rule.group_size = backbone.group_size();
    rule.overhead_bits_per_group = backbone.overhead_bits_per_group();
    rule.per_channel = backbone.scheme() == Scheme::uniform_channel;
    return rule;
}

FootprintSpec replay_footprint(const TraceMeta& meta, const ReplayConfig& cfg) {
    const LayerCodec codec = cfg.cache.codec();
    FootprintSpec spec;
    spec.layers = meta.n_layers;
    spec.tokens = static_cast<std::int64_t>(meta.n_tokens() / std::max<std::size_t>(1, meta.n_sequences()));
    spec.kv_channels = static_cast<std::int64_t>(meta.kv_channels());
    spec.backbone = storage_rule(codec.backbone);
    spec.first_layer = storage_rule(codec.first_layer);
    spec.sink_tokens = cfg.cache.sink_tokens;
    spec.buffer_tokens = 0;
    spec.predictor_params =
        cfg.cache.predictors ? predictor_parameter_count(meta.n_layers, spec.kv_channels) : 0;
    spec.predictor_amortization = cfg.predictor_amortization;
    return spec;
}

double ReplayReport::key_evr() const { return keys.target > 0 ? keys.evr() : 1.0; }
double ReplayReport::value_evr() const { return values.target > 0 ? values.evr() : 1.0; }

nlohmann::json ReplayReport::to_json() const {
    auto stats = [](const VarianceSums& s) {
        return nlohmann::json{
            {"evr", s.target > 0 ? s.evr() : 1.0}, {"mse", s.mse()}, {"max_abs_error", s.max_abs}};
    };
    nlohmann::json j;
    j["mode"] = baseline ? "baseline (no predictors)" : "predictors";
    j["baseline"] = baseline;
    j["sequences"] = sequences;
    j["tokens"] = tokens;
    j["flushes"] = flushes;
    j["keys"] = stats(keys);
    j["values"] = stats(values);
    auto& per_layer = j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
        per_layer.push_back({{"layer", l.layer}, {"keys", stats(l.keys)}, {"values", stats(l.values)}});
    }
    j["bits"] = {{"stored_bits", stored_bits},
                 {"cache_values", cache_values},
                 {"bits_per_value", bits_per_value},
                 {"predictor_bits_per_value", predictor_bits_per_value},
                 {"bits_per_value_with_predictors", bits_per_value + predictor_bits_per_value},
                 {"analytic",
                  {{"bits_per_value", footprint.bits_per_value},
                   {"code_bits", footprint.code_bits},
                   {"group_overhead_bits", footprint.group_overhead_bits},
                   {"uncompressed_bits", footprint.uncompressed_bits},
                   {"predictor_bits", footprint.predictor_bits}}}};
    return j;
}

nlohmann::json ReplayReport::timing_json() const {
    const double v = cache_values;
    return {{"encode_seconds", encode_seconds},
            {"decode_seconds", decode_seconds},
            {"encode_values_per_second", encode_seconds > 0 ? v / encode_seconds : 0.0},
            {"decode_values_per_second", decode_seconds > 0 ? v / decode_seconds : 0.0}};
}

ReplayReport replay_trace(const KVTrace& trace, const ReplayConfig& cfg, const ReplayObserver& observer,
                          std::vector<CompressedKVCache>* caches) {
    const TraceMeta& meta = trace.meta();
    trace.validate();
    require(cfg.chunk_tokens >= 1, ErrorKind::config, "chunk_tokens must be >= 1");
    if (cfg.cache.predictors) {
        cfg.cache.predictors->check_compatible(meta);
    }
    const std::size_t c = meta.kv_channels();
    const auto offsets = meta.sequence_offsets();

    ReplayReport report;
    report.baseline = !cfg.cache.predictors;
    report.sequences = meta.n_sequences();
    report.tokens = meta.n_tokens();
    std::vector<ChannelMoments> key_moments(static_cast<std::size_t>(meta.n_layers), ChannelMoments(c));
    std::vector<ChannelMoments> value_moments = key_moments;

    for (std::size_t s = 0; s < meta.n_sequences(); ++s) {
        const std::size_t r0 = offsets[s], r1 = offsets[s + 1];
        CompressedKVCache cache(meta.n_layers, c, cfg.cache);
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t b = r0; b < r1; b += cfg.chunk_tokens) {
            const std::size_t e = std::min(r1, b + cfg.chunk_tokens);
            std::vector<Matrix> ks, vs;
            for (int l = 0; l < meta.n_layers; ++l) {
                ks.push_back(trace.keys[static_cast<std::size_t>(l)].slice_rows(b, e));
                vs.push_back(trace.values[static_cast<std::size_t>(l)].slice_rows(b, e));
            }
            cache.append(ks, vs);
        }
        cache.finish();
        report.encode_seconds += seconds_since(t0);

        const auto t1 = std::chrono::steady_clock::now();
        ReconstructionPass pass = cache.reconstruction();
        for (int l = 0; l < meta.n_layers; ++l) {
            const DecodedBlock d = pass.layer(l);
            const auto li = static_cast<std::size_t>(l);
            for (std::size_t r = 0; r < d.keys.rows(); ++r) {
                key_moments[li].add_row(trace.keys[li].row(r0 + r), d.keys.row(r));
                value_moments[li].add_row(trace.values[li].row(r0 + r), d.values.row(r));
            }
            if (observer) {
                observer(s, l, d.keys, d.values);
            }
        }
        report.decode_seconds += seconds_since(t1);
        report.flushes += cache.flushes();
        report.stored_bits += static_cast<double>(cache.stored_bits());
        report.cache_values += cache.values();
        if (caches != nullptr) {
            caches->push_back(std::move(cache));
        }
    }

    for (int l = 0; l < meta.n_layers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        LayerReplay lr{l, key_moments[li].sums(), value_moments[li].sums()};
        report.keys.merge(lr.keys);
        report.values.merge(lr.values);
        report.layers.push_back(lr);
    }
    report.bits_per_value = report.stored_bits / report.cache_values;
    if (cfg.cache.predictors) {
        const double params = static_cast<double>(predictor_parameter_count(meta.n_layers, static_cast<std::int64_t>(c)));
        report.predictor_bits_per_value =
            params * 32.0 / static_cast<double>(cfg.predictor_amortization) /
            (report.cache_values / static_cast<double>(report.sequences));
    }
    report.footprint = effective_bits(replay_footprint(meta, cfg));
    return report;
}

}  // namespace aquakv
