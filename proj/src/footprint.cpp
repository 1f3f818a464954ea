#include "aquakv/footprint.hpp"

#include <algorithm>
#include <cmath>

#include "aquakv/error.hpp"

namespace aquakv {

const std::vector<ModelGeometry>& geometry_presets() {
    static const std::vector<ModelGeometry> presets = {
        {"llama3.2-3b", 28, 8, 128},
        {"llama3.1-8b", 32, 8, 128},
        {"llama3.1-70b", 80, 8, 128},
        {"qwen2.5-3b", 36, 2, 128},
        {"qwen2.5-7b", 28, 4, 128},
        {"qwen2.5-72b", 80, 8, 128},
    };
    return presets;
}

const ModelGeometry& geometry_preset(const std::string& name) {
    for (const auto& g : geometry_presets()) {
        if (g.name == name) {
            return g;
        }
    }
    std::string known;
    for (const auto& g : geometry_presets()) {
        known += (known.empty() ? "" : ", ") + g.name;
    }
    fail(ErrorKind::config, "unknown geometry '" + name + "' (known: " + known + ")");
}

namespace {

struct LayerBits {
    double codes = 0;
    double overhead = 0;
};

LayerBits layer_bits(const StorageRule& rule, double tokens, double channels) {
    LayerBits out;
    out.codes = tokens * channels * rule.code_bits;
    if (rule.group_size > 0 && rule.overhead_bits_per_group > 0 && tokens > 0) {
        const double gs = rule.group_size;
        const double groups = rule.per_channel ? channels * std::ceil(tokens / gs) : tokens * std::ceil(channels / gs);
        out.overhead = groups * rule.overhead_bits_per_group;
    }
    return out;
}

}  // namespace

Footprint effective_bits(const FootprintSpec& spec) {
    require(spec.tokens > 0, ErrorKind::config, "footprint needs at least one token");
    require(spec.layers > 0 && spec.kv_channels > 0, ErrorKind::config, "footprint needs positive geometry");
    require(spec.sink_tokens >= 0 && spec.buffer_tokens >= 0 && spec.predictor_amortization >= 1, ErrorKind::config,
            "invalid footprint overhead spec");

    const double channels = static_cast<double>(spec.kv_channels);
    const double uncompressed = static_cast<double>(std::min(spec.tokens, spec.sink_tokens + spec.buffer_tokens));
    const double compressed = static_cast<double>(spec.tokens) - uncompressed;

    Footprint fp;
    for (int layer = 0; layer < spec.layers; ++layer) {
        const StorageRule& rule = (layer == 0 && spec.first_layer) ? *spec.first_layer : spec.backbone;
        // Keys and values are stored under the same rule.
        const LayerBits b = layer_bits(rule, compressed, channels);
        fp.code_bits += 2.0 * b.codes;
        fp.group_overhead_bits += 2.0 * b.overhead;
        fp.uncompressed_bits += 2.0 * uncompressed * channels * 16.0;
    }
    fp.predictor_bits = static_cast<double>(spec.predictor_params) * spec.predictor_bits /
                        static_cast<double>(spec.predictor_amortization);
    fp.total_bits = fp.code_bits + fp.group_overhead_bits + fp.uncompressed_bits + fp.predictor_bits;
    fp.values = 2.0 * spec.layers * static_cast<double>(spec.tokens) * channels;
    fp.bits_per_value = fp.total_bits / fp.values;
    fp.bytes = fp.total_bits / 8.0;
    return fp;
}

std::int64_t predictor_parameter_count(int layers, std::int64_t kv_channels) {
    if (layers < 2) {
        return 0;
    }
    const std::int64_t c = kv_channels;
    return static_cast<std::int64_t>(layers - 1) * ((c * c + c) + (2 * c * c + c));
}

}  // namespace aquakv
