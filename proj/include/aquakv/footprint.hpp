#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace aquakv {

struct ModelGeometry {
    std::string name;
    int layers = 0;
    int kv_heads = 0;
    int head_dim = 0;

    std::int64_t kv_channels() const { return static_cast<std::int64_t>(kv_heads) * head_dim; }
};

const std::vector<ModelGeometry>& geometry_presets();
// Throws ErrorKind::config listing the known names when absent.
const ModelGeometry& geometry_preset(const std::string& name);

// Storage rule of one backbone for accounting purposes.
struct StorageRule {
    double code_bits = 16.0;        // bits per quantized value
    int group_size = 0;             // 0: no per-group overhead
    int overhead_bits_per_group = 0;
    bool per_channel = false;       // groups run along tokens instead of channels
};

struct FootprintSpec {
    int layers = 0;
    std::int64_t tokens = 0;
    std::int64_t kv_channels = 0;
    StorageRule backbone;
    // Layer 0 rule when it differs from the backbone (e.g. 4-bit first layer).
    std::optional<StorageRule> first_layer;
    std::int64_t sink_tokens = 0;    // stored at 16 bits
    std::int64_t buffer_tokens = 0;  // stored at 16 bits
    std::int64_t predictor_params = 0;
    int predictor_bits = 32;
    // Number of sequences sharing one predictor set; predictor storage is
    // divided by this when computing per-value cost.
    std::int64_t predictor_amortization = 1;
};

struct Footprint {
    double code_bits = 0;
    double group_overhead_bits = 0;
    double uncompressed_bits = 0;  // sinks + buffer
    double predictor_bits = 0;
    double total_bits = 0;
    double values = 0;             // 2 x layers x tokens x kv_channels
    double bits_per_value = 0;
    double bytes = 0;

    double gigabytes() const { return bytes / 1e9; }
};

// Stored bits divided by cache values; throws ErrorKind::config for zero tokens.
Footprint effective_bits(const FootprintSpec& spec);

// Per-layer predictor parameter count: key map C x C + C, value map 2C x C + C.
std::int64_t predictor_parameter_count(int layers, std::int64_t kv_channels);

}  // namespace aquakv
