#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aquakv/matrix.hpp"
#include "aquakv/trace.hpp"

namespace aquakv {

enum class PredictorKind : std::uint8_t { key = 0, value = 1 };

// f_key: previous-layer reconstructed keys -> keys, in_dim = C.
// f_value: [previous-layer reconstructed values | current reconstructed keys]
// -> values, in_dim = 2C. The order of the two halves is part of the format.
struct LinearPredictor {
    PredictorKind kind = PredictorKind::key;
    LinearMap map;

    std::size_t in_dim() const noexcept { return map.in_dim(); }
    std::size_t out_dim() const noexcept { return map.out_dim(); }

    Matrix predict(const Matrix& x) const;
    // Value predictor on [v_prev | k] without building the concatenation.
    Matrix predict(const Matrix& v_prev, const Matrix& k) const;

    friend bool operator==(const LinearPredictor& a, const LinearPredictor& b) {
        return a.kind == b.kind && bitwise_equal(a.map.weight, b.map.weight) && a.map.bias == b.map.bias;
    }
};

struct LayerPredictors {
    LinearPredictor key;
    LinearPredictor value;

    friend bool operator==(const LayerPredictors&, const LayerPredictors&) = default;
};

struct CalibrationInfo {
    double lambda = 1e-3;
    std::uint64_t seed = 0;
    int sink_tokens = 4;
    int first_layer_bits = 4;  // 0: same as the backbone, >= 16: lossless
    RopeMode rope_mode = RopeMode::pre_rope;
    std::string backbone;       // human-readable backbone description
    std::uint64_t backbone_hash = 0;

    friend bool operator==(const CalibrationInfo&, const CalibrationInfo&) = default;
};

// Predictors for layers 1..L-1; layer 0 is quantized without prediction.
struct PredictorSet {
    int n_layers = 0;
    int n_kv_heads = 0;
    int head_dim = 0;
    CalibrationInfo info;
    std::vector<LayerPredictors> layers;  // layers[i - 1] serves layer i

    std::size_t kv_channels() const { return static_cast<std::size_t>(n_kv_heads) * head_dim; }
    const LayerPredictors& at(int layer) const;

    void validate() const;
    // Throws ErrorKind::incompatible when geometry or rope mode differ.
    void check_compatible(const TraceMeta& meta) const;

    // All-zero predictors: prediction is identically zero, so encoding reduces
    // to plain backbone quantization.
    static PredictorSet zeros(int n_layers, int n_kv_heads, int head_dim);

    friend bool operator==(const PredictorSet&, const PredictorSet&) = default;
};

inline constexpr std::uint16_t kPredictorVersion = 1;

// Binary file plus a JSON sidecar at path + ".json".
void save_predictors(const PredictorSet& ps, const std::string& path);
PredictorSet load_predictors(const std::string& path);

std::vector<std::uint8_t> serialize_predictors(const PredictorSet& ps);
PredictorSet deserialize_predictors(std::span<const std::uint8_t> file, const std::string& context);
std::string predictor_sidecar_json(const PredictorSet& ps);

// Deterministic [v_prev | k] probe input whose halves are distinguishable;
// the value predictor's output on it is stored in the file.
std::pair<Matrix, Matrix> value_canary_input(std::size_t kv_channels);

}  // namespace aquakv
