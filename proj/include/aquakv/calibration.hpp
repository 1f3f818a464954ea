#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aquakv/codec.hpp"
#include "aquakv/linalg.hpp"
#include "aquakv/predictor.hpp"
#include "aquakv/trace.hpp"

namespace aquakv {

struct CalibConfig {
    Backbone backbone = Backbone::vq(VQConfig::preset(2));
    double lambda = kDefaultRidgeLambda;
    int sink_tokens = 4;
    int first_layer_bits = 4;
    RopeMode rope_mode = RopeMode::pre_rope;
    // Sequences [0, train_sequences) train, the following holdout_sequences
    // evaluate. Zero for both picks 7/8 train and the rest holdout.
    std::size_t train_sequences = 0;
    std::size_t holdout_sequences = 0;
    std::uint64_t seed = 0;
    // Above this many training rows the normal equations use a seeded uniform
    // subsample of rows.
    std::size_t max_train_rows = std::size_t{1} << 22;
    std::size_t block_rows = 1024;

    void validate() const;
    LayerCodec codec() const { return LayerCodec::make(backbone, first_layer_bits); }
};

struct SequenceSplit {
    std::size_t train_begin = 0, train_end = 0;
    std::size_t holdout_begin = 0, holdout_end = 0;
};

SequenceSplit resolve_split(const TraceMeta& meta, const CalibConfig& cfg);

// Rows at positions < sink_tokens within their sequence.
std::vector<std::uint8_t> sink_mask(const TraceMeta& meta, std::size_t seq_begin, std::size_t seq_end,
                                    int sink_tokens);

// Receives each layer's reconstructions (in layer order) over the rows being
// processed.
using ReconstructionObserver = std::function<void(int layer, const Matrix& keys, const Matrix& values)>;

// Sequential calibration: layer by layer, fit f_key on reconstructed previous
// keys, quantize its residual, fit f_value on [reconstructed previous values |
// reconstructed keys], quantize its residual, and carry the reconstructions
// forward. Only the current and previous layer are held in memory.
PredictorSet calibrate(const LayerSource& trace, const CalibConfig& cfg, const ReconstructionObserver& observer = {});

struct LayerEval {
    int layer = 0;
    // Predictor-only explained variance (NaN for layer 0).
    double key_predictor_evr = 0, value_predictor_evr = 0;
    // Explained variance of the final reconstruction, and of the quantized
    // residual relative to the predictor residual.
    double key_evr = 0, value_evr = 0;
    double key_residual_evr = 0, value_residual_evr = 0;
    double key_mse = 0, value_mse = 0;
    double key_max_abs = 0, value_max_abs = 0;
    // Same backbone, no predictors.
    double baseline_key_evr = 0, baseline_value_evr = 0;
    double baseline_key_mse = 0, baseline_value_mse = 0;

    // (key + value) squared error with predictors over the baseline's.
    double error_ratio() const;
};

struct RolloutReport {
    std::vector<LayerEval> layers;
    VarianceSums keys, values;                    // pooled over all layers, non-sink rows
    VarianceSums baseline_keys, baseline_values;  // same, no predictors
    VarianceSums key_predictions, value_predictions;  // layers >= 1
    std::size_t rows = 0;
    std::size_t sink_rows = 0;

    double predictor_evr() const;     // pooled over keys and values, layers >= 1
    double mean_error_ratio() const;  // mean over layers >= 1
    nlohmann::json to_json() const;
};

// Runs the encoder over sequences [seq_begin, seq_end) of `trace` with the
// given predictors and with zero predictors, reporting per-layer statistics
// over non-sink rows.
RolloutReport evaluate_rollout(const LayerSource& trace, std::size_t seq_begin, std::size_t seq_end,
                               const PredictorSet& predictors, const CalibConfig& cfg);

// evaluate_rollout over the holdout split.
RolloutReport holdout_report(const PredictorSet& predictors, const LayerSource& trace, const CalibConfig& cfg);

nlohmann::json calib_config_json(const CalibConfig& cfg);

}  // namespace aquakv
