#pragma once

#include "aquakv/predictor.hpp"
#include "aquakv/quantizer.hpp"

namespace aquakv {

// The quantizers applied per layer: layer 0 uses `first_layer`, every later
// layer quantizes its predictor residual with `backbone`.
struct LayerCodec {
    Backbone backbone;
    Backbone first_layer;

    // first_layer_bits: 0 reuses the backbone, >= 16 keeps layer 0 lossless,
    // anything else is the backbone family at that width.
    static LayerCodec make(const Backbone& backbone, int first_layer_bits);

    const Backbone& for_layer(int layer) const { return layer == 0 ? first_layer : backbone; }
};

struct EncodedBlock {
    QuantizedBlock keys;
    QuantizedBlock values;

    friend bool operator==(const EncodedBlock&, const EncodedBlock&) = default;
};

struct DecodedBlock {
    Matrix keys;
    Matrix values;
};

// Reconstructions for the same tokens one layer down; required for layer >= 1.
struct PreviousLayer {
    const Matrix* keys = nullptr;
    const Matrix* values = nullptr;
};

struct EncodedTensor {
    QuantizedBlock block;
    Matrix reconstruction;
};

// Q(target - prediction) and its reconstruction Q^-1(.) + prediction. A null
// prediction means zero. encode_block / decode_block are built from these two,
// so any caller that uses them reproduces the cache's arithmetic exactly.
EncodedTensor encode_residual(const Backbone& q, const Matrix& target, const Matrix* prediction);
Matrix decode_residual(const Backbone& q, const QuantizedBlock& block, const Matrix* prediction);

struct EncodeResult {
    EncodedBlock block;
    DecodedBlock reconstruction;  // identical to decode_block(block, ...)
};

// Layer 0: plain quantization. Layer i >= 1:
//   K_q = Q(K - f_key(K_prev)),          K_hat = Q^-1(K_q) + f_key(K_prev)
//   V_q = Q(V - f_value([V_prev; K_hat])), V_hat = Q^-1(V_q) + f_value(...)
// `predictors` may be null, meaning zero predictions.
EncodeResult encode_block(int layer, const Matrix& keys, const Matrix& values, PreviousLayer prev,
                          const PredictorSet* predictors, const LayerCodec& codec);

DecodedBlock decode_block(int layer, const EncodedBlock& block, PreviousLayer prev, const PredictorSet* predictors,
                          const LayerCodec& codec);

}  // namespace aquakv
