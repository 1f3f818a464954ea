#include "aquakv/codec.hpp"

namespace aquakv {

namespace {

Matrix add(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), a.cols());
    const auto x = a.values();
    const auto y = b.values();
    auto z = out.values();
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = x[i] + y[i];
    }
    return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), a.cols());
    const auto x = a.values();
    const auto y = b.values();
    auto z = out.values();
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = x[i] - y[i];
    }
    return out;
}

void check_inputs(int layer, std::size_t rows, std::size_t cols, PreviousLayer prev, const PredictorSet* ps) {
    require(layer >= 0, ErrorKind::shape, "negative layer index");
    if (ps != nullptr) {
        require(layer < ps->n_layers, ErrorKind::shape, "layer index beyond the predictor set");
        require(cols == ps->kv_channels(), ErrorKind::shape, "block width does not match the predictor geometry");
    }
    if (layer == 0 || ps == nullptr) {
        return;
    }
    require(prev.keys != nullptr && prev.values != nullptr, ErrorKind::contract,
            "layer " + std::to_string(layer) + " needs the previous layer's reconstruction");
    require(prev.keys->rows() == rows && prev.values->rows() == rows && prev.keys->cols() == cols &&
                prev.values->cols() == cols,
            ErrorKind::shape, "previous-layer reconstruction does not match the block shape");
}

}  // namespace

LayerCodec LayerCodec::make(const Backbone& backbone, int first_layer_bits) {
    require(first_layer_bits >= 0, ErrorKind::config, "first_layer_bits must be >= 0");
    if (first_layer_bits == 0) {
        return {backbone, backbone};
    }
    if (first_layer_bits >= 16 || backbone.scheme() == Scheme::raw) {
        return {backbone, Backbone::raw()};
    }
    return {backbone, backbone.with_bits(first_layer_bits)};
}

EncodedTensor encode_residual(const Backbone& q, const Matrix& target, const Matrix* prediction) {
    if (prediction == nullptr) {
        EncodedTensor out{q.quantize(target), {}};
        out.reconstruction = q.dequantize(out.block);
        return out;
    }
    require(prediction->rows() == target.rows() && prediction->cols() == target.cols(), ErrorKind::shape,
            "prediction does not match the target shape");
    EncodedTensor out{q.quantize(subtract(target, *prediction)), {}};
    out.reconstruction = decode_residual(q, out.block, prediction);
    return out;
}

Matrix decode_residual(const Backbone& q, const QuantizedBlock& block, const Matrix* prediction) {
    Matrix deq = q.dequantize(block);
    if (prediction == nullptr) {
        return deq;
    }
    require(prediction->rows() == deq.rows() && prediction->cols() == deq.cols(), ErrorKind::shape,
            "prediction does not match the block shape");
    return add(deq, *prediction);
}

EncodeResult encode_block(int layer, const Matrix& keys, const Matrix& values, PreviousLayer prev,
                          const PredictorSet* predictors, const LayerCodec& codec) {
    require(keys.rows() == values.rows() && keys.cols() == values.cols(), ErrorKind::shape,
            "key and value blocks differ in shape");
    check_inputs(layer, keys.rows(), keys.cols(), prev, predictors);
    const Backbone& q = codec.for_layer(layer);
    EncodeResult out;
    if (layer == 0 || predictors == nullptr) {
        auto k = encode_residual(q, keys, nullptr);
        auto v = encode_residual(q, values, nullptr);
        out.block = {std::move(k.block), std::move(v.block)};
        out.reconstruction = {std::move(k.reconstruction), std::move(v.reconstruction)};
        return out;
    }
    const LayerPredictors& lp = predictors->at(layer);
    const Matrix k_pred = lp.key.predict(*prev.keys);
    auto k = encode_residual(q, keys, &k_pred);
    const Matrix v_pred = lp.value.predict(*prev.values, k.reconstruction);
    auto v = encode_residual(q, values, &v_pred);
    out.block = {std::move(k.block), std::move(v.block)};
    out.reconstruction = {std::move(k.reconstruction), std::move(v.reconstruction)};
    return out;
}

DecodedBlock decode_block(int layer, const EncodedBlock& block, PreviousLayer prev, const PredictorSet* predictors,
                          const LayerCodec& codec) {
    check_inputs(layer, block.keys.rows, block.keys.cols, prev, predictors);
    const Backbone& q = codec.for_layer(layer);
    if (layer == 0 || predictors == nullptr) {
        return {decode_residual(q, block.keys, nullptr), decode_residual(q, block.values, nullptr)};
    }
    const LayerPredictors& lp = predictors->at(layer);
    const Matrix k_pred = lp.key.predict(*prev.keys);
    DecodedBlock out;
    out.keys = decode_residual(q, block.keys, &k_pred);
    const Matrix v_pred = lp.value.predict(*prev.values, out.keys);
    out.values = decode_residual(q, block.values, &v_pred);
    return out;
}

}  // namespace aquakv
