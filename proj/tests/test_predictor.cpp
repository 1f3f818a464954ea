#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "aquakv/binary_io.hpp"
#include "aquakv/codec.hpp"
#include "aquakv/error.hpp"
#include "aquakv/predictor.hpp"
#include "aquakv/quantizer.hpp"
#include "support.hpp"

using namespace aquakv;
using fixtures::random_matrix;

namespace {

PredictorSet random_set(int layers, int heads, int dim, std::uint64_t seed) {
    PredictorSet ps = PredictorSet::zeros(layers, heads, dim);
    const std::size_t c = ps.kv_channels();
    for (auto& lp : ps.layers) {
        lp.key.map.weight = random_matrix(c, c, seed++, 0.1);
        lp.key.map.bias.assign(c, 0.25f);
        lp.value.map.weight = random_matrix(2 * c, c, seed++, 0.1);
        lp.value.map.bias.assign(c, -0.5f);
    }
    ps.info.backbone = "test";
    ps.info.backbone_hash = 99;
    return ps;
}

}  // namespace

TEST(Predictor, ZeroPredictorOutputsZero) {
    const PredictorSet ps = PredictorSet::zeros(3, 2, 4);
    const Matrix x = random_matrix(5, 8, 1);
    const Matrix y = ps.at(1).key.predict(x);
    for (float v : y.values()) {
        EXPECT_EQ(v, 0.0f);
    }
    EXPECT_THROW(ps.at(0), Error);
    EXPECT_THROW(ps.at(3), Error);
}

TEST(Predictor, ValuePredictorInputOrder) {
    const PredictorSet ps = random_set(2, 1, 4, 10);
    const Matrix v = random_matrix(6, 4, 2);
    const Matrix k = random_matrix(6, 4, 3);
    const auto& f = ps.at(1).value;
    EXPECT_TRUE(bitwise_equal(f.predict(v, k), f.map.apply(hconcat(v, k))));
    EXPECT_FALSE(bitwise_equal(f.predict(v, k), f.predict(k, v)));
}

TEST(Predictor, SerializeRoundTripWithSidecar) {
    fixtures::TempDir dir("pred");
    const PredictorSet ps = random_set(4, 2, 8, 20);
    save_predictors(ps, dir.file("p.aqkv"));
    const PredictorSet back = load_predictors(dir.file("p.aqkv"));
    EXPECT_TRUE(back == ps);
    std::ifstream side(dir.file("p.aqkv.json"));
    ASSERT_TRUE(side.good());
    const auto j = nlohmann::json::parse(side);
    EXPECT_EQ(j["n_layers"], 4);
    EXPECT_EQ(serialize_predictors(back), serialize_predictors(ps));
}

TEST(Predictor, TamperedPayloadFailsChecksum) {
    const PredictorSet ps = random_set(3, 1, 4, 30);
    auto bytes = serialize_predictors(ps);
    bytes[bytes.size() / 2] ^= 0x10;
    try {
        deserialize_predictors(bytes, "p");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::format);
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
}

TEST(Predictor, GeometryGuard) {
    const PredictorSet ps = PredictorSet::zeros(28, 8, 128);
    TraceMeta meta;
    meta.n_layers = 32;
    meta.n_kv_heads = 8;
    meta.head_dim = 128;
    meta.sequence_lengths = {10};
    try {
        ps.check_compatible(meta);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::incompatible);
        EXPECT_NE(std::string(e.what()).find("incompatible predictor set"), std::string::npos);
    }
    meta.n_layers = 28;
    EXPECT_NO_THROW(ps.check_compatible(meta));
    meta.rope_mode = RopeMode::post_rope;
    EXPECT_THROW(ps.check_compatible(meta), Error);
}

TEST(Codec, ZeroPredictorsEqualPlainQuantization) {
    const PredictorSet ps = PredictorSet::zeros(3, 1, 64);
    const LayerCodec codec = LayerCodec::make(Backbone::vq(VQConfig::preset(2)), 0);
    const Matrix k = random_matrix(10, 64, 4), v = random_matrix(10, 64, 5);
    const Matrix kp = random_matrix(10, 64, 6), vp = random_matrix(10, 64, 7);
    const EncodeResult r = encode_block(1, k, v, {&kp, &vp}, &ps, codec);
    EXPECT_EQ(r.block.keys, codec.backbone.quantize(k));
    EXPECT_EQ(r.block.values, codec.backbone.quantize(v));
}

TEST(Codec, PerfectPredictorsReconstructExactly) {
    const std::size_t c = 64;
    PredictorSet ps = PredictorSet::zeros(2, 1, static_cast<int>(c));
    const Matrix a = random_matrix(c, c, 8, 0.2);
    ps.layers[0].key.map.weight = a;
    // value = previous value (identity on the first half)
    Matrix wv(2 * c, c);
    for (std::size_t i = 0; i < c; ++i) {
        wv(i, i) = 1.0f;
    }
    ps.layers[0].value.map.weight = wv;
    const LayerCodec codec = LayerCodec::make(Backbone::vq(VQConfig::preset(2)), 16);
    const Matrix k0 = random_matrix(12, c, 9), v0 = random_matrix(12, c, 10);
    const Matrix k1 = ps.layers[0].key.predict(k0);
    const Matrix v1 = v0;
    const EncodeResult r = encode_block(1, k1, v1, {&k0, &v0}, &ps, codec);
    EXPECT_TRUE(bitwise_equal(r.reconstruction.keys, k1));
    EXPECT_TRUE(bitwise_equal(r.reconstruction.values, v1));
    const DecodedBlock d = decode_block(1, r.block, {&k0, &v0}, &ps, codec);
    EXPECT_TRUE(bitwise_equal(d.keys, r.reconstruction.keys));
}

TEST(Codec, MissingPreviousLayerIsContractError) {
    const PredictorSet ps = PredictorSet::zeros(2, 1, 8);
    const LayerCodec codec = LayerCodec::make(Backbone::raw(), 0);
    const Matrix k = random_matrix(2, 8, 1);
    try {
        encode_block(1, k, k, {}, &ps, codec);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::contract);
    }
}

TEST(Codec, FirstLayerBits) {
    const auto vq = Backbone::vq(VQConfig::preset(2));
    EXPECT_EQ(LayerCodec::make(vq, 0).first_layer.bits(), 2);
    EXPECT_EQ(LayerCodec::make(vq, 4).first_layer.bits(), 4);
    EXPECT_EQ(LayerCodec::make(vq, 16).first_layer.kind(), "none");
    EXPECT_EQ(LayerCodec::make(vq, 4).for_layer(1).bits(), 2);
}
