#include "aquakv/predictor.hpp"

#include <cstring>

#include <json.hpp>

#include "aquakv/binary_io.hpp"

namespace aquakv {

namespace {
constexpr char kMagic[4] = {'A', 'Q', 'K', 'V'};
constexpr std::uint8_t kPayloadF32 = 0;

void write_map(ByteWriter& w, const LinearMap& m) {
    w.f32s(m.weight.values());
    w.f32s(m.bias);
}

LinearMap read_map(ByteReader& r, std::size_t in_dim, std::size_t out_dim) {
    LinearMap m{Matrix(in_dim, out_dim), std::vector<float>(out_dim)};
    r.f32s(m.weight.values());
    r.f32s(m.bias);
    return m;
}
}  // namespace

Matrix LinearPredictor::predict(const Matrix& x) const { return map.apply(x); }

Matrix LinearPredictor::predict(const Matrix& v_prev, const Matrix& k) const {
    require(kind == PredictorKind::value, ErrorKind::contract, "two-input predict is only defined for values");
    return map.apply(v_prev, k);
}

const LayerPredictors& PredictorSet::at(int layer) const {
    require(layer >= 1 && layer < n_layers, ErrorKind::shape,
            "no predictors for layer " + std::to_string(layer));
    return layers[static_cast<std::size_t>(layer - 1)];
}

void PredictorSet::validate() const {
    require(n_layers >= 1 && n_kv_heads >= 1 && head_dim >= 1, ErrorKind::format,
            "predictor geometry must be >= 1");
    require(layers.size() == static_cast<std::size_t>(n_layers - 1), ErrorKind::format,
            "predictor set must hold one pair per layer after the first");
    const std::size_t c = kv_channels();
    for (const auto& lp : layers) {
        require(lp.key.kind == PredictorKind::key && lp.value.kind == PredictorKind::value, ErrorKind::format,
                "predictor kinds out of order");
        require(lp.key.in_dim() == c && lp.key.out_dim() == c && lp.key.map.bias.size() == c, ErrorKind::format,
                "key predictor must map C -> C");
        require(lp.value.in_dim() == 2 * c && lp.value.out_dim() == c && lp.value.map.bias.size() == c,
                ErrorKind::format, "value predictor must map 2C -> C");
    }
}

void PredictorSet::check_compatible(const TraceMeta& meta) const {
    auto geometry = [](int l, int h, int d) {
        return std::to_string(l) + " layers x " + std::to_string(h) + " kv heads x " + std::to_string(d);
    };
    if (meta.n_layers != n_layers || meta.n_kv_heads != n_kv_heads || meta.head_dim != head_dim) {
        fail(ErrorKind::incompatible, "incompatible predictor set: built for " +
                                          geometry(n_layers, n_kv_heads, head_dim) + ", trace is " +
                                          geometry(meta.n_layers, meta.n_kv_heads, meta.head_dim));
    }
    if (meta.rope_mode != info.rope_mode) {
        fail(ErrorKind::incompatible, "incompatible predictor set: calibrated on " + to_string(info.rope_mode) +
                                          " keys, trace stores " + to_string(meta.rope_mode));
    }
}

PredictorSet PredictorSet::zeros(int n_layers, int n_kv_heads, int head_dim) {
    PredictorSet ps;
    ps.n_layers = n_layers;
    ps.n_kv_heads = n_kv_heads;
    ps.head_dim = head_dim;
    const std::size_t c = ps.kv_channels();
    for (int l = 1; l < n_layers; ++l) {
        ps.layers.push_back({{PredictorKind::key, LinearMap::zeros(c, c)},
                             {PredictorKind::value, LinearMap::zeros(2 * c, c)}});
    }
    return ps;
}

std::pair<Matrix, Matrix> value_canary_input(std::size_t c) {
    Matrix head(1, c), tail(1, c);
    for (std::size_t j = 0; j < c; ++j) {
        head(0, j) = 1.0f + static_cast<float>(j) / static_cast<float>(c);
        tail(0, j) = -0.5f * static_cast<float>(j + 1);
    }
    return {head, tail};
}

std::vector<std::uint8_t> serialize_predictors(const PredictorSet& ps) {
    ps.validate();
    ByteWriter w;
    w.raw({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
    w.u16(kPredictorVersion);
    w.u32(static_cast<std::uint32_t>(ps.n_layers));
    w.u32(static_cast<std::uint32_t>(ps.n_kv_heads));
    w.u32(static_cast<std::uint32_t>(ps.head_dim));
    w.u8(static_cast<std::uint8_t>(ps.info.rope_mode));
    w.u8(kPayloadF32);
    w.f64(ps.info.lambda);
    w.u64(ps.info.seed);
    w.u32(static_cast<std::uint32_t>(ps.info.sink_tokens));
    w.u8(static_cast<std::uint8_t>(ps.info.first_layer_bits));
    w.u64(ps.info.backbone_hash);
    w.u32(static_cast<std::uint32_t>(ps.info.backbone.size()));
    w.text(ps.info.backbone);
    const auto [head, tail] = value_canary_input(ps.kv_channels());
    for (const auto& lp : ps.layers) {
        write_map(w, lp.key.map);
        write_map(w, lp.value.map);
        w.f32s(lp.value.predict(head, tail).values());
    }
    append_checksum(w);
    return std::move(w).take();
}

PredictorSet deserialize_predictors(std::span<const std::uint8_t> file, const std::string& context) {
    require(file.size() >= 4 && std::memcmp(file.data(), kMagic, 4) == 0, ErrorKind::format,
            context + ": bad magic (expected AQKV)");
    const auto body = verify_checksum(file, context);
    ByteReader r(body, context);
    r.raw(4);
    const auto version = r.u16();
    require(version == kPredictorVersion, ErrorKind::format,
            context + ": unsupported version " + std::to_string(version));
    PredictorSet ps;
    ps.n_layers = static_cast<int>(r.u32());
    ps.n_kv_heads = static_cast<int>(r.u32());
    ps.head_dim = static_cast<int>(r.u32());
    const auto rope = r.u8();
    require(rope <= 1, ErrorKind::format, context + ": bad rope mode byte");
    ps.info.rope_mode = static_cast<RopeMode>(rope);
    require(r.u8() == kPayloadF32, ErrorKind::format, context + ": unsupported predictor payload scheme");
    ps.info.lambda = r.f64();
    ps.info.seed = r.u64();
    ps.info.sink_tokens = static_cast<int>(r.u32());
    ps.info.first_layer_bits = r.u8();
    ps.info.backbone_hash = r.u64();
    ps.info.backbone = r.text(r.u32());
    require(ps.n_layers >= 1 && ps.n_kv_heads >= 1 && ps.head_dim >= 1, ErrorKind::format,
            context + ": bad geometry");
    const std::size_t c = ps.kv_channels();
    const auto [head, tail] = value_canary_input(c);
    for (int l = 1; l < ps.n_layers; ++l) {
        LayerPredictors lp{{PredictorKind::key, read_map(r, c, c)}, {PredictorKind::value, read_map(r, 2 * c, c)}};
        Matrix canary(1, c);
        r.f32s(canary.values());
        require(bitwise_equal(lp.value.predict(head, tail), canary), ErrorKind::format,
                context + ": value predictor canary mismatch at layer " + std::to_string(l) +
                    " (input ordering differs)");
        ps.layers.push_back(std::move(lp));
    }
    require(r.remaining() == 0, ErrorKind::format, context + ": trailing bytes");
    ps.validate();
    return ps;
}

std::string predictor_sidecar_json(const PredictorSet& ps) {
    nlohmann::json j;
    j["format"] = "AQKV";
    j["version"] = kPredictorVersion;
    j["n_layers"] = ps.n_layers;
    j["n_kv_heads"] = ps.n_kv_heads;
    j["head_dim"] = ps.head_dim;
    j["kv_channels"] = ps.kv_channels();
    j["predictor_pairs"] = ps.layers.size();
    j["payload"] = "f32";
    j["value_input_order"] = {"v_prev", "k_current"};
    j["lambda"] = ps.info.lambda;
    j["seed"] = ps.info.seed;
    j["sink_tokens"] = ps.info.sink_tokens;
    j["first_layer_bits"] = ps.info.first_layer_bits;
    j["rope_mode"] = to_string(ps.info.rope_mode);
    j["backbone"] = ps.info.backbone;
    j["backbone_hash"] = ps.info.backbone_hash;
    return j.dump(2);
}

void save_predictors(const PredictorSet& ps, const std::string& path) {
    write_file(path, serialize_predictors(ps));
    const std::string sidecar = predictor_sidecar_json(ps) + "\n";
    write_file(path + ".json",
               std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(sidecar.data()), sidecar.size()));
}

PredictorSet load_predictors(const std::string& path) {
    const auto bytes = read_file(path);
    return deserialize_predictors(bytes, "predictor file '" + path + "'");
}

}  // namespace aquakv
