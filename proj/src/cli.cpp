#include "aquakv/cli.hpp"

#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "aquakv/binary_io.hpp"
#include "aquakv/calibration.hpp"
#include "aquakv/footprint.hpp"
#include "aquakv/kvcache.hpp"
#include "aquakv/predictor.hpp"
#include "aquakv/probes.hpp"
#include "aquakv/pruning.hpp"
#include "aquakv/synth.hpp"
#include "aquakv/trace.hpp"

namespace aquakv {

namespace {

using nlohmann::json;

const char* const kSubcommands[] = {"synth", "probe", "calibrate", "replay", "bits", "inspect"};

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:
            return kExitConfig;
        case ErrorKind::io:
            return kExitIo;
        case ErrorKind::format:
            return kExitFormat;
        case ErrorKind::incompatible:
            return kExitIncompatible;
        case ErrorKind::singular:
            return kExitSingular;
        default:
            return kExitOther;
    }
}

void error_line(std::ostream& err, const std::string& kind, const std::string& message, int code) {
    err << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << "\n";
}

// Turns a JSON config object into flag tokens placed before the user's own
// arguments, so explicit flags (last one wins) override the file.
std::vector<std::string> config_tokens(const std::string& path) {
    const auto bytes = read_file(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        fail(ErrorKind::config, "config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (j.is_object() && j.contains("config") && j["config"].is_object()) {
        j = j["config"];
    }
    require(j.is_object(), ErrorKind::config, "config file '" + path + "' must hold a JSON object");
    std::vector<std::string> tokens;
    for (const auto& [key, value] : j.items()) {
        if (value.is_null()) {
            continue;
        }
        if (value.is_boolean()) {
            tokens.push_back("--" + key + "=" + (value.get<bool>() ? "true" : "false"));
        } else if (value.is_string()) {
            tokens.push_back("--" + key);
            tokens.push_back(value.get<std::string>());
        } else if (value.is_number()) {
            tokens.push_back("--" + key);
            tokens.push_back(value.dump());
        } else {
            fail(ErrorKind::config, "config key '" + key + "' must be a string, number or boolean");
        }
    }
    return tokens;
}

void emit(const json& report, const std::string& path, std::ostream& out) {
    const std::string text = report.dump(2) + "\n";
    if (path.empty()) {
        out << text;
    } else {
        write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    }
}

json envelope(const std::string& command, json config, json result) {
    return {{"schema_version", kReportSchemaVersion},
            {"command", command},
            {"config", std::move(config)},
            {"result", std::move(result)}};
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

QuantAxis parse_axis(const std::string& s) {
    if (s == "token") {
        return QuantAxis::per_token;
    }
    if (s == "channel") {
        return QuantAxis::per_channel;
    }
    fail(ErrorKind::config, "unknown axis '" + s + "' (expected token or channel)");
}

struct BackboneFlags {
    std::string kind = "vq";
    int bits = 2;
    int group_size = 0;
    int vq_dim = 2;
    std::string axis = "token";

    void add(CLI::App& app) {
        app.add_option("--backbone", kind, "Backbone quantizer: uniform, vq or none")
            ->check(CLI::IsMember({"uniform", "vq", "none"}));
        app.add_option("--bits", bits, "Bits per value (>= 16 stores losslessly)")->check(CLI::Range(1, 32));
        app.add_option("--group-size", group_size, "Quantization group size (0: backbone default)");
        app.add_option("--vq-dim", vq_dim, "VQ sub-vector dimension")->check(CLI::IsMember({1, 2, 4}));
        app.add_option("--axis", axis, "Uniform quantization axis: token or channel")
            ->check(CLI::IsMember({"token", "channel"}));
    }
    Backbone make() const { return Backbone::from_options(kind, bits, group_size, vq_dim, parse_axis(axis)); }
    void to_json(json& j) const {
        j["backbone"] = kind;
        j["bits"] = bits;
        j["group-size"] = group_size;
        j["vq-dim"] = vq_dim;
        j["axis"] = axis;
    }
};

// ---- synth ----------------------------------------------------------------

struct SynthCmd {
    SynthConfig cfg;
    std::string rope = "pre";
    std::string out_path;
    std::string report_path;

    void add(CLI::App& app) {
        app.add_option("--layers", cfg.layers, "Number of layers");
        app.add_option("--kv-heads", cfg.kv_heads, "Key/value heads per layer");
        app.add_option("--head-dim", cfg.head_dim, "Channels per head");
        app.add_option("--hidden-dim", cfg.hidden_dim, "Residual stream width (0: kv channels)");
        app.add_option("--tokens", cfg.tokens, "Tokens per sequence");
        app.add_option("--seqs", cfg.sequences, "Number of sequences");
        app.add_option("--alpha", cfg.alpha, "Residual step size");
        app.add_option("--noise", cfg.noise, "Observation noise standard deviation");
        app.add_option("--drift", cfg.drift, "Hidden-state innovation per layer");
        app.add_option("--value-nonlinearity", cfg.value_nonlinearity, "Extra nonlinearity on values");
        app.add_option("--weight-gain", cfg.weight_gain, "Gain of the residual maps");
        app.add_option("--token-correlation", cfg.token_correlation, "AR(1) coefficient along tokens");
        app.add_option("--channel-spread", cfg.channel_spread, "Log-normal spread of key channel scales");
        app.add_option("--sinks", cfg.sink_tokens, "Leading tokens with outsized hidden states");
        app.add_option("--sink-magnitude", cfg.sink_magnitude, "Scale of the sink tokens");
        app.add_flag("--stats", cfg.attention_stats, "Also write synthetic attention statistics");
        app.add_option("--rope", rope, "Store keys pre or post rope")->check(CLI::IsMember({"pre", "post"}));
        app.add_option("--rope-theta", cfg.rope_theta, "Rope base");
        app.add_option("--seed", cfg.seed, "Generator seed");
        app.add_option("--out", out_path, "Output trace path")->required();
        app.add_option("--report", report_path, "Write the report here instead of stdout");
    }

    json config() const {
        return {{"layers", cfg.layers},
                {"kv-heads", cfg.kv_heads},
                {"head-dim", cfg.head_dim},
                {"hidden-dim", cfg.hidden_dim},
                {"tokens", cfg.tokens},
                {"seqs", cfg.sequences},
                {"alpha", cfg.alpha},
                {"noise", cfg.noise},
                {"drift", cfg.drift},
                {"value-nonlinearity", cfg.value_nonlinearity},
                {"weight-gain", cfg.weight_gain},
                {"token-correlation", cfg.token_correlation},
                {"channel-spread", cfg.channel_spread},
                {"sinks", cfg.sink_tokens},
                {"sink-magnitude", cfg.sink_magnitude},
                {"stats", cfg.attention_stats},
                {"rope", rope},
                {"rope-theta", cfg.rope_theta},
                {"seed", cfg.seed},
                {"out", out_path}};
    }

    json run() {
        cfg.rope = parse_rope_mode(rope);
        const auto t0 = std::chrono::steady_clock::now();
        const KVTrace trace = synth_trace(cfg);
        write_trace(trace, out_path);
        const double seconds = elapsed(t0);
        TraceReader reader(out_path);
        json result = json::parse(trace.info.to_json());
        result["path"] = out_path;
        result["file_size"] = reader.file_size();
        result["checksum"] = reader.checksum();
        json report = envelope("synth", config(), result);
        report["timing"] = {{"seconds", seconds}};
        return report;
    }
};

// ---- probe ----------------------------------------------------------------

struct ProbeCmd {
    std::string trace_path;
    std::string sources = "prevL1,prevL2,prevL3,prevT1,crossrole";
    std::string targets = "keys,values";
    std::string aggregation = "pooled";
    ProbeConfig cfg;
    std::string out_path;
    std::string csv_path;

    void add(CLI::App& app) {
        app.add_option("--trace", trace_path, "Input KVT1 trace")->required();
        app.add_option("--sources", sources, "Comma-separated sources: prevL<k>, prevT<k>, crossrole, self, a+b");
        app.add_option("--targets", targets, "Comma-separated targets: keys, values");
        app.add_option("--lambda", cfg.lambda, "Ridge regularization");
        app.add_option("--sinks", cfg.sinks, "Leading positions per sequence left out");
        app.add_option("--train-seqs", cfg.train_sequences, "Training sequences (0: 7/8)");
        app.add_option("--holdout-seqs", cfg.holdout_sequences, "Holdout sequences (0: rest)");
        app.add_option("--aggregation", aggregation, "EVR aggregation: pooled or channel_mean")
            ->check(CLI::IsMember({"pooled", "channel_mean"}));
        app.add_option("--out", out_path, "Write the report here instead of stdout");
        app.add_option("--csv", csv_path, "Also write per-layer plot data as CSV");
    }

    json config() const {
        return {{"trace", trace_path},
                {"sources", sources},
                {"targets", targets},
                {"lambda", cfg.lambda},
                {"sinks", cfg.sinks},
                {"train-seqs", cfg.train_sequences},
                {"holdout-seqs", cfg.holdout_sequences},
                {"aggregation", aggregation}};
    }

    json run() {
        cfg.aggregation = aggregation == "pooled" ? EvrAggregation::pooled : EvrAggregation::channel_mean;
        std::vector<ProbeRole> roles;
        std::stringstream ss(targets);
        std::string part;
        while (std::getline(ss, part, ',')) {
            if (part == "keys") {
                roles.push_back(ProbeRole::keys);
            } else if (part == "values") {
                roles.push_back(ProbeRole::values);
            } else if (!part.empty()) {
                fail(ErrorKind::config, "unknown probe target '" + part + "' (expected keys or values)");
            }
        }
        const auto parsed = parse_probe_sources(sources);
        const auto t0 = std::chrono::steady_clock::now();
        TraceReader reader(trace_path);
        const ProbeReport report = probe_matrix(reader, roles, parsed, cfg);
        if (!csv_path.empty()) {
            const std::string csv = report.to_csv();
            write_file(csv_path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
        }
        json out = envelope("probe", config(), report.to_json());
        out["timing"] = {{"seconds", elapsed(t0)}};
        return out;
    }
};

// ---- calibrate ------------------------------------------------------------

struct CalibrateCmd {
    std::string trace_path;
    std::string out_path;
    std::string report_path;
    BackboneFlags backbone;
    CalibConfig cfg;
    std::string rope = "pre";

    void add(CLI::App& app) {
        app.add_option("--trace", trace_path, "Input KVT1 trace")->required();
        app.add_option("--out", out_path, "Output predictor file")->required();
        backbone.add(app);
        app.add_option("--sinks", cfg.sink_tokens, "Leading tokens per sequence kept exact");
        app.add_option("--first-layer-bits", cfg.first_layer_bits, "Layer 0 bits (0: backbone, >= 16: exact)");
        app.add_option("--lambda", cfg.lambda, "Ridge regularization");
        app.add_option("--rope", rope, "Key mode the trace must store: pre or post")
            ->check(CLI::IsMember({"pre", "post"}));
        app.add_option("--train-seqs", cfg.train_sequences, "Training sequences (0: 7/8)");
        app.add_option("--holdout-seqs", cfg.holdout_sequences, "Holdout sequences (0: rest)");
        app.add_option("--seed", cfg.seed, "Seed for row subsampling");
        app.add_option("--max-train-rows", cfg.max_train_rows, "Subsample above this many rows");
        app.add_option("--report", report_path, "Write the report here instead of stdout");
    }

    json config() const {
        json j{{"trace", trace_path},
               {"out", out_path},
               {"sinks", cfg.sink_tokens},
               {"first-layer-bits", cfg.first_layer_bits},
               {"lambda", cfg.lambda},
               {"rope", rope},
               {"train-seqs", cfg.train_sequences},
               {"holdout-seqs", cfg.holdout_sequences},
               {"seed", cfg.seed},
               {"max-train-rows", cfg.max_train_rows}};
        backbone.to_json(j);
        return j;
    }

    json run() {
        cfg.backbone = backbone.make();
        cfg.rope_mode = parse_rope_mode(rope);
        TraceReader reader(trace_path);
        const auto t0 = std::chrono::steady_clock::now();
        const PredictorSet ps = calibrate(reader, cfg);
        const double calib_seconds = elapsed(t0);
        save_predictors(ps, out_path);
        const SequenceSplit split = resolve_split(reader.meta(), cfg);
        json result;
        result["predictors"] = out_path;
        result["predictor_pairs"] = ps.layers.size();
        result["backbone"] = cfg.backbone.describe();
        result["train_sequences"] = split.train_end - split.train_begin;
        result["holdout_sequences"] = split.holdout_end - split.holdout_begin;
        const auto t1 = std::chrono::steady_clock::now();
        if (split.holdout_end > split.holdout_begin) {
            result["holdout"] = holdout_report(ps, reader, cfg).to_json();
        } else {
            result["holdout"] = nullptr;
            result["note"] = "no holdout sequences; report skipped";
        }
        json out = envelope("calibrate", config(), result);
        out["timing"] = {{"calibration_seconds", calib_seconds}, {"report_seconds", elapsed(t1)}};
        return out;
    }
};

// ---- replay ---------------------------------------------------------------

struct ReplayCmd {
    std::string trace_path;
    std::string predictors_path;
    std::string report_path;
    std::string cache_out;
    BackboneFlags backbone;
    ReplayConfig cfg;
    double prune_budget = 0.0;
    double prune_recent = -1.0;
    std::string prune_granularity = "shared";

    void add(CLI::App& app) {
        app.add_option("--trace", trace_path, "Input KVT1 trace")->required();
        app.add_option("--predictors", predictors_path, "Predictor file (omit for the no-predictor baseline)");
        backbone.add(app);
        app.add_option("--buffer", cfg.cache.buffer_tokens, "Recent-token buffer size")->check(CLI::PositiveNumber);
        app.add_option("--sinks", cfg.cache.sink_tokens, "Leading tokens kept exact");
        app.add_option("--first-layer-bits", cfg.cache.first_layer_bits, "Layer 0 bits (0: backbone, >= 16: exact)");
        app.add_option("--chunk", cfg.chunk_tokens, "Tokens appended per call")->check(CLI::PositiveNumber);
        app.add_option("--amortization", cfg.predictor_amortization, "Sequences sharing one predictor set")
            ->check(CLI::PositiveNumber);
        app.add_option("--prune-budget", prune_budget, "H2O budget fraction (0: no pruning)")
            ->check(CLI::Range(0.0, 1.0));
        app.add_option("--prune-recent", prune_recent, "Recent fraction inside the budget (< 0: half of it)");
        app.add_option("--prune-granularity", prune_granularity, "Kept set: shared or per_layer")
            ->check(CLI::IsMember({"shared", "per_layer"}));
        app.add_option("--report", report_path, "Write the report here instead of stdout");
        app.add_option("--cache-out", cache_out, "Write the serialized caches of every sequence");
    }

    json config() const {
        json j{{"trace", trace_path},
               {"predictors", predictors_path},
               {"buffer", cfg.cache.buffer_tokens},
               {"sinks", cfg.cache.sink_tokens},
               {"first-layer-bits", cfg.cache.first_layer_bits},
               {"chunk", cfg.chunk_tokens},
               {"amortization", cfg.predictor_amortization},
               {"prune-budget", prune_budget},
               {"prune-recent", prune_recent},
               {"prune-granularity", prune_granularity}};
        backbone.to_json(j);
        return j;
    }

    json run() {
        cfg.cache.backbone = backbone.make();
        KVTrace trace = read_trace(trace_path);
        if (!predictors_path.empty()) {
            cfg.cache.predictors = std::make_shared<const PredictorSet>(load_predictors(predictors_path));
            cfg.cache.predictors->check_compatible(trace.info);
        }
        json result;
        result["mode"] = cfg.cache.predictors ? "predictors" : "baseline (no predictors)";
        if (!cfg.cache.predictors) {
            result["note"] = "no predictor file given: running plain backbone quantization on every layer";
        }
        ReplayReport replay;
        json timing;
        if (prune_budget > 0.0) {
            PruneConfig pc;
            pc.budget = prune_budget;
            pc.recent_fraction = prune_recent;
            pc.sinks = cfg.cache.sink_tokens;
            pc.granularity = prune_granularity == "shared" ? PruneGranularity::shared : PruneGranularity::per_layer;
            const PruneReport pr = prune_then_compress(trace, pc, cfg);
            result["replay"] = pr.to_json();
            timing = pr.replay.timing_json();
        } else {
            std::vector<CompressedKVCache> caches;
            replay = replay_trace(trace, cfg, {}, cache_out.empty() ? nullptr : &caches);
            result["replay"] = replay.to_json();
            timing = replay.timing_json();
            if (!cache_out.empty()) {
                ByteWriter w;
                w.text("AQKS");
                w.u32(static_cast<std::uint32_t>(caches.size()));
                for (const auto& c : caches) {
                    const auto bytes = c.serialize();
                    w.u64(bytes.size());
                    w.raw(bytes);
                }
                write_file(cache_out, w.bytes());
                result["cache_file"] = cache_out;
            }
        }
        json out = envelope("replay", config(), result);
        out["timing"] = timing;
        return out;
    }
};

// ---- bits -----------------------------------------------------------------

struct BitsCmd {
    std::string geometry;
    int layers = 0, kv_heads = 0, head_dim = 0;
    std::int64_t tokens = 0;
    BackboneFlags backbone;
    std::int64_t sinks = 0, buffer = 0;
    int first_layer_bits = 0;
    bool predictors = false;
    std::int64_t amortization = 1;
    std::string report_path;

    void add(CLI::App& app) {
        backbone.kind = "uniform";
        backbone.bits = 16;
        app.add_option("--geometry", geometry, "Model preset name");
        app.add_option("--layers", layers, "Layers (overrides the preset)");
        app.add_option("--kv-heads", kv_heads, "KV heads (overrides the preset)");
        app.add_option("--head-dim", head_dim, "Head dimension (overrides the preset)");
        app.add_option("--tokens", tokens, "Tokens per sequence")->required();
        backbone.add(app);
        app.add_option("--sinks", sinks, "Tokens stored at 16 bits at the start");
        app.add_option("--buffer", buffer, "Recent tokens stored at 16 bits");
        app.add_option("--first-layer-bits", first_layer_bits, "Layer 0 bits (0: backbone, >= 16: exact)");
        app.add_flag("--predictors", predictors, "Charge 32-bit predictor storage");
        app.add_option("--amortization", amortization, "Sequences sharing one predictor set")
            ->check(CLI::PositiveNumber);
        app.add_option("--report", report_path, "Write the report here instead of stdout");
    }

    json config() const {
        json j{{"geometry", geometry},
               {"layers", layers},
               {"kv-heads", kv_heads},
               {"head-dim", head_dim},
               {"tokens", tokens},
               {"sinks", sinks},
               {"buffer", buffer},
               {"first-layer-bits", first_layer_bits},
               {"predictors", predictors},
               {"amortization", amortization}};
        backbone.to_json(j);
        return j;
    }

    json run() {
        ModelGeometry g;
        if (!geometry.empty()) {
            g = geometry_preset(geometry);
        }
        if (layers > 0) g.layers = layers;
        if (kv_heads > 0) g.kv_heads = kv_heads;
        if (head_dim > 0) g.head_dim = head_dim;
        require(g.layers > 0 && g.kv_heads > 0 && g.head_dim > 0, ErrorKind::config,
                "give --geometry or all of --layers, --kv-heads, --head-dim");
        const Backbone bb = backbone.make();
        const LayerCodec codec = LayerCodec::make(bb, first_layer_bits);
        FootprintSpec spec;
        spec.layers = g.layers;
        spec.tokens = tokens;
        spec.kv_channels = g.kv_channels();
        spec.backbone = storage_rule(codec.backbone);
        spec.first_layer = storage_rule(codec.first_layer);
        spec.sink_tokens = sinks;
        spec.buffer_tokens = buffer;
        spec.predictor_params = predictors ? predictor_parameter_count(g.layers, g.kv_channels()) : 0;
        spec.predictor_amortization = amortization;
        const Footprint fp = effective_bits(spec);
        json result{{"geometry",
                     {{"name", g.name}, {"layers", g.layers}, {"kv_heads", g.kv_heads}, {"head_dim", g.head_dim}}},
                    {"backbone", bb.describe()},
                    {"first_layer", codec.first_layer.describe()},
                    {"values", fp.values},
                    {"code_bits", fp.code_bits},
                    {"group_overhead_bits", fp.group_overhead_bits},
                    {"uncompressed_bits", fp.uncompressed_bits},
                    {"predictor_bits", fp.predictor_bits},
                    {"predictor_params", spec.predictor_params},
                    {"total_bits", fp.total_bits},
                    {"bits_per_value", fp.bits_per_value},
                    {"bytes", fp.bytes},
                    {"gigabytes", fp.gigabytes()}};
        return envelope("bits", config(), result);
    }
};

// ---- inspect --------------------------------------------------------------

struct InspectCmd {
    std::string path;

    void add(CLI::App& app) { app.add_option("path", path, "KVT1 trace, AQKV predictor or AQKC cache file")->required(); }

    json config() const { return {{"path", path}}; }

    json run() {
        std::ifstream in(path, std::ios::binary);
        require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path + "' for reading");
        char magic[4] = {};
        in.read(magic, 4);
        require(in.gcount() == 4, ErrorKind::format, "'" + path + "' is too short to identify");
        in.close();
        json result;
        const std::string m(magic, 4);
        if (m == "KVT1") {
            TraceReader reader(path);
            result = json::parse(reader.meta().to_json());
            result["format"] = "KVT1";
            result["version"] = reader.version();
            result["file_size"] = reader.file_size();
            result["checksum"] = reader.checksum();
            result["kv_channels"] = reader.meta().kv_channels();
            result["valid"] = true;
        } else if (m == "AQKV") {
            const PredictorSet ps = load_predictors(path);
            result = json::parse(predictor_sidecar_json(ps));
            result["valid"] = true;
        } else if (m == "AQKC") {
            const auto bytes = read_file(path);
            result = inspect_cache(bytes, "cache file '" + path + "'");
        } else if (m == "AQKS") {
            const auto bytes = read_file(path);
            ByteReader r(bytes, "cache set '" + path + "'");
            r.raw(4);
            const std::uint32_t n = r.u32();
            result["format"] = "AQKS";
            result["caches"] = json::array();
            for (std::uint32_t i = 0; i < n; ++i) {
                const auto size = r.u64();
                result["caches"].push_back(inspect_cache(r.raw(size), "cache " + std::to_string(i)));
            }
            require(r.remaining() == 0, ErrorKind::format, "cache set '" + path + "': trailing bytes");
            result["valid"] = true;
        } else {
            fail(ErrorKind::format, "'" + path + "' has unknown magic (expected KVT1, AQKV, AQKC or AQKS)");
        }
        return envelope("inspect", config(), result);
    }
};

}  // namespace

int run_cli(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
    std::vector<std::string> args = args_in;
    try {
        // Splice a --config file in ahead of the explicit flags.
        for (std::size_t i = 1; i < args.size(); ++i) {
            std::string path;
            std::size_t span = 0;
            if (args[i] == "--config" && i + 1 < args.size()) {
                path = args[i + 1];
                span = 2;
            } else if (args[i].rfind("--config=", 0) == 0) {
                path = args[i].substr(9);
                span = 1;
            }
            if (span > 0) {
                args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                           args.begin() + static_cast<std::ptrdiff_t>(i + span));
                std::size_t at = 1;
                while (at < args.size() && std::find(std::begin(kSubcommands), std::end(kSubcommands), args[at]) ==
                                               std::end(kSubcommands)) {
                    ++at;
                }
                const auto tokens = config_tokens(path);
                args.insert(args.begin() + static_cast<std::ptrdiff_t>(std::min(at + 1, args.size())), tokens.begin(),
                            tokens.end());
                break;
            }
        }
    } catch (const Error& e) {
        error_line(err, to_string(e.kind()), e.what(), exit_code(e.kind()));
        return exit_code(e.kind());
    }

    CLI::App app{"KV-cache compression with learned cross-layer predictors"};
    app.name("aquakv");
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);
    app.set_version_flag("--version", "aquakv 0.1.0");

    SynthCmd synth;
    ProbeCmd probe;
    CalibrateCmd calib;
    ReplayCmd replay;
    BitsCmd bits;
    InspectCmd inspect;
    synth.add(*app.add_subcommand("synth", "Generate a synthetic residual-stream trace"));
    probe.add(*app.add_subcommand("probe", "Linear-probe explained variance by source"));
    calib.add(*app.add_subcommand("calibrate", "Train per-layer predictors and report holdout quality"));
    replay.add(*app.add_subcommand("replay", "Stream a trace through the compressed cache"));
    bits.add(*app.add_subcommand("bits", "Storage footprint and effective bits per value"));
    inspect.add(*app.add_subcommand("inspect", "Validate a file and print its header"));

    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << app.version() << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        error_line(err, "usage", e.what(), kExitUsage);
        return kExitUsage;
    }

    try {
        const CLI::App* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        json report;
        std::string dest;
        if (name == "synth") {
            report = synth.run();
            dest = synth.report_path;
        } else if (name == "probe") {
            report = probe.run();
            dest = probe.out_path;
        } else if (name == "calibrate") {
            report = calib.run();
            dest = calib.report_path;
        } else if (name == "replay") {
            report = replay.run();
            dest = replay.report_path;
        } else if (name == "bits") {
            report = bits.run();
            dest = bits.report_path;
        } else {
            report = inspect.run();
        }
        emit(report, dest, out);
        return kExitOk;
    } catch (const Error& e) {
        error_line(err, to_string(e.kind()), e.what(), exit_code(e.kind()));
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        error_line(err, "internal", e.what(), kExitOther);
        return kExitOther;
    }
}

}  // namespace aquakv
