#include "aquakv/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "aquakv/parallel.hpp"
#include "aquakv/random.hpp"

namespace aquakv {

namespace {

using BlockPredictor = std::function<std::optional<Matrix>(std::size_t, std::size_t)>;

struct StageStats {
    ChannelMoments prediction;
    ChannelMoments reconstruction;
};

// Encodes `target` in row blocks and overwrites every non-sink row with its
// reconstruction; sink rows stay exact. Statistics cover non-sink rows only.
StageStats run_stage(const Backbone& q, Matrix& target, const std::vector<std::uint8_t>& sinks,
                     std::size_t block_rows, const BlockPredictor& predict, bool write_back = true) {
    const std::size_t n = target.rows();
    const std::size_t c = target.cols();
    const std::size_t chunks = (n + block_rows - 1) / block_rows;
    std::vector<StageStats> partial(chunks, StageStats{ChannelMoments(c), ChannelMoments(c)});
    parallel_for(n, block_rows, [&](std::size_t begin, std::size_t end) {
        StageStats& st = partial[begin / block_rows];
        const Matrix block = target.slice_rows(begin, end);
        const std::optional<Matrix> pred = predict ? predict(begin, end) : std::nullopt;
        const EncodedTensor enc = encode_residual(q, block, pred ? &*pred : nullptr);
        const std::vector<float> zeros(c, 0.0f);
        for (std::size_t r = 0; r < block.rows(); ++r) {
            if (sinks[begin + r]) {
                continue;
            }
            st.prediction.add_row(block.row(r), pred ? pred->row(r) : std::span<const float>(zeros));
            st.reconstruction.add_row(block.row(r), enc.reconstruction.row(r));
            if (write_back) {
                std::copy(enc.reconstruction.row(r).begin(), enc.reconstruction.row(r).end(),
                          target.row(begin + r).begin());
            }
        }
    });
    StageStats out{ChannelMoments(c), ChannelMoments(c)};
    for (const auto& p : partial) {
        out.prediction.merge(p.prediction);
        out.reconstruction.merge(p.reconstruction);
    }
    return out;
}

std::vector<std::size_t> training_rows(const std::vector<std::uint8_t>& sinks, const CalibConfig& cfg) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < sinks.size(); ++r) {
        if (!sinks[r]) {
            rows.push_back(r);
        }
    }
    if (rows.size() > cfg.max_train_rows) {
        Rng rng(derive_seed(cfg.seed, 0x5b5a'3e11ULL));
        for (std::size_t i = 0; i < cfg.max_train_rows; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(rows.size() - i));
            std::swap(rows[i], rows[j]);
        }
        rows.resize(cfg.max_train_rows);
        std::sort(rows.begin(), rows.end());
    }
    return rows;
}

void check_trace(const TraceMeta& meta, const CalibConfig& cfg) {
    cfg.validate();
    require(meta.n_layers >= 2, ErrorKind::config, "calibration needs a trace with at least 2 layers");
    if (meta.rope_mode != cfg.rope_mode) {
        fail(ErrorKind::incompatible, "trace stores " + to_string(meta.rope_mode) + " keys but calibration expects " +
                                          to_string(cfg.rope_mode) + "; convert the trace first");
    }
}

double ratio_evr(double residual, double target) {
    return target > 0.0 ? 1.0 - residual / target : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

void CalibConfig::validate() const {
    require(lambda >= 0.0 && std::isfinite(lambda), ErrorKind::config, "lambda must be finite and >= 0");
    require(sink_tokens >= 0, ErrorKind::config, "sink_tokens must be >= 0");
    require(first_layer_bits >= 0, ErrorKind::config, "first_layer_bits must be >= 0");
    require(max_train_rows >= 1 && block_rows >= 1, ErrorKind::config, "max_train_rows and block_rows must be >= 1");
}

SequenceSplit resolve_split(const TraceMeta& meta, const CalibConfig& cfg) {
    const std::size_t n = meta.n_sequences();
    std::size_t train = cfg.train_sequences;
    std::size_t holdout = cfg.holdout_sequences;
    if (train == 0 && holdout == 0) {
        holdout = n >= 2 ? std::max<std::size_t>(1, n / 8) : 0;
        train = n - holdout;
    } else if (train == 0) {
        require(holdout < n, ErrorKind::config, "holdout leaves no training sequences");
        train = n - holdout;
    } else if (holdout == 0) {
        require(train <= n, ErrorKind::config, "train_sequences exceeds the trace's sequence count");
        holdout = n - train;
    }
    require(train >= 1 && train + holdout <= n, ErrorKind::config,
            "train/holdout split (" + std::to_string(train) + " + " + std::to_string(holdout) +
                ") does not fit the trace's " + std::to_string(n) + " sequences");
    return {0, train, train, train + holdout};
}

std::vector<std::uint8_t> sink_mask(const TraceMeta& meta, std::size_t seq_begin, std::size_t seq_end,
                                    int sink_tokens) {
    std::vector<std::uint8_t> mask;
    for (std::size_t s = seq_begin; s < seq_end; ++s) {
        const std::size_t len = meta.sequence_lengths.at(s);
        for (std::size_t t = 0; t < len; ++t) {
            mask.push_back(t < static_cast<std::size_t>(sink_tokens) ? 1 : 0);
        }
    }
    return mask;
}

PredictorSet calibrate(const LayerSource& trace, const CalibConfig& cfg, const ReconstructionObserver& observer) {
    const TraceMeta& meta = trace.meta();
    check_trace(meta, cfg);
    const SequenceSplit split = resolve_split(meta, cfg);
    const auto [r0, r1] = meta.sequence_rows(split.train_begin, split.train_end);
    const auto sinks = sink_mask(meta, split.train_begin, split.train_end, cfg.sink_tokens);
    const auto rows = training_rows(sinks, cfg);
    require(!rows.empty(), ErrorKind::config, "no non-sink training rows");
    const LayerCodec codec = cfg.codec();
    const std::size_t c = meta.kv_channels();

    PredictorSet ps;
    ps.n_layers = meta.n_layers;
    ps.n_kv_heads = meta.n_kv_heads;
    ps.head_dim = meta.head_dim;
    ps.info = {cfg.lambda,           cfg.seed,  cfg.sink_tokens, cfg.first_layer_bits, cfg.rope_mode,
               cfg.backbone.describe(), cfg.backbone.hash()};

    LayerData prev = trace.load_layer(0, r0, r1);
    run_stage(codec.for_layer(0), prev.keys, sinks, cfg.block_rows, {});
    run_stage(codec.for_layer(0), prev.values, sinks, cfg.block_rows, {});
    if (observer) {
        observer(0, prev.keys, prev.values);
    }
    for (int layer = 1; layer < meta.n_layers; ++layer) {
        LayerData cur = trace.load_layer(layer, r0, r1);
        const Backbone& q = codec.for_layer(layer);

        NormalEquations key_eq(c, c);
        key_eq.add_selected(prev.keys, nullptr, cur.keys, rows);
        LinearPredictor f_key{PredictorKind::key, key_eq.solve(cfg.lambda)};
        run_stage(q, cur.keys, sinks, cfg.block_rows, [&](std::size_t b, std::size_t e) {
            return std::optional<Matrix>(f_key.predict(prev.keys.slice_rows(b, e)));
        });

        NormalEquations value_eq(2 * c, c);
        value_eq.add_selected(prev.values, &cur.keys, cur.values, rows);
        LinearPredictor f_value{PredictorKind::value, value_eq.solve(cfg.lambda)};
        run_stage(q, cur.values, sinks, cfg.block_rows, [&](std::size_t b, std::size_t e) {
            return std::optional<Matrix>(f_value.predict(prev.values.slice_rows(b, e), cur.keys.slice_rows(b, e)));
        });

        if (observer) {
            observer(layer, cur.keys, cur.values);
        }
        ps.layers.push_back({std::move(f_key), std::move(f_value)});
        prev = std::move(cur);
    }
    return ps;
}

double LayerEval::error_ratio() const {
    const double base = baseline_key_mse + baseline_value_mse;
    return base > 0.0 ? (key_mse + value_mse) / base : std::numeric_limits<double>::quiet_NaN();
}

double RolloutReport::predictor_evr() const {
    return ratio_evr(key_predictions.residual + value_predictions.residual,
                     key_predictions.target + value_predictions.target);
}

double RolloutReport::mean_error_ratio() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& l : layers) {
        if (l.layer >= 1) {
            sum += l.error_ratio();
            ++n;
        }
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

nlohmann::json RolloutReport::to_json() const {
    auto pooled = [](const VarianceSums& s) {
        return nlohmann::json{{"evr", ratio_evr(s.residual, s.target)},
                              {"mse", s.mse()},
                              {"max_abs_error", s.max_abs}};
    };
    nlohmann::json j;
    j["rows"] = rows;
    j["sink_rows"] = sink_rows;
    j["predictor_evr"] = predictor_evr();
    j["mean_error_ratio"] = mean_error_ratio();
    j["keys"] = pooled(keys);
    j["values"] = pooled(values);
    j["baseline"] = {{"description", "same backbone on every layer, zero predictors"},
                     {"keys", pooled(baseline_keys)},
                     {"values", pooled(baseline_values)}};
    auto& per_layer = j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
        per_layer.push_back({{"layer", l.layer},
                             {"key_predictor_evr", l.key_predictor_evr},
                             {"value_predictor_evr", l.value_predictor_evr},
                             {"key_evr", l.key_evr},
                             {"value_evr", l.value_evr},
                             {"key_residual_evr", l.key_residual_evr},
                             {"value_residual_evr", l.value_residual_evr},
                             {"key_mse", l.key_mse},
                             {"value_mse", l.value_mse},
                             {"key_max_abs_error", l.key_max_abs},
                             {"value_max_abs_error", l.value_max_abs},
                             {"baseline_key_evr", l.baseline_key_evr},
                             {"baseline_value_evr", l.baseline_value_evr},
                             {"baseline_key_mse", l.baseline_key_mse},
                             {"baseline_value_mse", l.baseline_value_mse},
                             {"error_ratio", l.error_ratio()}});
    }
    return j;
}

RolloutReport evaluate_rollout(const LayerSource& trace, std::size_t seq_begin, std::size_t seq_end,
                               const PredictorSet& predictors, const CalibConfig& cfg) {
    const TraceMeta& meta = trace.meta();
    check_trace(meta, cfg);
    predictors.check_compatible(meta);
    require(seq_begin < seq_end, ErrorKind::config, "evaluation needs at least one sequence");
    const auto [r0, r1] = meta.sequence_rows(seq_begin, seq_end);
    const auto sinks = sink_mask(meta, seq_begin, seq_end, cfg.sink_tokens);
    const LayerCodec codec = cfg.codec();
    const Backbone& baseline = cfg.backbone;

    RolloutReport report;
    report.rows = r1 - r0;
    report.sink_rows = static_cast<std::size_t>(std::count(sinks.begin(), sinks.end(), 1));
    const auto nan = std::numeric_limits<double>::quiet_NaN();

    LayerData prev;
    for (int layer = 0; layer < meta.n_layers; ++layer) {
        LayerData cur = trace.load_layer(layer, r0, r1);
        LayerEval ev;
        ev.layer = layer;

        const auto base_k = run_stage(baseline, cur.keys, sinks, cfg.block_rows, {}, false).reconstruction.sums();
        const auto base_v = run_stage(baseline, cur.values, sinks, cfg.block_rows, {}, false).reconstruction.sums();

        StageStats ks, vs;
        const Backbone& q = codec.for_layer(layer);
        if (layer == 0) {
            ks = run_stage(q, cur.keys, sinks, cfg.block_rows, {});
            vs = run_stage(q, cur.values, sinks, cfg.block_rows, {});
        } else {
            const LayerPredictors& lp = predictors.at(layer);
            ks = run_stage(q, cur.keys, sinks, cfg.block_rows, [&](std::size_t b, std::size_t e) {
                return std::optional<Matrix>(lp.key.predict(prev.keys.slice_rows(b, e)));
            });
            vs = run_stage(q, cur.values, sinks, cfg.block_rows, [&](std::size_t b, std::size_t e) {
                return std::optional<Matrix>(
                    lp.value.predict(prev.values.slice_rows(b, e), cur.keys.slice_rows(b, e)));
            });
        }
        const auto kp = ks.prediction.sums(), kr = ks.reconstruction.sums();
        const auto vp = vs.prediction.sums(), vr = vs.reconstruction.sums();
        ev.key_predictor_evr = layer == 0 ? nan : ratio_evr(kp.residual, kp.target);
        ev.value_predictor_evr = layer == 0 ? nan : ratio_evr(vp.residual, vp.target);
        ev.key_evr = ratio_evr(kr.residual, kr.target);
        ev.value_evr = ratio_evr(vr.residual, vr.target);
        ev.key_residual_evr = ratio_evr(kr.residual, kp.residual);
        ev.value_residual_evr = ratio_evr(vr.residual, vp.residual);
        ev.key_mse = kr.mse();
        ev.value_mse = vr.mse();
        ev.key_max_abs = kr.max_abs;
        ev.value_max_abs = vr.max_abs;
        ev.baseline_key_evr = ratio_evr(base_k.residual, base_k.target);
        ev.baseline_value_evr = ratio_evr(base_v.residual, base_v.target);
        ev.baseline_key_mse = base_k.mse();
        ev.baseline_value_mse = base_v.mse();
        report.layers.push_back(ev);

        report.keys.merge(kr);
        report.values.merge(vr);
        report.baseline_keys.merge(base_k);
        report.baseline_values.merge(base_v);
        if (layer >= 1) {
            report.key_predictions.merge(kp);
            report.value_predictions.merge(vp);
        }
        prev = std::move(cur);
    }
    return report;
}

RolloutReport holdout_report(const PredictorSet& predictors, const LayerSource& trace, const CalibConfig& cfg) {
    const SequenceSplit split = resolve_split(trace.meta(), cfg);
    require(split.holdout_end > split.holdout_begin, ErrorKind::config, "the split leaves no holdout sequences");
    return evaluate_rollout(trace, split.holdout_begin, split.holdout_end, predictors, cfg);
}

nlohmann::json calib_config_json(const CalibConfig& cfg) {
    return {{"backbone", cfg.backbone.kind()},
            {"backbone_description", cfg.backbone.describe()},
            {"bits", cfg.backbone.bits()},
            {"group_size", cfg.backbone.group_size()},
            {"lambda", cfg.lambda},
            {"sinks", cfg.sink_tokens},
            {"first_layer_bits", cfg.first_layer_bits},
            {"rope", to_string(cfg.rope_mode)},
            {"train_sequences", cfg.train_sequences},
            {"holdout_sequences", cfg.holdout_sequences},
            {"seed", cfg.seed},
            {"max_train_rows", cfg.max_train_rows}};
}

}  // namespace aquakv
