#include "aquakv/synth.hpp"

#include <cmath>

#include <json.hpp>

#include "aquakv/parallel.hpp"
#include "aquakv/random.hpp"
#include "aquakv/rope.hpp"

namespace aquakv {

namespace {

enum Stream : std::uint64_t {
    kResidual = 1,
    kValueMix = 2,
    kKeyProj = 3,
    kValueProj = 4,
    kKeyScale = 5,
    kHidden = 6,
    kNoise = 7,
    kLogits = 8,
};

std::uint64_t stream_seed(std::uint64_t seed, Stream s, std::uint64_t index) {
    return derive_seed(derive_seed(seed, s), index);
}

// rows x cols matrix with N(0, std^2) entries, row-major.
std::vector<double> gaussian_matrix(std::uint64_t seed, std::size_t rows, std::size_t cols, double std) {
    Rng rng(seed);
    std::vector<double> m(rows * cols);
    for (auto& v : m) {
        v = std * rng.normal();
    }
    return m;
}

void matvec(const std::vector<double>& m, std::size_t rows, std::size_t cols, const double* x, double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* w = m.data() + r * cols;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            acc += w[c] * x[c];
        }
        y[r] = acc;
    }
}

}  // namespace

void SynthConfig::validate() const {
    require(layers >= 1 && kv_heads >= 1 && head_dim >= 1, ErrorKind::config, "synth geometry must be >= 1");
    require(hidden_dim >= 0, ErrorKind::config, "hidden_dim must be >= 0");
    require(alpha > 0.0 && alpha <= 1.0, ErrorKind::config, "alpha must lie in (0, 1]");
    require(noise >= 0.0 && drift >= 0.0, ErrorKind::config, "noise and drift must be >= 0");
    require(value_nonlinearity >= 0.0 && weight_gain >= 0.0 && channel_spread >= 0.0, ErrorKind::config,
            "value_nonlinearity, weight_gain and channel_spread must be >= 0");
    require(token_correlation >= 0.0 && token_correlation < 1.0, ErrorKind::config,
            "token_correlation must lie in [0, 1)");
    require(tokens >= 1 && sequences >= 1, ErrorKind::config, "tokens and sequences must be >= 1");
    require(sink_tokens >= 0 && sink_magnitude > 0.0, ErrorKind::config, "invalid sink settings");
    require(rope == RopeMode::pre_rope || head_dim % 2 == 0, ErrorKind::config,
            "post-rope traces need an even head_dim");
}

std::string SynthConfig::describe() const {
    nlohmann::json j;
    j["layers"] = layers;
    j["kv_heads"] = kv_heads;
    j["head_dim"] = head_dim;
    j["hidden_dim"] = hidden_dim == 0 ? static_cast<int>(kv_channels()) : hidden_dim;
    j["alpha"] = alpha;
    j["noise"] = noise;
    j["drift"] = drift;
    j["value_nonlinearity"] = value_nonlinearity;
    j["weight_gain"] = weight_gain;
    j["token_correlation"] = token_correlation;
    j["channel_spread"] = channel_spread;
    j["seed"] = seed;
    j["tokens"] = tokens;
    j["sequences"] = sequences;
    j["sink_tokens"] = sink_tokens;
    j["sink_magnitude"] = sink_magnitude;
    j["attention_stats"] = attention_stats;
    j["rope"] = to_string(rope);
    return j.dump();
}

KVTrace synth_trace(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t c = cfg.kv_channels();
    const std::size_t h = cfg.hidden_dim == 0 ? c : static_cast<std::size_t>(cfg.hidden_dim);
    const std::size_t n_layers = static_cast<std::size_t>(cfg.layers);
    const std::size_t n_rows = cfg.tokens * cfg.sequences;
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(h));
    const double mix_std = cfg.weight_gain * proj_std;

    std::vector<std::vector<double>> w(n_layers), u(n_layers), pk(n_layers), pv(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        w[l] = gaussian_matrix(stream_seed(cfg.seed, kResidual, l), h, h, mix_std);
        u[l] = gaussian_matrix(stream_seed(cfg.seed, kValueMix, l), h, h, mix_std);
        pk[l] = gaussian_matrix(stream_seed(cfg.seed, kKeyProj, l), c, h, proj_std);
        pv[l] = gaussian_matrix(stream_seed(cfg.seed, kValueProj, l), c, h, proj_std);
        Rng scale_rng(stream_seed(cfg.seed, kKeyScale, l));
        for (std::size_t r = 0; r < c; ++r) {
            const double s = std::exp(cfg.channel_spread * scale_rng.normal());
            for (std::size_t k = 0; k < h; ++k) {
                pk[l][r * h + k] *= s;
            }
        }
    }

    // Initial hidden states: AR(1) along each sequence, sinks scaled up.
    std::vector<double> h0(n_rows * h);
    const double rho = cfg.token_correlation;
    const double innovation = std::sqrt(1.0 - rho * rho);
    for (std::size_t s = 0; s < cfg.sequences; ++s) {
        SplitMix rng(stream_seed(cfg.seed, kHidden, s));
        std::vector<double> state(h);
        for (std::size_t t = 0; t < cfg.tokens; ++t) {
            double* dst = h0.data() + (s * cfg.tokens + t) * h;
            const double boost = t < static_cast<std::size_t>(cfg.sink_tokens) ? cfg.sink_magnitude : 1.0;
            for (std::size_t k = 0; k < h; ++k) {
                const double z = rng.normal();
                state[k] = t == 0 ? z : rho * state[k] + innovation * z;
                dst[k] = boost * state[k];
            }
        }
    }

    KVTrace trace;
    trace.info.n_layers = cfg.layers;
    trace.info.n_kv_heads = cfg.kv_heads;
    trace.info.head_dim = cfg.head_dim;
    trace.info.sequence_lengths.assign(cfg.sequences, cfg.tokens);
    trace.info.rope_mode = cfg.rope;
    trace.info.rope_theta = cfg.rope_theta;
    trace.info.has_attention_stats = cfg.attention_stats;
    trace.info.source = "synth:" + cfg.describe();
    for (std::size_t l = 0; l < n_layers; ++l) {
        trace.keys.emplace_back(n_rows, c);
        trace.values.emplace_back(n_rows, c);
    }

    parallel_for(n_rows, 64, [&](std::size_t begin, std::size_t end) {
        std::vector<double> hs(h), tmp(h), mixed(h), out(c);
        for (std::size_t row = begin; row < end; ++row) {
            std::copy_n(h0.data() + row * h, h, hs.data());
            for (std::size_t l = 0; l < n_layers; ++l) {
                SplitMix noise(stream_seed(cfg.seed, kNoise, l * n_rows + row));
                matvec(pk[l], c, h, hs.data(), out.data());
                float* k_row = trace.keys[l].row(row).data();
                for (std::size_t j = 0; j < c; ++j) {
                    k_row[j] = static_cast<float>(out[j] + cfg.noise * noise.normal());
                }
                matvec(u[l], h, h, hs.data(), tmp.data());
                for (std::size_t k = 0; k < h; ++k) {
                    mixed[k] = hs[k] + cfg.value_nonlinearity * std::tanh(tmp[k]);
                }
                matvec(pv[l], c, h, mixed.data(), out.data());
                float* v_row = trace.values[l].row(row).data();
                for (std::size_t j = 0; j < c; ++j) {
                    v_row[j] = static_cast<float>(out[j] + cfg.noise * noise.normal());
                }
                matvec(w[l], h, h, hs.data(), tmp.data());
                for (std::size_t k = 0; k < h; ++k) {
                    hs[k] += cfg.alpha * std::tanh(tmp[k]) + cfg.drift * noise.normal();
                }
            }
        }
    });

    if (cfg.attention_stats) {
        // Causal softmax over random logits, summed over query positions:
        // score_t = exp(g_t) * sum_{q >= t} 1 / Z_q with Z_q = sum_{t' <= q} exp(g_t').
        for (std::size_t l = 0; l < n_layers; ++l) {
            std::vector<float> scores(n_rows);
            for (std::size_t s = 0; s < cfg.sequences; ++s) {
                SplitMix rng(stream_seed(cfg.seed, kLogits, l * cfg.sequences + s));
                std::vector<double> e(cfg.tokens), inv_z(cfg.tokens);
                double z = 0.0;
                for (std::size_t t = 0; t < cfg.tokens; ++t) {
                    double g = rng.normal();
                    if (t < static_cast<std::size_t>(cfg.sink_tokens)) {
                        g += cfg.sink_logit_boost;
                    }
                    e[t] = std::exp(g);
                    z += e[t];
                    inv_z[t] = 1.0 / z;
                }
                double tail = 0.0;
                for (std::size_t t = cfg.tokens; t-- > 0;) {
                    tail += inv_z[t];
                    scores[s * cfg.tokens + t] = static_cast<float>(e[t] * tail);
                }
            }
            trace.attention.push_back(std::move(scores));
        }
    }

    if (cfg.rope == RopeMode::post_rope) {
        trace.info.rope_mode = RopeMode::pre_rope;
        trace = convert_rope(trace, RopeMode::post_rope);
    }
    trace.validate();
    return trace;
}

}  // namespace aquakv
