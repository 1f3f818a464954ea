#pragma once

#include <cstdint>
#include <string>

#include "aquakv/trace.hpp"

namespace aquakv {

// Residual-stream model of a transformer's KV cache. A hidden state per token
// is pushed through `layers` residual steps
//     h_{l+1} = h_l + alpha * tanh(W_l h_l) + drift * xi
// and every layer exposes K_l = P^K_l h_l and
// V_l = P^V_l (h_l + beta * tanh(U_l h_l)), plus N(0, noise^2) observation
// noise. The drift term keeps the layer chain Markov. The extra value
// nonlinearity makes values harder to predict from the previous layer than keys.
struct SynthConfig {
    int layers = 12;
    int kv_heads = 4;
    int head_dim = 32;
    int hidden_dim = 0;  // 0: same as kv_channels
    double alpha = 0.3;
    double noise = 0.03;
    double drift = 0.16;              // std of the per-step hidden-state innovation
    double value_nonlinearity = 0.5;
    double weight_gain = 1.5;         // std of W_l, U_l entries times sqrt(hidden_dim)
    double token_correlation = 0.3;   // AR(1) coefficient of h_0 along a sequence
    double channel_spread = 0.25;     // log-normal spread of per-channel key scales
    std::uint64_t seed = 7;
    std::size_t tokens = 8192;        // per sequence
    std::size_t sequences = 8;
    int sink_tokens = 4;
    double sink_magnitude = 6.0;      // h_0 scale of the first sink_tokens positions
    bool attention_stats = false;
    double sink_logit_boost = 4.0;
    RopeMode rope = RopeMode::pre_rope;
    double rope_theta = 10000.0;

    std::size_t kv_channels() const { return static_cast<std::size_t>(kv_heads) * head_dim; }
    void validate() const;
    std::string describe() const;  // JSON
};

KVTrace synth_trace(const SynthConfig& cfg);

}  // namespace aquakv
