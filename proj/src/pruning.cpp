#include "aquakv/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace aquakv {

std::size_t fraction_count(double fraction, std::size_t n) {
    const double x = fraction * static_cast<double>(n);
    return static_cast<std::size_t>(std::ceil(x - 1e-9));
}

std::vector<std::size_t> h2o_select(std::span<const float> scores, double budget, double recent_fraction,
                                    int sinks) {
    require(budget > 0.0 && budget <= 1.0, ErrorKind::config, "prune budget must lie in (0, 1]");
    require(recent_fraction >= 0.0 && recent_fraction <= budget, ErrorKind::config,
            "recent fraction must lie in [0, budget]");
    require(sinks >= 0, ErrorKind::config, "sink count must be >= 0");
    const std::size_t t = scores.size();
    for (float s : scores) {
        require(std::isfinite(s) && s >= 0.0f, ErrorKind::config, "attention scores must be finite and >= 0");
    }
    const std::size_t keep_n = fraction_count(budget, t);
    const std::size_t recent_n = fraction_count(recent_fraction, t);
    std::vector<std::uint8_t> kept(t, 0);
    for (std::size_t i = 0; i < std::min<std::size_t>(t, static_cast<std::size_t>(sinks)); ++i) {
        kept[i] = 1;
    }
    for (std::size_t i = t - recent_n; i < t; ++i) {
        kept[i] = 1;
    }
    const auto fixed = static_cast<std::size_t>(std::count(kept.begin(), kept.end(), 1));
    require(fixed <= keep_n, ErrorKind::config,
            "prune budget of " + std::to_string(keep_n) + " tokens is smaller than the " + std::to_string(fixed) +
                " sink and recent tokens");
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < t; ++i) {
        if (!kept[i]) {
            rest.push_back(i);
        }
    }
    const std::size_t extra = keep_n - fixed;
    std::partial_sort(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(extra), rest.end(),
                      [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
    for (std::size_t i = 0; i < extra; ++i) {
        kept[rest[i]] = 1;
    }
    std::vector<std::size_t> out;
    out.reserve(keep_n);
    for (std::size_t i = 0; i < t; ++i) {
        if (kept[i]) {
            out.push_back(i);
        }
    }
    return out;
}

void PruneConfig::validate() const {
    require(budget > 0.0 && budget <= 1.0, ErrorKind::config, "prune budget must lie in (0, 1]");
    require(resolved_recent() <= budget, ErrorKind::config, "recent fraction must not exceed the budget");
    require(sinks >= 0, ErrorKind::config, "sink count must be >= 0");
}

std::vector<std::vector<std::size_t>> h2o_select_layers(const KVTrace& trace, std::size_t row_begin,
                                                        std::size_t row_end, const PruneConfig& cfg) {
    cfg.validate();
    require(trace.info.has_attention_stats, ErrorKind::config, "pruning needs a trace with attention statistics");
    const auto layers = static_cast<std::size_t>(trace.info.n_layers);
    std::vector<std::vector<std::size_t>> out;
    if (cfg.granularity == PruneGranularity::shared) {
        std::vector<float> total(row_end - row_begin, 0.0f);
        for (std::size_t l = 0; l < layers; ++l) {
            for (std::size_t r = row_begin; r < row_end; ++r) {
                total[r - row_begin] += trace.attention[l][r];
            }
        }
        out.assign(layers, h2o_select(total, cfg.budget, cfg.resolved_recent(), cfg.sinks));
        return out;
    }
    for (std::size_t l = 0; l < layers; ++l) {
        std::span<const float> scores(trace.attention[l].data() + row_begin, row_end - row_begin);
        out.push_back(h2o_select(scores, cfg.budget, cfg.resolved_recent(), cfg.sinks));
    }
    return out;
}

KVTrace prune_trace(const KVTrace& trace, const PruneConfig& cfg) {
    require(cfg.granularity == PruneGranularity::shared, ErrorKind::config,
            "compressing a pruned trace needs a shared kept set across layers");
    const auto offsets = trace.info.sequence_offsets();
    std::vector<std::size_t> rows;
    KVTrace out;
    out.info = trace.info;
    out.info.sequence_lengths.clear();
    for (std::size_t s = 0; s < trace.info.n_sequences(); ++s) {
        const auto kept = h2o_select_layers(trace, offsets[s], offsets[s + 1], cfg).front();
        for (auto i : kept) {
            rows.push_back(offsets[s] + i);
        }
        out.info.sequence_lengths.push_back(kept.size());
    }
    for (std::size_t l = 0; l < trace.keys.size(); ++l) {
        out.keys.push_back(trace.keys[l].gather_rows(rows));
        out.values.push_back(trace.values[l].gather_rows(rows));
        std::vector<float> a;
        a.reserve(rows.size());
        for (auto r : rows) {
            a.push_back(trace.attention[l][r]);
        }
        out.attention.push_back(std::move(a));
    }
    out.info.source = trace.info.source + " | h2o budget " + std::to_string(cfg.budget);
    return out;
}

nlohmann::json PruneReport::to_json() const {
    nlohmann::json j = replay.to_json();
    j["pruning"] = {{"original_tokens", original_tokens},
                    {"kept_tokens", kept_tokens},
                    {"kept_fraction", original_tokens ? static_cast<double>(kept_tokens) / original_tokens : 0.0},
                    {"bits_per_original_value", bits_per_original_value}};
    return j;
}

PruneReport prune_then_compress(const KVTrace& trace, const PruneConfig& prune, const ReplayConfig& replay) {
    const KVTrace pruned = prune_trace(trace, prune);
    PruneReport report;
    report.original_tokens = trace.info.n_tokens();
    report.kept_tokens = pruned.info.n_tokens();
    report.replay = replay_trace(pruned, replay);
    const double original_values =
        2.0 * trace.info.n_layers * static_cast<double>(report.original_tokens) * trace.info.kv_channels();
    report.bits_per_original_value = report.replay.stored_bits / original_values;
    return report;
}

}  // namespace aquakv
