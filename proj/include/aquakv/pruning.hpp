#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

#include "aquakv/kvcache.hpp"
#include "aquakv/trace.hpp"

namespace aquakv {

inline constexpr double kDefaultPruneBudget = 0.20;

// ceil(fraction * n), ignoring floating-point noise below 1e-9.
std::size_t fraction_count(double fraction, std::size_t n);

// Heavy-hitter selection over one score vector. Keeps the first `sinks`
// tokens and the newest ceil(recent_fraction * T), then the highest-scoring
// remaining tokens (lower index first on ties) until ceil(budget * T) are kept.
// Returns ascending indices. Throws ErrorKind::config when sinks plus recent
// tokens alone exceed the budget.
std::vector<std::size_t> h2o_select(std::span<const float> scores, double budget, double recent_fraction,
                                    int sinks = 0);

enum class PruneGranularity { per_layer, shared };

struct PruneConfig {
    double budget = kDefaultPruneBudget;
    double recent_fraction = -1.0;  // < 0: half the budget
    int sinks = 4;
    PruneGranularity granularity = PruneGranularity::shared;

    double resolved_recent() const { return recent_fraction < 0.0 ? 0.5 * budget : recent_fraction; }
    void validate() const;
};

// Kept token indices per layer for rows [row_begin, row_end) of the trace's
// attention statistics, relative to row_begin. With shared granularity every
// layer gets the selection made on scores summed over layers.
std::vector<std::vector<std::size_t>> h2o_select_layers(const KVTrace& trace, std::size_t row_begin,
                                                        std::size_t row_end, const PruneConfig& cfg);

// The trace restricted to the kept tokens of each sequence (order preserved).
// Requires shared granularity: predictors need the previous layer's
// reconstruction of the same tokens.
KVTrace prune_trace(const KVTrace& trace, const PruneConfig& cfg);

struct PruneReport {
    std::size_t original_tokens = 0;
    std::size_t kept_tokens = 0;
    ReplayReport replay;  // over the kept tokens
    // Stored bits over the original (unpruned) cache value count.
    double bits_per_original_value = 0;

    nlohmann::json to_json() const;
};

PruneReport prune_then_compress(const KVTrace& trace, const PruneConfig& prune, const ReplayConfig& replay);

}  // namespace aquakv
