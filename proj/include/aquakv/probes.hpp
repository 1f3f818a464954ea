#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aquakv/linalg.hpp"
#include "aquakv/trace.hpp"

namespace aquakv {

enum class ProbeRole { keys, values };

std::string to_string(ProbeRole role);

struct ProbeTerm {
    enum Kind { prev_layer, prev_token, cross_role, self } kind = prev_layer;
    int distance = 1;  // layers or tokens back; unused for cross_role / self
};

// One probe input: the listed terms concatenated in order.
struct ProbeSource {
    std::string name;
    std::vector<ProbeTerm> terms;
};

// "prevL1", "prevT2", "crossrole", "self", or several joined by '+'.
ProbeSource parse_probe_source(const std::string& text);
// Comma-separated list of sources.
std::vector<ProbeSource> parse_probe_sources(const std::string& text);

struct ProbeConfig {
    double lambda = kDefaultRidgeLambda;
    int sinks = 4;  // leading positions of each sequence left out of fit and evaluation
    // Sequence split as in calibration; a single-sequence trace is split by
    // rows instead (first 7/8 train).
    std::size_t train_sequences = 0;
    std::size_t holdout_sequences = 0;
    EvrAggregation aggregation = EvrAggregation::pooled;
};

struct ProbeResult {
    ProbeRole target = ProbeRole::keys;
    std::string source;
    // Per layer; empty where the source does not exist (e.g. layer < distance).
    std::vector<std::optional<double>> holdout_evr;
    std::vector<std::optional<double>> train_evr;
    double mean_holdout_evr = 0;
    double mean_train_evr = 0;
    std::vector<std::string> notes;
};

struct ProbeReport {
    std::vector<ProbeResult> results;
    std::size_t train_rows = 0;
    std::size_t holdout_rows = 0;

    const ProbeResult& find(ProbeRole target, const std::string& source) const;
    nlohmann::json to_json() const;
    std::string to_csv() const;
};

// Ridge probes from ground-truth source tensors to each target, fit on the
// training rows and scored on the holdout rows, for every layer.
ProbeReport probe_matrix(const LayerSource& trace, const std::vector<ProbeRole>& targets,
                         const std::vector<ProbeSource>& sources, const ProbeConfig& cfg = {});

}  // namespace aquakv
