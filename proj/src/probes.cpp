#include "aquakv/probes.hpp"

#include <algorithm>
#include <cctype>
#include <deque>
#include <limits>
#include <numeric>
#include <sstream>

namespace aquakv {

namespace {

const Matrix& role_of(const LayerData& d, ProbeRole role) { return role == ProbeRole::keys ? d.keys : d.values; }

ProbeRole other(ProbeRole role) { return role == ProbeRole::keys ? ProbeRole::values : ProbeRole::keys; }

int max_distance(const ProbeSource& s, ProbeTerm::Kind kind) {
    int d = 0;
    for (const auto& t : s.terms) {
        if (t.kind == kind) {
            d = std::max(d, t.distance);
        }
    }
    return d;
}

struct RowSplit {
    std::size_t end = 0;  // rows [0, end) are loaded
    std::vector<std::size_t> position;  // position within its sequence
    std::vector<std::uint8_t> is_train;
};

RowSplit split_rows(const TraceMeta& meta, const ProbeConfig& cfg) {
    RowSplit out;
    const std::size_t n = meta.n_sequences();
    const auto offsets = meta.sequence_offsets();
    std::size_t train = cfg.train_sequences, holdout = cfg.holdout_sequences;
    if (n == 1 && train == 0 && holdout == 0) {
        const std::size_t t = meta.sequence_lengths[0];
        const std::size_t cut = t - std::max<std::size_t>(1, t / 8);
        out.end = t;
        for (std::size_t r = 0; r < t; ++r) {
            out.position.push_back(r);
            out.is_train.push_back(r < cut ? 1 : 0);
        }
        return out;
    }
    if (train == 0 && holdout == 0) {
        holdout = std::max<std::size_t>(1, n / 8);
        train = n - holdout;
    } else if (train == 0) {
        train = n > holdout ? n - holdout : 0;
    } else if (holdout == 0) {
        holdout = n > train ? n - train : 0;
    }
    require(train >= 1 && holdout >= 1 && train + holdout <= n, ErrorKind::config,
            "probe split needs at least one train and one holdout sequence");
    out.end = offsets[train + holdout];
    for (std::size_t s = 0; s < train + holdout; ++s) {
        for (std::size_t p = 0; p < meta.sequence_lengths[s]; ++p) {
            out.position.push_back(p);
            out.is_train.push_back(s < train ? 1 : 0);
        }
    }
    return out;
}

std::optional<double> safe_evr(const Matrix& y, const Matrix& y_hat, EvrAggregation agg, std::string* note) {
    try {
        return explained_variance_ratio(y, y_hat, agg);
    } catch (const Error& e) {
        if (note != nullptr) {
            *note = e.what();
        }
        return std::nullopt;
    }
}

double mean_of(const std::vector<std::optional<double>>& v) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& x : v) {
        if (x) {
            sum += *x;
            ++n;
        }
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

}  // namespace

std::string to_string(ProbeRole role) { return role == ProbeRole::keys ? "keys" : "values"; }

ProbeSource parse_probe_source(const std::string& text) {
    ProbeSource src;
    src.name = text;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, '+')) {
        ProbeTerm term;
        auto distance = [&](std::size_t prefix) {
            const std::string digits = part.substr(prefix);
            require(!digits.empty() && std::all_of(digits.begin(), digits.end(), [](unsigned char ch) { return std::isdigit(ch) != 0; }), ErrorKind::config,
                    "probe source '" + part + "' needs a positive distance");
            const int d = std::stoi(digits);
            require(d >= 1, ErrorKind::config, "probe distance must be >= 1");
            return d;
        };
        if (part.rfind("prevL", 0) == 0) {
            term = {ProbeTerm::prev_layer, distance(5)};
        } else if (part.rfind("prevT", 0) == 0) {
            term = {ProbeTerm::prev_token, distance(5)};
        } else if (part == "crossrole") {
            term = {ProbeTerm::cross_role, 0};
        } else if (part == "self") {
            term = {ProbeTerm::self, 0};
        } else {
            fail(ErrorKind::config,
                 "unknown probe source '" + part + "' (expected prevL<k>, prevT<k>, crossrole or self)");
        }
        src.terms.push_back(term);
    }
    require(!src.terms.empty(), ErrorKind::config, "empty probe source");
    return src;
}

std::vector<ProbeSource> parse_probe_sources(const std::string& text) {
    std::vector<ProbeSource> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (!part.empty()) {
            out.push_back(parse_probe_source(part));
        }
    }
    require(!out.empty(), ErrorKind::config, "no probe sources given");
    return out;
}

const ProbeResult& ProbeReport::find(ProbeRole target, const std::string& source) const {
    for (const auto& r : results) {
        if (r.target == target && r.source == source) {
            return r;
        }
    }
    fail(ErrorKind::config, "no probe result for " + to_string(target) + " from " + source);
}

nlohmann::json ProbeReport::to_json() const {
    nlohmann::json j;
    j["train_rows"] = train_rows;
    j["holdout_rows"] = holdout_rows;
    j["reference_thresholds"] = {{"1bit_quantizer_evr", 0.75}, {"2bit_quantizer_evr", 0.89}};
    auto& list = j["probes"] = nlohmann::json::array();
    for (const auto& r : results) {
        nlohmann::json per_layer = nlohmann::json::array();
        nlohmann::json per_layer_train = nlohmann::json::array();
        for (std::size_t l = 0; l < r.holdout_evr.size(); ++l) {
            per_layer.push_back(r.holdout_evr[l] ? nlohmann::json(*r.holdout_evr[l]) : nlohmann::json());
            per_layer_train.push_back(r.train_evr[l] ? nlohmann::json(*r.train_evr[l]) : nlohmann::json());
        }
        list.push_back({{"target", to_string(r.target)},
                        {"source", r.source},
                        {"mean_holdout_evr", r.mean_holdout_evr},
                        {"mean_train_evr", r.mean_train_evr},
                        {"holdout_evr", per_layer},
                        {"train_evr", per_layer_train},
                        {"notes", r.notes}});
    }
    return j;
}

std::string ProbeReport::to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "target,source,layer,holdout_evr,train_evr\n";
    for (const auto& r : results) {
        for (std::size_t l = 0; l < r.holdout_evr.size(); ++l) {
            os << to_string(r.target) << ',' << r.source << ',' << l << ',';
            if (r.holdout_evr[l]) {
                os << *r.holdout_evr[l];
            }
            os << ',';
            if (r.train_evr[l]) {
                os << *r.train_evr[l];
            }
            os << '\n';
        }
    }
    return os.str();
}

ProbeReport probe_matrix(const LayerSource& trace, const std::vector<ProbeRole>& targets,
                         const std::vector<ProbeSource>& sources, const ProbeConfig& cfg) {
    const TraceMeta& meta = trace.meta();
    require(!targets.empty() && !sources.empty(), ErrorKind::config, "probe needs targets and sources");
    require(cfg.lambda >= 0.0 && cfg.sinks >= 0, ErrorKind::config, "invalid probe config");
    const RowSplit split = split_rows(meta, cfg);
    const std::size_t c = meta.kv_channels();

    int window = 0;
    for (const auto& s : sources) {
        window = std::max(window, max_distance(s, ProbeTerm::prev_layer));
    }

    ProbeReport report;
    for (auto role : targets) {
        for (const auto& s : sources) {
            ProbeResult r;
            r.target = role;
            r.source = s.name;
            report.results.push_back(std::move(r));
        }
    }

    std::deque<LayerData> history;  // history[k - 1] is layer l - k
    for (int layer = 0; layer < meta.n_layers; ++layer) {
        LayerData cur = trace.load_layer(layer, 0, split.end);
        std::size_t idx = 0;
        for (auto role : targets) {
            for (const auto& s : sources) {
                ProbeResult& res = report.results[idx++];
                if (max_distance(s, ProbeTerm::prev_layer) > layer) {
                    res.holdout_evr.emplace_back();
                    res.train_evr.emplace_back();
                    res.notes.push_back("layer " + std::to_string(layer) + ": source precedes layer 0, skipped");
                    continue;
                }
                const std::size_t min_pos =
                    std::max<std::size_t>(static_cast<std::size_t>(cfg.sinks),
                                          static_cast<std::size_t>(max_distance(s, ProbeTerm::prev_token)));
                std::vector<std::size_t> train_rows, hold_rows;
                for (std::size_t row = 0; row < split.end; ++row) {
                    if (split.position[row] < min_pos) {
                        continue;
                    }
                    (split.is_train[row] ? train_rows : hold_rows).push_back(row);
                }
                if (train_rows.empty() || hold_rows.size() < 2) {
                    res.holdout_evr.emplace_back();
                    res.train_evr.emplace_back();
                    res.notes.push_back("layer " + std::to_string(layer) + ": not enough rows after trimming");
                    continue;
                }
                auto features = [&](const std::vector<std::size_t>& rows) {
                    Matrix x(rows.size(), c * s.terms.size());
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                        float* dst = x.row(i).data();
                        for (std::size_t t = 0; t < s.terms.size(); ++t) {
                            const ProbeTerm& term = s.terms[t];
                            std::span<const float> src;
                            switch (term.kind) {
                                case ProbeTerm::prev_layer:
                                    src = role_of(history[static_cast<std::size_t>(term.distance - 1)], role)
                                              .row(rows[i]);
                                    break;
                                case ProbeTerm::prev_token:
                                    src = role_of(cur, role).row(rows[i] - static_cast<std::size_t>(term.distance));
                                    break;
                                case ProbeTerm::cross_role:
                                    src = role_of(cur, other(role)).row(rows[i]);
                                    break;
                                case ProbeTerm::self:
                                    src = role_of(cur, role).row(rows[i]);
                                    break;
                            }
                            std::copy(src.begin(), src.end(), dst + t * c);
                        }
                    }
                    return x;
                };
                const Matrix& y_all = role_of(cur, role);
                const Matrix x_train = features(train_rows);
                const Matrix y_train = y_all.gather_rows(train_rows);
                NormalEquations eq(x_train.cols(), c);
                eq.add_rows(x_train, y_train);
                const LinearMap map = eq.solve(cfg.lambda);
                std::string note;
                res.train_evr.push_back(safe_evr(y_train, map.apply(x_train), cfg.aggregation, &note));
                const Matrix x_hold = features(hold_rows);
                res.holdout_evr.push_back(
                    safe_evr(y_all.gather_rows(hold_rows), map.apply(x_hold), cfg.aggregation, &note));
                if (!note.empty()) {
                    res.notes.push_back("layer " + std::to_string(layer) + ": " + note);
                }
                report.train_rows = std::max(report.train_rows, train_rows.size());
                report.holdout_rows = std::max(report.holdout_rows, hold_rows.size());
            }
        }
        if (window > 0) {
            history.push_front(std::move(cur));
            if (history.size() > static_cast<std::size_t>(window)) {
                history.pop_back();
            }
        }
    }
    for (auto& r : report.results) {
        r.mean_holdout_evr = mean_of(r.holdout_evr);
        r.mean_train_evr = mean_of(r.train_evr);
    }
    return report;
}

}  // namespace aquakv
