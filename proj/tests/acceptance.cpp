// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aquakv/calibration.hpp"
#include "aquakv/codebook.hpp"
#include "aquakv/footprint.hpp"
#include "aquakv/hadamard.hpp"
#include "aquakv/kvcache.hpp"
#include "aquakv/linalg.hpp"
#include "aquakv/probes.hpp"
#include "aquakv/pruning.hpp"
#include "aquakv/quantizer.hpp"
#include "aquakv/rope.hpp"
#include "aquakv/synth.hpp"
#include "support.hpp"

using namespace aquakv;
using aquakv::fixtures::frobenius;
using aquakv::fixtures::frobenius_diff;
using aquakv::fixtures::frozen_synth;
using aquakv::fixtures::random_matrix;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

const KVTrace& frozen_trace() {
    static const KVTrace trace = synth_trace(frozen_synth());
    return trace;
}

Outcome quantizer_evr_anchor() {
    const auto t0 = Clock::now();
    setenv("AQUAKV_THREADS", "1", 1);
    const Matrix x = random_matrix(1024, 1024, 101);
    const Backbone q = Backbone::vq(VQConfig::preset(2, 2));
    const Matrix x_hat = q.dequantize(q.quantize(x));
    unsetenv("AQUAKV_THREADS");
    const double evr = explained_variance_ratio(x, x_hat);
    const double secs = seconds_since(t0);
    return {std::abs(evr - 0.89) <= 0.03 && secs < 30.0,
            fmt("evr=%.4f", evr) + fmt(" (target 0.89 +- 0.03), %.1fs", secs)};
}

Outcome scale_independence() {
    double worst = 0.0;
    const std::vector<Backbone> backbones = {Backbone::uniform(UniformConfig{2, 64, QuantAxis::per_token}),
                                             Backbone::vq(VQConfig::preset(2, 2))};
    for (const auto& q : backbones) {
        for (int i = 0; i < 100; ++i) {
            Matrix x = random_matrix(8, 1024, 2000 + static_cast<std::uint64_t>(i), 0.5 + 0.05 * i);
            const double base = frobenius_diff(q.dequantize(q.quantize(x)), x);
            for (double alpha : {0.1, 1.0, 10.0}) {
                Matrix ax = x;
                for (auto& v : ax.values()) {
                    v = static_cast<float>(alpha * v);
                }
                const double err = frobenius_diff(q.dequantize(q.quantize(ax)), ax);
                worst = std::max(worst, std::abs(err - alpha * base) / (alpha * base));
            }
        }
    }
    return {worst <= 0.01, fmt("max relative deviation %.2e (tolerance 1e-2)", worst)};
}

Outcome ridge_oracle() {
    Rng rng(303);
    double worst = 0.0;
    for (int inst = 0; inst < 50; ++inst) {
        const std::size_t n = 1 + rng.below(32);
        const std::size_t m = 1 + rng.below(8);
        const std::size_t rows = 2 * (n + 1) + rng.below(64);
        const Matrix x = random_matrix(rows, n, 4000 + static_cast<std::uint64_t>(inst));
        const Matrix y = random_matrix(rows, m, 5000 + static_cast<std::uint64_t>(inst));
        const LinearMap fit = ridge_fit(x, y, 0.0);

        Eigen::MatrixXd a(rows, n + 1);
        Eigen::MatrixXd b(rows, m);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                a(r, c) = x(r, c);
            }
            a(r, n) = 1.0;
            for (std::size_t c = 0; c < m; ++c) {
                b(r, c) = y(r, c);
            }
        }
        const Eigen::MatrixXd theta = a.completeOrthogonalDecomposition().pseudoInverse() * b;
        Eigen::MatrixXd mine(n + 1, m);
        for (std::size_t c = 0; c < m; ++c) {
            for (std::size_t k = 0; k < n; ++k) {
                mine(k, c) = fit.weight(k, c);
            }
            mine(n, c) = fit.bias[c];
        }
        const double res_oracle = (a * theta - b).norm();
        const double res_mine = (a * mine - b).norm();
        worst = std::max(worst, std::abs(res_mine - res_oracle) / res_oracle);
        worst = std::max(worst, (mine - theta).norm() / theta.norm());
    }
    return {worst <= 1e-4, fmt("max relative difference %.2e (tolerance 1e-4)", worst)};
}

Outcome residual_error_ratio() {
    const auto t0 = Clock::now();
    const KVTrace& trace = frozen_trace();
    CalibConfig cfg;
    const PredictorSet ps = calibrate(trace, cfg);
    const RolloutReport report = holdout_report(ps, trace, cfg);
    const double secs = seconds_since(t0);
    const double evr = report.predictor_evr();
    const double ratio = report.mean_error_ratio();
    const bool evr_ok = evr >= 0.88 && evr <= 0.92;
    const bool ratio_ok = ratio >= 0.05 && ratio <= 0.2;
    return {evr_ok && ratio_ok && secs < 120.0,
            fmt("predictor holdout evr=%.4f", evr) + fmt(" (want [0.88, 0.92]), error ratio=%.4f", ratio) +
                fmt(" (want [0.05, 0.2]), %.1fs", secs)};
}

Outcome sequential_consistency() {
    const KVTrace& trace = frozen_trace();
    CalibConfig cfg;
    std::vector<DecodedBlock> calib(static_cast<std::size_t>(trace.info.n_layers));
    const auto ps = std::make_shared<const PredictorSet>(
        calibrate(trace, cfg, [&](int layer, const Matrix& k, const Matrix& v) {
            calib[static_cast<std::size_t>(layer)] = {k, v};
        }));
    const SequenceSplit split = resolve_split(trace.info, cfg);
    const KVTrace train = trace.sequences(split.train_begin, split.train_end);
    ReplayConfig rc;
    rc.cache.predictors = ps;
    const auto offsets = train.info.sequence_offsets();
    std::size_t mismatched = 0;
    std::size_t compared = 0;
    replay_trace(train, rc, [&](std::size_t s, int layer, const Matrix& k, const Matrix& v) {
        const auto& ref = calib[static_cast<std::size_t>(layer)];
        const Matrix rk = ref.keys.slice_rows(offsets[s], offsets[s + 1]);
        const Matrix rv = ref.values.slice_rows(offsets[s], offsets[s + 1]);
        ++compared;
        if (!bitwise_equal(rk, k) || !bitwise_equal(rv, v)) {
            ++mismatched;
        }
    });
    return {compared > 0 && mismatched == 0,
            std::to_string(compared) + " (sequence, layer) blocks compared, " + std::to_string(mismatched) +
                " differ"};
}

Outcome chunk_independence() {
    const KVTrace trace = frozen_trace().sequences(0, 2);
    CalibConfig cc;
    const auto ps = std::make_shared<const PredictorSet>(calibrate(frozen_trace(), cc));
    std::vector<std::vector<std::uint8_t>> ref_bytes;
    std::vector<std::vector<DecodedBlock>> ref_recon;
    bool same = true;
    for (std::size_t chunk : {1, 17, 128, 384}) {
        ReplayConfig rc;
        rc.cache.predictors = ps;
        rc.chunk_tokens = chunk;
        std::vector<CompressedKVCache> caches;
        replay_trace(trace, rc, {}, &caches);
        std::vector<std::vector<std::uint8_t>> bytes;
        std::vector<std::vector<DecodedBlock>> recon;
        for (const auto& c : caches) {
            bytes.push_back(c.serialize());
            recon.push_back(c.reconstruct_all());
        }
        if (ref_bytes.empty()) {
            ref_bytes = bytes;
            ref_recon = recon;
            continue;
        }
        same = same && bytes == ref_bytes;
        for (std::size_t s = 0; s < recon.size(); ++s) {
            for (std::size_t l = 0; l < recon[s].size(); ++l) {
                same = same && bitwise_equal(recon[s][l].keys, ref_recon[s][l].keys) &&
                       bitwise_equal(recon[s][l].values, ref_recon[s][l].values);
            }
        }
    }
    return {same, same ? "chunks 1, 17, 128, 384 give identical caches and reconstructions"
                       : "caches or reconstructions differ between chunk sizes"};
}

Outcome footprint_accounting() {
    auto gb = [](const std::string& name) {
        const ModelGeometry& g = geometry_preset(name);
        FootprintSpec spec;
        spec.layers = g.layers;
        spec.kv_channels = g.kv_channels();
        spec.tokens = 131072;
        spec.backbone = storage_rule(Backbone::raw());
        return effective_bits(spec).gigabytes();
    };
    auto bpv = [](const Backbone& q) {
        FootprintSpec spec;
        spec.layers = 28;
        spec.kv_channels = 1024;
        spec.tokens = 131072;
        spec.backbone = storage_rule(q);
        return effective_bits(spec).bits_per_value;
    };
    const double small = gb("llama3.2-3b");
    const double large = gb("llama3.1-70b");
    const double uni = bpv(Backbone::uniform(UniformConfig{2, 64, QuantAxis::per_token}));
    const double vq = bpv(Backbone::vq(VQConfig::preset(2, 2)));
    const bool ok = std::abs(small - 15.0) <= 0.15 && std::abs(large - 42.9) <= 0.429 && uni == 2.5 &&
                    std::abs(vq - (2.0 + 16.0 / 1024.0)) < 1e-12;
    return {ok, fmt("3B %.3f GB", small) + fmt(", 70B %.3f GB", large) + fmt(", uniform gs64 %.4f b/v", uni) +
                    fmt(", vq gs1024 %.4f b/v", vq)};
}

// Token i is kept iff it is mandatory or fewer than `slots` optional tokens
// outrank it (higher score, or equal score and lower index).
std::vector<std::size_t> h2o_pairwise(const std::vector<float>& s, std::size_t keep, std::size_t recent,
                                      std::size_t sinks) {
    const std::size_t t = s.size();
    auto mandatory = [&](std::size_t i) { return i < sinks || i + recent >= t; };
    std::size_t n_mandatory = 0;
    for (std::size_t i = 0; i < t; ++i) {
        n_mandatory += mandatory(i) ? 1 : 0;
    }
    const std::size_t slots = keep - n_mandatory;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < t; ++i) {
        if (mandatory(i)) {
            out.push_back(i);
            continue;
        }
        std::size_t better = 0;
        for (std::size_t j = 0; j < t; ++j) {
            if (j != i && !mandatory(j) && (s[j] > s[i] || (s[j] == s[i] && j < i))) {
                ++better;
            }
        }
        if (better < slots) {
            out.push_back(i);
        }
    }
    return out;
}

// Exhaustive search over subsets: maximal score sum, then lexicographically
// smallest index list.
std::vector<std::size_t> h2o_subsets(const std::vector<float>& s, std::size_t keep, std::size_t recent,
                                     std::size_t sinks) {
    const std::size_t t = s.size();
    std::vector<std::size_t> best;
    double best_sum = -1e300;
    for (std::uint32_t mask = 0; mask < (1u << t); ++mask) {
        if (static_cast<std::size_t>(std::popcount(mask)) != keep) {
            continue;
        }
        bool valid = true;
        double sum = 0.0;
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < t; ++i) {
            const bool in = (mask >> i) & 1u;
            if ((i < sinks || i + recent >= t) && !in) {
                valid = false;
                break;
            }
            if (in) {
                sum += s[i];
                idx.push_back(i);
            }
        }
        if (valid && (sum > best_sum || (sum == best_sum && idx < best))) {
            best_sum = sum;
            best = idx;
        }
    }
    return best;
}

Outcome h2o_oracle() {
    Rng rng(808);
    std::size_t mismatches = 0;
    std::size_t count_errors = 0;
    std::size_t exhaustive = 0;
    for (int inst = 0; inst < 1000; ++inst) {
        const std::size_t t = 1 + rng.below(64);
        std::vector<float> s(t);
        const bool ties = inst % 2 == 0;
        for (auto& v : s) {
            v = ties ? static_cast<float>(rng.below(5)) : static_cast<float>(rng.uniform());
        }
        const std::size_t keep = fraction_count(0.20, t);
        const std::size_t recent = fraction_count(0.10, t);
        const std::size_t sinks = std::min<std::size_t>(rng.below(3), keep - std::min(keep, recent));
        const auto got = h2o_select(s, 0.20, 0.10, static_cast<int>(sinks));
        if (got.size() != keep) {
            ++count_errors;
        }
        if (got != h2o_pairwise(s, keep, recent, sinks)) {
            ++mismatches;
        }
        if (t <= 16) {
            ++exhaustive;
            if (got != h2o_subsets(s, keep, recent, sinks)) {
                ++mismatches;
            }
        }
    }
    return {mismatches == 0 && count_errors == 0,
            "1000 instances (" + std::to_string(exhaustive) + " also by subset enumeration): " +
                std::to_string(mismatches) + " mismatches, " + std::to_string(count_errors) + " wrong kept counts"};
}

Outcome probe_orderings() {
    const auto sources = parse_probe_sources("prevL1,prevL3,prevL1+prevL2");
    int ok_seeds = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const KVTrace trace = synth_trace(frozen_synth(seed));
        const ProbeReport r = probe_matrix(trace, {ProbeRole::keys, ProbeRole::values}, sources);
        const double k1 = r.find(ProbeRole::keys, "prevL1").mean_holdout_evr;
        const double v1 = r.find(ProbeRole::values, "prevL1").mean_holdout_evr;
        const double k3 = r.find(ProbeRole::keys, "prevL3").mean_holdout_evr;
        const double v3 = r.find(ProbeRole::values, "prevL3").mean_holdout_evr;
        const double k12 = r.find(ProbeRole::keys, "prevL1+prevL2").mean_holdout_evr;
        const double v12 = r.find(ProbeRole::values, "prevL1+prevL2").mean_holdout_evr;
        const bool ok = k1 > v1 && k1 > k3 && v1 > v3 && std::abs(k12 - k1) <= 0.05 && std::abs(v12 - v1) <= 0.05;
        ok_seeds += ok ? 1 : 0;
        if (seed == 1) {
            detail = fmt("seed 1: keys L1 %.3f", k1) + fmt(" L3 %.3f", k3) + fmt(" L1+L2 %.3f", k12) +
                     fmt("; values L1 %.3f", v1) + fmt(" L3 %.3f", v3) + fmt(" L1+L2 %.3f", v12);
        }
    }
    return {ok_seeds == 5, std::to_string(ok_seeds) + "/5 seeds hold all orderings; " + detail};
}

Outcome monotone_bits() {
    const KVTrace& trace = frozen_trace();
    bool ok = true;
    std::string detail;
    for (const std::string kind : {"uniform", "vq"}) {
        std::vector<double> err;
        for (int bits : {2, 3, 4}) {
            CalibConfig cfg;
            cfg.backbone = Backbone::from_options(kind, bits);
            const PredictorSet ps = calibrate(trace, cfg);
            const RolloutReport r = holdout_report(ps, trace, cfg);
            err.push_back(r.keys.mse() + r.values.mse());
        }
        ok = ok && err[2] <= err[1] && err[1] <= err[0];
        detail += (detail.empty() ? "" : "; ") + kind + fmt(" mse 2b %.4g", err[0]) + fmt(" 3b %.4g", err[1]) + fmt(" 4b %.4g", err[2]);
    }
    return {ok, detail};
}

Outcome isometries() {
    Rng rng(1111);
    double worst_rt = 0.0;
    double worst_norm = 0.0;
    std::vector<float> x(128);
    for (int i = 0; i < 10000; ++i) {
        for (auto& v : x) {
            v = static_cast<float>(rng.normal());
        }
        std::vector<float> y = x;
        const std::uint64_t seed = rng.next_u64();
        rht_forward(y, seed);
        double nx = 0.0, ny = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) {
            nx += static_cast<double>(x[k]) * x[k];
            ny += static_cast<double>(y[k]) * y[k];
        }
        worst_norm = std::max(worst_norm, std::abs(std::sqrt(ny) - std::sqrt(nx)) / std::sqrt(nx));
        rht_inverse(y, seed);
        double d = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) {
            d = std::max(d, static_cast<double>(std::abs(y[k] - x[k])));
        }
        worst_rt = std::max(worst_rt, d);
    }
    const std::size_t n = 10000;
    const Matrix k = random_matrix(n, 128, 1212);
    std::vector<std::size_t> pos(n);
    for (auto& p : pos) {
        p = rng.below(131072);
    }
    const Matrix rotated = rope(k, pos, 64, 500000.0);
    const Matrix back = inverse_rope(rotated, pos, 64, 500000.0);
    for (std::size_t r = 0; r < n; ++r) {
        double nx = 0.0, ny = 0.0;
        for (std::size_t c = 0; c < 128; ++c) {
            nx += static_cast<double>(k(r, c)) * k(r, c);
            ny += static_cast<double>(rotated(r, c)) * rotated(r, c);
            worst_rt = std::max(worst_rt, static_cast<double>(std::abs(back(r, c) - k(r, c))));
        }
        worst_norm = std::max(worst_norm, std::abs(std::sqrt(ny) - std::sqrt(nx)) / std::sqrt(nx));
    }
    return {worst_rt <= 1e-5 && worst_norm <= 1e-5,
            fmt("max round-trip error %.2e", worst_rt) + fmt(", max relative norm change %.2e", worst_norm)};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"quantizer EVR anchor", quantizer_evr_anchor},
        {"scale independence", scale_independence},
        {"ridge oracle equivalence", ridge_oracle},
        {"residual error ratio", residual_error_ratio},
        {"sequential consistency", sequential_consistency},
        {"chunk-size independence", chunk_independence},
        {"footprint accounting", footprint_accounting},
        {"H2O oracle", h2o_oracle},
        {"probe orderings", probe_orderings},
        {"monotone bits", monotone_bits},
        {"RHT/RoPE isometries", isometries},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        const auto t0 = Clock::now();
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += o.pass ? 0 : 1;
        std::printf("%s criterion %zu (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                    o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
