#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "aquakv/matrix.hpp"
#include "aquakv/random.hpp"
#include "aquakv/synth.hpp"

namespace aquakv::fixtures {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Matrix m(rows, cols);
    for (auto& v : m.values()) {
        v = static_cast<float>(scale * rng.normal());
    }
    return m;
}

// Small synthetic trace used throughout the suite.
inline SynthConfig small_synth(std::uint64_t seed = 7) {
    SynthConfig cfg;
    cfg.layers = 4;
    cfg.kv_heads = 2;
    cfg.head_dim = 16;
    cfg.tokens = 160;
    cfg.sequences = 4;
    cfg.seed = seed;
    return cfg;
}

// The frozen trace of the acceptance suite.
inline SynthConfig frozen_synth(std::uint64_t seed = 7) {
    SynthConfig cfg;
    cfg.layers = 8;
    cfg.kv_heads = 4;
    cfg.head_dim = 32;
    cfg.tokens = 512;
    cfg.sequences = 8;
    cfg.seed = seed;
    return cfg;
}

inline double frobenius(const Matrix& a) {
    double s = 0.0;
    for (float v : a.values()) {
        s += static_cast<double>(v) * v;
    }
    return std::sqrt(s);
}

inline double frobenius_diff(const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.values()[i]) - b.values()[i];
        s += d * d;
    }
    return std::sqrt(s);
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("aquakv-" + tag + "-" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace aquakv::fixtures
