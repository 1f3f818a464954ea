#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace aquakv {

inline constexpr std::uint64_t kDefaultCodebookSeed = 0x5eed'c0de'b00c;

// Grid of n points in d dimensions fit to the standard normal distribution.
struct Codebook {
    int dim = 0;
    int size = 0;
    std::uint64_t seed = 0;
    std::vector<float> points;  // size x dim, row-major
    int lloyd_iterations = 0;
    double final_movement = 0.0;

    std::span<const float> point(std::size_t i) const {
        return {points.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }

    // Index of the nearest codeword in Euclidean distance; ties go to the
    // lowest index.
    std::uint32_t nearest(std::span<const float> v) const;
};

struct LloydOptions {
    std::size_t samples = std::size_t{1} << 20;
    int max_iterations = 200;
    double tolerance = 1e-5;  // max centroid movement
    int restarts = 3;         // independent seedings, lowest distortion kept
};

// Seeded Lloyd / k-means on standard-normal samples, followed by pairing each
// centroid with its nearest negated partner and averaging, so that the result
// is closed under negation and centred at the origin. Deterministic in
// (dim, size, seed, options).
Codebook build_gaussian_codebook(int dim, int size, std::uint64_t seed, const LloydOptions& options = {});

// Process-wide memo of build_gaussian_codebook with default options.
std::shared_ptr<const Codebook> gaussian_codebook(int dim, int size, std::uint64_t seed = kDefaultCodebookSeed);

}  // namespace aquakv
