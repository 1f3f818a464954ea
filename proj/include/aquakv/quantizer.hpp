#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "aquakv/binary_io.hpp"
#include "aquakv/codebook.hpp"
#include "aquakv/matrix.hpp"

namespace aquakv {

enum class QuantAxis : std::uint8_t { per_token = 0, per_channel = 1 };

// Group-wise asymmetric min-max quantization.
struct UniformConfig {
    int bits = 2;
    int group_size = 64;
    QuantAxis axis = QuantAxis::per_token;

    void validate() const;
};

inline constexpr std::uint64_t kDefaultRhtSeed = 0x7a11'ad4a'0000'0001ULL;

// Randomized-Hadamard vector quantization: per-group rotation, RMS scale and
// nearest-codeword rounding of d-dimensional sub-vectors.
struct VQConfig {
    int group_size = 1024;
    int dim = 2;
    int codebook_size = 16;
    std::uint64_t seed = kDefaultRhtSeed;
    std::uint64_t codebook_seed = kDefaultCodebookSeed;

    int index_bits() const;        // log2(codebook_size)
    double bits_per_value() const;  // index_bits / dim
    void validate() const;

    // Grid presets by bits/value: d=2 gives n = 16, 64, 256 for 2, 3, 4 bits;
    // d=4 gives n = 256 at 2 bits.
    static VQConfig preset(int bits, int dim = 2);
};

// Bits per value of the uniform fallback used for VQ group tails shorter than d.
inline constexpr int kVqTailBits = 4;

enum class Scheme : std::uint8_t {
    uniform_token = 0,
    uniform_channel = 1,
    vq = 2,
    raw = 3,  // lossless passthrough, accounted as a 16-bit cache
};

// Output of a backbone quantizer. Scales and zero points are binary16.
struct QuantizedBlock {
    Scheme scheme = Scheme::raw;
    std::uint8_t code_bits = 0;  // width of one packed code
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::uint32_t group_size = 0;
    std::uint32_t n_groups = 0;
    std::vector<std::uint16_t> scales;       // one per group
    std::vector<std::uint16_t> zero_points;  // uniform only
    // VQ only: sub-vector dimension, rotation seed, codebook seed, and per-row
    // tail (values left over after the last full sub-vector) handled by 4-bit
    // uniform quantization with its own scale and zero point.
    std::uint8_t vq_dim = 0;
    std::uint64_t vq_seed = 0;
    std::uint64_t codebook_seed = 0;
    std::uint32_t tail_length = 0;
    std::vector<std::uint16_t> tail_scales;
    std::vector<std::uint16_t> tail_zero_points;
    std::vector<std::uint8_t> payload;
    std::uint64_t payload_bits = 0;

    // Storage cost: packed codes plus 16 bits per stored scale / zero point.
    // A raw block is charged 16 bits per value.
    std::uint64_t stored_bits() const;

    void serialize(ByteWriter& out) const;
    static QuantizedBlock deserialize(ByteReader& in);

    friend bool operator==(const QuantizedBlock&, const QuantizedBlock&) = default;
};

QuantizedBlock uniform_quantize(const Matrix& x, const UniformConfig& cfg);
Matrix uniform_dequantize(const QuantizedBlock& qb);

QuantizedBlock vq_quantize(const Matrix& x, const VQConfig& cfg, const Codebook& cb);
Matrix vq_dequantize(const QuantizedBlock& qb, const Codebook& cb);

QuantizedBlock raw_store(const Matrix& x);

// Dispatches on qb.scheme; VQ blocks look up their codebook by the seeds in
// the block header.
Matrix dequantize(const QuantizedBlock& qb);

struct RawConfig {};

// Value type wrapping one backbone configuration (the Q / Q^-1 pair).
class Backbone {
public:
    Backbone() : config_(RawConfig{}) {}

    static Backbone uniform(UniformConfig cfg);
    static Backbone vq(VQConfig cfg);
    static Backbone raw();
    // kind in {"uniform", "vq", "none"}; bits >= 16 always yields raw.
    static Backbone from_options(const std::string& kind, int bits, int group_size = 0, int vq_dim = 2,
                                 QuantAxis axis = QuantAxis::per_token);

    // Same family and grouping at a different bit width.
    Backbone with_bits(int bits) const;

    QuantizedBlock quantize(const Matrix& x) const;
    Matrix dequantize(const QuantizedBlock& qb) const;

    Scheme scheme() const;
    std::string kind() const;  // "uniform", "vq" or "none"
    int bits() const;          // nominal bits per value (16 for raw)
    double code_bits_per_value() const;
    int group_size() const;
    int overhead_bits_per_group() const;
    std::string describe() const;
    std::uint64_t hash() const;

    const std::variant<RawConfig, UniformConfig, VQConfig>& config() const noexcept { return config_; }

private:
    explicit Backbone(std::variant<RawConfig, UniformConfig, VQConfig> cfg);

    std::variant<RawConfig, UniformConfig, VQConfig> config_;
    std::shared_ptr<const Codebook> codebook_;
};

}  // namespace aquakv
