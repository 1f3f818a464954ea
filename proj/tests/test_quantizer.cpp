#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "aquakv/binary_io.hpp"
#include "aquakv/bitpack.hpp"
#include "aquakv/codebook.hpp"
#include "aquakv/error.hpp"
#include "aquakv/footprint.hpp"
#include "aquakv/linalg.hpp"
#include "aquakv/quantizer.hpp"
#include "support.hpp"

using namespace aquakv;
using fixtures::random_matrix;

TEST(Uniform, ConstantRowIsExact) {
    const Matrix x = Matrix::from_rows({{5, 5, 5, 5}});
    const auto qb = uniform_quantize(x, UniformConfig{2, 4, QuantAxis::per_token});
    EXPECT_TRUE(bitwise_equal(uniform_dequantize(qb), x));
}

TEST(Uniform, HandComputedCodes) {
    const Matrix x = Matrix::from_rows({{0, 1, 2, 3}});
    const auto qb = uniform_quantize(x, UniformConfig{2, 4, QuantAxis::per_token});
    EXPECT_EQ(unpack_codes(qb.payload, 4, qb.code_bits), (std::vector<std::uint32_t>{0, 1, 2, 3}));
    EXPECT_TRUE(bitwise_equal(uniform_dequantize(qb), x));
}

TEST(Uniform, EightBitsIsNearlyLossless) {
    const Matrix x = random_matrix(1024, 64, 1);
    const auto q = Backbone::uniform(UniformConfig{8, 64, QuantAxis::per_token});
    EXPECT_GE(explained_variance_ratio(x, q.dequantize(q.quantize(x))), 0.9999);
}

TEST(Uniform, ErrorShrinksWithBits) {
    const Matrix x = random_matrix(64, 128, 2);
    double prev = 1e9;
    for (int bits = 1; bits <= 8; ++bits) {
        const auto q = Backbone::uniform(UniformConfig{bits, 64, QuantAxis::per_token});
        const double err = fixtures::frobenius_diff(q.dequantize(q.quantize(x)), x);
        EXPECT_LT(err, prev);
        prev = err;
    }
}

TEST(Uniform, PerChannelAxisGroupsAlongTokens) {
    Matrix x = random_matrix(128, 4, 3);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        x(r, 2) *= 100.0f;
    }
    const auto tok = Backbone::uniform(UniformConfig{2, 4, QuantAxis::per_token});
    const auto chan = Backbone::uniform(UniformConfig{2, 64, QuantAxis::per_channel});
    const auto qb = chan.quantize(x);
    EXPECT_EQ(qb.scheme, Scheme::uniform_channel);
    EXPECT_EQ(qb.n_groups, 8u);
    const Matrix a = tok.dequantize(tok.quantize(x));
    const Matrix b = chan.dequantize(qb);
    double err_small_tok = 0.0, err_small_chan = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        err_small_tok += std::abs(a(r, 0) - x(r, 0));
        err_small_chan += std::abs(b(r, 0) - x(r, 0));
    }
    EXPECT_LT(err_small_chan, err_small_tok);
}

TEST(Uniform, RejectsBadConfig) {
    EXPECT_THROW(uniform_quantize(Matrix(1, 4), UniformConfig{9, 4, QuantAxis::per_token}), Error);
    EXPECT_THROW(uniform_quantize(Matrix(1, 4), UniformConfig{0, 4, QuantAxis::per_token}), Error);
    Matrix bad(1, 4);
    bad(0, 1) = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(uniform_quantize(bad, UniformConfig{2, 4, QuantAxis::per_token}), Error);
}

TEST(Codebook, OneBitScalarMatchesLloydMax) {
    const auto cb = build_gaussian_codebook(1, 2, 1);
    const double expected = std::sqrt(2.0 / std::acos(-1.0));
    EXPECT_NEAR(std::abs(cb.points[0]), expected, 0.01);
    EXPECT_NEAR(std::abs(cb.points[1]), expected, 0.01);
}

TEST(Codebook, ClosedUnderNegation) {
    for (auto [d, n] : {std::pair{2, 16}, std::pair{2, 64}, std::pair{4, 256}}) {
        const auto cb = gaussian_codebook(d, n);
        for (int i = 0; i < n; ++i) {
            std::vector<float> neg(static_cast<std::size_t>(d));
            for (int k = 0; k < d; ++k) {
                neg[static_cast<std::size_t>(k)] = -cb->point(static_cast<std::size_t>(i))[static_cast<std::size_t>(k)];
            }
            const auto j = cb->nearest(neg);
            for (int k = 0; k < d; ++k) {
                EXPECT_EQ(cb->point(j)[static_cast<std::size_t>(k)], neg[static_cast<std::size_t>(k)]);
            }
        }
    }
}

TEST(Codebook, Deterministic) {
    LloydOptions opt;
    opt.samples = 1 << 14;
    const auto a = build_gaussian_codebook(2, 16, 5, opt);
    const auto b = build_gaussian_codebook(2, 16, 5, opt);
    EXPECT_EQ(a.points, b.points);
}

TEST(Codebook, DiskCacheStoresTheBuiltCodebook) {
    fixtures::TempDir dir("cbcache");
    const char* prev = std::getenv("AQUAKV_CODEBOOK_DIR");
    const std::string saved = prev ? prev : "";
    ::setenv("AQUAKV_CODEBOOK_DIR", dir.file("").c_str(), 1);
    const auto cb = gaussian_codebook(2, 16, 0x1234);
    if (prev) {
        ::setenv("AQUAKV_CODEBOOK_DIR", saved.c_str(), 1);
    } else {
        ::unsetenv("AQUAKV_CODEBOOK_DIR");
    }
    EXPECT_TRUE(std::filesystem::exists(dir.file("gaussian-d2-n16-0000000000001234-v2.cbk")));
    EXPECT_EQ(cb->points, build_gaussian_codebook(2, 16, 0x1234).points);
}

TEST(Vq, PresetsHaveNominalRates) {
    EXPECT_EQ(VQConfig::preset(2).codebook_size, 16);
    EXPECT_EQ(VQConfig::preset(3).codebook_size, 64);
    EXPECT_EQ(VQConfig::preset(4).codebook_size, 256);
    EXPECT_EQ(VQConfig::preset(2, 4).codebook_size, 256);
    EXPECT_DOUBLE_EQ(VQConfig::preset(3).bits_per_value(), 3.0);
    EXPECT_THROW(VQConfig::preset(5), Error);
}

TEST(Vq, ZeroGroupIsExact) {
    const Matrix x(3, 1024);
    const auto q = Backbone::vq(VQConfig::preset(2));
    EXPECT_TRUE(bitwise_equal(q.dequantize(q.quantize(x)), x));
}

TEST(Vq, TailFallsBackToUniform) {
    const Matrix x = random_matrix(4, 1027, 4);
    const auto q = Backbone::vq(VQConfig::preset(2, 2));
    const auto qb = q.quantize(x);
    EXPECT_GT(qb.tail_length, 0u);
    const Matrix y = q.dequantize(qb);
    EXPECT_GT(explained_variance_ratio(x, y), 0.85);
}

TEST(Vq, StorageMatchesAccounting) {
    const Matrix x = random_matrix(8, 1024, 5);
    const auto q = Backbone::vq(VQConfig::preset(2));
    const auto qb = q.quantize(x);
    EXPECT_EQ(qb.stored_bits(), 8u * (1024u * 2u + 16u));
    FootprintSpec spec;
    spec.layers = 1;
    spec.tokens = 4;
    spec.kv_channels = 1024;
    spec.backbone = StorageRule{2.0, 1024, 16, false};
    EXPECT_DOUBLE_EQ(effective_bits(spec).bits_per_value, 2.0 + 16.0 / 1024.0);
}

TEST(Vq, MoreBitsLessError) {
    const Matrix x = random_matrix(16, 1024, 6);
    double prev = 1e9;
    for (int bits : {2, 3, 4}) {
        const auto q = Backbone::vq(VQConfig::preset(bits));
        const double err = fixtures::frobenius_diff(q.dequantize(q.quantize(x)), x);
        EXPECT_LT(err, prev);
        prev = err;
    }
}

TEST(Blocks, SerializeRoundTrip) {
    const Matrix x = random_matrix(5, 200, 7);
    for (const auto& q : {Backbone::uniform(UniformConfig{3, 64, QuantAxis::per_token}),
                          Backbone::uniform(UniformConfig{2, 2, QuantAxis::per_channel}),
                          Backbone::vq(VQConfig::preset(2)), Backbone::raw()}) {
        const auto qb = q.quantize(x);
        ByteWriter w;
        qb.serialize(w);
        ByteReader r(w.bytes(), "block");
        const auto back = QuantizedBlock::deserialize(r);
        EXPECT_EQ(back, qb);
        EXPECT_TRUE(bitwise_equal(q.dequantize(back), q.dequantize(qb)));
    }
}

TEST(Blocks, CorruptedLengthIsFormatError) {
    const auto qb = Backbone::vq(VQConfig::preset(2)).quantize(random_matrix(2, 64, 8));
    ByteWriter w;
    qb.serialize(w);
    auto bytes = w.bytes();
    bytes.resize(bytes.size() - 3);
    ByteReader r(bytes, "block");
    try {
        QuantizedBlock::deserialize(r);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::format);
    }
}

TEST(Backbone, RawIsLossless) {
    const Matrix x = random_matrix(3, 17, 9);
    const auto q = Backbone::raw();
    EXPECT_TRUE(bitwise_equal(q.dequantize(q.quantize(x)), x));
    EXPECT_EQ(q.bits(), 16);
}

TEST(Backbone, FromOptionsAndWithBits) {
    const auto u = Backbone::from_options("uniform", 2);
    EXPECT_EQ(u.kind(), "uniform");
    EXPECT_EQ(u.group_size(), 64);
    EXPECT_EQ(u.with_bits(4).bits(), 4);
    const auto v = Backbone::from_options("vq", 3);
    EXPECT_EQ(v.group_size(), 1024);
    EXPECT_EQ(v.with_bits(4).bits(), 4);
    EXPECT_EQ(Backbone::from_options("vq", 16).kind(), "none");
    EXPECT_NE(u.hash(), v.hash());
    EXPECT_THROW(Backbone::from_options("lattice", 2), Error);
}
