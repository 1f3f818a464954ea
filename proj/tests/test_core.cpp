#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "aquakv/binary_io.hpp"
#include "aquakv/bitpack.hpp"
#include "aquakv/error.hpp"
#include "aquakv/half.hpp"
#include "aquakv/hadamard.hpp"
#include "aquakv/matrix.hpp"
#include "aquakv/parallel.hpp"
#include "aquakv/random.hpp"
#include "aquakv/rope.hpp"
#include "support.hpp"

using namespace aquakv;

TEST(Half, RoundTripsRepresentableValues) {
    for (float v : {0.0f, 1.0f, -2.5f, 65504.0f, 0.000061035156f, 1024.0f}) {
        EXPECT_EQ(half_to_float(float_to_half(v)), v);
    }
}

TEST(Half, RoundsToNearestEven) {
    EXPECT_EQ(round_to_half(1.0f + 1.0f / 4096.0f), 1.0f);
    EXPECT_EQ(round_to_half(1.0f + 3.0f / 2048.0f), 1.0f + 2.0f / 1024.0f);
    EXPECT_TRUE(std::isinf(round_to_half(1e6f)));
}

TEST(BitPack, PacksMixedWidths) {
    BitWriter w;
    w.put(5, 3);
    w.put(1, 1);
    w.put(0xABC, 12);
    w.put(3, 2);
    EXPECT_EQ(w.bit_length(), 18u);
    const auto bytes = std::move(w).finish();
    ASSERT_EQ(bytes.size(), 3u);
    BitReader r(bytes);
    EXPECT_EQ(r.get(3), 5u);
    EXPECT_EQ(r.get(1), 1u);
    EXPECT_EQ(r.get(12), 0xABCu);
    EXPECT_EQ(r.get(2), 3u);
}

TEST(BitPack, CodesRoundTrip) {
    Rng rng(3);
    for (unsigned width : {1u, 2u, 3u, 4u, 7u, 8u, 12u, 16u}) {
        std::vector<std::uint32_t> codes(1001);
        for (auto& c : codes) {
            c = static_cast<std::uint32_t>(rng.below(1u << width));
        }
        const auto packed = pack_codes(codes, width);
        EXPECT_EQ(packed.size(), (codes.size() * width + 7) / 8);
        EXPECT_EQ(unpack_codes(packed, codes.size(), width), codes);
    }
}

TEST(BinaryIo, ReaderReportsTruncation) {
    ByteWriter w;
    w.u32(7);
    ByteReader r(w.bytes(), "blob");
    EXPECT_EQ(r.u16(), 7u);
    try {
        r.u32();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::format);
        EXPECT_NE(std::string(e.what()).find("blob"), std::string::npos);
    }
}

TEST(Random, StreamsAreDeterministic) {
    Rng a(42), b(42);
    SplitMix c(9), d(9);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(a.next_u64(), b.next_u64());
        EXPECT_EQ(c.normal(), d.normal());
    }
    EXPECT_NE(derive_seed(1, 2), derive_seed(2, 1));
}

TEST(Random, NormalMoments) {
    SplitMix rng(11);
    double s = 0.0, s2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Parallel, CoversRangeOnce) {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), 7, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            ++hits[i];
        }
    });
    for (int h : hits) {
        EXPECT_EQ(h, 1);
    }
}

TEST(Parallel, PropagatesExceptions) {
    EXPECT_THROW(parallel_for(10, 1, [](std::size_t b, std::size_t) {
                     if (b == 5) {
                         fail(ErrorKind::contract, "boom");
                     }
                 }),
                 Error);
}

TEST(Matrix, ApplySplitMatchesConcatenation) {
    const Matrix a = fixtures::random_matrix(9, 5, 1);
    const Matrix b = fixtures::random_matrix(9, 3, 2);
    LinearMap m;
    m.weight = fixtures::random_matrix(8, 4, 3);
    m.bias = {0.5f, -1.0f, 0.0f, 2.0f};
    EXPECT_TRUE(bitwise_equal(m.apply(a, b), m.apply(hconcat(a, b))));
}

TEST(Matrix, TracksAllocations) {
    const std::size_t before = memory::live_bytes();
    {
        Matrix m(100, 100);
        EXPECT_GE(memory::live_bytes(), before + 100 * 100 * sizeof(float));
    }
    EXPECT_EQ(memory::live_bytes(), before);
}

TEST(Hadamard, TwoPointExample) {
    std::vector<float> x = {1.0f, 0.0f};
    fwht(x);
    EXPECT_NEAR(x[0], 0.70710678f, 1e-6);
    EXPECT_NEAR(x[1], 0.70710678f, 1e-6);
}

TEST(Hadamard, RhtIsOrthogonalForAnyLength) {
    Rng rng(5);
    for (std::size_t n : {1u, 2u, 3u, 64u, 96u, 100u, 1024u}) {
        std::vector<float> x(n);
        double norm = 0.0;
        for (auto& v : x) {
            v = static_cast<float>(rng.normal());
            norm += static_cast<double>(v) * v;
        }
        auto y = x;
        rht_forward(y, 77, 3);
        double norm_y = 0.0;
        for (float v : y) {
            norm_y += static_cast<double>(v) * v;
        }
        EXPECT_NEAR(norm_y, norm, 1e-4 * norm);
        rht_inverse(y, 77, 3);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_NEAR(y[i], x[i], 1e-5);
        }
    }
}

TEST(Rope, SingleRotationExample) {
    Matrix k(2, 2);
    k(0, 0) = 1.0f;
    k(1, 0) = 1.0f;
    const std::vector<std::size_t> pos = {0, 1};
    const Matrix r = rope(k, pos, 2, 10000.0);
    EXPECT_FLOAT_EQ(r(0, 0), 1.0f);
    EXPECT_FLOAT_EQ(r(0, 1), 0.0f);
    EXPECT_NEAR(r(1, 0), 0.5403023f, 1e-6);
    EXPECT_NEAR(r(1, 1), 0.8414710f, 1e-6);
}

TEST(Rope, InverseUndoesRotation) {
    const Matrix k = fixtures::random_matrix(50, 64, 8);
    std::vector<std::size_t> pos(50);
    for (std::size_t i = 0; i < pos.size(); ++i) {
        pos[i] = 1000 * i + 3;
    }
    const Matrix back = inverse_rope(rope(k, pos, 32, 10000.0), pos, 32, 10000.0);
    EXPECT_LT(fixtures::frobenius_diff(back, k), 1e-4);
}
