#include <gtest/gtest.h>

#include "aquakv/error.hpp"
#include "aquakv/pruning.hpp"
#include "aquakv/synth.hpp"
#include "support.hpp"

using namespace aquakv;

TEST(H2O, HandWorkedExample) {
    const std::vector<float> s = {9, 1, 8, 2, 7, 3, 6, 4, 5, 0};
    // recent {8, 9}; the three best of tokens 0..7 are 0 (9), 2 (8), 4 (7)
    EXPECT_EQ(h2o_select(s, 0.5, 0.2, 0), (std::vector<std::size_t>{0, 2, 4, 8, 9}));
}

TEST(H2O, FullBudgetKeepsEverything) {
    const std::vector<float> s = {3, 1, 2, 5, 4};
    EXPECT_EQ(h2o_select(s, 1.0, 0.2, 1), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(H2O, TiesPreferLowerIndex) {
    const std::vector<float> s(10, 1.0f);
    EXPECT_EQ(h2o_select(s, 0.3, 0.1, 0), (std::vector<std::size_t>{0, 1, 9}));
}

TEST(H2O, KeepsCeilOfBudget) {
    for (std::size_t t = 1; t <= 64; ++t) {
        std::vector<float> s(t);
        for (std::size_t i = 0; i < t; ++i) {
            s[i] = static_cast<float>((i * 37) % 11);
        }
        EXPECT_EQ(h2o_select(s, 0.2, 0.1, 0).size(), fraction_count(0.2, t));
    }
    EXPECT_EQ(fraction_count(0.2, 10), 2u);
    EXPECT_EQ(fraction_count(0.2, 11), 3u);
}

TEST(H2O, BudgetBelowMandatoryIsConfigError) {
    const std::vector<float> s(20, 1.0f);
    try {
        h2o_select(s, 0.2, 0.1, 4);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
    }
}

TEST(Prune, SharedSelectionAcrossLayers) {
    auto cfg = fixtures::small_synth();
    cfg.attention_stats = true;
    const KVTrace t = synth_trace(cfg);
    PruneConfig pc;
    const auto sel = h2o_select_layers(t, 0, 160, pc);
    ASSERT_EQ(sel.size(), 4u);
    for (const auto& s : sel) {
        EXPECT_EQ(s, sel[0]);
        EXPECT_EQ(s.size(), 32u);
        EXPECT_EQ(s[0], 0u);
    }
    pc.granularity = PruneGranularity::per_layer;
    const auto per = h2o_select_layers(t, 0, 160, pc);
    EXPECT_EQ(per[1].size(), 32u);
    EXPECT_THROW(prune_trace(t, pc), Error);
}

TEST(Prune, PruneThenCompress) {
    auto cfg = fixtures::small_synth();
    cfg.attention_stats = true;
    const KVTrace t = synth_trace(cfg);
    const KVTrace kept = prune_trace(t, PruneConfig{});
    EXPECT_EQ(kept.info.n_tokens(), 4u * 32u);
    ReplayConfig rc;
    const PruneReport r = prune_then_compress(t, PruneConfig{}, rc);
    EXPECT_EQ(r.original_tokens, 640u);
    EXPECT_EQ(r.kept_tokens, 128u);
    EXPECT_NEAR(r.bits_per_original_value, r.replay.bits_per_value * 0.2, 1e-9);
}

TEST(Prune, NeedsAttentionStatistics) {
    const KVTrace t = synth_trace(fixtures::small_synth());
    EXPECT_THROW(prune_trace(t, PruneConfig{}), Error);
}
