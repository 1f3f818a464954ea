#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "aquakv/cli.hpp"
#include "support.hpp"

using namespace aquakv;
using nlohmann::json;

namespace {

struct CliRun {
    int code;
    std::string out;
    std::string err;
    json report() const { return json::parse(out); }
};

CliRun cli(std::vector<std::string> args) {
    args.insert(args.begin(), "aquakv");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

class CliPipeline : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new fixtures::TempDir("cli");
        const CliRun s = cli({"synth", "--layers", "3", "--kv-heads", "1", "--head-dim", "16", "--tokens", "96",
                           "--seqs", "3", "--stats", "--out", trace()});
        ASSERT_EQ(s.code, 0) << s.err;
        const CliRun c = cli({"calibrate", "--trace", trace(), "--out", preds()});
        ASSERT_EQ(c.code, 0) << c.err;
    }
    static void TearDownTestSuite() { delete dir_; }
    static std::string trace() { return dir_->file("t.kvt"); }
    static std::string preds() { return dir_->file("p.aqkv"); }
    static std::string file(const std::string& n) { return dir_->file(n); }
    static fixtures::TempDir* dir_;
};

fixtures::TempDir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST(Cli, BitsReportsGigabytes) {
    const CliRun r = cli({"bits", "--geometry", "llama3.2-3b", "--tokens", "131072", "--bits", "16"});
    ASSERT_EQ(r.code, 0) << r.err;
    const json j = r.report();
    EXPECT_EQ(j["schema_version"], 1);
    EXPECT_EQ(j["command"], "bits");
    EXPECT_NEAR(j["result"]["gigabytes"].get<double>(), 15.03, 0.01);
    const CliRun big = cli({"bits", "--geometry", "llama3.1-70b", "--tokens", "131072", "--bits", "16"});
    EXPECT_NEAR(big.report()["result"]["gigabytes"].get<double>(), 42.95, 0.01);
    const CliRun q = cli({"bits", "--layers", "2", "--kv-heads", "1", "--head-dim", "64", "--tokens", "64",
                       "--backbone", "uniform", "--bits", "2", "--group-size", "64"});
    EXPECT_DOUBLE_EQ(q.report()["result"]["bits_per_value"].get<double>(), 2.5);
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
    const CliRun r = cli({"bits", "--tokens", "x"});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_EQ(json::parse(r.err)["error"]["kind"], "usage");
    EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST(Cli, ConfigErrors) {
    const CliRun r = cli({"bits", "--tokens", "10"});
    EXPECT_EQ(r.code, kExitConfig);
    EXPECT_EQ(cli({"bits", "--geometry", "nope", "--tokens", "10"}).code, kExitConfig);
}

TEST(Cli, ConfigFileAndOverride) {
    fixtures::TempDir dir("cfg");
    {
        std::ofstream f(dir.file("c.json"));
        f << R"({"geometry": "llama3.2-3b", "tokens": 1024, "bits": 16})";
    }
    const CliRun a = cli({"bits", "--config", dir.file("c.json")});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.report()["config"]["tokens"], 1024);
    const CliRun b = cli({"bits", "--config", dir.file("c.json"), "--tokens", "2048"});
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(b.report()["config"]["tokens"], 2048);
    // a saved report can be fed back as a config
    {
        std::ofstream f(dir.file("r.json"));
        f << b.out;
    }
    const CliRun c = cli({"bits", "--config", dir.file("r.json")});
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_EQ(c.report()["result"], b.report()["result"]);
    EXPECT_EQ(cli({"bits", "--config", dir.file("missing.json")}).code, kExitIo);
}

TEST_F(CliPipeline, InspectEveryFormat) {
    const CliRun t = cli({"inspect", trace()});
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_EQ(t.report()["result"]["format"], "KVT1");
    EXPECT_EQ(t.report()["result"]["n_layers"], 3);
    const CliRun p = cli({"inspect", preds()});
    ASSERT_EQ(p.code, 0) << p.err;
    EXPECT_EQ(p.report()["result"]["format"], "AQKV");
    const CliRun r = cli({"replay", "--trace", trace(), "--predictors", preds(), "--cache-out", file("c.bin")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.report()["result"]["mode"], "predictors");
    const CliRun c = cli({"inspect", file("c.bin")});
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_EQ(c.report()["result"]["caches"].size(), 3u);
}

TEST_F(CliPipeline, ReplayBaselineSaysSo) {
    const CliRun r = cli({"replay", "--trace", trace()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.report()["result"]["mode"], "baseline (no predictors)");
    EXPECT_TRUE(r.report()["result"].contains("note"));
}

TEST_F(CliPipeline, ReplayWithPruning) {
    const CliRun r = cli({"replay", "--trace", trace(), "--predictors", preds(), "--prune-budget", "0.2"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.report()["result"]["replay"]["pruning"]["kept_tokens"], 3 * 20);
}

TEST_F(CliPipeline, ProbeWritesCsv) {
    const CliRun r = cli({"probe", "--trace", trace(), "--sources", "prevL1,prevT1", "--csv", file("p.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream f(file("p.csv"));
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, "target,source,layer,holdout_evr,train_evr");
}

TEST_F(CliPipeline, ErrorExitCodes) {
    EXPECT_EQ(cli({"inspect", file("nothing")}).code, kExitIo);
    {
        std::ofstream f(file("junk.bin"));
        f << "JUNKJUNKJUNK";
    }
    EXPECT_EQ(cli({"inspect", file("junk.bin")}).code, kExitFormat);
    const CliRun s = cli({"synth", "--layers", "4", "--kv-heads", "1", "--head-dim", "16", "--tokens", "32", "--seqs",
                       "2", "--out", file("other.kvt")});
    ASSERT_EQ(s.code, 0);
    const CliRun r = cli({"replay", "--trace", file("other.kvt"), "--predictors", preds()});
    EXPECT_EQ(r.code, kExitIncompatible);
    EXPECT_EQ(json::parse(r.err)["error"]["kind"], "incompatible");
}
