#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "moesim/cli.hpp"
#include "moesim/trace_io.hpp"

using namespace moesim;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out, err;
};

Result cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    Result r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::path(::testing::TempDir()) /
               ("moesim_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    fs::path dir_;
};

nlohmann::json record(const Result& r) {
    EXPECT_EQ(r.code, 0) << r.err;
    return nlohmann::json::parse(r.out);
}

// Parses CSV rows of a sweep into (policy, ratio) -> column values.
std::map<std::pair<std::string, double>, std::vector<double>> column(const std::string& csv, const std::string& name) {
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    std::stringstream head(line);
    for (std::string cell; std::getline(head, cell, ',');) header.push_back(cell);
    const size_t col = std::find(header.begin(), header.end(), name) - header.begin();
    std::map<std::pair<std::string, double>, std::vector<double>> out;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream row(line);
        for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
        out[{cells.at(1), std::stod(cells.at(2))}].push_back(std::stod(cells.at(col)));
    }
    return out;
}

size_t count_lines(const std::string& s) { return static_cast<size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_F(Cli, GenerateWritesTheQwen2Shape) {
    const auto r = cli({"generate", "--model", "qwen2", "--decode-steps", "100", "--seed", "7", "--out", path("t.jsonl")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream in(path("t.jsonl"));
    std::string first;
    std::getline(in, first);
    const auto cfg = nlohmann::json::parse(first);
    EXPECT_EQ(cfg["num_layers"], 28);
    EXPECT_EQ(cfg["num_routed"], 64);
    EXPECT_EQ(cfg["num_activated"], 8);
    EXPECT_NE(r.out.find("layers 28 routed 64"), std::string::npos);
    EXPECT_EQ(load_trace(path("t.jsonl")).passes.size(), 101u);
}

TEST_F(Cli, GenerateIsByteIdentical) {
    const std::vector<std::string> base{"generate", "--model", "deepseek", "--decode-steps", "20", "--seed", "3"};
    auto a = base, b = base;
    a.insert(a.end(), {"--out", path("a.jsonl")});
    b.insert(b.end(), {"--out", path("b.jsonl")});
    const auto ra = cli(a), rb = cli(b);
    ASSERT_EQ(ra.code, 0);
    ASSERT_EQ(rb.code, 0);
    EXPECT_EQ(slurp(path("a.jsonl")), slurp(path("b.jsonl")));
    EXPECT_EQ(ra.out, rb.out);
}

TEST_F(Cli, OutOfRangeRhoIsAUsageError) {
    const auto r = cli({"generate", "--rho", "1.5", "--out", path("t.jsonl")});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("rho"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
    EXPECT_EQ(cli({"generate"}).code, kExitUsage);
    EXPECT_EQ(cli({"run", "--ratio", "0"}).code, kExitUsage);
    EXPECT_EQ(cli({"run", "--ratio", "1.5"}).code, kExitUsage);
    EXPECT_EQ(cli({"run", "--policy", "nonsense"}).code, kExitUsage);
    EXPECT_EQ(cli({"run", "--policy", "full:cache=fifo"}).code, kExitUsage);
    EXPECT_EQ(cli({"run", "--policy", "full:frozen=1", "--decode-steps", "1"}).code, kExitUsage);
    EXPECT_EQ(cli({"run", "--model", "gpt5"}).code, kExitUsage);
    EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST_F(Cli, DataErrors) {
    EXPECT_EQ(cli({"run", "--trace", path("missing.jsonl")}).code, kExitData);
    EXPECT_EQ(cli({"run", "--profile", path("missing.txt"), "--decode-steps", "1"}).code, kExitData);
    EXPECT_EQ(cli({"calibrate", "--samples", path("missing.csv"), "--out", path("p.txt")}).code, kExitData);
    {
        std::ofstream f(path("bad.jsonl"));
        f << "{\"record\":\"config\"\n";
    }
    const auto r = cli({"run", "--trace", path("bad.jsonl")});
    EXPECT_EQ(r.code, kExitData);
    EXPECT_NE(r.err.find("line 1"), std::string::npos);
}

TEST_F(Cli, FullCapacityRunNeverMissesInDecode) {
    const auto j = record(cli({"run", "--model", "qwen2", "--ratio", "1.0", "--decode-steps", "30"}));
    EXPECT_EQ(j["steady_hit_rate"], 1.0);
    EXPECT_EQ(j["decode_hit_rate"], 1.0);
    EXPECT_EQ(j["decode_demand_transfers"], 0);
}

TEST_F(Cli, RunIsRepeatable) {
    const std::vector<std::string> args{"run", "--model", "mixtral", "--decode-steps", "20", "--seed", "4",
                                        "--out", path("r.json")};
    const auto a = cli(args);
    const auto first_file = slurp(path("r.json"));
    const auto b = cli(args);
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(first_file, a.out);
    EXPECT_EQ(slurp(path("r.json")), b.out);
}

TEST_F(Cli, RunOnASavedTraceMatchesTheGeneratedOne) {
    ASSERT_EQ(cli({"generate", "--decode-steps", "15", "--seed", "2", "--out", path("t.jsonl")}).code, 0);
    const auto from_file = record(cli({"run", "--trace", path("t.jsonl"), "--seed", "2"}));
    const auto generated = record(cli({"run", "--decode-steps", "15", "--seed", "2"}));
    EXPECT_EQ(from_file["mean_tbt"], generated["mean_tbt"]);
    EXPECT_EQ(from_file["hits"], generated["hits"]);
}

TEST_F(Cli, HybridBeatsFrequencyMapOnQwen2) {
    const auto j = record(cli({"run", "--model", "qwen2", "--ratio", "0.25", "--compare-to", "ktransformers"}));
    EXPECT_GE(j["speedup"].get<double>(), 1.2);
    EXPECT_NEAR(j["mean_tbt_normalized"].get<double>() * j["transfer_time"].get<double>(), j["mean_tbt"].get<double>(),
                1e-9 * j["mean_tbt"].get<double>());
}

TEST_F(Cli, SweepCardinality) {
    const auto r = cli({"sweep", "--models", "mixtral", "--policies", "full,ktransformers", "--ratios", "0.25,0.5,0.75",
                        "--seeds", "1,2,3", "--decode-steps", "10", "--prefill-tokens", "16", "--jobs", "2", "--out",
                        path("s.csv"), "--summary", path("s.md")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = slurp(path("s.csv"));
    EXPECT_EQ(count_lines(csv), 1u + 18u);
    const auto md = slurp(path("s.md"));
    EXPECT_EQ(count_lines(md), 2u + 6u);
    EXPECT_NE(md.find(" ± "), std::string::npos);
    // ktransformers is the default baseline, so its own speedup is exactly 1.
    for (const auto& [key, v] : column(csv, "speedup")) {
        if (key.first != "ktransformers") continue;
        for (double s : v) EXPECT_EQ(s, 1.0);
    }
}

TEST_F(Cli, SweepIsIndependentOfJobCount) {
    const std::vector<std::string> base{"sweep",   "--models",       "qwen2", "--policies", "full,adapmoe",
                                        "--ratios", "0.25,0.5",      "--seeds", "1,2",      "--decode-steps",
                                        "8",       "--prefill-tokens", "8"};
    auto one = base, three = base;
    one.insert(one.end(), {"--jobs", "1"});
    three.insert(three.end(), {"--jobs", "3"});
    EXPECT_EQ(cli(one).out, cli(three).out);
}

TEST_F(Cli, SweepRecordsFailedRowsAndContinues) {
    const auto r = cli({"sweep", "--models", "mixtral", "--policies", "full,full:frozen=1", "--ratios", "0.5",
                        "--seeds", "1", "--decode-steps", "3", "--prefill-tokens", "0"});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("1 of 2 runs failed"), std::string::npos) << r.err;
    EXPECT_NE(r.out.find(",ok,"), std::string::npos);
    EXPECT_NE(r.out.find("error: "), std::string::npos);
}

TEST_F(Cli, SweepShowsMrsAheadOfLruWithANarrowingGap) {
    const auto r = cli({"sweep", "--models", "qwen2", "--policies", "adapmoe:prefetch=0+cache=mrs,adapmoe:prefetch=0+cache=lru",
                        "--ratios", "0.25,0.75", "--seeds", "1,2,3", "--prefill-tokens", "0"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto hit = column(r.out, "decode_hit_rate");
    auto mean = [&](const std::string& policy, double ratio) {
        const auto& v = hit.at({policy, ratio});
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    const double gap25 = mean("adapmoe:prefetch=0+cache=mrs", 0.25) - mean("adapmoe:prefetch=0+cache=lru", 0.25);
    const double gap75 = mean("adapmoe:prefetch=0+cache=mrs", 0.75) - mean("adapmoe:prefetch=0+cache=lru", 0.75);
    EXPECT_GT(gap25, 0.0);
    EXPECT_LT(gap75, gap25);
}

TEST_F(Cli, CalibrateRecoversNoiselessSamplesExactly) {
    ASSERT_EQ(cli({"calibrate", "--emit-samples", "qwen2", "--out", path("s.csv")}).code, 0);
    const auto r = cli({"calibrate", "--samples", path("s.csv"), "--out", path("p.txt")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream report(r.out);
    for (std::string device, rms_tag; report >> device;) {
        size_t n = 0;
        double rms = 1.0;
        report >> n >> rms_tag >> rms;
        EXPECT_GT(n, 0u) << device;
        EXPECT_LT(rms, 1e-12) << device;
    }
    EXPECT_FALSE(slurp(path("p.txt")).empty());
}

TEST_F(Cli, CalibrateWithoutPcieSamplesNamesTheParameter) {
    ASSERT_EQ(cli({"calibrate", "--emit-samples", "qwen2", "--out", path("s.csv")}).code, 0);
    std::istringstream all(slurp(path("s.csv")));
    std::ofstream f(path("no_pcie.csv"));
    for (std::string line; std::getline(all, line);)
        if (line.rfind("pcie", 0) != 0) f << line << "\n";
    f.close();
    const auto r = cli({"calibrate", "--samples", path("no_pcie.csv"), "--out", path("p.txt")});
    EXPECT_EQ(r.code, kExitData);
    EXPECT_NE(r.err.find("transfer_bandwidth"), std::string::npos) << r.err;
}

TEST_F(Cli, CalibrateShippedSamplesMatchGolden) {
    const auto r = cli({"calibrate", "--samples", MOESIM_DATA_DIR "/calibration_samples_qwen2.csv", "--out",
                        path("p.txt")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(path("p.txt")), slurp(MOESIM_DATA_DIR "/golden_profile_qwen2.txt"));
}

TEST_F(Cli, ConfigFileFlagsLose) {
    {
        std::ofstream f(path("run.cfg"));
        f << "# experiment\nmodel=mixtral\nratio=0.5\nseed=3\ndecode-steps=5\nprefill-tokens=0\n";
    }
    const auto from_file = record(cli({"run", "--config", path("run.cfg")}));
    EXPECT_EQ(from_file["model"], "mixtral");
    EXPECT_EQ(from_file["ratio"], 0.5);
    EXPECT_EQ(from_file["seed"], 3);

    const auto overridden = record(cli({"run", "--config", path("run.cfg"), "--ratio", "0.75"}));
    EXPECT_EQ(overridden["ratio"], 0.75);
    EXPECT_EQ(overridden["seed"], 3);
    const auto before = record(cli({"run", "--ratio", "0.75", "--config", path("run.cfg")}));
    EXPECT_EQ(before["ratio"], 0.75);
}

TEST_F(Cli, ConfigFileProblems) {
    EXPECT_EQ(cli({"run", "--config", path("missing.cfg")}).code, kExitData);
    {
        std::ofstream f(path("bad.cfg"));
        f << "no-such-flag=1\n";
    }
    EXPECT_EQ(cli({"run", "--config", path("bad.cfg")}).code, kExitUsage);
}

TEST_F(Cli, AnalyzeAgainstReference) {
    const auto r = cli({"analyze", "--model", "qwen2", "--prefill-tokens", "0", "--reference",
                        MOESIM_DATA_DIR "/neuron_sparsity_cdf.csv", "--out", path("stats.txt")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("flatter_than_reference yes"), std::string::npos) << r.out;
    EXPECT_NE(slurp(path("stats.txt")).find("reuse_by_decile"), std::string::npos);
}
