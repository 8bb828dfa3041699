#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <gtest/gtest.h>

#include <adaptq/cli.hpp>

using namespace adaptq;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out, err;
};

CliResult run(std::initializer_list<std::string> args) {
    std::vector<std::string> storage{"adaptq"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& s : storage) argv.push_back(s.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t data_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n - 1;
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        root = fs::temp_directory_path() /
               ("adaptq_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
                std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    void TearDown() override { fs::remove_all(root); }

    std::string path(const std::string& rel) const { return (root / rel).string(); }

    /// Small planted world plus a mock GPT dataset derived from it.
    void make_world(int questions = 12) {
        ASSERT_EQ(run({"demo", "--out", path("w"), "--seed", "4", "--questions", std::to_string(questions),
                       "--candidates-per-party", "8", "--voters", "120"})
                      .code,
                  0);
        ASSERT_EQ(run({"generate", "--questions", path("w/questions.json"), "--transport", "mock", "--profiles",
                       path("w/candidates.csv"), "--reps", "2", "--temperatures", "1,2", "--out", path("g"), "--seed",
                       "1"})
                      .code,
                  0);
    }

    std::vector<std::string> sim_args(const std::string& out) const {
        return {"--questions", path("w/questions.json"), "--voters", path("w/voters.csv"), "--candidates",
                path("w/candidates.csv"), "--out", path(out), "--users", "20", "--reps", "1", "--resolution", "21",
                "--jobs", "1"};
    }

    CliResult run_with(std::initializer_list<std::string> head, const std::vector<std::string>& tail) {
        std::vector<std::string> all(head);
        all.insert(all.end(), tail.begin(), tail.end());
        std::vector<const char*> argv{"adaptq"};
        for (const auto& s : all) argv.push_back(s.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return {code, out.str(), err.str()};
    }

    fs::path root;
};

}  // namespace

TEST(CliParse, NumberLists) {
    EXPECT_EQ(cli::parse_number_list("5,10,...,45", "k"), (std::vector<double>{5, 10, 15, 20, 25, 30, 35, 40, 45}));
    EXPECT_EQ(cli::parse_number_list("0.4, 0.8,1.2", "g"), (std::vector<double>{0.4, 0.8, 1.2}));
    EXPECT_EQ(cli::parse_count_list("2,4,...,8", "k"), (std::vector<std::size_t>{2, 4, 6, 8}));
    EXPECT_THROW(cli::parse_number_list("5,...,10", "k"), ConfigError);
    EXPECT_THROW(cli::parse_number_list("5,x", "k"), ConfigError);
    EXPECT_THROW(cli::parse_count_list("2.5", "k"), ConfigError);
    EXPECT_THROW(cli::parse_number_list("", "k"), ConfigError);
}

TEST_F(CliTest, UsageErrorsExitOne) {
    EXPECT_EQ(run({}).code, 1);
    EXPECT_EQ(run({"bogus"}).code, 1);
    EXPECT_EQ(run({"demo"}).code, 1);
    EXPECT_EQ(run({"demo", "--out", path("x"), "--seed", "abc"}).code, 1);
    EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, DemoWritesWorldAndManifest) {
    const auto r = run({"demo", "--out", path("d"), "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"questions.json", "candidates.csv", "voters.csv", "party_results.csv", "manifest.json"})
        EXPECT_TRUE(fs::exists(root / "d" / f)) << f;
    const auto manifest = nlohmann::json::parse(slurp(root / "d/manifest.json"));
    EXPECT_EQ(manifest["command"], "demo");
    ASSERT_EQ(manifest["outputs"].size(), 4u);
    for (const auto& o : manifest["outputs"]) {
        EXPECT_EQ(o["sha256"].get<std::string>().size(), 64u);
        EXPECT_EQ(o["sha256"], cli::sha256_file(o["path"]));
    }
    EXPECT_EQ(data_lines(root / "d/voters.csv"), 600u);
}

TEST_F(CliTest, GenerateMockIsDeterministicAndReplayable) {
    make_world();
    ASSERT_EQ(run({"generate", "--questions", path("w/questions.json"), "--transport", "mock", "--profiles",
                   path("w/candidates.csv"), "--reps", "2", "--temperatures", "1,2", "--out", path("g2"), "--seed", "1"})
                  .code,
              0);
    EXPECT_EQ(slurp(root / "g/gpt.csv"), slurp(root / "g2/gpt.csv"));
    // 4 parties x 2 temperatures x 2 reps
    EXPECT_EQ(data_lines(root / "g/gpt.csv"), 16u);

    const auto replay = run({"generate", "--questions", path("w/questions.json"), "--transport", "replay", "--fixtures",
                             path("g/fixtures.jsonl"), "--parties", "P0,P1,P2,P3", "--reps", "2", "--temperatures",
                             "1,2", "--out", path("r")});
    ASSERT_EQ(replay.code, 0) << replay.err;
    EXPECT_EQ(slurp(root / "g/gpt.csv"), slurp(root / "r/gpt.csv"));
    EXPECT_FALSE(fs::exists(root / "r/fixtures.jsonl"));
}

TEST_F(CliTest, GenerateEightPartiesFiftyRepsGivesFourHundredRows) {
    ASSERT_EQ(run({"demo", "--out", path("w"), "--parties", "8", "--questions", "6", "--voters", "10"}).code, 0);
    const auto r = run({"generate", "--questions", path("w/questions.json"), "--transport", "mock", "--profiles",
                        path("w/candidates.csv"), "--reps", "10", "--out", path("g")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(data_lines(root / "g/gpt.csv"), 400u);
}

TEST_F(CliTest, GenerateLiveWithoutKeyIsAuthFailure) {
    ASSERT_EQ(run({"demo", "--out", path("w"), "--questions", "6", "--voters", "10"}).code, 0);
    const auto r = run({"generate", "--questions", path("w/questions.json"), "--transport", "live", "--parties", "A,B",
                        "--api-key-env", "ADAPTQ_TEST_UNSET_KEY_VARIABLE", "--reps", "1", "--temperatures", "1",
                        "--out", path("g")});
    EXPECT_EQ(r.code, 2) << r.err;
    EXPECT_EQ(run({"generate", "--questions", path("w/questions.json"), "--transport", "carrier-pigeon", "--parties",
                   "A", "--out", path("g")})
                  .code,
              1);
    EXPECT_EQ(run({"generate", "--questions", path("w/questions.json"), "--transport", "mock", "--out", path("g")}).code,
              1);
}

TEST_F(CliTest, DeriveAllThreeDatasets) {
    make_world();
    EXPECT_EQ(run({"derive", "--in", path("g/gpt.csv"), "--what", "means", "--out", path("m")}).code, 0);
    EXPECT_EQ(data_lines(root / "m/gpt_means.csv"), 4u);
    EXPECT_EQ(run({"derive", "--in", path("g/gpt.csv"), "--what", "vertices", "--out", path("v")}).code, 0);
    EXPECT_EQ(data_lines(root / "v/vertices.csv"), 4u);
    const auto voters = run({"derive", "--in", path("g/gpt.csv"), "--what", "voters", "--alpha",
                             path("w/party_results.csv"), "--seed", "2", "--out", path("gv")});
    ASSERT_EQ(voters.code, 0) << voters.err;
    EXPECT_EQ(data_lines(root / "gv/gpt_voters.csv"), 1200u);
    EXPECT_EQ(run({"derive", "--in", path("g/gpt.csv"), "--what", "voters", "--out", path("x")}).code, 1);
    EXPECT_EQ(run({"derive", "--in", path("g/gpt.csv"), "--what", "medians", "--out", path("x")}).code, 1);
}

TEST_F(CliTest, SimulateWritesCurvesAndChecksInitData) {
    make_world();
    const auto cold = run_with({"simulate", "--init", "Coldstart", "--k", "4", "--seed", "3"}, sim_args("s"));
    ASSERT_EQ(cold.code, 0) << cold.err;
    EXPECT_EQ(data_lines(root / "s/curve.csv"), 20u);
    std::ifstream log(root / "s/interactions_rep0.jsonl");
    std::size_t lines = 0;
    for (std::string line; std::getline(log, line);) ++lines;
    EXPECT_EQ(lines, 80u);
    const auto summary = nlohmann::json::parse(slurp(root / "s/summary.json"));
    EXPECT_EQ(summary["runs"][0]["refit_count"], 4);

    const auto again = run_with({"simulate", "--init", "coldstart", "--k", "4", "--seed", "3"}, sim_args("s2"));
    ASSERT_EQ(again.code, 0);
    EXPECT_EQ(slurp(root / "s/curve.csv"), slurp(root / "s2/curve.csv"));
    EXPECT_EQ(slurp(root / "s/interactions_rep0.jsonl"), slurp(root / "s2/interactions_rep0.jsonl"));

    EXPECT_EQ(run_with({"simulate", "--init", "GPT", "--k", "4"}, sim_args("x")).code, 1);
    EXPECT_EQ(run_with({"simulate", "--init", "Warm", "--k", "4"}, sim_args("x")).code, 1);
    EXPECT_EQ(run_with({"simulate", "--k", "13"}, sim_args("x")).code, 1);
    const auto gpt = run_with({"simulate", "--init", "GPT", "--init-data", path("g/gpt.csv"), "--k", "4", "--gamma", "1"},
                              sim_args("sg"));
    EXPECT_EQ(gpt.code, 0) << gpt.err;
}

TEST_F(CliTest, CompareAndAnalyze) {
    make_world();
    const auto r = run_with({"compare", "--conditions", "Coldstart,GPT,Candidates", "--gpt", path("g/gpt.csv"), "--k",
                             "4", "--window", "5", "--persistence", "2"},
                            sim_args("c"));
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"curve_coldstart.csv", "curve_gpt.csv", "curve_candidates.csv", "break_even.json"})
        EXPECT_TRUE(fs::exists(root / "c" / f)) << f;
    EXPECT_EQ(nlohmann::json::parse(slurp(root / "c/break_even.json")).size(), 2u);
    EXPECT_EQ(run_with({"compare", "--conditions", "GPTmeans", "--k", "4"}, sim_args("x")).code, 1);

    const auto a = run({"analyze", "--questions", path("w/questions.json"), "--gpt", path("g/gpt.csv"), "--candidates",
                        path("w/candidates.csv"), "--out", path("a")});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(data_lines(root / "a/distances.csv"), 4u);
    EXPECT_EQ(data_lines(root / "a/confusion_gpt.csv"), 4u);
    EXPECT_EQ(data_lines(root / "a/temperature.csv"), 2u);
}

TEST_F(CliTest, SweepDefaultKListHasNineRows) {
    make_world(45);
    ASSERT_EQ(run({"derive", "--in", path("g/gpt.csv"), "--what", "voters", "--alpha", path("w/party_results.csv"),
                   "--n", "200", "--out", path("gv")})
                  .code,
              0);
    auto args = sim_args("sw");
    args[9] = "10";  // --users
    const auto r = run_with({"sweep", "--init-data", path("gv/gpt_voters.csv"), "--window", "3", "--persistence", "2"},
                            args);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(data_lines(root / "sw/break_even.csv"), 9u);
    EXPECT_TRUE(fs::exists(root / "sw/curve_k45_gptvoters.csv"));
}

TEST_F(CliTest, ReplacementWritesOneRowPerGamma) {
    make_world();
    const auto r = run_with({"replacement", "--init-data", path("g/gpt.csv"), "--k", "4", "--u", "2"}, sim_args("rp"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(data_lines(root / "rp/overlap.csv"), 6u);
    EXPECT_TRUE(fs::exists(root / "rp/curve_gamma8.csv"));
}

TEST_F(CliTest, ServeFailuresMapToExitCodes) {
    make_world();
    EXPECT_EQ(run({"serve", "--questions", path("w/questions.json"), "--candidates", path("nope.csv")}).code, 1);
    EXPECT_EQ(run({"serve", "--questions", path("w/questions.json"), "--candidates", path("w/candidates.csv"), "--k",
                   "4"})
                  .code,
              1);
    // a plain listening socket without SO_REUSEPORT, so the service cannot share it
    const int blocker = ::socket(AF_INET, SOCK_STREAM, 0);
    ASSERT_GE(blocker, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    ASSERT_EQ(::bind(blocker, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
    ASSERT_EQ(::listen(blocker, 1), 0);
    socklen_t len = sizeof addr;
    ASSERT_EQ(::getsockname(blocker, reinterpret_cast<sockaddr*>(&addr), &len), 0);
    const int port = ntohs(addr.sin_port);
    const auto r = run({"serve", "--questions", path("w/questions.json"), "--candidates", path("w/candidates.csv"),
                        "--k", "5", "--port", std::to_string(port)});
    EXPECT_EQ(r.code, 3) << r.err;
    ::close(blocker);
}

TEST_F(CliTest, ConfigFileWithFlagOverride) {
    {
        std::ofstream cfg(root / "demo.toml");
        cfg << "[demo]\nquestions = 7\nvoters = 15\nseed = 2\nout = \"" << path("cfgout") << "\"\n";
    }
    ASSERT_EQ(run({"--config", path("demo.toml"), "demo"}).code, 0);
    EXPECT_EQ(data_lines(root / "cfgout/voters.csv"), 15u);
    EXPECT_EQ(nlohmann::json::parse(slurp(root / "cfgout/questions.json")).size(), 7u);

    ASSERT_EQ(run({"--config", path("demo.toml"), "demo", "--voters", "9", "--out", path("cfg2")}).code, 0);
    EXPECT_EQ(data_lines(root / "cfg2/voters.csv"), 9u);
    EXPECT_EQ(nlohmann::json::parse(slurp(root / "cfg2/questions.json")).size(), 7u);
    EXPECT_EQ(run({"--config", path("missing.toml"), "demo"}).code, 1);
}
