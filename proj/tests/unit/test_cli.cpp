#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "peftprof/report.hpp"

using namespace peftprof;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

Result run(const std::string& args) {
    const fs::path out = fs::temp_directory_path() / ("peftprof_cli_" + std::to_string(::getpid()) + ".out");
    const std::string cmd = std::string(PEFTPROF_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    fs::remove(out);
    return r;
}

fs::path temp_file(const std::string& name, const std::string& text) {
    const fs::path p = fs::temp_directory_path() / (std::to_string(::getpid()) + "_" + name);
    std::ofstream(p) << text;
    return p;
}

}  // namespace

TEST(Cli, ProfileJson) {
    Result r = run("profile --arch resnet18 --method lora --rank 4 --alpha 8 --input 160x160");
    ASSERT_EQ(r.code, 0) << r.out;
    json j = json::parse(r.out);
    EXPECT_EQ(j["command"], "profile");
    EXPECT_EQ(j["rows"][0]["rank"], 4);
    EXPECT_EQ(j["rows"][0]["alpha"], 8.0);
    EXPECT_EQ(j["rows"][0]["input"]["h"], 160);
}

TEST(Cli, OutputFileMatchesLibrary) {
    const fs::path out = fs::temp_directory_path() / (std::to_string(::getpid()) + "_cli.csv");
    Result r = run("profile --arch mobilenet_v2 --method dora --format csv --bytes-per-element 2 --input-grad exact --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    RunSpec s;
    s.peft.method = Method::dora;
    s.bytes_per_element = 2;
    s.convention = CountingConvention::exact;
    EXPECT_EQ(ss.str(), report_to_csv(cmd_profile(s)));
    fs::remove(out);
}

TEST(Cli, CompareTable) {
    Result r = run("compare --arch resnet18 --methods lora,bnh --format table");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("fft"), std::string::npos);
    EXPECT_NE(r.out.find("bnh"), std::string::npos);
    EXPECT_NE(r.out.find("dMem %"), std::string::npos);
}

TEST(Cli, SweepAndPlanFromSpecFile) {
    const fs::path doc = temp_file("spec.json", R"({"arch": "mobilenet_v2", "method": "lora", "sweep": {"ranks": [1, 2, 4]},
 "plan": {"memory_budget_bytes": 1.2e8, "flops_budget": 5e9}})");
    Result s = run("sweep --spec " + doc.string());
    ASSERT_EQ(s.code, 0) << s.out;
    json j = json::parse(s.out);
    EXPECT_EQ(j["rows"].size(), 3u);
    EXPECT_TRUE(j.contains("fit"));
    Result p = run("plan --spec " + doc.string() + " --format json");
    ASSERT_EQ(p.code, 0) << p.out;
    json jp = json::parse(p.out);
    for (const auto& row : jp["rows"]) EXPECT_LE(row["memory_bytes"]["total"].get<double>(), 1.2e8);
    fs::remove(doc);
}

TEST(Cli, FlagsOverrideSpecFile) {
    const fs::path doc = temp_file("override.json", R"({"arch": "resnet18", "method": {"name": "lora", "rank": 2}})");
    Result r = run("profile --spec " + doc.string() + " --rank 8");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(json::parse(r.out)["rows"][0]["rank"], 8);
    fs::remove(doc);
}

TEST(Cli, CustomGraphAndTunedDump) {
    ToyCnnSpec toy{3, 16, 16, {ToyLayer::conv(8), ToyLayer::act(Activation::relu), ToyLayer::avgpool(), ToyLayer::linear()}};
    const fs::path graph = temp_file("graph.json", graph_to_json(build_model(toy, 3)).dump());
    const fs::path tuned = fs::temp_directory_path() / (std::to_string(::getpid()) + "_tuned.json");
    Result r = run("profile --graph " + graph.string() + " --input 16x16 --method dora --rank 2 --dump-tuned " + tuned.string());
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream in(tuned);
    json t = json::parse(in);
    EXPECT_EQ(tuned_from_json(t).adapters.size(), 2u);
    fs::remove(graph);
    fs::remove(tuned);
}

TEST(Cli, VerifyPasses) {
    Result r = run("verify --graphs 4 --format json");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(json::parse(r.out)["passed"].get<bool>());
}

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    EXPECT_EQ(run("profile --no-such-flag").code, 1);
    EXPECT_EQ(run("profile --rank").code, 1);
    EXPECT_EQ(run("plan --arch resnet18").code, 1);
    EXPECT_EQ(run("profile --spec /nonexistent/spec.json").code, 1);
}

TEST(Cli, ValidationErrorsExitTwo) {
    EXPECT_EQ(run("profile --rank 0").code, 2);
    EXPECT_EQ(run("profile --method adalora").code, 2);
    EXPECT_EQ(run("profile --arch vgg16").code, 2);
    EXPECT_EQ(run("profile --input 0x4").code, 2);
    EXPECT_EQ(run("profile --format xml").code, 2);
    EXPECT_EQ(run("profile --bytes-per-element 0").code, 2);
    EXPECT_EQ(run("profile --arch resnet18 --method lora --rank 600").code, 2);
    const fs::path doc = temp_file("bad.json", "{\n  \"method\": {\"name\": \"lora\",\n   \"rank\": -1}\n}\n");
    Result r = run("profile --spec " + doc.string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("line 3"), std::string::npos) << r.out;
    fs::remove(doc);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(run("--help").code, 0); }
