#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>

namespace {

namespace fs = std::filesystem;

const std::string kBin = DSGSIM_BIN;
const std::string kScenarios = std::string(DSG_SOURCE_DIR) + "/scenarios/";

struct Result {
  int code;
  std::string out;
};

/// Runs dsgsim with stdout (and stderr, when asked) captured to a file.
Result dsgsim(const std::string& args, bool merge_stderr = false) {
  const auto capture = fs::temp_directory_path() / ("dsgsim_cli_" + std::to_string(::getpid()) + ".txt");
  const auto cmd = kBin + " " + args + " >" + capture.string() + (merge_stderr ? " 2>&1" : " 2>/dev/null");
  const int status = std::system(cmd.c_str());
  std::ifstream in(capture);
  std::stringstream ss;
  ss << in.rdbuf();
  fs::remove(capture);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("dsgsim_cli_" + name); }

TEST(Cli, ValidateGoodScenario) {
  auto r = dsgsim("validate " + kScenarios + "ddos.toml");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("ddos: ok"), std::string::npos) << r.out;
}

TEST(Cli, ValidateBadScenario) {
  const auto path = tmp("bad.toml");
  std::ofstream(path) << "[topology.latency_ms]\nnan_hop = -5\n";
  auto r = dsgsim("validate " + path.string(), true);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("nan_hop"), std::string::npos) << r.out;
  fs::remove(path);
}

TEST(Cli, MissingFileIsBadInput) { EXPECT_EQ(dsgsim("validate /nonexistent.toml").code, 2); }

TEST(Cli, UnknownSubcommandFails) { EXPECT_NE(dsgsim("frobnicate").code, 0); }

TEST(Cli, RunWritesReportAndLog) {
  const auto report = tmp("report.json");
  const auto log = tmp("log.jsonl");
  auto r = dsgsim("run " + kScenarios + "tamper_rbc.toml --out " + report.string() + " --log " + log.string());
  EXPECT_EQ(r.code, 0);
  ASSERT_TRUE(fs::exists(report));
  ASSERT_TRUE(fs::exists(log));
  std::ifstream in(log);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first.rfind("{\"t\":", 0), 0u) << first;
  fs::remove(report);
  fs::remove(log);
}

TEST(Cli, ReportDiff) {
  const auto a = tmp("a.json"), b = tmp("b.json"), c = tmp("c.json");
  const auto scenario = kScenarios + "tamper_rbc.toml";
  ASSERT_EQ(dsgsim("run " + scenario + " --out " + a.string()).code, 0);
  ASSERT_EQ(dsgsim("run " + scenario + " --out " + b.string()).code, 0);
  ASSERT_EQ(dsgsim("run " + scenario + " --seed 99 --out " + c.string()).code, 0);

  auto same = dsgsim("report-diff " + a.string() + " " + b.string());
  EXPECT_EQ(same.code, 0);
  EXPECT_EQ(same.out, "identical\n");

  auto diff = dsgsim("report-diff " + a.string() + " " + c.string());
  EXPECT_EQ(diff.code, 1);
  EXPECT_NE(diff.out.find("/seed"), std::string::npos) << diff.out;
  EXPECT_NE(diff.out.find("/determinism_digest"), std::string::npos);

  EXPECT_EQ(dsgsim("report-diff " + a.string() + " /nonexistent.json").code, 2);
  for (const auto& p : {a, b, c}) fs::remove(p);
}

TEST(Cli, ReportToStdout) {
  auto r = dsgsim("run " + kScenarios + "tamper_rbc.toml");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.front(), '{');
  EXPECT_NE(r.out.find("\"determinism_digest\""), std::string::npos);
}

}  // namespace
