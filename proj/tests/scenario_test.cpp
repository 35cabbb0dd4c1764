#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <gtest/gtest.h>

#include "dsg/report.hpp"
#include "dsg/scenario.hpp"
#include "dsg/world.hpp"

namespace dsg {
namespace {

const std::string kScenarios = std::string(DSG_SOURCE_DIR) + "/scenarios/";

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::IoError;
}

std::vector<std::string> violations_of(std::string_view text) {
  try {
    parse_scenario(text);
  } catch (const ScenarioError& e) {
    return e.violations();
  }
  return {};
}

TEST(Scenario, BundledDefaultLoads) {
  auto c = load_scenario(kScenarios + "default.toml");
  EXPECT_EQ(c.name, "default");
  EXPECT_EQ(c.topology.ngws, 2u);
  EXPECT_EQ(c.topology.hgws_per_ngw, 20u);
  EXPECT_EQ(c.topology.devices_per_hgw, 10u);
  EXPECT_EQ(c.horizon_ms, kWeekMs);
  EXPECT_EQ(c.grid.limits.ami_hf.tx_limit, 4u);
  EXPECT_EQ(c.grid.limits.ami_lf.duration, LimitDuration::Weekly);
}

TEST(Scenario, EveryBundledFileValidates) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(kScenarios)) {
    if (e.path().extension() != ".toml") continue;
    EXPECT_NO_THROW(load_scenario(e.path().string())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 10u);
}

TEST(Scenario, DefaultsApplyWhenOmitted) {
  auto c = parse_scenario("name = \"tiny\"\n");
  EXPECT_EQ(c.seed, 1u);
  EXPECT_EQ(c.grid.scheme, KeyScheme::B);
  EXPECT_TRUE(c.grid.unique_class_keys);
  EXPECT_EQ(c.topology.latency.nan_hop_ms, 15);
}

TEST(Scenario, EmptyTopologyIsValid) {
  auto c = parse_scenario("[topology]\nngws = 0\n");
  EXPECT_EQ(c.topology.ngws, 0u);
}

TEST(Scenario, NegativeLatencyRejected) {
  auto v = violations_of("[topology.latency_ms]\nnan_hop = -1\n");
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("nan_hop"), std::string::npos);
}

TEST(Scenario, LossRatesParsedAndBounded) {
  auto c = parse_scenario("[topology.loss]\nnan_hop = 0.05\nuplink = 0\n");
  EXPECT_DOUBLE_EQ(c.topology.loss.nan_hop, 0.05);
  EXPECT_DOUBLE_EQ(c.topology.loss.han_hop, 0.0);
  auto v = violations_of("[topology.loss]\nuplink = 1.0\nhan_hop = -0.1\n");
  ASSERT_EQ(v.size(), 2u);
  EXPECT_NE(v[0].find("han_hop"), std::string::npos);
  EXPECT_NE(v[1].find("uplink"), std::string::npos);
}

TEST(Scenario, HanCloudStorageIsOptIn) {
  EXPECT_FALSE(parse_scenario("").grid.han_cloud_storage);
  EXPECT_TRUE(parse_scenario("[devices]\nhan_cloud_storage = true\n").grid.han_cloud_storage);
}

TEST(Scenario, AttackOnUnknownDeviceRejected) {
  auto v = violations_of(R"(
[topology]
ngws = 1
hgws_per_ngw = 1
devices_per_hgw = 2
han_pairs_per_hgw = 0

[[attacks]]
kind = "tamper_rbc"
device = "sm-9-99-9"
)");
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("sm-9-99-9"), std::string::npos);
}

TEST(Scenario, UnknownKeysReportedTogether) {
  auto v = violations_of("colour = 1\n[topology]\nngw = 2\n");
  EXPECT_EQ(v.size(), 2u);
}

TEST(Scenario, BadEnumValues) {
  EXPECT_EQ(violations_of("key_scheme = \"C\"\n").size(), 1u);
  auto ev = violations_of("[[events]]\nkind = \"reboot\"\n");
  ASSERT_FALSE(ev.empty());
  EXPECT_NE(ev[0].find("reboot"), std::string::npos);
  EXPECT_FALSE(violations_of("[limits.ami_hf]\nlimit = 0\n").empty());
}

TEST(Scenario, TypeMismatchRejected) {
  EXPECT_EQ(code_of([] { parse_scenario("seed = \"abc\"\n"); }), Errc::ScenarioInvalid);
}

TEST(Scenario, SyntaxErrorIsParseError) {
  EXPECT_EQ(code_of([] { parse_scenario("name = \n"); }), Errc::ParseError);
}

TEST(Scenario, MissingFileIsIoError) {
  EXPECT_EQ(code_of([] { load_scenario("/nonexistent/none.toml"); }), Errc::IoError);
}

ScenarioConfig small() { return load_scenario(kScenarios + "lifecycle.toml"); }

TEST(Report, RoundTripIsLossless) {
  auto r = run_scenario(small());
  ASSERT_FALSE(r.counts.empty());
  auto text = report_to_string(r);
  auto back = parse_report(text);
  EXPECT_EQ(back, r);
  EXPECT_EQ(report_to_string(back), text);
}

TEST(Report, EmitAndReload) {
  auto r = run_scenario(small());
  const auto path = (std::filesystem::temp_directory_path() / "dsg_report_test.json").string();
  emit_report(r, path);
  EXPECT_EQ(load_report(path), r);
  std::filesystem::remove(path);
}

TEST(Report, Errors) {
  MetricsReport r;
  EXPECT_EQ(code_of([&] { emit_report(r, "/nonexistent-dir/x.json"); }), Errc::IoError);
  EXPECT_EQ(code_of([] { load_report("/nonexistent-dir/x.json"); }), Errc::IoError);
  EXPECT_EQ(code_of([] { parse_report("{not json"); }), Errc::ParseError);
  EXPECT_EQ(code_of([] { parse_report("{}"); }), Errc::ParseError);
}

}  // namespace
}  // namespace dsg
