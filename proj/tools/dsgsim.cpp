#include <cstdio>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsg/report.hpp"
#include "dsg/scenario.hpp"
#include "dsg/world.hpp"

namespace {

// Exit codes: 0 clean run, 1 invariant violations or a differing report,
// 2 unusable input.
constexpr int kClean = 0;
constexpr int kViolations = 1;
constexpr int kBadInput = 2;

void print_errors(const dsg::Error& e) {
  if (auto* s = dynamic_cast<const dsg::ScenarioError*>(&e)) {
    for (const auto& v : s->violations()) std::cerr << "  " << v << "\n";
  } else {
    std::cerr << "  " << e.what() << "\n";
  }
}

int cmd_validate(const std::string& path) {
  try {
    auto cfg = dsg::load_scenario(path);
    std::cout << cfg.name << ": ok (" << cfg.topology.ngws << " NGWs, "
              << cfg.topology.ngws * cfg.topology.hgws_per_ngw << " HGWs, " << cfg.attacks.size() << " attacks)\n";
    return kClean;
  } catch (const dsg::Error& e) {
    std::cerr << path << ": invalid\n";
    print_errors(e);
    return kBadInput;
  }
}

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

int cmd_run(const std::string& path, std::optional<std::uint64_t> seed, const std::string& out,
            const std::string& log_path) {
  dsg::ScenarioConfig cfg;
  try {
    cfg = dsg::load_scenario(path);
  } catch (const dsg::Error& e) {
    std::cerr << path << ": invalid\n";
    print_errors(e);
    return kBadInput;
  }
  if (seed) cfg.seed = *seed;

  std::unique_ptr<std::FILE, FileCloser> log;
  if (!log_path.empty()) {
    log.reset(std::fopen(log_path.c_str(), "w"));
    if (!log) {
      std::cerr << "cannot write " << log_path << "\n";
      return kBadInput;
    }
  }
  const auto report = dsg::run_scenario(cfg, dsg::RunOptions{false, log.get()});
  try {
    if (out.empty())
      std::cout << dsg::report_to_string(report);
    else
      dsg::emit_report(report, out);
  } catch (const dsg::Error& e) {
    std::cerr << e.what() << "\n";
    return kBadInput;
  }

  std::cerr << report.scenario << " seed=" << report.seed << " events=" << report.events_logged
            << " digest=" << report.determinism_digest << "\n";
  if (report.ok()) return kClean;
  for (const auto& v : report.violations) std::cerr << "violation: " << v << "\n";
  for (const auto& c : report.chains.broken_unexpected) std::cerr << "broken chain: " << c << "\n";
  return kViolations;
}

int cmd_diff(const std::string& a, const std::string& b) {
  nlohmann::json ja, jb;
  try {
    ja = dsg::load_report(a);
    jb = dsg::load_report(b);
  } catch (const dsg::Error& e) {
    std::cerr << e.what() << "\n";
    return kBadInput;
  }
  const auto patch = nlohmann::json::diff(ja, jb);
  if (patch.empty()) {
    std::cout << "identical\n";
    return kClean;
  }
  for (const auto& op : patch) std::cout << op["op"].get<std::string>() << " " << op["path"].get<std::string>() << "\n";
  return kViolations;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distribution-grid ledger simulator"};
  app.require_subcommand(1);

  std::string scenario;
  auto* validate = app.add_subcommand("validate", "Check a scenario file and list every problem");
  validate->add_option("scenario", scenario, "Scenario TOML file")->required();

  std::string out, log_path;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Run a scenario and emit the metrics report");
  run->add_option("scenario", scenario, "Scenario TOML file")->required();
  run->add_option("--seed", seed, "Override the scenario seed");
  run->add_option("--out", out, "Write the JSON report here instead of stdout");
  run->add_option("--log", log_path, "Write the event log (JSON lines) here");

  std::string a, b;
  auto* diff = app.add_subcommand("report-diff", "Compare two reports; exit 0 iff identical");
  diff->add_option("a", a, "First report")->required();
  diff->add_option("b", b, "Second report")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kClean : kBadInput;
  }

  if (validate->parsed()) return cmd_validate(scenario);
  if (run->parsed()) return cmd_run(scenario, seed, out, log_path);
  return cmd_diff(a, b);
}
