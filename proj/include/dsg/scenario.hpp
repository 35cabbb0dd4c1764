#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <toml.hpp>

#include "dsg/attack.hpp"
#include "dsg/miner.hpp"
#include "dsg/simnet.hpp"

namespace dsg {

enum class ScriptKind : std::uint8_t { Ebt, Otft, Ct, Offline, Online, Remove, Add, Broadcast };

constexpr std::string_view to_string(ScriptKind k) {
  switch (k) {
    case ScriptKind::Ebt: return "ebt";
    case ScriptKind::Otft: return "otft";
    case ScriptKind::Ct: return "ct";
    case ScriptKind::Offline: return "offline";
    case ScriptKind::Online: return "online";
    case ScriptKind::Remove: return "remove";
    case ScriptKind::Add: return "add";
    case ScriptKind::Broadcast: return "broadcast";
  }
  return "?";
}

struct ScriptEvent {
  ScriptKind kind = ScriptKind::Ebt;
  std::int64_t at_ms = 0;
  std::string target;             // device, or broadcast origin
  std::string requester = kControlCenter;
  bool command_on = false;
  std::string detail;             // EBT event name or broadcast content
};

/// An extra rule installed after the grid is built. `at` names a miner or one
/// of the groups "hgws", "ngws", "storages".
struct PolicySeed {
  std::string at;
  PolicyRule rule;
};

struct ScenarioConfig {
  std::string name = "scenario";
  std::uint64_t seed = 1;
  std::int64_t horizon_ms = kDayMs;
  Topology topology;
  GridParams grid;  // grid.seed is overwritten by `seed` at run time
  std::int64_t audit_period_ms = kHourMs;
  std::int64_t otft_timeout_ms = 5'000;
  std::int64_t broadcast_period_ms = 6 * kHourMs;
  std::vector<PolicySeed> policies;
  std::vector<ScriptEvent> events;
  std::vector<AttackSpec> attacks;
};

/// Raised with every violation found, not just the first.
class ScenarioError : public Error {
 public:
  explicit ScenarioError(std::vector<std::string> v)
      : Error(Errc::ScenarioInvalid, join(v)), violations_(std::move(v)) {}
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : "; ") + s;
    return out;
  }
  std::vector<std::string> violations_;
};

inline std::vector<std::string> validate_scenario(const ScenarioConfig& c) {
  std::vector<std::string> v;
  auto need = [&](bool ok, std::string what) {
    if (!ok) v.push_back(std::move(what));
  };
  const auto& t = c.topology;
  need(c.horizon_ms > 0, "horizon_ms must be positive");
  need(t.devices_per_hgw >= 2 * t.han_pairs_per_hgw, "topology.devices_per_hgw must cover the HAN pairs");
  need(t.latency.han_hop_ms >= 0, "topology.latency_ms.han_hop must be >= 0");
  need(t.latency.nan_hop_ms >= 0, "topology.latency_ms.nan_hop must be >= 0");
  need(t.latency.cellular_hop_ms >= 0, "topology.latency_ms.cellular_hop must be >= 0");
  need(t.latency.wired_hop_ms >= 0, "topology.latency_ms.wired_hop must be >= 0");
  for (auto [name, r] : {std::pair{"han_hop", t.loss.han_hop}, std::pair{"nan_hop", t.loss.nan_hop},
                         std::pair{"uplink", t.loss.uplink}})
    need(r >= 0.0 && r < 1.0, std::string("topology.loss.") + name + " must be in [0, 1)");
  need(t.crypto_overhead_ms >= 0, "topology.crypto_overhead_ms must be >= 0");
  need(c.grid.block_capacity >= 1, "block_capacity must be at least 1");
  need(c.audit_period_ms > 0, "audit_period_ms must be positive");
  need(c.otft_timeout_ms > 0, "otft_timeout_ms must be positive");
  need(c.broadcast_period_ms >= 0, "broadcast_period_ms must be >= 0");
  need(c.grid.hf_period_ms > 0, "devices.hf_period_ms must be positive");
  need(c.grid.lf_period_ms > 0, "devices.lf_period_ms must be positive");
  need(c.grid.sensor_period_ms > 0, "devices.sensor_period_ms must be positive");
  need(c.grid.rtu_period_ms > 0, "devices.rtu_period_ms must be positive");
  need(c.grid.auditors_per_target >= 1, "limits.auditors_per_target must be at least 1");
  for (auto [name, l] : {std::pair{"ami_hf", c.grid.limits.ami_hf}, std::pair{"ami_lf", c.grid.limits.ami_lf},
                         std::pair{"drms_ct", c.grid.limits.drms_ct}, std::pair{"oms_ebt", c.grid.limits.oms_ebt},
                         std::pair{"otft", c.grid.otft_limit}, std::pair{"rtu", c.grid.rtu_limit},
                         std::pair{"pair", c.grid.pair_limit}})
    need(l.tx_limit >= 1, std::string("limits.") + name + ".limit must be at least 1");

  const auto names = entity_names(t);
  auto kind_of = [&](const std::string& id) -> std::optional<EntityKind> {
    auto it = names.find(id);
    return it == names.end() ? std::nullopt : std::optional(it->second);
  };
  const std::set<std::string> groups{"hgws", "ngws", "storages", kCcStorage, kUStorage};
  for (std::size_t i = 0; i < c.policies.size(); ++i) {
    const auto& p = c.policies[i];
    const auto tag = "policies[" + std::to_string(i) + "]";
    auto k = kind_of(p.at);
    need(groups.contains(p.at) || k == EntityKind::Hgw || k == EntityKind::Ngw, tag + ": unknown miner '" + p.at + "'");
    need(!p.rule.requester.empty() && p.rule.requester != "*", tag + ": requester must be a concrete id");
    need(p.rule.action == Action::Deny || p.rule.tx_limit >= 1, tag + ": allow rule needs limit >= 1");
  }
  for (std::size_t i = 0; i < c.events.size(); ++i) {
    const auto& e = c.events[i];
    const auto tag = "events[" + std::to_string(i) + "] (" + std::string(to_string(e.kind)) + ")";
    need(e.at_ms >= 0 && e.at_ms <= c.horizon_ms, tag + ": at_ms outside [0, horizon_ms]");
    auto k = kind_of(e.target);
    switch (e.kind) {
      case ScriptKind::Ebt:
        need(k == EntityKind::Meter, tag + ": '" + e.target + "' is not a smart meter");
        break;
      case ScriptKind::Otft:
        // Unknown targets are legal here: the gateways deny them.
        break;
      case ScriptKind::Ct:
        break;
      case ScriptKind::Broadcast:
        need(e.target == kControlCenter || e.target == kUtility, tag + ": origin must be 'cc' or 'utility'");
        need(!e.detail.empty(), tag + ": content must be non-empty");
        break;
      default:
        need(k == EntityKind::Meter || k == EntityKind::Sensor || k == EntityKind::Actuator || k == EntityKind::Rtu,
             tag + ": unknown device '" + e.target + "'");
    }
  }
  std::set<std::string> ids;
  for (std::size_t i = 0; i < c.attacks.size(); ++i) {
    const auto& a = c.attacks[i];
    const auto tag = "attacks[" + std::to_string(i) + "] (" + std::string(kind_name(a.kind)) + ")";
    need(!a.id.empty() && ids.insert(a.id).second, tag + ": id must be unique and non-empty");
    need(a.start_ms >= 0 && a.start_ms <= c.horizon_ms, tag + ": start_ms outside [0, horizon_ms]");
    need(a.duration_ms >= 0, tag + ": duration_ms must be >= 0");
    const auto& target = attack_target(a.kind);
    auto k = kind_of(target);
    if (auto* d = std::get_if<DdosAttack>(&a.kind)) {
      need(k == EntityKind::Meter || k == EntityKind::Rtu || k == EntityKind::Hgw,
           tag + ": unknown flood source '" + target + "'");
      need(d->rate_per_hour > 0 && d->rate_per_hour <= 3'600'000, tag + ": rate_per_hour must be in (0, 3600000]");
      need(a.duration_ms > 0, tag + ": duration_ms must be positive");
    } else if (auto* r = std::get_if<TamperRbcAttack>(&a.kind)) {
      need(k == EntityKind::Meter || (k == EntityKind::Rtu && r->channel == Channel::Hf),
           tag + ": '" + target + "' has no remote chain on that channel");
      need(selector_syntax_ok(r->tx_selector), tag + ": bad tx_selector '" + r->tx_selector + "'");
    } else if (auto* b = std::get_if<TamperBothAttack>(&a.kind)) {
      need(k == EntityKind::Meter, tag + ": '" + target + "' is not a smart meter");
      need(selector_syntax_ok(b->broadcast_tx_selector),
           tag + ": bad broadcast_tx_selector '" + b->broadcast_tx_selector + "'");
    }
  }
  return v;
}

namespace detail {

/// Reads typed fields from one TOML table and records every problem.
class TableReader {
 public:
  TableReader(const toml::table* t, std::string path, std::vector<std::string>& errors)
      : t_(t), path_(std::move(path)), errors_(&errors) {}

  template <class T>
  void get(std::string_view key, T& out) {
    seen_.insert(std::string(key));
    if (!t_) return;
    const auto* node = t_->get(key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = node->value<bool>()) out = *v;
      else bad(key, "a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = node->value<std::string>()) out = *v;
      else bad(key, "a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (auto v = node->value<double>()) out = *v;
      else bad(key, "a number");
    } else {
      auto v = node->value<std::int64_t>();
      if (!v) return bad(key, "an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (*v < 0) return bad(key, "non-negative");
      }
      out = static_cast<T>(*v);
    }
  }

  void limit(std::string_view key, LimitSpec& out) {
    seen_.insert(std::string(key));
    if (!t_) return;
    const auto* node = t_->get(key);
    if (!node) return;
    const auto* tbl = node->as_table();
    if (!tbl) return bad(key, "a table {limit, duration}");
    TableReader r(tbl, field(key), *errors_);
    std::int64_t n = out.tx_limit;
    std::string d(to_string(out.duration));
    r.get("limit", n);
    r.get("duration", d);
    r.finish();
    if (n < 1) errors_->push_back(field(key) + ".limit must be at least 1");
    else out.tx_limit = static_cast<std::uint32_t>(n);
    if (auto p = parse_limit_duration(d)) out.duration = *p;
    else errors_->push_back(field(key) + ".duration: unknown '" + d + "'");
  }

  const toml::table* sub(std::string_view key) {
    seen_.insert(std::string(key));
    if (!t_) return nullptr;
    const auto* node = t_->get(key);
    if (!node) return nullptr;
    if (!node->is_table()) bad(key, "a table");
    return node->as_table();
  }

  const toml::array* array(std::string_view key) {
    seen_.insert(std::string(key));
    if (!t_) return nullptr;
    const auto* node = t_->get(key);
    if (!node) return nullptr;
    if (!node->is_array()) bad(key, "an array");
    return node->as_array();
  }

  void finish() {
    if (!t_) return;
    for (const auto& [k, _] : *t_)
      if (!seen_.contains(std::string(k.str()))) errors_->push_back(field(k.str()) + ": unknown key");
  }

  std::string field(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

 private:
  void bad(std::string_view key, std::string_view what) {
    errors_->push_back(field(key) + " must be " + std::string(what));
  }

  const toml::table* t_;
  std::string path_;
  std::vector<std::string>* errors_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Parses TOML text. Throws ParseError on syntax, ScenarioError listing every
/// schema and semantic violation otherwise.
inline ScenarioConfig parse_scenario(std::string_view text, std::string_view source = "<scenario>") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    const auto& b = e.source().begin;
    throw Error(Errc::ParseError, std::string(source) + ":" + std::to_string(b.line) + ":" +
                                      std::to_string(b.column) + ": " + std::string(e.description()));
  }
  ScenarioConfig c;
  std::vector<std::string> errors;
  detail::TableReader top(&root, "", errors);
  top.get("name", c.name);
  top.get("seed", c.seed);
  top.get("horizon_ms", c.horizon_ms);
  std::string scheme = c.grid.scheme == KeyScheme::A ? "A" : "B";
  top.get("key_scheme", scheme);
  if (scheme == "A") c.grid.scheme = KeyScheme::A;
  else if (scheme == "B") c.grid.scheme = KeyScheme::B;
  else errors.push_back("key_scheme must be \"A\" or \"B\"");
  top.get("unique_class_keys", c.grid.unique_class_keys);
  top.get("block_capacity", c.grid.block_capacity);
  top.get("audit_period_ms", c.audit_period_ms);
  top.get("otft_timeout_ms", c.otft_timeout_ms);
  top.get("broadcast_period_ms", c.broadcast_period_ms);

  {
    detail::TableReader t(top.sub("topology"), "topology", errors);
    t.get("ngws", c.topology.ngws);
    t.get("hgws_per_ngw", c.topology.hgws_per_ngw);
    t.get("devices_per_hgw", c.topology.devices_per_hgw);
    t.get("han_pairs_per_hgw", c.topology.han_pairs_per_hgw);
    t.get("rtus_per_ngw", c.topology.rtus_per_ngw);
    t.get("crypto_overhead_ms", c.topology.crypto_overhead_ms);
    detail::TableReader l(t.sub("latency_ms"), "topology.latency_ms", errors);
    l.get("han_hop", c.topology.latency.han_hop_ms);
    l.get("nan_hop", c.topology.latency.nan_hop_ms);
    l.get("cellular_hop", c.topology.latency.cellular_hop_ms);
    l.get("wired_hop", c.topology.latency.wired_hop_ms);
    l.finish();
    detail::TableReader ls(t.sub("loss"), "topology.loss", errors);
    ls.get("han_hop", c.topology.loss.han_hop);
    ls.get("nan_hop", c.topology.loss.nan_hop);
    ls.get("uplink", c.topology.loss.uplink);
    ls.finish();
    t.finish();
  }
  {
    detail::TableReader d(top.sub("devices"), "devices", errors);
    d.get("hf_period_ms", c.grid.hf_period_ms);
    d.get("lf_period_ms", c.grid.lf_period_ms);
    d.get("sensor_period_ms", c.grid.sensor_period_ms);
    d.get("han_cloud_storage", c.grid.han_cloud_storage);
    d.get("rtu_period_ms", c.grid.rtu_period_ms);
    d.get("actuator_threshold", c.grid.actuator_threshold);
    d.finish();
  }
  {
    detail::TableReader l(top.sub("limits"), "limits", errors);
    l.limit("ami_hf", c.grid.limits.ami_hf);
    l.limit("ami_lf", c.grid.limits.ami_lf);
    l.limit("drms_ct", c.grid.limits.drms_ct);
    l.limit("oms_ebt", c.grid.limits.oms_ebt);
    l.limit("otft", c.grid.otft_limit);
    l.limit("rtu", c.grid.rtu_limit);
    l.limit("pair", c.grid.pair_limit);
    l.get("broadcast_records_per_meter_hour", c.grid.broadcast_records_per_meter_hour);
    l.get("alarms_per_device_hour", c.grid.alarms_per_device_hour);
    l.get("auditors_per_target", c.grid.auditors_per_target);
    l.finish();
  }

  auto each_table = [&](const toml::array* arr, std::string_view name, auto&& fn) {
    if (!arr) return;
    for (std::size_t i = 0; i < arr->size(); ++i) {
      const auto path = std::string(name) + "[" + std::to_string(i) + "]";
      const auto* tbl = (*arr)[i].as_table();
      if (!tbl) {
        errors.push_back(path + " must be a table");
        continue;
      }
      detail::TableReader r(tbl, path, errors);
      fn(r, path, i);
      r.finish();
    }
  };

  each_table(top.array("policies"), "policies", [&](detail::TableReader& r, const std::string& path, std::size_t) {
    PolicySeed p;
    std::string type = "store", device = "*", action = "allow", duration = "hourly";
    std::int64_t limit = 1;
    r.get("at", p.at);
    r.get("requester", p.rule.requester);
    r.get("type", type);
    r.get("device", device);
    r.get("action", action);
    r.get("limit", limit);
    r.get("duration", duration);
    if (auto t = parse_tx_type(type)) p.rule.request_type = *t;
    else errors.push_back(path + ".type: unknown '" + type + "'");
    p.rule.device_id = DeviceId{device};
    if (action == "allow") p.rule.action = Action::Allow;
    else if (action == "deny") p.rule.action = Action::Deny;
    else errors.push_back(path + ".action must be 'allow' or 'deny'");
    p.rule.tx_limit = limit < 0 ? 0 : static_cast<std::uint32_t>(limit);
    if (auto d = parse_limit_duration(duration)) p.rule.limit_duration = *d;
    else errors.push_back(path + ".duration: unknown '" + duration + "'");
    c.policies.push_back(std::move(p));
  });

  each_table(top.array("events"), "events", [&](detail::TableReader& r, const std::string& path, std::size_t) {
    ScriptEvent e;
    std::string kind, command = "off";
    r.get("kind", kind);
    r.get("at_ms", e.at_ms);
    bool known = false;
    for (auto k : {ScriptKind::Ebt, ScriptKind::Otft, ScriptKind::Ct, ScriptKind::Offline, ScriptKind::Online,
                   ScriptKind::Remove, ScriptKind::Add, ScriptKind::Broadcast})
      if (to_string(k) == kind) {
        e.kind = k;
        known = true;
      }
    if (!known) errors.push_back(path + ".kind: unknown '" + kind + "'");
    switch (e.kind) {
      case ScriptKind::Ebt:
        e.detail = "power_outage";
        r.get("device", e.target);
        r.get("event", e.detail);
        break;
      case ScriptKind::Otft:
        r.get("target", e.target);
        r.get("requester", e.requester);
        break;
      case ScriptKind::Ct:
        r.get("target", e.target);
        r.get("requester", e.requester);
        r.get("command", command);
        if (command != "on" && command != "off") errors.push_back(path + ".command must be 'on' or 'off'");
        e.command_on = command == "on";
        break;
      case ScriptKind::Broadcast:
        e.target = kControlCenter;
        r.get("origin", e.target);
        r.get("content", e.detail);
        break;
      default:
        r.get("device", e.target);
    }
    c.events.push_back(std::move(e));
  });

  each_table(top.array("attacks"), "attacks", [&](detail::TableReader& r, const std::string& path, std::size_t i) {
    AttackSpec a;
    a.id = "attack-" + std::to_string(i);
    std::string kind;
    r.get("id", a.id);
    r.get("kind", kind);
    r.get("start_ms", a.start_ms);
    r.get("duration_ms", a.duration_ms);
    if (kind == "ddos") {
      DdosAttack d;
      r.get("device", d.device);
      r.get("rate_per_hour", d.rate_per_hour);
      a.kind = d;
    } else if (kind == "tamper_rbc") {
      TamperRbcAttack t;
      std::string mutation(to_string(t.mutation)), channel = "hf";
      r.get("device", t.device);
      r.get("tx_selector", t.tx_selector);
      r.get("mutation", mutation);
      r.get("channel", channel);
      if (auto m = parse_mutation(mutation)) t.mutation = *m;
      else errors.push_back(path + ".mutation: unknown '" + mutation + "'");
      if (channel == "hf" || channel == "lf") t.channel = channel == "hf" ? Channel::Hf : Channel::Lf;
      else errors.push_back(path + ".channel must be 'hf' or 'lf'");
      a.kind = t;
    } else if (kind == "tamper_both") {
      TamperBothAttack t;
      r.get("device", t.device);
      r.get("broadcast_tx_selector", t.broadcast_tx_selector);
      a.kind = t;
    } else if (kind == "linking_probe") {
      a.kind = LinkingProbeAttack{};
    } else {
      errors.push_back(path + ".kind: unknown '" + kind + "'");
    }
    c.attacks.push_back(std::move(a));
  });
  top.finish();

  auto semantic = validate_scenario(c);
  errors.insert(errors.end(), semantic.begin(), semantic.end());
  if (!errors.empty()) throw ScenarioError(std::move(errors));
  return c;
}

inline ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str(), path);
}

}  // namespace dsg
