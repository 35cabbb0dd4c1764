#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <variant>

#include "dsg/ledger.hpp"

namespace dsg {

struct AuthRequest {
  std::string requester;
  TxType tx_type = TxType::Store;
  DeviceId device_id;
  std::int64_t now_ms = 0;
};

enum class DenyReason : std::uint8_t { NoRule, RuleDenies };

constexpr std::string_view to_string(DenyReason r) {
  return r == DenyReason::NoRule ? "NoRule" : "RuleDenies";
}

struct Allow {
  PolicyRule rule;
  std::size_t rule_index = 0;
};

struct Deny {
  DenyReason reason = DenyReason::NoRule;
};

using AuthDecision = std::variant<Allow, Deny>;

inline bool allowed(const AuthDecision& d) { return std::holds_alternative<Allow>(d); }

inline bool rule_matches(const PolicyRule& r, const AuthRequest& req) {
  return r.requester == req.requester && r.request_type == req.tx_type &&
         (r.device_id.is_wildcard() || r.device_id == req.device_id);
}

/// First match over the header's rules; no match is a deny.
inline AuthDecision authorize(const PolicyHeader& header, const AuthRequest& req) {
  for (std::size_t i = 0; i < header.rules.size(); ++i) {
    const auto& r = header.rules[i];
    if (!rule_matches(r, req)) continue;
    if (r.action == Action::Deny) return Deny{DenyReason::RuleDenies};
    return Allow{r, i};
  }
  return Deny{DenyReason::NoRule};
}

constexpr std::int64_t kHourMs = 3'600'000;
constexpr std::int64_t kDayMs = 24 * kHourMs;
constexpr std::int64_t kWeekMs = 7 * kDayMs;
constexpr std::int64_t kMonthMs = 30 * kDayMs;

constexpr std::int64_t window_length_ms(LimitDuration d) {
  switch (d) {
    case LimitDuration::Hourly: return kHourMs;
    case LimitDuration::Daily: return kDayMs;
    case LimitDuration::Weekly: return kWeekMs;
    case LimitDuration::Monthly: return kMonthMs;
  }
  return kHourMs;
}

constexpr std::int64_t window_start_ms(LimitDuration d, std::int64_t now_ms) {
  const auto len = window_length_ms(d);
  return now_ms - now_ms % len;
}

struct WithinLimit {
  std::uint32_t count = 0;
};

struct Exceeded {
  std::uint32_t count = 0;
  bool alarm_due = false;  // first excess in this window
  std::int64_t window_start_ms = 0;
};

using RateVerdict = std::variant<WithinLimit, Exceeded>;

/// Fixed-window counters aligned to epoch 0.
class RateCounterState {
 public:
  struct Counter {
    std::int64_t window_start_ms = -1;
    std::uint32_t count = 0;
    std::uint32_t dropped = 0;
    bool alarmed = false;
  };
  using Key = std::tuple<DeviceId, TxType, LimitDuration>;

  RateVerdict check_and_count(const PolicyRule& rule, const DeviceId& device, std::int64_t now_ms) {
    if (rule.action != Action::Allow)
      throw Error(Errc::InvalidRule, "rate check against a deny rule");
    const auto ws = window_start_ms(rule.limit_duration, now_ms);
    auto& c = counters_[Key{device, rule.request_type, rule.limit_duration}];
    if (c.window_start_ms != ws) c = Counter{ws, 0, 0, false};
    ++c.count;
    if (c.count <= rule.tx_limit) return WithinLimit{c.count};
    ++c.dropped;
    const bool first = !c.alarmed;
    c.alarmed = true;
    return Exceeded{c.count, first, ws};
  }

  const Counter* find(const DeviceId& device, TxType type, LimitDuration d) const {
    auto it = counters_.find(Key{device, type, d});
    return it == counters_.end() ? nullptr : &it->second;
  }

  const std::map<Key, Counter>& counters() const { return counters_; }

 private:
  std::map<Key, Counter> counters_;
};

inline RateVerdict check_and_count(RateCounterState& rc, const PolicyRule& rule,
                                   const DeviceId& device, std::int64_t now_ms) {
  return rc.check_and_count(rule, device, now_ms);
}

enum class App : std::uint8_t { AmiHf, AmiLf, DrmsCt, OmsEbt };

struct LimitSpec {
  std::uint32_t tx_limit;
  LimitDuration duration;
};

/// Scenario-tunable limits per application class.
struct AppLimits {
  LimitSpec ami_hf{4, LimitDuration::Hourly};
  LimitSpec ami_lf{1, LimitDuration::Weekly};
  LimitSpec drms_ct{4, LimitDuration::Daily};
  LimitSpec oms_ebt{4, LimitDuration::Hourly};

  const LimitSpec& of(App app) const {
    switch (app) {
      case App::AmiHf: return ami_hf;
      case App::AmiLf: return ami_lf;
      case App::DrmsCt: return drms_ct;
      case App::OmsEbt: return oms_ebt;
    }
    return ami_hf;
  }
};

constexpr TxType request_type_of(App app) {
  switch (app) {
    case App::AmiHf:
    case App::AmiLf: return TxType::Store;
    case App::DrmsCt: return TxType::Ct;
    case App::OmsEbt: return TxType::Ebt;
  }
  return TxType::Store;
}

inline PolicyRule default_policy_for(App app, std::string requester = "*",
                                     DeviceId device = DeviceId::wildcard(),
                                     const AppLimits& limits = {}) {
  const auto& l = limits.of(app);
  return PolicyRule{std::move(requester), request_type_of(app), std::move(device), Action::Allow,
                    l.tx_limit, l.duration};
}

}  // namespace dsg
