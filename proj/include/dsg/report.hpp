#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsg/attack.hpp"
#include "dsg/error.hpp"

namespace dsg {

struct ClassCounts {
  std::uint64_t generated = 0;
  std::uint64_t forwarded = 0;  // accepted into a remote chain
  std::uint64_t dropped = 0;
  std::uint64_t rejected = 0;
  std::map<std::string, std::uint64_t> dropped_by_reason;
  std::map<std::string, std::uint64_t> rejected_by_reason;

  bool reconciles() const { return generated == forwarded + dropped + rejected; }
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

struct LatencyStats {
  std::uint64_t count = 0;
  double mean_ms = 0;
  std::int64_t p95_ms = 0;
  double mean_no_crypto_ms = 0;
  std::int64_t p95_no_crypto_ms = 0;
  std::int64_t stages_min = 0;
  std::int64_t stages_max = 0;
  friend bool operator==(const LatencyStats&, const LatencyStats&) = default;
};

struct AlarmDelivery {
  std::string to;
  std::int64_t at_ms = 0;
  friend bool operator==(const AlarmDelivery&, const AlarmDelivery&) = default;
};

struct AlarmRecord {
  std::string raised_by;
  std::string cause;
  std::string subject;
  std::string about;
  std::int64_t window_start_ms = 0;
  std::int64_t raised_at_ms = 0;
  std::vector<std::string> recipients;
  std::vector<AlarmDelivery> delivered;
  friend bool operator==(const AlarmRecord&, const AlarmRecord&) = default;
};

struct ChainSummary {
  std::uint64_t total = 0;
  std::uint64_t valid = 0;
  std::uint64_t broken_expected = 0;  // chains an attack wrote to
  std::vector<std::string> broken_unexpected;
  friend bool operator==(const ChainSummary&, const ChainSummary&) = default;
};

struct MeterCounts {
  std::uint64_t hf_forwarded = 0;
  std::uint64_t lf_forwarded = 0;
  std::uint64_t ebt_forwarded = 0;
  friend bool operator==(const MeterCounts&, const MeterCounts&) = default;
};

struct ControlStats {
  std::uint64_t otft_ok = 0, otft_denied = 0, otft_unreachable = 0;
  std::uint64_t ct_ok = 0, ct_denied = 0, ct_exceeded = 0, ct_unreachable = 0;
  friend bool operator==(const ControlStats&, const ControlStats&) = default;
};

struct BroadcastStats {
  std::uint64_t issued = 0;
  std::uint64_t meter_deliveries = 0;
  std::uint64_t ledger_records = 0;
  friend bool operator==(const BroadcastStats&, const BroadcastStats&) = default;
};

struct MetricsReport {
  std::string scenario;
  std::uint64_t seed = 0;
  std::int64_t horizon_ms = 0;
  std::string key_scheme;
  bool unique_class_keys = true;
  std::map<std::string, ClassCounts> counts;
  std::map<std::string, LatencyStats> latency;
  std::vector<AlarmRecord> alarms;
  std::vector<DetectionRecord> detections;
  ChainSummary chains;
  std::map<std::string, MeterCounts> meters;
  ControlStats control;
  BroadcastStats broadcasts;
  std::optional<LinkReport> linking;
  std::uint64_t legit_generated = 0;
  std::uint64_t legit_accepted = 0;
  std::map<std::string, std::string> rbc_plaintext_digest;
  std::uint64_t sync_checks = 0;
  std::vector<std::string> violations;
  std::uint64_t events_logged = 0;
  std::string determinism_digest;

  bool ok() const { return violations.empty() && chains.broken_unexpected.empty(); }
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

// nlohmann::json keeps object keys in a std::map, so output is key-sorted.

inline void to_json(nlohmann::json& j, const ClassCounts& c) {
  j = {{"generated", c.generated}, {"forwarded", c.forwarded}, {"dropped", c.dropped}, {"rejected", c.rejected},
       {"dropped_by_reason", c.dropped_by_reason}, {"rejected_by_reason", c.rejected_by_reason}};
}
inline void from_json(const nlohmann::json& j, ClassCounts& c) {
  j.at("generated").get_to(c.generated);
  j.at("forwarded").get_to(c.forwarded);
  j.at("dropped").get_to(c.dropped);
  j.at("rejected").get_to(c.rejected);
  j.at("dropped_by_reason").get_to(c.dropped_by_reason);
  j.at("rejected_by_reason").get_to(c.rejected_by_reason);
}

inline void to_json(nlohmann::json& j, const LatencyStats& s) {
  j = {{"count", s.count},
       {"mean_ms", s.mean_ms},
       {"p95_ms", s.p95_ms},
       {"mean_no_crypto_ms", s.mean_no_crypto_ms},
       {"p95_no_crypto_ms", s.p95_no_crypto_ms},
       {"stages_min", s.stages_min},
       {"stages_max", s.stages_max}};
}
inline void from_json(const nlohmann::json& j, LatencyStats& s) {
  j.at("count").get_to(s.count);
  j.at("mean_ms").get_to(s.mean_ms);
  j.at("p95_ms").get_to(s.p95_ms);
  j.at("mean_no_crypto_ms").get_to(s.mean_no_crypto_ms);
  j.at("p95_no_crypto_ms").get_to(s.p95_no_crypto_ms);
  j.at("stages_min").get_to(s.stages_min);
  j.at("stages_max").get_to(s.stages_max);
}

inline void to_json(nlohmann::json& j, const AlarmDelivery& d) { j = {{"to", d.to}, {"at_ms", d.at_ms}}; }
inline void from_json(const nlohmann::json& j, AlarmDelivery& d) {
  j.at("to").get_to(d.to);
  j.at("at_ms").get_to(d.at_ms);
}

inline void to_json(nlohmann::json& j, const AlarmRecord& a) {
  j = {{"raised_by", a.raised_by},   {"cause", a.cause},
       {"subject", a.subject},       {"about", a.about},
       {"window_start_ms", a.window_start_ms}, {"raised_at_ms", a.raised_at_ms},
       {"recipients", a.recipients}, {"delivered", a.delivered}};
}
inline void from_json(const nlohmann::json& j, AlarmRecord& a) {
  j.at("raised_by").get_to(a.raised_by);
  j.at("cause").get_to(a.cause);
  j.at("subject").get_to(a.subject);
  j.at("about").get_to(a.about);
  j.at("window_start_ms").get_to(a.window_start_ms);
  j.at("raised_at_ms").get_to(a.raised_at_ms);
  j.at("recipients").get_to(a.recipients);
  j.at("delivered").get_to(a.delivered);
}

inline void to_json(nlohmann::json& j, const DetectionRecord& d) {
  nlohmann::json windows = nlohmann::json::object();
  for (const auto& [w, n] : d.forwarded_per_window) windows[std::to_string(w)] = n;
  j = {{"attack_id", d.attack_id},
       {"kind", d.kind},
       {"target", d.target},
       {"detected", d.detected},
       {"mechanism", std::string(to_string(d.mechanism))},
       {"detect_latency_ms", d.detect_latency_ms},
       {"alarms_delivered", d.alarms_delivered},
       {"note", d.note},
       {"forwarded_per_window", windows}};
}
inline void from_json(const nlohmann::json& j, DetectionRecord& d) {
  j.at("attack_id").get_to(d.attack_id);
  j.at("kind").get_to(d.kind);
  j.at("target").get_to(d.target);
  j.at("detected").get_to(d.detected);
  auto m = parse_mechanism(j.at("mechanism").get<std::string>());
  if (!m) throw Error(Errc::ParseError, "unknown mechanism");
  d.mechanism = *m;
  j.at("detect_latency_ms").get_to(d.detect_latency_ms);
  j.at("alarms_delivered").get_to(d.alarms_delivered);
  j.at("note").get_to(d.note);
  d.forwarded_per_window.clear();
  for (const auto& [k, v] : j.at("forwarded_per_window").items())
    d.forwarded_per_window[std::stoll(k)] = v.get<std::uint32_t>();
}

inline void to_json(nlohmann::json& j, const ChainSummary& c) {
  j = {{"total", c.total}, {"valid", c.valid}, {"broken_expected", c.broken_expected},
       {"broken_unexpected", c.broken_unexpected}};
}
inline void from_json(const nlohmann::json& j, ChainSummary& c) {
  j.at("total").get_to(c.total);
  j.at("valid").get_to(c.valid);
  j.at("broken_expected").get_to(c.broken_expected);
  j.at("broken_unexpected").get_to(c.broken_unexpected);
}

inline void to_json(nlohmann::json& j, const MeterCounts& m) {
  j = {{"hf_forwarded", m.hf_forwarded}, {"lf_forwarded", m.lf_forwarded}, {"ebt_forwarded", m.ebt_forwarded}};
}
inline void from_json(const nlohmann::json& j, MeterCounts& m) {
  j.at("hf_forwarded").get_to(m.hf_forwarded);
  j.at("lf_forwarded").get_to(m.lf_forwarded);
  j.at("ebt_forwarded").get_to(m.ebt_forwarded);
}

inline void to_json(nlohmann::json& j, const ControlStats& c) {
  j = {{"otft_ok", c.otft_ok}, {"otft_denied", c.otft_denied}, {"otft_unreachable", c.otft_unreachable},
       {"ct_ok", c.ct_ok},     {"ct_denied", c.ct_denied},     {"ct_exceeded", c.ct_exceeded},
       {"ct_unreachable", c.ct_unreachable}};
}
inline void from_json(const nlohmann::json& j, ControlStats& c) {
  j.at("otft_ok").get_to(c.otft_ok);
  j.at("otft_denied").get_to(c.otft_denied);
  j.at("otft_unreachable").get_to(c.otft_unreachable);
  j.at("ct_ok").get_to(c.ct_ok);
  j.at("ct_denied").get_to(c.ct_denied);
  j.at("ct_exceeded").get_to(c.ct_exceeded);
  j.at("ct_unreachable").get_to(c.ct_unreachable);
}

inline void to_json(nlohmann::json& j, const BroadcastStats& b) {
  j = {{"issued", b.issued}, {"meter_deliveries", b.meter_deliveries}, {"ledger_records", b.ledger_records}};
}
inline void from_json(const nlohmann::json& j, BroadcastStats& b) {
  j.at("issued").get_to(b.issued);
  j.at("meter_deliveries").get_to(b.meter_deliveries);
  j.at("ledger_records").get_to(b.ledger_records);
}

inline void to_json(nlohmann::json& j, const LinkReport& l) {
  j = {{"pairs_total", l.pairs_total}, {"pairs_linked", l.pairs_linked}, {"false_links", l.false_links},
       {"method", l.method}};
}
inline void from_json(const nlohmann::json& j, LinkReport& l) {
  j.at("pairs_total").get_to(l.pairs_total);
  j.at("pairs_linked").get_to(l.pairs_linked);
  j.at("false_links").get_to(l.false_links);
  j.at("method").get_to(l.method);
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json::object();
  j["scenario"] = r.scenario;
  j["seed"] = r.seed;
  j["horizon_ms"] = r.horizon_ms;
  j["key_scheme"] = r.key_scheme;
  j["unique_class_keys"] = r.unique_class_keys;
  j["counts"] = r.counts;
  j["latency"] = r.latency;
  j["alarms"] = r.alarms;
  j["detections"] = r.detections;
  j["chains"] = r.chains;
  j["meters"] = r.meters;
  j["control"] = r.control;
  j["broadcasts"] = r.broadcasts;
  j["linking"] = r.linking ? nlohmann::json(*r.linking) : nlohmann::json(nullptr);
  j["legit_generated"] = r.legit_generated;
  j["legit_accepted"] = r.legit_accepted;
  j["rbc_plaintext_digest"] = r.rbc_plaintext_digest;
  j["sync_checks"] = r.sync_checks;
  j["violations"] = r.violations;
  j["events_logged"] = r.events_logged;
  j["determinism_digest"] = r.determinism_digest;
  j["ok"] = r.ok();
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  j.at("scenario").get_to(r.scenario);
  j.at("seed").get_to(r.seed);
  j.at("horizon_ms").get_to(r.horizon_ms);
  j.at("key_scheme").get_to(r.key_scheme);
  j.at("unique_class_keys").get_to(r.unique_class_keys);
  j.at("counts").get_to(r.counts);
  j.at("latency").get_to(r.latency);
  j.at("alarms").get_to(r.alarms);
  j.at("detections").get_to(r.detections);
  j.at("chains").get_to(r.chains);
  j.at("meters").get_to(r.meters);
  j.at("control").get_to(r.control);
  j.at("broadcasts").get_to(r.broadcasts);
  if (j.at("linking").is_null()) r.linking.reset();
  else r.linking = j.at("linking").get<LinkReport>();
  j.at("legit_generated").get_to(r.legit_generated);
  j.at("legit_accepted").get_to(r.legit_accepted);
  j.at("rbc_plaintext_digest").get_to(r.rbc_plaintext_digest);
  j.at("sync_checks").get_to(r.sync_checks);
  j.at("violations").get_to(r.violations);
  j.at("events_logged").get_to(r.events_logged);
  j.at("determinism_digest").get_to(r.determinism_digest);
}

inline std::string report_to_string(const MetricsReport& r) { return nlohmann::json(r).dump(2) + "\n"; }

inline MetricsReport parse_report(std::string_view text) {
  try {
    return nlohmann::json::parse(text).get<MetricsReport>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, e.what());
  }
}

inline void emit_report(const MetricsReport& r, const std::string& path) {
  const auto text = report_to_string(r);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error(Errc::IoError, "cannot write " + path);
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !ok) throw Error(Errc::IoError, "short write to " + path);
}

inline MetricsReport load_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot read " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_report(text.str());
}

}  // namespace dsg
