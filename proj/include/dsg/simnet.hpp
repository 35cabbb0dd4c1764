#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <queue>
#include <string>
#include <string_view>
#include <vector>

#include "dsg/crypto.hpp"

namespace dsg {

struct LinkLatencies {
  std::int64_t han_hop_ms = 10;
  std::int64_t nan_hop_ms = 15;
  std::int64_t cellular_hop_ms = 50;
  std::int64_t wired_hop_ms = 20;
};

/// Per-hop loss probabilities. Zero everywhere by default.
struct LinkLoss {
  double han_hop = 0.0;
  double nan_hop = 0.0;
  double uplink = 0.0;
};

struct Topology {
  std::uint32_t ngws = 2;
  std::uint32_t hgws_per_ngw = 20;
  std::uint32_t devices_per_hgw = 10;  // smart meters plus sensor/actuator pairs
  std::uint32_t han_pairs_per_hgw = 1;
  std::uint32_t rtus_per_ngw = 0;
  LinkLatencies latency;
  LinkLoss loss;
  std::int64_t crypto_overhead_ms = 20;

  std::uint32_t meters_per_hgw() const {
    const auto paired = 2 * han_pairs_per_hgw;
    return devices_per_hgw > paired ? devices_per_hgw - paired : 0;
  }
};

enum class Hop : std::uint8_t { Local, Han, Nan, Uplink };

constexpr double hop_loss(const LinkLoss& l, Hop h) {
  switch (h) {
    case Hop::Local: return 0.0;
    case Hop::Han: return l.han_hop;
    case Hop::Nan: return l.nan_hop;
    case Hop::Uplink: return l.uplink;
  }
  return 0.0;
}

/// Uplink is the NGW to control-center/utility leg: cellular then wired.
/// Local is a co-located hand-off, e.g. a storage miner to its operator.
constexpr std::int64_t hop_latency_ms(const LinkLatencies& l, Hop h) {
  switch (h) {
    case Hop::Local: return 0;
    case Hop::Han: return l.han_hop_ms;
    case Hop::Nan: return l.nan_hop_ms;
    case Hop::Uplink: return l.cellular_hop_ms + l.wired_hop_ms;
  }
  return 0;
}

constexpr std::string_view to_string(Hop h) {
  switch (h) {
    case Hop::Local: return "local";
    case Hop::Han: return "han";
    case Hop::Nan: return "nan";
    case Hop::Uplink: return "uplink";
  }
  return "?";
}

inline std::int64_t message_delay_ms(const Topology& t, Hop h, int crypto_stages) {
  return hop_latency_ms(t.latency, h) + crypto_stages * t.crypto_overhead_ms;
}

/// Min-queue on (fire_at_ms, seq). seq is assigned at scheduling time.
template <class Payload>
class EventQueue {
 public:
  struct Event {
    std::int64_t fire_at_ms;
    std::uint64_t seq;
    Payload payload;
  };

  std::uint64_t schedule(std::int64_t at_ms, Payload p) {
    const auto s = next_seq_++;
    heap_.push(Event{at_ms, s, std::move(p)});
    return s;
  }

  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }
  std::int64_t next_time() const { return heap_.top().fire_at_ms; }

  Event pop() {
    Event e = std::move(const_cast<Event&>(heap_.top()));
    heap_.pop();
    return e;
  }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      return a.fire_at_ms != b.fire_at_ms ? a.fire_at_ms > b.fire_at_ms : a.seq > b.seq;
    }
  };
  std::priority_queue<Event, std::vector<Event>, Later> heap_;
  std::uint64_t next_seq_ = 0;
};

/// Builds one newline-delimited record with a fixed field order.
class LogLine {
 public:
  LogLine(std::int64_t t, std::string_view kind) {
    buf_.reserve(160);
    buf_ += "{\"t\":";
    buf_ += std::to_string(t);
    field("ev", kind);
  }

  LogLine& field(std::string_view key, std::string_view value) {
    key_(key);
    buf_ += '"';
    for (char c : value) {
      if (c == '"' || c == '\\') buf_ += '\\';
      buf_ += c;
    }
    buf_ += '"';
    return *this;
  }

  LogLine& field(std::string_view key, const char* value) { return field(key, std::string_view(value)); }

  LogLine& field(std::string_view key, std::int64_t value) {
    key_(key);
    buf_ += std::to_string(value);
    return *this;
  }

  LogLine& field(std::string_view key, std::uint64_t value) {
    key_(key);
    buf_ += std::to_string(value);
    return *this;
  }

  LogLine& field(std::string_view key, int value) { return field(key, static_cast<std::int64_t>(value)); }

  LogLine& field(std::string_view key, bool value) {
    key_(key);
    buf_ += value ? "true" : "false";
    return *this;
  }

  std::string finish() && {
    buf_ += "}\n";
    return std::move(buf_);
  }

 private:
  void key_(std::string_view key) {
    buf_ += ",\"";
    buf_ += key;
    buf_ += "\":";
  }
  std::string buf_;
};

/// Streams records into a running SHA-256; optionally keeps or tees them.
class EventLog {
 public:
  void keep_lines(bool keep) { keep_ = keep; }
  void tee_to(std::FILE* f) { tee_ = f; }

  void append(std::string line) {
    hash_.update(to_view(line));
    ++count_;
    if (tee_) std::fwrite(line.data(), 1, line.size(), tee_);
    if (keep_) lines_.push_back(std::move(line));
  }

  void append(LogLine&& l) { append(std::move(l).finish()); }
  void append(LogLine& l) { append(std::move(l).finish()); }

  std::uint64_t count() const { return count_; }
  Digest digest() const { return hash_.peek(); }
  const std::vector<std::string>& lines() const { return lines_; }

  std::string serialized() const {
    std::string out;
    for (const auto& l : lines_) out += l;
    return out;
  }

 private:
  static ByteView to_view(const std::string& s) {
    return ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  }

  Sha256Stream hash_;
  std::uint64_t count_ = 0;
  bool keep_ = false;
  std::FILE* tee_ = nullptr;
  std::vector<std::string> lines_;
};

}  // namespace dsg
