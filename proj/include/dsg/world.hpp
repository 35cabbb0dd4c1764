#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dsg/attack.hpp"
#include "dsg/device.hpp"
#include "dsg/miner.hpp"
#include "dsg/report.hpp"
#include "dsg/scenario.hpp"
#include "dsg/simnet.hpp"

namespace dsg {

/// Per-message bookkeeping used for latency accounting.
struct Trace {
  std::uint64_t msg = 0;
  std::string cls;
  std::int64_t origin_ms = 0;
  std::int64_t hop_ms = 0;
  std::int64_t stages = 0;
  bool legit = true;
};

struct RunOptions {
  bool keep_log = false;
  std::FILE* tee = nullptr;
};

// Crypto stages charged per hop. Every hop of a given kind costs the same so
// delivery order along a path is FIFO.
constexpr int kEnvelopeStages = 2;  // sender digest, receiver check
constexpr int kControlStages = 2;
constexpr int kRevocationStages = 1;

inline int han_store_stages(KeyScheme s) { return s == KeyScheme::A ? 3 : 2; }

class World {
 public:
  explicit World(ScenarioConfig cfg, RunOptions opts = {}) : cfg_(std::move(cfg)) {
    if (auto v = validate_scenario(cfg_); !v.empty()) throw ScenarioError(std::move(v));
    log_.keep_lines(opts.keep_log);
    log_.tee_to(opts.tee);
    auto params = cfg_.grid;
    params.seed = cfg_.seed;
    grid_ = build_grid(cfg_.topology, params);
    attack_rng_.seed(cfg_.seed ^ 0x61747461636b2d72ULL);
    loss_rng_.seed(cfg_.seed ^ 0x6c6f73732d726e67ULL);
    install_policy_seeds();
    index_channels();
  }

  Grid& grid() { return *grid_; }
  const EventLog& log() const { return log_; }
  const ScenarioConfig& config() const { return cfg_; }

  MetricsReport run() {
    schedule_initial();
    while (!queue_.empty()) {
      auto ev = queue_.pop();
      now_ = ev.fire_at_ms;
      std::visit([this](auto& e) { handle(e); }, ev.payload);
    }
    return finish();
  }

 private:
  // ---- events ------------------------------------------------------------
  struct TickEv {};
  struct AuditEv {};
  struct BroadcastIssueEv {
    std::string origin;
    std::string content;
  };
  struct ScriptEv {
    std::size_t index;
  };
  struct AttackEv {
    std::size_t index;
  };
  struct FloodEv {
    std::size_t attack;
    std::uint64_t k;
  };
  struct StoreAtGwEv {
    std::string gw;
    DeviceStore store;
    Trace trace;
  };
  struct EnvAtNgwEv {
    std::string ngw;
    std::string from;
    StoreEnvelope env;
    Trace trace;
  };
  struct EnvAtStorageEv {
    std::string storage;
    std::string from;
    StoreEnvelope env;
    Trace trace;
  };
  struct BcastAtNgwEv {
    std::string ngw;
    BroadcastMsg msg;
  };
  struct BcastAtHgwEv {
    std::string hgw;
    BroadcastMsg msg;
  };
  struct BcastAtMeterEv {
    std::string meter;
    std::uint64_t id;
  };
  struct PairDeliverEv {
    std::size_t pair;
    Ciphertext ct;
  };
  struct CtrlAtNgwEv {
    std::string ngw;
    ControlRequest req;
  };
  struct CtrlAtHgwEv {
    std::string hgw;
    ControlRequest req;
  };
  struct CtrlReplyAtNgwEv {
    std::string ngw;
    ControlReply reply;
  };
  struct CtrlResultEv {
    std::uint64_t req_id;
    std::string outcome;  // ok | denied | exceeded
    std::string detail;
  };
  struct CtrlTimeoutEv {
    std::uint64_t req_id;
  };
  struct AlarmAtNgwEv {
    std::string ngw;
    std::string from;
    std::size_t alarm;
    std::string to;
  };
  struct AlarmDeliveredEv {
    std::size_t alarm;
    std::string to;
  };
  struct RevocationEv {
    ControlMessage msg;
  };
  struct AuditReadEv {
    std::string auditor;
    std::vector<std::string> targets;
  };
  struct AuditSnapshotEv {
    std::string auditor;
    AuditSnapshot snap;
  };

  using Payload =
      std::variant<TickEv, AuditEv, BroadcastIssueEv, ScriptEv, AttackEv, FloodEv, StoreAtGwEv, EnvAtNgwEv,
                   EnvAtStorageEv, BcastAtNgwEv, BcastAtHgwEv, BcastAtMeterEv, PairDeliverEv, CtrlAtNgwEv,
                   CtrlAtHgwEv, CtrlReplyAtNgwEv, CtrlResultEv, CtrlTimeoutEv, AlarmAtNgwEv, AlarmDeliveredEv,
                   RevocationEv, AuditReadEv, AuditSnapshotEv>;

  // ---- bookkeeping -------------------------------------------------------
  struct ChannelInfo {
    std::string gw;
    DeviceId device;
    Destination destination;
    Channel channel;
    bool meter = true;
    bool retired = false;
    std::optional<std::int64_t> removed_at;
  };

  struct ControlState {
    ControlRequest req;
    bool resolved = false;
  };

  struct LatencySample {
    std::int64_t total;
    std::int64_t no_crypto;
    std::int64_t stages;
  };

  // ---- setup -------------------------------------------------------------
  void install_policy_seeds() {
    for (const auto& p : cfg_.policies) {
      for (auto& [id, m] : grid_->miners) {
        const bool hit = p.at == id || (p.at == "hgws" && m.role == MinerRole::Hgw) ||
                         (p.at == "ngws" && m.role == MinerRole::Ngw) ||
                         (p.at == "storages" && (m.role == MinerRole::CcStorage || m.role == MinerRole::UStorage));
        if (hit) m.own.update_policy(p.rule, Actor::Utility, grid_->meter_predicate());
      }
    }
  }

  void index_channels() {
    for (auto& [gid, m] : grid_->miners) index_gateway(m);
  }

  void index_gateway(Miner& m) {
    for (const auto& [did, entry] : m.devices) index_device(m, entry);
  }

  void index_device(const Miner& m, const DeviceEntry& entry) {
    if (entry.removed) return;
    auto add = [&](const std::optional<ChannelBinding>& b, Channel c) {
      if (!b || b->destination == Destination::Local) return;
      channels_[b->ledger_id] =
          ChannelInfo{m.id, entry.id, b->destination, c, entry.kind == DeviceKind::SmartMeter, false, std::nullopt};
    };
    add(entry.hf, Channel::Hf);
    add(entry.lf, Channel::Lf);
  }

  std::int64_t tick_base() const {
    const auto& p = cfg_.grid;
    auto g = std::gcd(std::gcd(p.hf_period_ms, p.lf_period_ms), std::gcd(p.sensor_period_ms, p.rtu_period_ms));
    return g;
  }

  void schedule_initial() {
    const auto base = tick_base();
    if (base <= cfg_.horizon_ms) queue_.schedule(base, TickEv{});
    for (std::int64_t t = cfg_.audit_period_ms; t <= cfg_.horizon_ms; t += cfg_.audit_period_ms)
      queue_.schedule(t, AuditEv{});
    if (cfg_.broadcast_period_ms > 0) {
      std::uint64_t k = 0;
      for (std::int64_t t = cfg_.broadcast_period_ms; t <= cfg_.horizon_ms; t += cfg_.broadcast_period_ms, ++k) {
        if (k % 2 == 0)
          queue_.schedule(t, BroadcastIssueEv{kControlCenter, "drms shed_level=" + std::to_string(k % 3)});
        else
          queue_.schedule(t, BroadcastIssueEv{kUtility, "pricing tariff=" + std::to_string(10 + k % 7)});
      }
    }
    for (std::size_t i = 0; i < cfg_.events.size(); ++i) queue_.schedule(cfg_.events[i].at_ms, ScriptEv{i});
    detections_.resize(cfg_.attacks.size());
    for (std::size_t i = 0; i < cfg_.attacks.size(); ++i) {
      const auto& a = cfg_.attacks[i];
      auto& d = detections_[i];
      d.attack_id = a.id;
      d.kind = std::string(kind_name(a.kind));
      d.target = attack_target(a.kind);
      if (std::holds_alternative<DdosAttack>(a.kind)) d.mechanism = Mechanism::RateLimit;
      if (std::holds_alternative<TamperRbcAttack>(a.kind)) d.mechanism = Mechanism::StoreAuthMismatch;
      if (std::holds_alternative<TamperBothAttack>(a.kind)) d.mechanism = Mechanism::BroadcastAudit;
      if (std::holds_alternative<LinkingProbeAttack>(a.kind)) d.mechanism = Mechanism::IdentifierLinking;
      queue_.schedule(a.start_ms, AttackEv{i});
    }
  }

  // ---- messaging ---------------------------------------------------------
  std::int64_t delay(Hop h, int stages) const { return message_delay_ms(cfg_.topology, h, stages); }

  template <class E>
  void send(Hop h, int stages, Trace& tr, E ev) {
    tr.hop_ms += hop_latency_ms(cfg_.topology.latency, h);
    tr.stages += stages;
    if constexpr (requires { ev.trace; }) {
      ev.trace = tr;
      if (lost(h)) {
        dropped(tr, "lost");
        log_.append(line("lost").field("msg", tr.msg));
        // The gateway already logged the record; its remote copy never will.
        if constexpr (requires { ev.env; }) desynced_.insert(ev.env.inner.device_id.value);
        return;
      }
    }
    queue_.schedule(now_ + delay(h, stages), std::move(ev));
  }

  // Draws only on lossy links so lossless runs keep their digests.
  bool lost(Hop h) {
    const double r = hop_loss(cfg_.topology.loss, h);
    return r > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(loss_rng_) < r;
  }

  template <class E>
  void send_plain(std::int64_t after, E ev) {
    queue_.schedule(now_ + after, std::move(ev));
  }

  Trace new_trace(std::string cls, bool legit = true) {
    return Trace{++msg_seq_, std::move(cls), now_, 0, 0, legit};
  }

  void violation(std::string what) {
    if (violations_.size() < 200) violations_.push_back(std::move(what));
    ++violation_count_;
  }

  LogLine line(std::string_view kind) { return LogLine(now_, kind); }

  static std::string class_of(const DeviceStore& s, bool rtu) {
    if (rtu) return "rtu";
    if (s.tx_type == TxType::Ebt) return "ebt";
    return s.channel == Channel::Hf ? "hf" : "lf";
  }

  void generated(const Trace& tr) {
    ++counts_[tr.cls].generated;
    if (tr.legit) ++legit_generated_;
  }

  void dropped(const Trace& tr, std::string_view reason) {
    auto& c = counts_[tr.cls];
    ++c.dropped;
    ++c.dropped_by_reason[std::string(reason)];
  }

  // ---- ticks -------------------------------------------------------------
  bool flooding(const std::string& device) const {
    for (std::size_t i = 0; i < cfg_.attacks.size(); ++i) {
      const auto& a = cfg_.attacks[i];
      if (auto* d = std::get_if<DdosAttack>(&a.kind))
        if (d->device == device && now_ >= a.start_ms && now_ < a.start_ms + a.duration_ms) return true;
    }
    return false;
  }

  void handle(TickEv&) {
    for (auto& [id, sm] : grid_->meters) {
      if (flooding(id)) continue;
      std::vector<DeviceStore> out;
      try {
        out = sm_tick(sm, now_);
      } catch (const Error& e) {
        log_.append(line("emit_failed").field("device", id).field("error", e.what()));
        continue;
      }
      for (auto& s : out) emit_meter_store(sm, std::move(s));
    }
    for (std::size_t i = 0; i < grid_->pairs.size(); ++i) {
      auto& pair = grid_->pairs[i];
      if (!on_boundary(pair.period_ms, now_)) continue;
      auto& sensor = grid_->han.at(pair.sensor.value);
      if (!sensor.online) continue;
      const double v = sensor_sample(pair);
      try {
        auto ct = sensor_seal(pair, sensor, v);
        Trace tr = new_trace("pair");
        send(Hop::Han, 2, tr, PairDeliverEv{i, std::move(ct)});
        if (!sensor.cloud_key.empty()) {
          auto pt = to_bytes("temp=" + format_value(v));
          emit_han_store(sensor, DeviceStore{sensor.id, Channel::Hf, TxType::Store,
                                             sensor.keys.seal(sensor.cloud_key, pt), now_});
        }
      } catch (const Error& e) {
        log_.append(line("pair_send_failed").field("sensor", pair.sensor.value).field("error", e.what()));
      }
    }
    for (auto& [id, rtu] : grid_->rtus) {
      if (flooding(id)) continue;
      std::optional<DeviceStore> s;
      try {
        s = rtu_tick(rtu, now_);
      } catch (const Error& e) {
        log_.append(line("emit_failed").field("device", id).field("error", e.what()));
        continue;
      }
      if (s) emit_rtu_store(rtu, std::move(*s), "rtu", true);
    }
    const auto next = now_ + tick_base();
    if (next <= cfg_.horizon_ms) queue_.schedule(next, TickEv{});
  }

  void emit_meter_store(SmartMeter& sm, DeviceStore s, std::string cls = {}, bool legit = true) {
    if (cls.empty()) cls = class_of(s, false);
    Trace tr = new_trace(std::move(cls), legit);
    generated(tr);
    log_.append(line("gen").field("msg", tr.msg).field("class", tr.cls).field("device", sm.id.value));
    send(Hop::Han, han_store_stages(cfg_.grid.scheme), tr, StoreAtGwEv{sm.hgw, std::move(s), tr});
  }

  void emit_han_store(HanDevice& d, DeviceStore s) {
    Trace tr = new_trace("han");
    generated(tr);
    log_.append(line("gen").field("msg", tr.msg).field("class", tr.cls).field("device", d.id.value));
    send(Hop::Han, han_store_stages(KeyScheme::B), tr, StoreAtGwEv{d.hgw, std::move(s), tr});
  }

  void emit_rtu_store(Rtu& rtu, DeviceStore s, std::string cls, bool legit) {
    Trace tr = new_trace(std::move(cls), legit);
    generated(tr);
    log_.append(line("gen").field("msg", tr.msg).field("class", tr.cls).field("device", rtu.id.value));
    send(Hop::Nan, 2, tr, StoreAtGwEv{rtu.ngw, std::move(s), tr});
  }

  // ---- store path --------------------------------------------------------
  void handle(StoreAtGwEv& e) {
    auto& gw = grid_->miner(e.gw);
    auto out = process_store(*grid_, gw, e.store, now_);
    if (auto* d = std::get_if<Dropped>(&out)) {
      dropped(e.trace, to_string(d->reason));
      log_.append(line("drop")
                      .field("msg", e.trace.msg)
                      .field("at", gw.id)
                      .field("device", e.store.device.value)
                      .field("reason", to_string(d->reason)));
      if (d->exceeded && d->exceeded->alarm_due)
        alarm(gw, AlarmCause::ExcessTraffic, e.store.device.value, e.store.tx_type, d->exceeded->window_start_ms);
      return;
    }
    auto& f = std::get<ForwardedStore>(out);
    const auto& lid = f.envelope.inner.device_id.value;
    authorized_.insert({lid, f.envelope.inner.tx_number});
    count_flood_forward(e.store.device.value, e.trace);
    log_.append(line("fwd")
                    .field("msg", e.trace.msg)
                    .field("at", gw.id)
                    .field("ledger", lid)
                    .field("tx", f.envelope.inner.tx_number)
                    .field("to", f.next_hop));
    if (gw.role == MinerRole::Hgw)
      send(Hop::Nan, kEnvelopeStages, e.trace, EnvAtNgwEv{f.next_hop, gw.id, std::move(f.envelope), e.trace});
    else
      send(Hop::Uplink, kEnvelopeStages, e.trace,
           EnvAtStorageEv{f.next_hop, gw.id, std::move(f.envelope), e.trace});
  }

  void count_flood_forward(const std::string& source, const Trace& tr) {
    if (tr.cls != "flood") return;
    for (std::size_t i = 0; i < cfg_.attacks.size(); ++i)
      if (auto* d = std::get_if<DdosAttack>(&cfg_.attacks[i].kind); d && d->device == source)
        ++detections_[i].forwarded_per_window[window_start_ms(LimitDuration::Hourly, now_)];
  }

  void handle(EnvAtNgwEv& e) {
    auto& ngw = grid_->miner(e.ngw);
    auto out = relay_at_ngw(ngw, e.from, e.env, now_);
    if (auto* d = std::get_if<Dropped>(&out)) {
      dropped(e.trace, to_string(d->reason));
      desynced_.insert(e.env.inner.device_id.value);
      log_.append(line("drop")
                      .field("msg", e.trace.msg)
                      .field("at", ngw.id)
                      .field("from", e.from)
                      .field("reason", to_string(d->reason)));
      if (d->exceeded && d->exceeded->alarm_due)
        alarm(ngw, AlarmCause::ExcessTraffic, e.from, e.env.inner.tx_type, d->exceeded->window_start_ms);
      return;
    }
    count_flood_forward(e.from, e.trace);
    log_.append(line("relay").field("msg", e.trace.msg).field("at", ngw.id).field("from", e.from));
    auto next = std::get<Relayed>(out).next_hop;
    send(Hop::Uplink, kEnvelopeStages, e.trace, EnvAtStorageEv{next, ngw.id, std::move(e.env), e.trace});
  }

  void handle(EnvAtStorageEv& e) {
    auto& storage = grid_->miner(e.storage);
    const auto lid = e.env.inner.device_id.value;
    auto out = authenticate_store_at_rbc(*grid_, storage, e.from, e.env, now_);
    if (auto* d = std::get_if<Dropped>(&out)) {
      dropped(e.trace, to_string(d->reason));
      desynced_.insert(lid);
      log_.append(line("drop")
                      .field("msg", e.trace.msg)
                      .field("at", storage.id)
                      .field("from", e.from)
                      .field("reason", to_string(d->reason)));
      if (d->exceeded && d->exceeded->alarm_due)
        alarm(storage, AlarmCause::ExcessTraffic, e.from, e.env.inner.tx_type, d->exceeded->window_start_ms);
      return;
    }
    if (auto* r = std::get_if<Rejected>(&out)) {
      on_rejected(e, *r);
      return;
    }
    on_accepted(e, storage, std::get<Accepted>(out));
  }

  void on_rejected(const EnvAtStorageEv& e, const Rejected& r) {
    const auto lid = e.env.inner.device_id.value;
    auto& c = counts_[e.trace.cls];
    ++c.rejected;
    ++c.rejected_by_reason[std::string(to_string(r.reason))];
    log_.append(line("reject")
                    .field("msg", e.trace.msg)
                    .field("at", e.storage)
                    .field("ledger", lid)
                    .field("reason", to_string(r.reason))
                    .field("detail", r.detail));
    bool expected = desynced_.contains(lid) || !e.trace.legit;
    if (auto t = tampered_rbc_.find(lid); t != tampered_rbc_.end()) {
      expected = true;
      auto& d = detections_[t->second];
      if (!d.detected && r.reason == RejectReason::Mismatch) {
        d.detected = true;
        d.detect_latency_ms = now_ - cfg_.attacks[t->second].start_ms;
        log_.append(line("detect").field("attack", d.attack_id).field("mechanism", to_string(d.mechanism)));
      }
    }
    if (auto ch = channels_.find(lid); ch != channels_.end() && ch->second.removed_at && r.reason == RejectReason::AuthFailure)
      expected = true;  // key revoked while the record was in flight
    if (!expected)
      violation("false rejection on " + lid + " tx " + std::to_string(e.env.inner.tx_number) + ": " +
                std::string(to_string(r.reason)) + " (" + r.detail + ")");
  }

  void on_accepted(const EnvAtStorageEv& e, Miner& storage, const Accepted& a) {
    const auto& tx = e.env.inner;
    const auto lid = tx.device_id.value;
    ++counts_[e.trace.cls].forwarded;
    if (e.trace.legit) ++legit_accepted_;
    log_.append(line("accept")
                    .field("msg", e.trace.msg)
                    .field("at", storage.id)
                    .field("ledger", lid)
                    .field("tx", tx.tx_number)
                    .field("block", a.ref.block_number));

    // Latency additivity.
    const auto total = now_ - e.trace.origin_ms;
    if (total != e.trace.hop_ms + e.trace.stages * cfg_.topology.crypto_overhead_ms)
      violation("latency accounting mismatch on msg " + std::to_string(e.trace.msg));
    latency_[e.trace.cls].push_back({total, e.trace.hop_ms, e.trace.stages});

    // Plaintext trail per remote chain, compared across key schemes.
    auto& stream = plaintexts_[storage.id][lid];
    stream.update(to_string(tx.tx_type));
    stream.update(ByteView(a.plaintext));

    // Forward authorization: the gateway allowed exactly this record.
    if (authorized_.erase({lid, tx.tx_number}) == 0)
      violation("record " + lid + "#" + std::to_string(tx.tx_number) + " accepted without a forwarding decision");

    auto ch = channels_.find(lid);
    if (ch == channels_.end()) return;
    const auto& info = ch->second;

    // Key-class discipline.
    if (!tx.signature && info.meter && cfg_.grid.unique_class_keys) {
      const auto& key = storage.keys.get(a.key_id);
      if (key.data_class != data_class_of(info.channel))
        violation("key class mismatch on " + lid + ": " + std::string(to_string(key.data_class)));
    }
    // Revocation.
    if (info.removed_at && e.trace.origin_ms > *info.removed_at && !tx.signature)
      violation("record from removed device " + info.device.value + " accepted");

    // Sync: the LBC holds the same record at the same position.
    ++sync_checks_;
    if (!info.retired && !tampered_both_.contains(lid)) {
      auto& lbc = grid_->miner(info.gw).ledger(info.device, info.destination);
      auto local = transaction_ref(lbc, tx.tx_number);
      if (!local || !(*local == a.ref))
        violation("sync: " + lid + " tx " + std::to_string(tx.tx_number) + " differs between LBC and RBC");
    }

    if (info.meter && !tx.signature && e.trace.legit) {
      auto& m = meters_[info.device.value];
      if (tx.tx_type == TxType::Ebt) ++m.ebt_forwarded;
      else if (info.channel == Channel::Hf) ++m.hf_forwarded;
      else ++m.lf_forwarded;
    }
  }

  // ---- HAN pairs ---------------------------------------------------------
  void handle(PairDeliverEv& e) {
    auto& pair = grid_->pairs[e.pair];
    auto& act = grid_->han.at(pair.actuator.value);
    auto& hgw = grid_->miner(act.hgw);
    if (!act.online) {
      log_.append(line("pair_lost").field("actuator", act.id.value));
      return;
    }
    ActuatorDecision d;
    try {
      d = actuator_receive(pair, act, e.ct);
    } catch (const Error& err) {
      log_.append(line("pair_rejected").field("actuator", act.id.value).field("error", err.what()));
      return;
    }
    log_.append(line("actuate").field("actuator", act.id.value).field("on", d.on).field("changed", d.changed));
    // The gateway records the exchange in the sensor's local chain.
    auto it = hgw.ledgers.find({pair.sensor, Destination::Local});
    if (it == hgw.ledgers.end()) return;
    auto adm = admit(hgw.own.current_policy(), hgw.rate,
                     AuthRequest{pair.actuator.value, TxType::Access, pair.sensor, now_}, pair.sensor);
    if (std::holds_alternative<Dropped>(adm)) return;
    it->second.append(next_transaction(it->second, TxType::Access, e.ct.encode(), now_));
  }

  // ---- broadcasts --------------------------------------------------------
  void handle(BroadcastIssueEv& e) { issue_broadcast(e.origin, e.content); }

  void issue_broadcast(const std::string& origin, const std::string& content) {
    auto msg = make_broadcast(*grid_, ++broadcast_seq_, origin, content, now_);
    ++broadcasts_.issued;
    log_.append(line("bcast").field("id", msg.id).field("origin", origin));
    auto& home = grid_->miner(origin == kUtility ? kUStorage : kCcStorage);
    record_broadcast_own(home, msg, now_);
    for (const auto& ngw : grid_->ngw_ids()) {
      Trace tr = new_trace("bcast");
      send(Hop::Uplink, kEnvelopeStages, tr, BcastAtNgwEv{ngw, msg});
    }
  }

  void handle(BcastAtNgwEv& e) {
    auto& ngw = grid_->miner(e.ngw);
    if (!verify_broadcast(*grid_, e.msg)) {
      log_.append(line("bcast_bad").field("at", ngw.id));
      return;
    }
    record_broadcast_own(ngw, e.msg, now_);
    for (const auto& child : ngw.children) {
      auto* hgw = grid_->find_miner(child);
      if (!hgw || hgw->role != MinerRole::Hgw) continue;
      Trace tr = new_trace("bcast");
      send(Hop::Nan, kEnvelopeStages, tr, BcastAtHgwEv{hgw->id, e.msg});
    }
  }

  void handle(BcastAtHgwEv& e) {
    auto& hgw = grid_->miner(e.hgw);
    auto echoes = record_broadcast_at_hgw(*grid_, hgw, e.msg, now_);
    log_.append(line("bcast_rec").field("at", hgw.id).field("id", e.msg.id).field("echoes", echoes.size()));
    for (auto& f : echoes) {
      Trace tr = new_trace("bcast_echo");
      generated(tr);
      authorized_.insert({f.envelope.inner.device_id.value, f.envelope.inner.tx_number});
      send(Hop::Nan, kEnvelopeStages, tr, EnvAtNgwEv{f.next_hop, hgw.id, std::move(f.envelope), tr});
    }
    for (const auto& [id, entry] : hgw.devices) {
      if (entry.kind != DeviceKind::SmartMeter || entry.removed) continue;
      Trace tr = new_trace("bcast");
      send(Hop::Han, 1, tr, BcastAtMeterEv{id, e.msg.id});
    }
  }

  void handle(BcastAtMeterEv& e) {
    if (grid_->meters.at(e.meter).online) ++broadcasts_.meter_deliveries;
  }

  // ---- control: OTFT and CT ---------------------------------------------
  void issue_control(const ScriptEvent& s) {
    ControlRequest req{++control_seq_, s.requester, s.kind == ScriptKind::Otft ? TxType::Otft : TxType::Ct,
                       DeviceId{s.target}, s.command_on, now_};
    controls_[req.req_id] = ControlState{req, false};
    log_.append(line("ctrl_req")
                    .field("req", req.req_id)
                    .field("type", to_string(req.type))
                    .field("requester", req.requester)
                    .field("target", req.target.value));
    std::string ngw;
    if (auto home = grid_->home_of(s.target); !home.empty()) {
      auto& m = grid_->miner(home);
      ngw = m.role == MinerRole::Ngw ? m.id : m.parent;
    } else if (auto ids = grid_->ngw_ids(); !ids.empty()) {
      ngw = ids.front();
    } else {
      return finish_control(req.req_id, "denied", "no gateway");
    }
    Trace tr = new_trace("ctrl");
    send(Hop::Uplink, kControlStages, tr, CtrlAtNgwEv{ngw, req});
    send_plain(cfg_.otft_timeout_ms, CtrlTimeoutEv{req.req_id});
  }

  void handle(CtrlAtNgwEv& e) {
    auto& ngw = grid_->miner(e.ngw);
    auto out = control_at_ngw(*grid_, ngw, e.req, now_);
    if (auto* d = std::get_if<ControlDenied>(&out)) {
      if (d->exceeded && d->exceeded->alarm_due)
        alarm(ngw, AlarmCause::ExcessTraffic, e.req.target.value, e.req.type, d->exceeded->window_start_ms);
      Trace tr = new_trace("ctrl");
      send(Hop::Uplink, kControlStages, tr,
           CtrlResultEv{e.req.req_id, d->reason == DropReason::Exceeded ? "exceeded" : "denied",
                        d->where + ":" + std::string(to_string(d->reason))});
      return;
    }
    Trace tr = new_trace("ctrl");
    send(Hop::Nan, kControlStages, tr, CtrlAtHgwEv{std::get<ForwardControl>(out).hgw, e.req});
  }

  void handle(CtrlAtHgwEv& e) {
    auto& hgw = grid_->miner(e.hgw);
    auto out = serve_control_at_hgw(*grid_, hgw, e.req, now_);
    if (std::holds_alternative<Unreachable>(out)) {
      log_.append(line("ctrl_unreachable").field("req", e.req.req_id).field("target", e.req.target.value));
      return;
    }
    if (auto* d = std::get_if<ControlDenied>(&out)) {
      Trace tr = new_trace("ctrl");
      tr.hop_ms += hop_latency_ms(cfg_.topology.latency, Hop::Nan);
      send(Hop::Uplink, kControlStages,  tr,
           CtrlResultEv{e.req.req_id, "denied", d->where + ":" + std::string(to_string(d->reason))});
      return;
    }
    // Round trip to the device over the HAN, then back up to the NGW.
    const auto& r = std::get<ControlReply>(out);
    const auto han_rtt = 2 * hop_latency_ms(cfg_.topology.latency, Hop::Han);
    queue_.schedule(now_ + han_rtt + delay(Hop::Nan, kControlStages), CtrlReplyAtNgwEv{hgw.parent, r});
  }

  void handle(CtrlReplyAtNgwEv& e) {
    log_control_reply(grid_->miner(e.ngw), e.reply, now_);
    Trace tr = new_trace("ctrl");
    send(Hop::Uplink, kControlStages, tr, CtrlResultEv{e.reply.req_id, "ok", e.reply.result});
  }

  void handle(CtrlResultEv& e) { finish_control(e.req_id, e.outcome, e.detail); }

  void handle(CtrlTimeoutEv& e) {
    auto& st = controls_.at(e.req_id);
    if (st.resolved) return;
    finish_control(e.req_id, "unreachable", "timeout");
  }

  void finish_control(std::uint64_t req_id, const std::string& outcome, const std::string& detail) {
    auto& st = controls_.at(req_id);
    if (st.resolved) {
      log_.append(line("ctrl_late").field("req", req_id).field("outcome", outcome));
      return;
    }
    st.resolved = true;
    const bool otft = st.req.type == TxType::Otft;
    if (outcome == "ok") ++(otft ? control_.otft_ok : control_.ct_ok);
    else if (outcome == "unreachable") ++(otft ? control_.otft_unreachable : control_.ct_unreachable);
    else if (outcome == "exceeded" && !otft) ++control_.ct_exceeded;
    else ++(otft ? control_.otft_denied : control_.ct_denied);
    log_.append(line("ctrl_done")
                    .field("req", req_id)
                    .field("outcome", outcome)
                    .field("detail", detail)
                    .field("rtt_ms", now_ - st.req.issued_at_ms));
  }

  // ---- alarms ------------------------------------------------------------
  void alarm(Miner& m, AlarmCause cause, const std::string& subject, TxType about, std::int64_t window) {
    auto at = raise_alarm(m, cause, subject, about, window, now_);
    AlarmRecord rec{at.raised_by, std::string(to_string(cause)), subject, std::string(to_string(about)),
                    window, now_, at.recipients, {}};
    alarms_.push_back(rec);
    const auto idx = alarms_.size() - 1;
    log_.append(line("alarm").field("by", m.id).field("cause", rec.cause).field("subject", subject));
    note_alarm_detection(m, cause, subject);
    for (const auto& to : at.recipients) {
      Trace tr = new_trace("alarm");
      if (m.role == MinerRole::Hgw) {
        if (to == customer_of(m.id))
          send(Hop::Han, kControlStages, tr, AlarmDeliveredEv{idx, to});
        else
          send(Hop::Nan, kControlStages, tr, AlarmAtNgwEv{m.parent, m.id, idx, to});
      } else if (m.role == MinerRole::Ngw) {
        send(Hop::Uplink, kControlStages, tr, AlarmDeliveredEv{idx, to});
      } else {
        send(Hop::Local, 0, tr, AlarmDeliveredEv{idx, to});
      }
    }
  }

  void note_alarm_detection(const Miner& m, AlarmCause cause, const std::string& subject) {
    for (std::size_t i = 0; i < cfg_.attacks.size(); ++i) {
      const auto& a = cfg_.attacks[i];
      auto& d = detections_[i];
      if (d.detected || now_ < a.start_ms) continue;
      if (auto* dd = std::get_if<DdosAttack>(&a.kind); dd && cause == AlarmCause::ExcessTraffic && dd->device == subject) {
        d.detected = true;
        d.detect_latency_ms = now_ - a.start_ms;
      }
      (void)m;
    }
  }

  void handle(AlarmAtNgwEv& e) {
    auto& ngw = grid_->miner(e.ngw);
    auto adm = admit_outbound(ngw, e.from, TxType::At, DeviceId{alarms_[e.alarm].subject}, now_);
    if (std::holds_alternative<Dropped>(adm)) {
      log_.append(line("alarm_drop").field("at", ngw.id).field("from", e.from));
      return;
    }
    Trace tr = new_trace("alarm");
    send(Hop::Uplink, kControlStages, tr, AlarmDeliveredEv{e.alarm, e.to});
  }

  void handle(AlarmDeliveredEv& e) {
    auto& rec = alarms_[e.alarm];
    rec.delivered.push_back({e.to, now_});
    log_.append(line("alarm_delivered").field("to", e.to).field("subject", rec.subject));
    for (std::size_t i = 0; i < cfg_.attacks.size(); ++i) {
      const auto& a = cfg_.attacks[i];
      if (now_ < a.start_ms) continue;
      if (auto* dd = std::get_if<DdosAttack>(&a.kind); dd && rec.subject == dd->device)
        ++detections_[i].alarms_delivered;
      if (std::holds_alternative<TamperBothAttack>(a.kind) && e.to == kControlCenter &&
          rec.cause == to_string(AlarmCause::AuditMismatch) && attack_ledger_[i] == rec.subject)
        ++detections_[i].alarms_delivered;
    }
  }

  // ---- audits ------------------------------------------------------------
  void handle(AuditEv&) {
    auto& storage = grid_->miner(kCcStorage);
    for (const auto& ngw : grid_->ngw_ids()) {
      auto targets = audit_targets(*grid_, storage, ngw);
      if (targets.empty()) continue;
      log_.append(line("audit_req").field("auditor", ngw).field("targets", targets.size()));
      Trace tr = new_trace("audit");
      send(Hop::Uplink, kControlStages, tr, AuditReadEv{ngw, std::move(targets)});
    }
  }

  void handle(AuditReadEv& e) {
    auto& storage = grid_->miner(kCcStorage);
    auto read = serve_audit_read(storage, e.auditor, e.targets, now_);
    if (auto* d = std::get_if<ReadDenied>(&read)) {
      log_.append(line("audit_denied").field("auditor", e.auditor).field("reason", to_string(d->reason)));
      return;
    }
    Trace tr = new_trace("audit");
    send(Hop::Uplink, kControlStages, tr, AuditSnapshotEv{e.auditor, std::move(std::get<AuditSnapshot>(read))});
  }

  void handle(AuditSnapshotEv& e) {
    auto& auditor = grid_->miner(e.auditor);
    auto findings = compare_broadcast_copies(auditor, e.snap);
    std::map<std::string, std::vector<AuditFinding>> by_ledger;
    for (auto& f : findings) by_ledger[f.ledger_id].push_back(std::move(f));
    log_.append(line("audit_done")
                    .field("auditor", e.auditor)
                    .field("records", e.snap.records.size())
                    .field("mismatched_chains", by_ledger.size()));
    for (const auto& [lid, fs] : by_ledger) {
      alarm(auditor, AlarmCause::AuditMismatch, lid, TxType::Access, e.snap.served_at_ms);
      bool explained = tampered_both_.contains(lid) || tampered_rbc_.contains(lid);
      for (std::size_t i = 0; i < cfg_.attacks.size(); ++i) {
        if (attack_ledger_[i] != lid || !std::holds_alternative<TamperBothAttack>(cfg_.attacks[i].kind)) continue;
        auto& d = detections_[i];
        if (d.detected || e.snap.served_at_ms < cfg_.attacks[i].start_ms) continue;
        d.detected = true;
        d.detect_latency_ms = e.snap.served_at_ms - cfg_.attacks[i].start_ms;
        log_.append(line("detect").field("attack", d.attack_id).field("mechanism", to_string(d.mechanism)));
      }
      if (!explained) violation("audit mismatch on untampered chain " + lid + ": " + fs.front().why);
    }
  }

  // ---- scripted events ---------------------------------------------------
  void handle(ScriptEv& e) {
    const auto& s = cfg_.events[e.index];
    log_.append(line("script").field("kind", to_string(s.kind)).field("target", s.target));
    switch (s.kind) {
      case ScriptKind::Ebt: {
        auto& sm = grid_->meters.at(s.target);
        if (!sm.online) return;
        try {
          emit_meter_store(sm, sm_event(sm, s.detail, now_));
        } catch (const Error& err) {
          log_.append(line("emit_failed").field("device", s.target).field("error", err.what()));
        }
        return;
      }
      case ScriptKind::Otft:
      case ScriptKind::Ct: return issue_control(s);
      case ScriptKind::Offline:
      case ScriptKind::Online: return set_online(s.target, s.kind == ScriptKind::Online);
      case ScriptKind::Remove: return remove(s.target);
      case ScriptKind::Add: return re_add(s.target);
      case ScriptKind::Broadcast: return issue_broadcast(s.target, s.detail);
    }
  }

  void set_online(const std::string& id, bool on) {
    if (auto it = grid_->meters.find(id); it != grid_->meters.end()) it->second.online = on;
    if (auto it = grid_->han.find(id); it != grid_->han.end()) it->second.online = on;
    if (auto it = grid_->rtus.find(id); it != grid_->rtus.end()) it->second.online = on;
  }

  void remove(const std::string& id) {
    auto& gw = grid_->miner(grid_->home_of(id));
    std::vector<ControlMessage> msgs;
    try {
      msgs = remove_device(*grid_, gw, DeviceId{id}, now_);
    } catch (const Error& err) {
      log_.append(line("remove_failed").field("device", id).field("error", err.what()));
      return;
    }
    for (auto& [lid, info] : channels_)
      if (info.device.value == id && !info.retired) info.removed_at = now_;
    pending_revocations_[id] = msgs;
    for (const auto& m : msgs) {
      const bool storage = m.to == kCcStorage || m.to == kUStorage;
      Hop h = gw.role == MinerRole::Hgw ? (storage ? Hop::Nan : Hop::Han) : (storage ? Hop::Uplink : Hop::Nan);
      std::int64_t extra = gw.role == MinerRole::Hgw && storage ? hop_latency_ms(cfg_.topology.latency, Hop::Uplink) : 0;
      queue_.schedule(now_ + extra + delay(h, kRevocationStages), RevocationEv{m});
    }
    log_.append(line("removed").field("device", id).field("revocations", msgs.size()));
  }

  void handle(RevocationEv& e) {
    apply_control_message(grid_->dir, e.msg);
    log_.append(line("revoked").field("to", e.msg.to).field("key", e.msg.key_id));
  }

  void re_add(const std::string& id) {
    const auto home = grid_->home_of(id);
    auto& gw = grid_->miner(home);
    // Revocations still in flight must land before fresh keys can bind.
    if (auto it = pending_revocations_.find(id); it != pending_revocations_.end()) {
      for (const auto& m : it->second) apply_control_message(grid_->dir, m);
      pending_revocations_.erase(it);
    }
    DeviceKind kind = DeviceKind::SmartMeter;
    if (grid_->rtus.contains(id)) kind = DeviceKind::Rtu;
    if (auto h = grid_->han.find(id); h != grid_->han.end())
      kind = h->second.role == HanRole::Sensor ? DeviceKind::Sensor : DeviceKind::Actuator;
    try {
      add_device(*grid_, gw, DeviceId{id}, kind, now_);
    } catch (const Error& err) {
      log_.append(line("add_failed").field("device", id).field("error", err.what()));
      return;
    }
    for (auto& [lid, info] : channels_)
      if (info.device.value == id) info.retired = true;
    index_device(gw, gw.devices.at(id));
    if (kind == DeviceKind::Sensor || kind == DeviceKind::Actuator) rekey_pairs(gw, id);
    log_.append(line("added").field("device", id));
  }

  void rekey_pairs(Miner& hgw, const std::string& id) {
    for (auto& pair : grid_->pairs) {
      if (pair.sensor.value != id && pair.actuator.value != id) continue;
      auto live = [&](const DeviceId& d) {
        auto it = hgw.devices.find(d.value);
        return it != hgw.devices.end() && !it->second.removed;
      };
      if (!live(pair.sensor) || !live(pair.actuator)) continue;
      auto k = allocate_pair_key(grid_->dir, hgw.id, hgw.own.current_policy(), pair.actuator, pair.sensor,
                                 grid_->keysrc, now_);
      if (auto* sk = std::get_if<SharedKey>(&k)) pair.pair_key = sk->key_id;
    }
  }

  // ---- attacks -----------------------------------------------------------
  void handle(AttackEv& e) {
    const auto& a = cfg_.attacks[e.index];
    auto& d = detections_[e.index];
    log_.append(line("attack").field("id", a.id).field("kind", kind_name(a.kind)).field("target", d.target));
    if (std::holds_alternative<DdosAttack>(a.kind)) {
      handle_flood(e.index, 0);
    } else if (auto* t = std::get_if<TamperRbcAttack>(&a.kind)) {
      try {
        auto& gw = grid_->miner(grid_->home_of(t->device));
        const auto* b = gw.devices.at(t->device).binding(t->channel);
        if (!b) throw Error(Errc::SelectorUnresolved, "no remote chain");
        auto& storage = grid_->miner(storage_for(b->destination));
        auto n = tamper_rbc(storage.ledger(DeviceId{b->ledger_id}, b->destination), t->tx_selector, t->mutation,
                            attack_rng_);
        tampered_rbc_[b->ledger_id] = e.index;
        attack_ledger_[e.index] = b->ledger_id;
        d.note = "tx " + std::to_string(n) + " " + std::string(to_string(t->mutation));
      } catch (const Error& err) {
        d.note = err.what();
      }
    } else if (auto* t = std::get_if<TamperBothAttack>(&a.kind)) {
      try {
        auto& gw = grid_->miner(grid_->home_of(t->device));
        const auto& entry = gw.devices.at(t->device);
        if (!entry.hf) throw Error(Errc::SelectorUnresolved, "no CC chain");
        auto& lbc = gw.ledger(entry.id, Destination::CC);
        auto& rbc = grid_->miner(kCcStorage).ledger(DeviceId{entry.hf->ledger_id}, Destination::CC);
        auto n = tamper_both(lbc, rbc, t->broadcast_tx_selector, attack_rng_);
        tampered_both_.insert(entry.hf->ledger_id);
        attack_ledger_[e.index] = entry.hf->ledger_id;
        d.note = "broadcast record tx " + std::to_string(n);
      } catch (const Error& err) {
        d.note = err.what();
      }
    } else {
      std::map<std::string, std::string> truth;
      for (const auto& [gid, m] : grid_->miners)
        for (const auto& [did, entry] : m.devices)
          if (entry.kind == DeviceKind::SmartMeter && !entry.removed && entry.hf && entry.lf)
            truth[entry.hf->ledger_id] = entry.lf->ledger_id;
      auto r = linking_probe(grid_->miner(kCcStorage), grid_->miner(kUStorage), truth);
      d.note = "linked " + std::to_string(r.pairs_linked) + "/" + std::to_string(r.pairs_total);
      linking_ = r;
    }
  }


  void handle(FloodEv& e) { handle_flood(e.attack, e.k); }

  void handle_flood(std::size_t idx, std::uint64_t k) {
    const auto& a = cfg_.attacks[idx];
    const auto& dd = std::get<DdosAttack>(a.kind);
    const auto rate = static_cast<std::uint64_t>(dd.rate_per_hour);
    const auto at = [&](std::uint64_t i) { return a.start_ms + static_cast<std::int64_t>(i * kHourMs / rate); };
    if (auto sm = grid_->meters.find(dd.device); sm != grid_->meters.end()) {
      auto& m = sm->second;
      if (m.online) {
        try {
          emit_meter_store(m, meter_emit(m, Channel::Hf, TxType::Store, meter_payload(Channel::Hf, now_, m.advance()), now_),
                           "flood", false);
        } catch (const Error&) {
        }
      }
    } else if (auto r = grid_->rtus.find(dd.device); r != grid_->rtus.end()) {
      auto& rtu = r->second;
      try {
        auto pt = "rtu t=" + std::to_string(now_) + " volts=0.000";
        emit_rtu_store(rtu, DeviceStore{rtu.id, Channel::Hf, TxType::Store, rtu.keys.seal(rtu.key, to_bytes(pt)), now_},
                       "flood", false);
      } catch (const Error&) {
      }
    } else {
      // A compromised HGW pushing forged envelopes at its NGW.
      auto& hgw = grid_->miner(dd.device);
      Trace tr = new_trace("flood", false);
      generated(tr);
      StoreEnvelope env;
      env.inner.device_id = DeviceId{"forged-" + hgw.id};
      env.inner.tx_type = TxType::Store;
      env.inner.tx_number = k + 1;
      env.inner.payload_cipher = to_bytes("junk " + std::to_string(k));
      env.inner.payload_digest = Sha256::digest(env.inner.payload_cipher);
      env.inner.timestamp_ms = now_;
      send(Hop::Nan, kEnvelopeStages, tr, EnvAtNgwEv{hgw.parent, hgw.id, std::move(env), tr});
    }
    const auto next = at(k + 1);
    if (next < a.start_ms + a.duration_ms && next <= cfg_.horizon_ms) queue_.schedule(next, FloodEv{idx, k + 1});
  }

  // ---- end of run --------------------------------------------------------
  MetricsReport finish() {
    check_final_sync();
    check_broadcast_consistency();
    MetricsReport r;
    r.scenario = cfg_.name;
    r.seed = cfg_.seed;
    r.horizon_ms = cfg_.horizon_ms;
    r.key_scheme = cfg_.grid.scheme == KeyScheme::A ? "A" : "B";
    r.unique_class_keys = cfg_.grid.unique_class_keys;
    r.counts = counts_;
    for (const auto& [cls, c] : counts_)
      if (!c.reconciles()) violation("counts for " + cls + " do not reconcile");
    for (auto& [cls, samples] : latency_) r.latency[cls] = summarize(samples, cfg_.topology.crypto_overhead_ms);
    r.chains = summarize_chains();
    r.alarms = alarms_;
    r.detections = detections_;
    r.meters = meters_;
    r.control = control_;
    r.broadcasts = broadcasts_;
    r.linking = linking_;
    r.legit_generated = legit_generated_;
    r.legit_accepted = legit_accepted_;
    for (auto& [storage, streams] : plaintexts_) {
      Sha256Stream all;
      for (auto& [lid, s] : streams) {
        all.update(lid);
        all.update(ByteView(s.peek().bytes));
      }
      r.rbc_plaintext_digest[storage] = to_hex(all.peek().bytes);
    }
    r.sync_checks = sync_checks_;
    r.violations = violations_;
    if (violation_count_ > violations_.size())
      r.violations.push_back(std::to_string(violation_count_ - violations_.size()) + " further violations");
    r.events_logged = log_.count();
    r.determinism_digest = to_hex(log_.digest().bytes);
    return r;
  }

  static LatencyStats summarize(std::vector<LatencySample>& v, std::int64_t overhead) {
    LatencyStats s;
    s.count = v.size();
    if (v.empty()) return s;
    std::int64_t sum = 0, sum_nc = 0;
    s.stages_min = s.stages_max = v.front().stages;
    std::vector<std::int64_t> tot, nc;
    for (const auto& x : v) {
      sum += x.total;
      sum_nc += x.no_crypto;
      s.stages_min = std::min(s.stages_min, x.stages);
      s.stages_max = std::max(s.stages_max, x.stages);
      tot.push_back(x.total);
      nc.push_back(x.no_crypto);
    }
    (void)overhead;
    s.mean_ms = static_cast<double>(sum) / static_cast<double>(v.size());
    s.mean_no_crypto_ms = static_cast<double>(sum_nc) / static_cast<double>(v.size());
    s.p95_ms = percentile(tot, 95);
    s.p95_no_crypto_ms = percentile(nc, 95);
    return s;
  }

  /// Nearest-rank percentile.
  static std::int64_t percentile(std::vector<std::int64_t>& v, int p) {
    std::sort(v.begin(), v.end());
    const auto rank = (static_cast<std::size_t>(p) * v.size() + 99) / 100;
    return v[std::max<std::size_t>(rank, 1) - 1];
  }

  bool attacked(const std::string& lid) const { return tampered_rbc_.contains(lid) || tampered_both_.contains(lid); }

  void check_final_sync() {
    for (const auto& [lid, info] : channels_) {
      if (info.retired || attacked(lid) || desynced_.contains(lid)) continue;
      auto& lbc = grid_->miner(info.gw).ledger(info.device, info.destination);
      auto& rbc = grid_->miner(storage_for(info.destination)).ledger(DeviceId{lid}, info.destination);
      if (!(lbc.last_transaction_ref(DeviceId{lid}) == rbc.last_transaction_ref(DeviceId{lid})))
        violation("sync: heads of " + lid + " differ at end of run");
    }
  }

  void check_broadcast_consistency() {
    std::map<std::uint64_t, std::set<Digest>> seen;
    std::uint64_t records = 0;
    auto scan = [&](const Ledger& l) {
      if (attacked(l.owner().value)) return;
      l.for_each_transaction([&](const Transaction& tx, std::uint64_t) {
        if (tx.tx_type != TxType::Access || !tx.signature) return;
        if (auto id = broadcast_id_of(tx.payload_cipher)) {
          seen[*id].insert(tx.payload_digest);
          ++records;
        }
      });
    };
    for (const auto& [id, m] : grid_->miners) {
      scan(m.own);
      for (const auto& [k, l] : m.ledgers) scan(l);
    }
    broadcasts_.ledger_records = records;
    for (const auto& [id, digests] : seen)
      if (digests.size() != 1) violation("broadcast " + std::to_string(id) + " has diverging copies");
  }

  ChainSummary summarize_chains() {
    ChainSummary c;
    auto check = [&](const Ledger& l, const std::string& where) {
      ++c.total;
      if (l.validate().ok()) {
        ++c.valid;
      } else if (attacked(l.owner().value)) {
        ++c.broken_expected;
      } else {
        c.broken_unexpected.push_back(where + "/" + l.owner().value);
      }
    };
    for (const auto& [id, m] : grid_->miners) {
      check(m.own, id);
      for (const auto& [k, l] : m.ledgers) check(l, id);
      for (const auto& l : m.retired) check(l, id);
    }
    return c;
  }

  // ---- state -------------------------------------------------------------
  ScenarioConfig cfg_;
  std::unique_ptr<Grid> grid_;
  EventQueue<Payload> queue_;
  EventLog log_;
  std::int64_t now_ = 0;
  std::mt19937_64 attack_rng_;
  std::mt19937_64 loss_rng_;
  std::uint64_t msg_seq_ = 0, broadcast_seq_ = 0, control_seq_ = 0;

  std::map<std::string, ChannelInfo> channels_;
  std::set<std::pair<std::string, std::uint64_t>> authorized_;
  std::set<std::string> desynced_;
  std::map<std::string, std::size_t> tampered_rbc_;
  std::set<std::string> tampered_both_;
  std::map<std::size_t, std::string> attack_ledger_;
  std::map<std::string, std::vector<ControlMessage>> pending_revocations_;
  std::map<std::uint64_t, ControlState> controls_;

  std::map<std::string, ClassCounts> counts_;
  std::map<std::string, std::vector<LatencySample>> latency_;
  std::map<std::string, std::map<std::string, Sha256Stream>> plaintexts_;
  std::map<std::string, MeterCounts> meters_;
  std::vector<AlarmRecord> alarms_;
  std::vector<DetectionRecord> detections_;
  ControlStats control_;
  BroadcastStats broadcasts_;
  std::optional<LinkReport> linking_;
  std::uint64_t legit_generated_ = 0, legit_accepted_ = 0, sync_checks_ = 0;
  std::vector<std::string> violations_;
  std::size_t violation_count_ = 0;
};

inline MetricsReport run_scenario(const ScenarioConfig& cfg, RunOptions opts = {}) {
  World w(cfg, opts);
  return w.run();
}

}  // namespace dsg
