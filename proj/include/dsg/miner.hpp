#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dsg/device.hpp"
#include "dsg/keys.hpp"
#include "dsg/ledger.hpp"
#include "dsg/policy.hpp"
#include "dsg/simnet.hpp"

namespace dsg {

inline const std::string kCcStorage = "cc-storage";
inline const std::string kUStorage = "u-storage";
inline const std::string kControlCenter = "cc";
inline const std::string kUtility = "utility";

enum class MinerRole : std::uint8_t { Hgw, Ngw, CcStorage, UStorage };
enum class KeyScheme : std::uint8_t { A, B };
enum class DeviceKind : std::uint8_t { SmartMeter, Sensor, Actuator, Rtu };

constexpr std::string_view to_string(MinerRole r) {
  switch (r) {
    case MinerRole::Hgw: return "hgw";
    case MinerRole::Ngw: return "ngw";
    case MinerRole::CcStorage: return "cc-storage";
    case MinerRole::UStorage: return "u-storage";
  }
  return "?";
}

inline const std::string& storage_for(Destination d) { return d == Destination::Utility ? kUStorage : kCcStorage; }

inline std::string customer_of(const std::string& hgw_id) { return "cust" + hgw_id.substr(3); }

/// The gateway's view of one device data channel.
struct ChannelBinding {
  std::string ledger_id;    // pseudonymous owner of the LBC/RBC pair
  std::string device_key;   // what the device encrypts under
  std::string forward_key;  // what the payload travels to storage under
  Destination destination = Destination::CC;
};

struct DeviceEntry {
  DeviceId id;
  DeviceKind kind = DeviceKind::SmartMeter;
  std::optional<ChannelBinding> hf;
  std::optional<ChannelBinding> lf;
  std::optional<ChannelBinding> local;
  bool removed = false;

  const ChannelBinding* binding(Channel c) const {
    if (kind == DeviceKind::SmartMeter) return c == Channel::Hf ? (hf ? &*hf : nullptr) : (lf ? &*lf : nullptr);
    if (c == Channel::Hf) return hf ? &*hf : nullptr;
    return nullptr;
  }
};

/// Storage-side bookkeeping for one remote chain.
struct RbcMeta {
  Channel channel = Channel::Hf;
  std::string home_ngw;
  std::string expected_key;
  bool meter = true;
  std::vector<std::uint64_t> broadcast_txs;
};

struct Miner {
  std::string id;
  MinerRole role;
  KeyTable keys;
  RateCounterState rate;
  Ledger own;
  std::string parent;
  std::set<std::string> children;
  std::map<std::pair<DeviceId, Destination>, Ledger> ledgers;
  std::map<std::string, DeviceEntry> devices;
  std::map<std::string, RbcMeta> rbc;
  std::map<std::string, std::pair<DeviceId, Destination>> by_ledger;
  std::map<std::uint64_t, Digest> broadcast_copies;
  std::vector<Ledger> retired;

  Miner(std::string id_, MinerRole r, std::string parent_, std::size_t capacity)
      : id(std::move(id_)), role(r), keys(id), own(DeviceId{id}, Destination::Local, {}, capacity),
        parent(std::move(parent_)) {}

  Ledger& ledger(const DeviceId& owner, Destination d) {
    auto it = ledgers.find({owner, d});
    if (it == ledgers.end()) throw Error(Errc::UnknownDevice, owner.value);
    return it->second;
  }
};

struct GridParams {
  std::uint64_t seed = 1;
  KeyScheme scheme = KeyScheme::B;
  bool unique_class_keys = true;
  std::size_t block_capacity = kDefaultBlockCapacity;
  AppLimits limits;
  LimitSpec otft_limit{4, LimitDuration::Hourly};
  LimitSpec rtu_limit{4, LimitDuration::Hourly};
  LimitSpec pair_limit{8, LimitDuration::Hourly};
  std::uint32_t broadcast_records_per_meter_hour = 4;
  std::uint32_t alarms_per_device_hour = 4;
  std::uint32_t auditors_per_target = 2;
  std::int64_t hf_period_ms = 900'000;
  std::int64_t lf_period_ms = kWeekMs;
  std::int64_t sensor_period_ms = 900'000;
  std::int64_t rtu_period_ms = 900'000;
  double actuator_threshold = 25.0;
  bool han_cloud_storage = false;  // sensors also keep a chain at the CC storage
};

/// Static world state: every miner, device and key table.
class Grid {
 public:
  explicit Grid(GridParams p)
      : params(std::move(p)),
        key_rng(params.seed ^ 0x6b65792d6d617472ULL),
        id_rng(params.seed ^ 0x6c65646765722d69ULL),
        keysrc(key_rng),
        idsrc(id_rng),
        broadcast_key(keysrc.random_bytes(kAeadKeySize)) {}

  Grid(const Grid&) = delete;
  Grid& operator=(const Grid&) = delete;

  GridParams params;
  std::mt19937_64 key_rng;
  std::mt19937_64 id_rng;
  KeySource keysrc;
  KeySource idsrc;
  Bytes broadcast_key;  // group authentication key for broadcast records
  KeyDirectory dir;
  std::map<std::string, Miner> miners;
  std::map<std::string, SmartMeter> meters;
  std::map<std::string, HanDevice> han;
  std::map<std::string, Rtu> rtus;
  std::vector<HanDevicePair> pairs;
  std::set<std::string> meter_ledgers;

  Miner& add_miner(const std::string& id, MinerRole role, const std::string& parent) {
    auto [it, fresh] = miners.try_emplace(id, id, role, parent, params.block_capacity);
    if (!fresh) throw Error(Errc::AlreadyOnboarded, id);
    Miner& m = it->second;
    dir[id] = &m.keys;
    m.own.append(next_transaction(m.own, TxType::Genesis, to_bytes("genesis miner=" + id), 0));
    if (!parent.empty()) miner(parent).children.insert(id);
    return m;
  }

  Miner& miner(const std::string& id) {
    auto it = miners.find(id);
    if (it == miners.end()) throw Error(Errc::PartyUnknown, id);
    return it->second;
  }
  const Miner& miner(const std::string& id) const {
    auto it = miners.find(id);
    if (it == miners.end()) throw Error(Errc::PartyUnknown, id);
    return it->second;
  }
  Miner* find_miner(const std::string& id) {
    auto it = miners.find(id);
    return it == miners.end() ? nullptr : &it->second;
  }

  SmartMeter& add_meter(const std::string& id, const std::string& hgw) {
    auto [it, fresh] = meters.try_emplace(id, DeviceId{id}, hgw, params.seed);
    if (!fresh) throw Error(Errc::AlreadyOnboarded, id);
    it->second.hf_period_ms = params.hf_period_ms;
    it->second.lf_period_ms = params.lf_period_ms;
    dir[id] = &it->second.keys;
    return it->second;
  }

  HanDevice& add_han(const std::string& id, HanRole role, const std::string& hgw) {
    auto [it, fresh] = han.try_emplace(id, DeviceId{id}, role, hgw);
    if (!fresh) throw Error(Errc::AlreadyOnboarded, id);
    dir[id] = &it->second.keys;
    return it->second;
  }

  Rtu& add_rtu(const std::string& id, const std::string& ngw) {
    auto [it, fresh] = rtus.try_emplace(id, DeviceId{id}, ngw, params.seed);
    if (!fresh) throw Error(Errc::AlreadyOnboarded, id);
    it->second.report_period_ms = params.rtu_period_ms;
    dir[id] = &it->second.keys;
    return it->second;
  }

  /// Gateway that serves a device, or empty if unknown.
  std::string home_of(const std::string& device) const {
    if (auto it = meters.find(device); it != meters.end()) return it->second.hgw;
    if (auto it = han.find(device); it != han.end()) return it->second.hgw;
    if (auto it = rtus.find(device); it != rtus.end()) return it->second.ngw;
    return {};
  }

  bool is_smart_meter(const DeviceId& d) const {
    return meters.contains(d.value) || meter_ledgers.contains(d.value);
  }

  std::function<bool(const DeviceId&)> meter_predicate() const {
    return [this](const DeviceId& d) { return is_smart_meter(d); };
  }

  std::vector<std::string> ngw_ids() const {
    std::vector<std::string> out;
    for (const auto& [id, m] : miners)
      if (m.role == MinerRole::Ngw) out.push_back(id);
    return out;
  }
};

/// Rules a budget expressed per window translate to per hour.
inline std::uint32_t hourly_budget(const LimitSpec& l) {
  const auto w = window_length_ms(l.duration);
  return w <= kHourMs ? l.tx_limit * static_cast<std::uint32_t>(kHourMs / w) : l.tx_limit;
}

// ---------------------------------------------------------------------------
// Onboarding

struct GenesisReceipt {
  DeviceId device;
  std::vector<std::string> key_ids;
  std::vector<std::pair<std::string, std::string>> genesis_appends;  // (miner, ledger owner)
};

namespace detail {

inline PolicyHeader channel_policy(const GridParams& p, const std::string& ledger_id, Channel c) {
  const DeviceId self{ledger_id};
  PolicyHeader h;
  if (c == Channel::Hf) {
    h.rules.push_back(default_policy_for(App::AmiHf, ledger_id, self, p.limits));
    h.rules.push_back(default_policy_for(App::OmsEbt, ledger_id, self, p.limits));
  } else {
    h.rules.push_back(default_policy_for(App::AmiLf, ledger_id, self, p.limits));
  }
  return h;
}

inline Transaction genesis_tx(const std::string& ledger_id, const std::string& key_id, std::int64_t now) {
  Transaction tx;
  tx.device_id = DeviceId{ledger_id};
  tx.tx_type = TxType::Genesis;
  tx.payload_cipher = to_bytes("genesis key=" + key_id);
  tx.payload_digest = Sha256::digest(tx.payload_cipher);
  tx.timestamp_ms = now;
  return tx;
}

/// Opens the LBC at `local` and, when `storage` is set, the twin RBC.
inline void open_chains(Grid& g, Miner& local, const DeviceId& device, const ChannelBinding& b,
                        Channel c, PolicyHeader header, Miner* storage, const std::string& home_ngw,
                        bool meter, std::int64_t now, GenesisReceipt& receipt) {
  const auto cap = g.params.block_capacity;
  auto gen = genesis_tx(b.ledger_id, b.forward_key, now);
  auto [lit, lfresh] = local.ledgers.insert_or_assign(
      std::pair{device, b.destination}, Ledger(DeviceId{b.ledger_id}, b.destination, header, cap));
  lit->second.append(gen);
  local.by_ledger[b.ledger_id] = {device, b.destination};
  receipt.genesis_appends.emplace_back(local.id, b.ledger_id);
  if (!storage) return;
  auto [rit, rfresh] = storage->ledgers.insert_or_assign(
      std::pair{DeviceId{b.ledger_id}, b.destination},
      Ledger(DeviceId{b.ledger_id}, b.destination, std::move(header), cap));
  rit->second.append(gen);
  storage->rbc[b.ledger_id] = RbcMeta{c, home_ngw, b.forward_key, meter, {}};
  receipt.genesis_appends.emplace_back(storage->id, b.ledger_id);
}

inline void retire(Miner& m, const DeviceId& device) {
  for (auto d : {Destination::Local, Destination::CC, Destination::Utility}) {
    auto it = m.ledgers.find({device, d});
    if (it == m.ledgers.end()) continue;
    m.by_ledger.erase(it->second.owner().value);
    m.retired.push_back(std::move(it->second));
    m.ledgers.erase(it);
  }
}

}  // namespace detail

/// Creates keys and genesis transactions for a device under a gateway miner.
/// Smart meters get one chain pair per data class; RTUs one pair; HAN devices a local chain.
inline GenesisReceipt add_device(Grid& g, Miner& gw, const DeviceId& device, DeviceKind kind,
                                 std::int64_t now = 0) {
  if (auto it = gw.devices.find(device.value); it != gw.devices.end() && !it->second.removed)
    throw Error(Errc::AlreadyOnboarded, device.value);
  if (!g.dir.contains(device.value)) throw Error(Errc::PartyUnknown, device.value);
  detail::retire(gw, device);

  GenesisReceipt receipt{device, {}, {}};
  DeviceEntry entry{device, kind, {}, {}, {}, false};
  const auto& p = g.params;

  if (kind == DeviceKind::SmartMeter) {
    if (gw.role != MinerRole::Hgw) throw Error(Errc::UnknownDevice, "meters attach to home gateways");
    auto& sm = g.meters.at(device.value);
    std::optional<std::pair<std::string, std::string>> shared;  // single-key misconfiguration
    if (!p.unique_class_keys) {
      if (p.scheme == KeyScheme::B) {
        auto k = establish_scheme_b(g.dir, device.value, gw.id, std::vector{kCcStorage, kUStorage}, g.keysrc);
        shared = std::pair{k.key.key_id, k.key.key_id};
      } else {
        std::vector<HandshakeMessage> log;
        auto dl = detail::agree(g.dir, {device.value, gw.id}, DataClass::Generic, device.value, g.keysrc, log);
        auto lr = detail::agree(g.dir, {gw.id, kCcStorage, kUStorage}, DataClass::Generic, device.value,
                                g.keysrc, log);
        shared = std::pair{dl.key_id, lr.key_id};
      }
      receipt.key_ids.push_back(shared->first);
      if (shared->second != shared->first) receipt.key_ids.push_back(shared->second);
    }
    for (auto c : {Channel::Hf, Channel::Lf}) {
      ChannelBinding b;
      b.ledger_id = g.idsrc.opaque_id("L");
      b.destination = destination_of(c);
      const auto& storage_id = storage_for(b.destination);
      if (shared) {
        b.device_key = shared->first;
        b.forward_key = shared->second;
      } else if (p.scheme == KeyScheme::B) {
        auto k = establish_scheme_b(g.dir, device.value, gw.id, storage_id, g.keysrc, data_class_of(c));
        b.device_key = b.forward_key = k.key.key_id;
        receipt.key_ids.push_back(k.key.key_id);
      } else {
        auto k = establish_scheme_a(g.dir, device.value, gw.id, storage_id, g.keysrc, data_class_of(c));
        b.device_key = k.key_dl.key_id;
        b.forward_key = k.key_lr.key_id;
        receipt.key_ids.push_back(k.key_dl.key_id);
        receipt.key_ids.push_back(k.key_lr.key_id);
      }
      (c == Channel::Hf ? sm.hfuk : sm.lfuk) = b.device_key;
      g.meter_ledgers.insert(b.ledger_id);
      detail::open_chains(g, gw, device, b, c, detail::channel_policy(p, b.ledger_id, c),
                          &g.miner(storage_id), gw.parent, true, now, receipt);
      (c == Channel::Hf ? entry.hf : entry.lf) = b;
    }
  } else if (kind == DeviceKind::Rtu) {
    if (gw.role != MinerRole::Ngw) throw Error(Errc::UnknownDevice, "RTUs attach to neighborhood gateways");
    auto& rtu = g.rtus.at(device.value);
    auto k = establish_scheme_b(g.dir, device.value, gw.id, kCcStorage, g.keysrc);
    ChannelBinding b{device.value, k.key.key_id, k.key.key_id, Destination::CC};
    rtu.key = k.key.key_id;
    receipt.key_ids.push_back(k.key.key_id);
    PolicyHeader h{{PolicyRule{device.value, TxType::Store, device, Action::Allow, p.rtu_limit.tx_limit,
                               p.rtu_limit.duration}}};
    detail::open_chains(g, gw, device, b, Channel::Hf, std::move(h), &g.miner(kCcStorage), gw.id, false,
                        now, receipt);
    entry.hf = b;
  } else {
    auto k = establish_scheme_b(g.dir, device.value, gw.id, std::vector<std::string>{}, g.keysrc);
    ChannelBinding b{device.value, k.key.key_id, k.key.key_id, Destination::Local};
    receipt.key_ids.push_back(k.key.key_id);
    detail::open_chains(g, gw, device, b, Channel::Hf, PolicyHeader{}, nullptr, {}, false, now, receipt);
    entry.local = b;
    if (kind == DeviceKind::Sensor && p.han_cloud_storage && gw.role == MinerRole::Hgw) {
      auto ck = establish_scheme_b(g.dir, device.value, gw.id, kCcStorage, g.keysrc, DataClass::HighFreq);
      ChannelBinding cb{g.idsrc.opaque_id("L"), ck.key.key_id, ck.key.key_id, Destination::CC};
      receipt.key_ids.push_back(ck.key.key_id);
      const DeviceId lid{cb.ledger_id};
      PolicyHeader h{{PolicyRule{cb.ledger_id, TxType::Store, lid, Action::Allow, p.limits.ami_hf.tx_limit,
                                 p.limits.ami_hf.duration}}};
      detail::open_chains(g, gw, device, cb, Channel::Hf, std::move(h), &g.miner(kCcStorage), gw.parent, false,
                          now, receipt);
      g.han.at(device.value).cloud_key = ck.key.key_id;
      entry.hf = cb;
    }
  }
  gw.devices[device.value] = std::move(entry);
  gw.children.insert(device.value);
  return receipt;
}

/// Revokes every key protecting the device and closes its chains with a Remove record.
inline std::vector<ControlMessage> remove_device(Grid& g, Miner& gw, const DeviceId& device,
                                                 std::int64_t now) {
  auto it = gw.devices.find(device.value);
  if (it == gw.devices.end() || it->second.removed) throw Error(Errc::UnknownDevice, device.value);
  std::vector<ControlMessage> out;
  std::vector<std::string> doomed;
  for (const auto& [key_id, k] : gw.keys.keys())
    if (k.valid && (k.subject == device.value || k.holders.contains(device.value))) doomed.push_back(key_id);
  for (const auto& key_id : doomed) {
    auto msgs = invalidate_key(g.dir, gw.id, key_id);
    out.insert(out.end(), msgs.begin(), msgs.end());
  }
  for (auto& [key, lbc] : gw.ledgers) {
    if (key.first != device || !lbc.allowed_types().contains(TxType::Remove)) continue;
    lbc.append(next_transaction(lbc, TxType::Remove, to_bytes("remove"), now));
  }
  it->second.removed = true;
  gw.children.erase(device.value);
  return out;
}

// ---------------------------------------------------------------------------
// Admission: policy then rate limit

enum class DropReason : std::uint8_t { NotOnboarded, Denied, Exceeded, AuthFailure };

constexpr std::string_view to_string(DropReason r) {
  switch (r) {
    case DropReason::NotOnboarded: return "not_onboarded";
    case DropReason::Denied: return "denied";
    case DropReason::Exceeded: return "exceeded";
    case DropReason::AuthFailure: return "auth_failure";
  }
  return "?";
}

struct Dropped {
  DropReason reason = DropReason::Denied;
  std::optional<Exceeded> exceeded;
};

struct Admitted {
  PolicyRule rule;
};

using Admission = std::variant<Admitted, Dropped>;

/// Authorizes against `header` and counts against `rate_key` under the matched rule.
inline Admission admit(const PolicyHeader& header, RateCounterState& rate, const AuthRequest& req,
                       const DeviceId& rate_key) {
  auto decision = authorize(header, req);
  if (!allowed(decision)) return Dropped{DropReason::Denied, std::nullopt};
  const auto& rule = std::get<Allow>(decision).rule;
  auto verdict = rate.check_and_count(rule, rate_key, req.now_ms);
  if (auto* ex = std::get_if<Exceeded>(&verdict)) return Dropped{DropReason::Exceeded, *ex};
  return Admitted{rule};
}

/// Outbound check a forwarding miner applies to traffic from `from`.
inline Admission admit_outbound(Miner& m, const std::string& from, TxType type, const DeviceId& subject,
                                std::int64_t now) {
  return admit(m.own.current_policy(), m.rate, AuthRequest{from, type, subject, now}, DeviceId{from});
}

// ---------------------------------------------------------------------------
// Store path

struct StoreEnvelope {
  Transaction inner;
  std::uint64_t auth_block_number = 0;
  Digest auth_tx_digest;
  Destination destination = Destination::CC;
};

struct ForwardedStore {
  StoreEnvelope envelope;
  std::string next_hop;
};

using StoreOutcome = std::variant<ForwardedStore, Dropped>;

/// Gateway side of a store: authorize, count, verify, append locally, then
/// forward with the LBC head taken after the append.
inline StoreOutcome process_store(Grid& g, Miner& gw, const DeviceStore& s, std::int64_t now) {
  auto it = gw.devices.find(s.device.value);
  if (it == gw.devices.end() || it->second.removed) return Dropped{DropReason::NotOnboarded, std::nullopt};
  const ChannelBinding* b = it->second.binding(s.channel);
  if (!b) return Dropped{DropReason::NotOnboarded, std::nullopt};
  auto& lbc = gw.ledger(s.device, b->destination);
  const DeviceId lid{b->ledger_id};

  auto adm = admit(lbc.current_policy(), gw.rate, AuthRequest{b->ledger_id, s.tx_type, lid, now}, lid);
  if (auto* d = std::get_if<Dropped>(&adm)) return *d;

  if (s.ct.key_id != b->device_key) return Dropped{DropReason::AuthFailure, std::nullopt};
  Bytes plaintext;
  try {
    plaintext = gw.keys.open(s.ct);
  } catch (const Error&) {
    return Dropped{DropReason::AuthFailure, std::nullopt};
  }
  Bytes payload = b->device_key == b->forward_key ? s.ct.encode()
                                                  : gw.keys.seal(b->forward_key, plaintext).encode();
  auto tx = next_transaction(lbc, s.tx_type, std::move(payload), now);
  lbc.append(tx);
  auto ref = lbc.last_transaction_ref(lid);
  std::string next = gw.role == MinerRole::Hgw ? gw.parent : storage_for(b->destination);
  (void)g;
  return ForwardedStore{StoreEnvelope{std::move(tx), ref.block_number, ref.tx_digest, b->destination},
                        std::move(next)};
}

struct Relayed {
  std::string next_hop;
};

using RelayOutcome = std::variant<Relayed, Dropped>;

/// NGW relay of an HGW envelope: enforces the HGW's outbound limit.
inline RelayOutcome relay_at_ngw(Miner& ngw, const std::string& from, const StoreEnvelope& env,
                                 std::int64_t now) {
  auto adm = admit_outbound(ngw, from, env.inner.tx_type, env.inner.device_id, now);
  if (auto* d = std::get_if<Dropped>(&adm)) return *d;
  return Relayed{storage_for(env.destination)};
}

enum class RejectReason : std::uint8_t { Mismatch, UnknownLedger, AuthFailure, TypeNotAllowed };

constexpr std::string_view to_string(RejectReason r) {
  switch (r) {
    case RejectReason::Mismatch: return "mismatch";
    case RejectReason::UnknownLedger: return "unknown_ledger";
    case RejectReason::AuthFailure: return "auth_failure";
    case RejectReason::TypeNotAllowed: return "type_not_allowed";
  }
  return "?";
}

struct Accepted {
  LastTxRef ref;
  Bytes plaintext;
  std::string key_id;  // empty for broadcast records
};

struct Rejected {
  RejectReason reason = RejectReason::Mismatch;
  std::string detail;
};

using RbcOutcome = std::variant<Accepted, Rejected, Dropped>;

inline Digest broadcast_signature(ByteView key, ByteView payload) { return hmac_sha256(key, payload); }

inline bool broadcast_signature_ok(const Grid& g, const Transaction& tx) {
  if (!tx.signature) return false;
  auto d = broadcast_signature(g.broadcast_key, tx.payload_cipher);
  return tx.signature->size() == d.bytes.size() && std::equal(d.bytes.begin(), d.bytes.end(), tx.signature->begin());
}

/// Storage side: the RBC must be intact, the envelope must extend its head, and
/// the head it would produce must equal the one the gateway reported.
inline RbcOutcome authenticate_store_at_rbc(Grid& g, Miner& storage, const std::string& from,
                                            const StoreEnvelope& env, std::int64_t now) {
  const auto& lid = env.inner.device_id;
  auto adm = admit_outbound(storage, from, env.inner.tx_type, lid, now);
  if (auto* d = std::get_if<Dropped>(&adm)) return *d;

  auto it = storage.ledgers.find({lid, env.destination});
  auto mit = storage.rbc.find(lid.value);
  if (it == storage.ledgers.end() || mit == storage.rbc.end())
    return Rejected{RejectReason::UnknownLedger, lid.value};
  auto& rbc = it->second;
  auto& meta = mit->second;

  if (auto st = rbc.validate(); !st.ok())
    return Rejected{RejectReason::Mismatch, "stored chain broken at block " + std::to_string(st.broken->block_number)};
  LastTxRef head;
  try {
    head = rbc.last_transaction_ref(lid);
  } catch (const Error&) {
    return Rejected{RejectReason::Mismatch, "stored chain empty"};
  }
  if (env.inner.tx_number != head.tx_number + 1 || env.inner.prev_tx_digest != head.tx_digest)
    return Rejected{RejectReason::Mismatch, "does not extend stored head"};
  const LastTxRef prospective{rbc.tail().block_number, tx_digest(env.inner), env.inner.tx_number};
  if (prospective.block_number != env.auth_block_number || prospective.tx_digest != env.auth_tx_digest)
    return Rejected{RejectReason::Mismatch, "reported head differs"};

  Accepted acc;
  if (env.inner.signature) {
    if (!broadcast_signature_ok(g, env.inner)) return Rejected{RejectReason::AuthFailure, "bad broadcast signature"};
    acc.plaintext = env.inner.payload_cipher;
  } else {
    try {
      auto ct = Ciphertext::decode(env.inner.payload_cipher);
      if (ct.key_id != meta.expected_key) return Rejected{RejectReason::AuthFailure, "unexpected key"};
      acc.plaintext = storage.keys.open(ct);
      acc.key_id = ct.key_id;
    } catch (const DecodeError&) {
      return Rejected{RejectReason::AuthFailure, "malformed ciphertext"};
    } catch (const Error& e) {
      return Rejected{RejectReason::AuthFailure, e.what()};
    }
  }
  try {
    rbc.append(env.inner);
  } catch (const Error& e) {
    return Rejected{e.code() == Errc::TypeNotAllowed ? RejectReason::TypeNotAllowed : RejectReason::Mismatch,
                    e.what()};
  }
  if (env.inner.signature) meta.broadcast_txs.push_back(env.inner.tx_number);
  acc.ref = rbc.last_transaction_ref(lid);
  return acc;
}

// ---------------------------------------------------------------------------
// Broadcasts

struct BroadcastMsg {
  std::uint64_t id = 0;
  std::string origin;
  Bytes payload;
  Bytes signature;
  std::int64_t issued_at_ms = 0;
};

inline BroadcastMsg make_broadcast(const Grid& g, std::uint64_t id, const std::string& origin,
                                   std::string_view content, std::int64_t now) {
  BroadcastMsg b{id, origin, {}, {}, now};
  b.payload = to_bytes("bcast|" + std::to_string(id) + "|" + origin + "|t=" + std::to_string(now) + "|" +
                       std::string(content));
  auto sig = broadcast_signature(g.broadcast_key, b.payload);
  b.signature.assign(sig.bytes.begin(), sig.bytes.end());
  return b;
}

inline std::optional<std::uint64_t> broadcast_id_of(ByteView payload) {
  std::string s(payload.begin(), payload.end());
  if (!s.starts_with("bcast|")) return std::nullopt;
  auto end = s.find('|', 6);
  if (end == std::string::npos || end == 6) return std::nullopt;
  std::uint64_t id = 0;
  for (std::size_t i = 6; i < end; ++i) {
    if (s[i] < '0' || s[i] > '9') return std::nullopt;
    id = id * 10 + static_cast<std::uint64_t>(s[i] - '0');
  }
  return id;
}

inline bool verify_broadcast(const Grid& g, const BroadcastMsg& b) {
  auto d = broadcast_signature(g.broadcast_key, b.payload);
  return b.signature.size() == d.bytes.size() && std::equal(d.bytes.begin(), d.bytes.end(), b.signature.begin());
}

/// Appends the broadcast to the miner's own chain and indexes the copy for audits.
inline void record_broadcast_own(Miner& m, const BroadcastMsg& b, std::int64_t now) {
  m.own.append(next_transaction(m.own, TxType::Access, b.payload, now, b.signature));
  m.broadcast_copies[b.id] = Sha256::digest(b.payload);
}

/// HGW: record in its own chain and in every meter's CC chain, then echo each
/// record toward the CC-RBC so both copies stay in step.
inline std::vector<ForwardedStore> record_broadcast_at_hgw(Grid& g, Miner& hgw, const BroadcastMsg& b,
                                                           std::int64_t now) {
  std::vector<ForwardedStore> out;
  if (!verify_broadcast(g, b)) return out;
  record_broadcast_own(hgw, b, now);
  for (const auto& [id, entry] : hgw.devices) {
    if (entry.kind != DeviceKind::SmartMeter || entry.removed || !entry.hf) continue;
    auto& lbc = hgw.ledger(entry.id, Destination::CC);
    auto tx = next_transaction(lbc, TxType::Access, b.payload, now, b.signature);
    lbc.append(tx);
    auto ref = lbc.last_transaction_ref(DeviceId{entry.hf->ledger_id});
    out.push_back(ForwardedStore{StoreEnvelope{std::move(tx), ref.block_number, ref.tx_digest, Destination::CC},
                                 hgw.parent});
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-the-fly reads and control transactions

struct ControlRequest {
  std::uint64_t req_id = 0;
  std::string requester;
  TxType type = TxType::Otft;
  DeviceId target;
  bool command_on = false;
  std::int64_t issued_at_ms = 0;
};

struct ControlReply {
  std::uint64_t req_id = 0;
  DeviceId target;
  TxType type = TxType::Otft;
  std::string result;
};

struct ControlDenied {
  std::string where;
  DropReason reason = DropReason::Denied;
  std::optional<Exceeded> exceeded;
};

struct ForwardControl {
  std::string hgw;
};

struct Unreachable {};

using NgwControlOutcome = std::variant<ForwardControl, ControlDenied>;
using HgwControlOutcome = std::variant<ControlReply, ControlDenied, Unreachable>;

/// NGW leg: the target must sit under one of this NGW's HGWs; counts per target.
inline NgwControlOutcome control_at_ngw(Grid& g, Miner& ngw, const ControlRequest& req, std::int64_t now) {
  const auto hgw = g.home_of(req.target.value);
  auto* h = hgw.empty() ? nullptr : g.find_miner(hgw);
  if (!h || h->parent != ngw.id) return ControlDenied{ngw.id, DropReason::NotOnboarded, std::nullopt};
  auto adm = admit(ngw.own.current_policy(), ngw.rate, AuthRequest{req.requester, req.type, req.target, now},
                   req.target);
  if (auto* d = std::get_if<Dropped>(&adm)) return ControlDenied{ngw.id, d->reason, d->exceeded};
  return ForwardControl{hgw};
}

/// HGW leg: authorize, then read or actuate the device and log the transaction.
inline HgwControlOutcome serve_control_at_hgw(Grid& g, Miner& hgw, const ControlRequest& req, std::int64_t now) {
  auto it = hgw.devices.find(req.target.value);
  if (it == hgw.devices.end() || it->second.removed)
    return ControlDenied{hgw.id, DropReason::NotOnboarded, std::nullopt};
  if (!allowed(authorize(hgw.own.current_policy(), AuthRequest{req.requester, req.type, req.target, now})))
    return ControlDenied{hgw.id, DropReason::Denied, std::nullopt};

  std::string result;
  if (req.type == TxType::Otft) {
    if (auto m = g.meters.find(req.target.value); m != g.meters.end()) {
      if (!m->second.online) return Unreachable{};
      result = "kwh=" + format_value(m->second.reading);
    } else if (auto d = g.han.find(req.target.value); d != g.han.end()) {
      if (!d->second.online) return Unreachable{};
      result = d->second.role == HanRole::Actuator ? (d->second.actuator_on ? "state=on" : "state=off")
                                                   : "reachable";
    } else {
      return ControlDenied{hgw.id, DropReason::NotOnboarded, std::nullopt};
    }
  } else if (req.type == TxType::Ct) {
    auto d = g.han.find(req.target.value);
    if (d == g.han.end() || d->second.role != HanRole::Actuator)
      return ControlDenied{hgw.id, DropReason::Denied, std::nullopt};
    if (!d->second.online) return Unreachable{};
    d->second.actuator_on = req.command_on;
    result = req.command_on ? "state=on" : "state=off";
  } else {
    return ControlDenied{hgw.id, DropReason::Denied, std::nullopt};
  }
  const auto body = std::string(to_string(req.type)) + " req=" + std::to_string(req.req_id) +
                    " target=" + req.target.value + " " + result;
  hgw.own.append(next_transaction(hgw.own, req.type, to_bytes(body), now));
  return ControlReply{req.req_id, req.target, req.type, result};
}

inline void log_control_reply(Miner& ngw, const ControlReply& r, std::int64_t now) {
  const auto body = std::string(to_string(r.type)) + " req=" + std::to_string(r.req_id) +
                    " target=" + r.target.value + " " + r.result;
  ngw.own.append(next_transaction(ngw.own, r.type, to_bytes(body), now));
}

// ---------------------------------------------------------------------------
// Alarms

enum class AlarmCause : std::uint8_t { ExcessTraffic, AuditMismatch };

constexpr std::string_view to_string(AlarmCause c) {
  return c == AlarmCause::ExcessTraffic ? "excess_traffic" : "audit_mismatch";
}

struct AlarmTx {
  std::string raised_by;
  AlarmCause cause = AlarmCause::ExcessTraffic;
  std::string subject;
  TxType about = TxType::Store;
  std::int64_t window_start_ms = 0;
  std::int64_t raised_at_ms = 0;
  std::vector<std::string> recipients;
  std::string detail;
};

/// Persists the alarm in the raising miner's own chain and names its recipients.
inline AlarmTx raise_alarm(Miner& m, AlarmCause cause, std::string subject, TxType about,
                           std::int64_t window_start_ms, std::int64_t now, std::string detail = {}) {
  AlarmTx at{m.id, cause, std::move(subject), about, window_start_ms, now, {}, std::move(detail)};
  if (cause == AlarmCause::AuditMismatch)
    at.recipients = {kControlCenter};
  else if (m.role == MinerRole::Hgw)
    at.recipients = {customer_of(m.id), kUtility};
  else
    at.recipients = {kUtility};
  const auto body = "at cause=" + std::string(to_string(cause)) + " subject=" + at.subject +
                    " about=" + std::string(to_string(about)) + " window=" + std::to_string(window_start_ms) +
                    (at.detail.empty() ? "" : " " + at.detail);
  m.own.append(next_transaction(m.own, TxType::At, to_bytes(body), now));
  return at;
}

// ---------------------------------------------------------------------------
// Broadcast audits

/// The k lexicographically smallest NGWs other than the target's own.
inline std::vector<std::string> auditors_for(std::vector<std::string> ngws, const std::string& home,
                                             std::size_t k) {
  std::sort(ngws.begin(), ngws.end());
  std::vector<std::string> out;
  for (const auto& n : ngws) {
    if (out.size() == k) break;
    if (n != home) out.push_back(n);
  }
  return out;
}

inline std::vector<std::string> audit_targets(const Grid& g, const Miner& storage, const std::string& auditor) {
  const auto ngws = g.ngw_ids();
  std::vector<std::string> out;
  for (const auto& [lid, meta] : storage.rbc) {
    if (!meta.meter || meta.channel != Channel::Hf) continue;
    auto who = auditors_for(ngws, meta.home_ngw, g.params.auditors_per_target);
    if (std::find(who.begin(), who.end(), auditor) != who.end()) out.push_back(lid);
  }
  return out;
}

struct AuditRecord {
  std::string ledger_id;
  std::uint64_t tx_number = 0;
  std::optional<Bytes> payload;  // empty when the record can no longer be read
};

struct AuditSnapshot {
  std::string auditor;
  std::int64_t served_at_ms = 0;
  std::vector<AuditRecord> records;
};

struct ReadDenied {
  DropReason reason = DropReason::Denied;
};

using AuditRead = std::variant<AuditSnapshot, ReadDenied>;

/// Storage serves the broadcast records of the listed chains to an auditor.
inline AuditRead serve_audit_read(Miner& storage, const std::string& auditor,
                                  const std::vector<std::string>& targets, std::int64_t now) {
  auto adm = admit_outbound(storage, auditor, TxType::Access, DeviceId::wildcard(), now);
  if (auto* d = std::get_if<Dropped>(&adm)) return ReadDenied{d->reason};
  AuditSnapshot snap{auditor, now, {}};
  for (const auto& lid : targets) {
    auto mit = storage.rbc.find(lid);
    auto lit = storage.ledgers.find({DeviceId{lid}, Destination::CC});
    if (mit == storage.rbc.end() || lit == storage.ledgers.end()) continue;
    for (auto n : mit->second.broadcast_txs) {
      auto hit = find_transaction(lit->second, n);
      snap.records.push_back(AuditRecord{lid, n, hit ? std::optional<Bytes>(hit->tx.payload_cipher) : std::nullopt});
    }
  }
  return snap;
}

struct AuditFinding {
  std::string ledger_id;
  std::uint64_t tx_number = 0;
  std::string why;
};

/// Compares served records against the auditor's own broadcast copies.
inline std::vector<AuditFinding> compare_broadcast_copies(const Miner& auditor, const AuditSnapshot& snap) {
  std::vector<AuditFinding> out;
  for (const auto& r : snap.records) {
    if (!r.payload) {
      out.push_back({r.ledger_id, r.tx_number, "record missing"});
      continue;
    }
    auto id = broadcast_id_of(*r.payload);
    auto it = id ? auditor.broadcast_copies.find(*id) : auditor.broadcast_copies.end();
    if (it == auditor.broadcast_copies.end())
      out.push_back({r.ledger_id, r.tx_number, "unknown broadcast"});
    else if (Sha256::digest(*r.payload) != it->second)
      out.push_back({r.ledger_id, r.tx_number, "digest differs"});
  }
  return out;
}

struct AuditOk {};
struct AuditMismatch {
  std::vector<AuditFinding> findings;
};
using AuditResult = std::variant<AuditOk, AuditMismatch, ReadDenied>;

/// One auditor, one target chain.
inline AuditResult periodic_broadcast_audit(Miner& auditor, Miner& storage, const std::string& target_ledger,
                                            std::int64_t now) {
  auto read = serve_audit_read(storage, auditor.id, {target_ledger}, now);
  if (auto* d = std::get_if<ReadDenied>(&read)) return *d;
  auto findings = compare_broadcast_copies(auditor, std::get<AuditSnapshot>(read));
  if (findings.empty()) return AuditOk{};
  return AuditMismatch{std::move(findings)};
}

// ---------------------------------------------------------------------------
// Topology construction

inline std::string ngw_name(std::uint32_t i) { return "ngw-" + std::to_string(i); }

inline std::string two_digits(std::uint32_t v) { return (v < 10 ? "0" : "") + std::to_string(v); }

inline std::string hgw_name(std::uint32_t i, std::uint32_t j) { return "hgw-" + std::to_string(i) + "-" + two_digits(j); }

inline std::string home_suffix(std::uint32_t i, std::uint32_t j) { return "-" + std::to_string(i) + "-" + two_digits(j); }

inline std::string meter_name(std::uint32_t i, std::uint32_t j, std::uint32_t k) {
  return "sm" + home_suffix(i, j) + "-" + std::to_string(k);
}
inline std::string sensor_name(std::uint32_t i, std::uint32_t j, std::uint32_t k) {
  return "temp" + home_suffix(i, j) + "-" + std::to_string(k);
}
inline std::string actuator_name(std::uint32_t i, std::uint32_t j, std::uint32_t k) {
  return "ac" + home_suffix(i, j) + "-" + std::to_string(k);
}
inline std::string rtu_name(std::uint32_t i, std::uint32_t r) { return "rtu-" + std::to_string(i) + "-" + std::to_string(r); }

enum class EntityKind : std::uint8_t { Ngw, Hgw, Meter, Sensor, Actuator, Rtu };

/// Every id build_grid will create for a topology.
inline std::map<std::string, EntityKind> entity_names(const Topology& t) {
  std::map<std::string, EntityKind> out;
  for (std::uint32_t i = 0; i < t.ngws; ++i) {
    out[ngw_name(i)] = EntityKind::Ngw;
    for (std::uint32_t j = 0; j < t.hgws_per_ngw; ++j) {
      out[hgw_name(i, j)] = EntityKind::Hgw;
      for (std::uint32_t k = 0; k < t.meters_per_hgw(); ++k) out[meter_name(i, j, k)] = EntityKind::Meter;
      for (std::uint32_t k = 0; k < t.han_pairs_per_hgw; ++k) {
        out[sensor_name(i, j, k)] = EntityKind::Sensor;
        out[actuator_name(i, j, k)] = EntityKind::Actuator;
      }
    }
    for (std::uint32_t r = 0; r < t.rtus_per_ngw; ++r) out[rtu_name(i, r)] = EntityKind::Rtu;
  }
  return out;
}

inline void install_rules(const Grid& g, Miner& m, const std::vector<PolicyRule>& rules) {
  for (const auto& r : rules) m.own.update_policy(r, Actor::Utility, g.meter_predicate());
}

/// Builds miners and devices, onboards everything at t=0 and installs
/// outbound budgets sized to the legitimate load below each miner.
inline std::unique_ptr<Grid> build_grid(const Topology& t, GridParams params) {
  auto g = std::make_unique<Grid>(std::move(params));
  const auto& p = g->params;
  g->add_miner(kCcStorage, MinerRole::CcStorage, {});
  g->add_miner(kUStorage, MinerRole::UStorage, {});

  const auto meters = t.meters_per_hgw();
  const PolicyRule otft{kControlCenter, TxType::Otft, DeviceId::wildcard(), Action::Allow, p.otft_limit.tx_limit,
                        p.otft_limit.duration};
  const auto ct = default_policy_for(App::DrmsCt, kControlCenter, DeviceId::wildcard(), p.limits);
  const std::uint32_t store_budget = meters * (hourly_budget(p.limits.ami_hf) + hourly_budget(p.limits.ami_lf)) +
                                      (p.han_cloud_storage ? t.han_pairs_per_hgw * hourly_budget(p.limits.ami_hf) : 0);
  const std::uint32_t ebt_budget = meters * hourly_budget(p.limits.oms_ebt);
  const std::uint32_t access_budget = meters * p.broadcast_records_per_meter_hour;
  const std::uint32_t alarm_budget = (t.devices_per_hgw + 1) * p.alarms_per_device_hour;

  struct Totals {
    std::uint32_t store = 0, ebt = 0, access = 0, alarms = 0;
  };
  std::map<std::string, Totals> per_ngw;

  for (std::uint32_t i = 0; i < t.ngws; ++i) {
    auto& ngw = g->add_miner(ngw_name(i), MinerRole::Ngw, {});
    std::vector<PolicyRule> rules{otft, ct};
    auto& tot = per_ngw[ngw.id];
    for (std::uint32_t j = 0; j < t.hgws_per_ngw; ++j) {
      const auto hid = hgw_name(i, j);
      auto& hgw = g->add_miner(hid, MinerRole::Hgw, ngw.id);
      std::vector<PolicyRule> hrules{otft, ct};
      for (std::uint32_t k = 0; k < t.han_pairs_per_hgw; ++k) {
        const auto sensor = sensor_name(i, j, k);
        const auto act = actuator_name(i, j, k);
        g->add_han(sensor, HanRole::Sensor, hid);
        g->add_han(act, HanRole::Actuator, hid);
        hrules.push_back(PolicyRule{act, TxType::Access, DeviceId{sensor}, Action::Allow, p.pair_limit.tx_limit,
                                    p.pair_limit.duration});
      }
      install_rules(*g, hgw, hrules);
      for (std::uint32_t k = 0; k < meters; ++k) {
        const auto sid = meter_name(i, j, k);
        g->add_meter(sid, hid);
        add_device(*g, hgw, DeviceId{sid}, DeviceKind::SmartMeter);
      }
      for (std::uint32_t k = 0; k < t.han_pairs_per_hgw; ++k) {
        const auto sensor = sensor_name(i, j, k);
        const auto act = actuator_name(i, j, k);
        add_device(*g, hgw, DeviceId{sensor}, DeviceKind::Sensor);
        add_device(*g, hgw, DeviceId{act}, DeviceKind::Actuator);
        auto key = allocate_pair_key(g->dir, hid, hgw.own.current_policy(), DeviceId{act}, DeviceId{sensor},
                                     g->keysrc);
        HanDevicePair pair{DeviceId{sensor}, DeviceId{act}, std::get<SharedKey>(key).key_id, p.actuator_threshold,
                           p.sensor_period_ms, 22.0, std::mt19937_64(device_seed(p.seed, sensor))};
        g->pairs.push_back(std::move(pair));
      }
      // A zero budget means no such traffic; leaving the rule out denies it.
      for (auto [type, budget] : {std::pair{TxType::Store, store_budget}, std::pair{TxType::Ebt, ebt_budget},
                                  std::pair{TxType::Access, access_budget}, std::pair{TxType::At, alarm_budget}})
        if (budget > 0)
          rules.push_back(PolicyRule{hid, type, DeviceId::wildcard(), Action::Allow, budget, LimitDuration::Hourly});
      tot.store += store_budget;
      tot.ebt += ebt_budget;
      tot.access += access_budget;
      tot.alarms += alarm_budget;
    }
    for (std::uint32_t r = 0; r < t.rtus_per_ngw; ++r) {
      const auto rid = rtu_name(i, r);
      g->add_rtu(rid, ngw.id);
      add_device(*g, ngw, DeviceId{rid}, DeviceKind::Rtu);
      tot.store += hourly_budget(p.rtu_limit);
    }
    install_rules(*g, ngw, rules);
  }

  for (auto* sid : {&kCcStorage, &kUStorage}) {
    std::vector<PolicyRule> rules;
    for (const auto& [nid, tot] : per_ngw) {
      rules.push_back(PolicyRule{nid, TxType::Store, DeviceId::wildcard(), Action::Allow,
                                 std::max<std::uint32_t>(tot.store, 1), LimitDuration::Hourly});
      rules.push_back(PolicyRule{nid, TxType::Ebt, DeviceId::wildcard(), Action::Allow,
                                 std::max<std::uint32_t>(tot.ebt, 1), LimitDuration::Hourly});
      // Broadcast echoes plus a few audit reads per hour.
      rules.push_back(PolicyRule{nid, TxType::Access, DeviceId::wildcard(), Action::Allow, tot.access + 4,
                                 LimitDuration::Hourly});
    }
    install_rules(*g, g->miner(*sid), rules);
  }
  return g;
}

}  // namespace dsg
